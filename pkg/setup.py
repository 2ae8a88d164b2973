"""
setup.py - First-run environment checker.
Run this before cli.py if you want to verify your setup.
"""
import os
import sys

# Force UTF-8 output on Windows
if sys.stdout.encoding and sys.stdout.encoding.lower() != 'utf-8':
    import io
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')


def check_packages() -> bool:
    ok = True
    required = [
        ("numpy",  "numpy"),
        ("scipy",  "scipy"),
        ("ot",     "POT"),
        ("pandas", "pandas"),
        ("dotenv", "python-dotenv"),
        ("pytest", "pytest"),
    ]
    print("\n[*] Checking packages...")
    for imp, pkg in required:
        try:
            __import__(imp)
            print(f"  [OK] {pkg}")
        except ImportError:
            print(f"  [FAIL] {pkg} not installed -- run: pip install {pkg}")
            ok = False
    return ok


def check_env() -> bool:
    ok = True
    print("\n[*] Checking environment...")
    for key, cast in (("STEIN_LAB_SEED", int), ("STEIN_LAB_WORKERS", int), ("STEIN_LAB_BLOCK", int)):
        value = os.getenv(key)
        if value is None:
            print(f"  [OK] {key} not set - default used")
            continue
        try:
            cast(value)
            print(f"  [OK] {key} = {value}")
        except ValueError:
            print(f"  [FAIL] {key} = {value!r} is not an integer")
            ok = False
    return ok


def check_output_dir() -> bool:
    out = os.getenv("STEIN_LAB_OUT", "runs")
    print("\n[*] Checking output directory...")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        print(f"  [FAIL] cannot create {out}: {exc}")
        return False
    if not os.access(out, os.W_OK):
        print(f"  [FAIL] {out} is not writable")
        return False
    print(f"  [OK] {out}")
    return True


def main() -> None:
    from dotenv import load_dotenv
    load_dotenv()

    print("=" * 50)
    print("  Stein Lab -- Setup Checker")
    print("=" * 50)

    all_ok = True
    all_ok &= check_packages()
    all_ok &= check_env()
    all_ok &= check_output_dir()

    print("\n" + "=" * 50)
    if all_ok:
        print("[SUCCESS] All checks passed! Run: python cli.py lemma-suite")
    else:
        print("[WARNING] Fix the issues above, then run: python cli.py lemma-suite")
    print("=" * 50)


if __name__ == "__main__":
    main()
