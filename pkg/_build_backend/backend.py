"""In-tree PEP 517 backend: setuptools, but without executing setup.py.

setup.py in this project is a first-run environment checker (see DESIGN.md),
not a setuptools build script, so the build reads metadata from pyproject.toml only.
"""
from setuptools import build_meta as _orig
from setuptools.build_meta import *  # noqa: F401,F403


class _Backend(_orig._BuildMetaBackend):
    def run_setup(self, setup_script="setup.py"):
        __file__ = setup_script  # noqa: F841
        exec(compile("from setuptools import setup; setup()", setup_script, "exec"), {"__name__": "__main__"})


_backend = _Backend()
get_requires_for_build_wheel = _backend.get_requires_for_build_wheel
get_requires_for_build_sdist = _backend.get_requires_for_build_sdist
prepare_metadata_for_build_wheel = _backend.prepare_metadata_for_build_wheel
build_wheel = _backend.build_wheel
build_sdist = _backend.build_sdist
get_requires_for_build_editable = _backend.get_requires_for_build_editable
prepare_metadata_for_build_editable = _backend.prepare_metadata_for_build_editable
build_editable = _backend.build_editable
