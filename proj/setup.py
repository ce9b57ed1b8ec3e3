"""Builds the _core extension through CMake, reusing ./build when configured."""

import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.extension import Extension

ROOT = Path(__file__).resolve().parent


class CMakeExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext):
        build_dir = ROOT / "build"
        if not (build_dir / "CMakeCache.txt").exists():
            subprocess.run(
                ["cmake", "-S", str(ROOT), "-B", str(build_dir), "-DIOR_BUILD_PYTHON=ON"],
                check=True,
            )
        subprocess.run(
            ["cmake", "--build", str(build_dir), "--target", "_core"], check=True
        )

        built = list((build_dir / "python" / "ior").glob("_core*.so"))
        if not built:
            raise RuntimeError("cmake did not produce the _core extension")
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built[0], dest)


setup(
    ext_modules=[CMakeExtension("ior._core")],
    cmdclass={"build_ext": CMakeBuild},
)
