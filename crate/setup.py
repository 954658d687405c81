"""Builds the PyO3 extension with cargo; no extra build-time dependencies.

The compiled cdylib (crates/avgzsl-py, lib name `_native`) is copied to
wherever setuptools expects the extension artifact.
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.extension import Extension


class CargoExtension(Extension):
    def __init__(self, name, crate):
        super().__init__(name, sources=[])
        self.crate = crate


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        root = Path(__file__).resolve().parent
        subprocess.run(
            ["cargo", "build", "--release", "-p", ext.crate],
            cwd=root,
            check=True,
        )
        release = root / "target" / "release"
        for candidate in ("lib_native.so", "lib_native.dylib", "_native.dll"):
            built = release / candidate
            if built.exists():
                break
        else:
            raise FileNotFoundError(f"no built extension under {release}")
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, dest)


setup(
    ext_modules=[CargoExtension("avgzsl_py._native", crate="avgzsl-py")],
    cmdclass={"build_ext": CargoBuildExt},
)
