"""Build script: compiles the optional Cython kernel extension.

The extension is a pure speed-up; if the build fails for any reason the
package installs anyway and falls back to the numpy kernels at import time.
"""

import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"Cython kernel build failed ({exc}); "
                          "falling back to pure-numpy kernels.")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"Cython kernel build failed ({exc}); "
                          "falling back to pure-numpy kernels.")


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "stackelmac._kernels._cyker",
        sources=["src/stackelmac/_kernels/_cyker.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=_extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
