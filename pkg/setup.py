"""Builds the optional compiled kernel extension.

The package works without it: trigsense.kernels falls back to the pure
numpy implementation when the extension is absent or fails to build.
"""

import warnings

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Best-effort build: a missing compiler must not block installation."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            warnings.warn(
                f"compiled kernels skipped ({exc!r}); "
                "falling back to the pure-python implementation"
            )

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - depends on toolchain
            warnings.warn(
                f"compiled kernels skipped ({exc!r}); "
                "falling back to the pure-python implementation"
            )


def extensions():
    from Cython.Build import cythonize

    ext = Extension(
        "trigsense.kernels._core",
        ["src/trigsense/kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level="3")


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
