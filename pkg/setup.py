"""Build script for the compiled kernels of the fes package.

The pure-Python fallback in ``fes._kernels._fallback`` is used when the
extension is missing, so a failed compile still leaves a working install.
"""

import os

import numpy
from setuptools import setup
from setuptools.extension import Extension


def _extensions():
    if os.environ.get("FES_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "fes._kernels._core",
        ["src/fes/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
    )
    return cythonize(
        [ext],
        compiler_directives=dict(
            language_level="3",
            boundscheck=False,
            wraparound=False,
            cdivision=True,
            initializedcheck=False,
        ),
    )


setup(ext_modules=_extensions())
