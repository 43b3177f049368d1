"""Builds the optional compiled extension for the hot kernel loops.

The package works without it: ``tangent_kernels._accel`` falls back to pure
numpy implementations when the extension is missing (or when the
TANGENT_KERNELS_BACKEND=python environment variable is set).
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/tangent_kernels/_accel/_core.pyx",
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    include_dirs = [numpy.get_include()]
    for ext in ext_modules:
        ext.include_dirs = include_dirs
        ext.extra_compile_args = ["-O3"]
except ImportError:
    pass

setup(ext_modules=ext_modules)
