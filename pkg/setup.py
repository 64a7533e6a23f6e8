"""Builds the optional compiled kernel extension.

The package works without it: vlpt.kernels falls back to the pure-numpy
reference implementation when the extension is missing.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "vlpt.kernels._fast",
                ["src/vlpt/kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
