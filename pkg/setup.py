"""Build script; compiles the optional propagation kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any failure here degrades to a pure-Python build
instead of aborting the install.
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "scivr._kernels",
                ["src/scivr/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # noqa: BLE001
    sys.stderr.write("kernel extension skipped (%s); using numpy fallback\n" % exc)
    ext_modules = []

setup(ext_modules=ext_modules)
