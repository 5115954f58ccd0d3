"""Build script for the optional compiled kernel core.

The package is fully functional without the extension: dfu._kernels
falls back to the NumPy implementation when the compiled module is
missing (or when DFU_PURE_PYTHON=1 is set).
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "dfu._kernels._core",
                ["src/dfu/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3", "embedsignature": True},
    )
except ImportError:
    # No Cython/NumPy at build time: ship pure-Python, kernels fall back.
    ext_modules = []

setup(ext_modules=ext_modules)
