"""Build script for the optional compiled kernels.

The package is fully functional without the extension; `nerp._kernels`
falls back to the pure-NumPy reference implementation when the compiled
module is absent (or when NERP_BACKEND=python is set).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import numpy as np
except ImportError:  # plain source install without build deps
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "nerp._kernels._fastpath",
                ["src/nerp/_kernels/_fastpath.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
else:
    extensions = []

setup(ext_modules=extensions)
