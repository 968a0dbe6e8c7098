"""Build the compiled kernel twin (swarmpush._kernels).

The package works without the extension: swarmpush.backend falls back to
the pure-NumPy kernels if the compiled module is missing.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

kernels = Extension(
    "swarmpush._kernels",
    ["src/swarmpush/_kernels.pyx"],
    include_dirs=[numpy.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=["-O3"],
)

setup(
    ext_modules=cythonize(
        [kernels],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
