"""Build the optional compiled matmul core.

If Cython or a C compiler is unavailable the package still installs and
``caml.numerics`` falls back to the pure-numpy kernels.
"""
import numpy as np
from setuptools import setup

try:
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "caml.numerics._kernels",
                ["src/caml/numerics/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: keeps results bit-identical to the numpy fallback
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
