"""Build script for the optional compiled kernels.

The package works without them: ``flatcomp.kernels`` falls back to the
numpy implementation when ``flatcomp._kernels`` cannot be imported.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("FLATCOMP_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "flatcomp._kernels",
                    ["src/flatcomp/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: results must match the numpy path bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
