import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: CGSR_SKIP_EXT=1 installs the pure-numpy
# fallback only (cgsr.kernels selects the backend at import time).
ext_modules = []
if not os.environ.get("CGSR_SKIP_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "cgsr._ckern",
                    ["src/cgsr/_ckern.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
