import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the NumPy kernels are used instead
    cythonize = None

extensions = []
if cythonize is not None and not os.environ.get("PEERFL_NO_EXT"):
    extensions = cythonize(
        [
            Extension(
                "peerfl._lstm_ext",
                ["src/peerfl/_lstm_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
