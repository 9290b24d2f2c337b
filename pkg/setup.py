from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

# No -ffast-math: the kernels must stay IEEE-exact so that runs are
# reproducible and the pure-python backend stays comparable.
extensions = [
    Extension(
        "atso._kernels._core",
        ["src/atso/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
