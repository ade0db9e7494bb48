import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "microgrid_decomp.kernels._bellman",
        ["src/microgrid_decomp/kernels/_bellman.pyx"],
        include_dirs=[np.get_include()],
        # no fp contraction: compiled and NumPy kernels must agree bitwise
        extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off"],
        extra_link_args=["-fopenmp"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
