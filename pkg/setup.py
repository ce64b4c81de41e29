import os

import numpy
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CRITIQ_SKIP_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "critiq.kernels._native",
                ["src/critiq/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                # no -ffast-math: reassociated reductions would make losses
                # depend on buffer alignment and break run determinism
                extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
