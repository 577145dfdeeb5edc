import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extra_compile_args = ["-O3", "-fno-math-errno", "-fno-trapping-math", "-fassociative-math",
                      "-fno-signed-zeros", "-fopenmp"]
if os.environ.get("ZSSMNET_NATIVE", "1") == "1":
    extra_compile_args.append("-march=native")

extensions = [
    Extension(
        "zssmnet.nn._kernels",
        ["src/zssmnet/nn/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=extra_compile_args,
        extra_link_args=["-fopenmp"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
