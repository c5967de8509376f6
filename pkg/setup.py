import os
import platform

import numpy as np
from setuptools import Extension, setup

ext_modules = []
# RBE_PORTABLE=1 builds for generic x86-64 (+popcnt) instead of the build host
compile_args = ["-O3"]
if os.environ.get("RBE_PORTABLE"):
    if platform.machine() in ("x86_64", "AMD64"):
        compile_args.append("-mpopcnt")
else:
    compile_args.append("-march=native")

if not os.environ.get("RBE_NO_EXTENSION"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "rbe._kernels",
                    ["src/rbe/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=compile_args,
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
