import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: the package falls back to the pure-numpy
# implementation when the extension is absent. FEDCLUSTER_NO_EXT=1 skips the
# build entirely (useful on machines without a C toolchain).
ext_modules = []
if not os.environ.get("FEDCLUSTER_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedcluster._kernels._cy",
                ["src/fedcluster/_kernels/_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
