import os

from setuptools import Extension, setup

# DYNLORA_NO_EXT=1 skips the compiled core; the package then runs on its numpy fallback.
if os.environ.get("DYNLORA_NO_EXT"):
    ext_modules = []
else:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dynlora._kernels",
                ["src/dynlora/_kernels.pyx"],
                include_dirs=["src/dynlora", np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no FMA contraction: keeps rounding identical to the fallback
                extra_compile_args=["-O3", "-march=native", "-ffp-contract=off", "-fno-fast-math"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
