import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FILTERPRUNE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        # pure-Python fallback is used at import time
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "filterprune._ckernels",
                    ["src/filterprune/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
