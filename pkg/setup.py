import os

from setuptools import setup

ext_modules = []
if os.environ.get("MORTGAP_NO_EXTENSION") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mortgap._kernels",
                    ["src/mortgap/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # the pure-Python kernels are used instead
        ext_modules = []

setup(ext_modules=ext_modules)
