"""Build the optional compiled stencil kernels.

The package works without them: ``gevnet.kernels`` falls back to numpy when
the extension is missing. Set ``GEVNET_NO_EXT=1`` to skip compilation.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("GEVNET_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "gevnet._stencil_ext",
                    ["src/gevnet/_stencil_ext.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
