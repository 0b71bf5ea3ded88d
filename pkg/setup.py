"""Build the optional compiled transfer kernels.

If Cython or a C compiler is unavailable the package installs without the
extension and falls back to the numpy kernels at import.
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    if sys.platform.startswith("win"):
        cargs, largs = ["/O2", "/openmp"], []
    else:
        cargs, largs = ["-O3", "-fopenmp"], ["-fopenmp"]
    ext_modules = cythonize(
        [
            Extension(
                "chainwork._core",
                ["src/chainwork/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=cargs,
                extra_link_args=largs,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:  # pragma: no cover
    pass

setup(ext_modules=ext_modules)
