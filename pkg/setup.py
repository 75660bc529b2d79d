import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # build without the compiled kernels
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("SIMA_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "sima._kernels",
                ["src/sima/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                libraries=["mvec", "m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
