"""Build script: compiles the hot-loop kernels to a C extension when possible.

The package works without the extension (a pure-Python fallback is selected
at import time), but the compiled kernels are strongly recommended: the
fixed-step integration oracle runs millions of scalar steps.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "dhnopt._kernels._core",
                ["src/dhnopt/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
