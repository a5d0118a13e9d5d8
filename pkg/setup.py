"""Build the optional Cython lattice kernels.

The package works without the extension; ``subwordlm._kernels`` falls back
to the pure-Python implementation when ``_lattice_ext`` cannot be imported.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without Cython
    cythonize = None

ext_modules = []
if cythonize is not None:
    import numpy as np

    ext_modules = cythonize(
        [
            Extension(
                "subwordlm._lattice_ext",
                ["src/subwordlm/_lattice_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
