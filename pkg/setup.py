"""Build script for the optional compiled stream kernel.

The package is fully functional without the extension: ``eqloss.sampler``
falls back to a pure-Python kernel that performs the identical operation
sequence. The build therefore never hard-fails; any compilation problem
just means the fallback backend gets used.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "eqloss._stream_kernel",
                sources=["src/eqloss/_stream_kernel.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - toolchain-dependent
    print(f"eqloss: skipping compiled kernel ({exc}); pure-Python backend will be used")

setup(ext_modules=ext_modules)
