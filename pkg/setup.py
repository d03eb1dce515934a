from setuptools import Extension, setup
from Cython.Build import cythonize

# Fused hot-loop kernels. The package works without the extension (pure numpy
# fallback selected at import); building it speeds up training considerably.
extensions = [
    Extension(
        "phaselab.kernels._fused",
        ["src/phaselab/kernels/_fused.pyx"],
        extra_compile_args=["-O3", "-march=native", "-ffast-math"],
        libraries=["m"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
