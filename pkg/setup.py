import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

ext_modules = [
    Extension(
        "confmatch.kernels._native",
        ["src/confmatch/kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        ext_modules,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
