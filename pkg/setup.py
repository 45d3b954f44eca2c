import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "flowkv._kernels",
                ["src/flowkv/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
    # cythonize drops the optional flag; restore it so a failed compile
    # degrades to the pure-python backend instead of breaking the install.
    for ext in extensions:
        ext.optional = True

setup(ext_modules=extensions)
