import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PERSFL_NO_EXT") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("persfl.nn._kernels", ["src/persfl/nn/_kernels.pyx"],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
