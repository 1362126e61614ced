from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "metroflow.backend._core",
        ["src/metroflow/backend/_core.pyx"],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
