from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; dtml.edt falls back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("dtml._edt", ["src/dtml/_edt.pyx"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
