import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ZIMCLUST_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("zimclust._ckernels", ["src/zimclust/_ckernels.pyx"])],
            compiler_directives={"language_level": "3"},
        )
        for ext in ext_modules:
            ext.include_dirs.append(np.get_include())
            ext.define_macros.append(("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION"))

setup(ext_modules=ext_modules)
