"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); set POINTGEN3D_SKIP_NATIVE=1 to skip compilation entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("POINTGEN3D_SKIP_NATIVE"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            "src/pointgen3d/kernels/_native.pyx",
            language_level="3",
        )
        for ext in ext_modules:
            ext.include_dirs.append(np.get_include())
    except ImportError:
        pass

setup(ext_modules=ext_modules)
