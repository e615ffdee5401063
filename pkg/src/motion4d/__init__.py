"""Respiratory motion modelling from unsorted 4DCT segment data.

Submodules are imported lazily so the command line front end can cap
BLAS threading before numpy is first loaded.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "bspline",
    "cli",
    "errors",
    "hypergrad",
    "mcir",
    "metrics",
    "phantom",
    "pipeline",
    "surrmodel",
    "volgrid",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module("." + name, __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
