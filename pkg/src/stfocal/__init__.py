"""Video classification with spatio-temporal focal modulation.

Submodules are imported lazily so that the command-line front end can pin
BLAS thread counts through environment variables before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "functional", "nn", "modulation", "backbone",
               "data", "train", "analysis", "config", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
