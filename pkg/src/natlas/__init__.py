"""Subject-specific spatiotemporal atlases from 4D image time-series.

Compact neural fields (multi-resolution hash encodings with small MLPs)
model a shared atlas and per-frame diffeomorphic deformations, trained
by stochastic gradient descent on coordinate batches.  Submodules are
imported lazily so the command line can pin thread counts before numpy
loads.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "atlas", "clahe", "cli", "config", "deformation", "encoding", "errors",
    "evaluate", "fields", "losses", "mlp", "synth", "trainer", "volume",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
