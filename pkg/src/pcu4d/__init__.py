"""Framework-free 4D point-cloud upsampling.

A graph-convolutional generator (attentional edge convolutions followed by
a parallel double-sampling head) trained adversarially against a
set-abstraction critic, with Chamfer, density and least-squares adversarial
losses. Everything runs on numpy with an in-package reverse-mode tape.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "checkpoint",
    "cli",
    "data",
    "discriminator",
    "geometry",
    "layers",
    "losses",
    "training",
    "upsampler",
)


def __getattr__(name):
    # lazy submodule loading keeps `import pcu4d` cheap and lets the CLI
    # configure thread caps before numpy-heavy modules come in
    if name in _SUBMODULES:
        return importlib.import_module(f"pcu4d.{name}")
    raise AttributeError(f"module 'pcu4d' has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
