"""Kernel backend selection.

Two interchangeable backends implement the hot loops (local optimizer steps
and dataset gradient evaluation): a compiled Cython extension and a pure
numpy fallback. The extension is preferred when importable; setting
FEDCLUSTER_PURE_PY=1 forces the fallback. Guarantees:

  - results are bit-reproducible within a backend;
  - the two backends agree to tight floating-point tolerance (not bit-for-bit,
    since summation orders differ).

The active backend's name is exposed as `backend_name` and echoed into run
configs so a log can always be traced to the backend that produced it.
"""

import os

from . import _py

TASK_QUAD = _py.TASK_QUAD
TASK_SOFTMAX = _py.TASK_SOFTMAX
TASK_MLP = _py.TASK_MLP

OPT_SGD = _py.OPT_SGD
OPT_SGDM = _py.OPT_SGDM
OPT_ADAM = _py.OPT_ADAM
OPT_FEDPROX = _py.OPT_FEDPROX

_impl = _py
backend_name = "python"
if not os.environ.get("FEDCLUSTER_PURE_PY"):
    try:
        from . import _cy as _impl_cy
    except ImportError:
        pass
    else:
        _impl = _impl_cy
        backend_name = "cython"

HAVE_EXT = backend_name == "cython"

local_sgd = _impl.local_sgd
dataset_loss_grad = _impl.dataset_loss_grad


def get_backends():
    """All importable backends as (name, module) pairs, python first.

    Ignores FEDCLUSTER_PURE_PY so benchmarks and equivalence tests can compare
    both even when the fallback is forced for the package itself.
    """
    pairs = [("python", _py)]
    try:
        from . import _cy
    except ImportError:
        pass
    else:
        pairs.append(("cython", _cy))
    return pairs
