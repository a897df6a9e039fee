"""Hot-kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``FTROBUST_PURE_PYTHON=1`` before import to force the numpy path.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("FTROBUST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

impl = compiled if compiled is not None else python
BACKEND = "compiled" if compiled is not None else "python"

gelu_fwd = impl.gelu_fwd
layer_norm_fwd = impl.layer_norm_fwd
layer_norm_bwd = impl.layer_norm_bwd
gaussian_linear_mc = impl.gaussian_linear_mc
pareto_mask = impl.pareto_mask
frontier_auc = impl.frontier_auc
