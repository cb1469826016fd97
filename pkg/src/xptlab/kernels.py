"""Pick the compiled kernel backend when it is importable, else the numpy twin.

Set ``XPTLAB_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("XPTLAB_PURE_PYTHON"):
    impl = _kernels_py
else:
    try:
        from . import _kernels as impl
    except ImportError:  # extension not built
        impl = _kernels_py

BACKEND = "compiled" if impl is not _kernels_py else "python"


gelu_fwd = impl.gelu_fwd
gelu_bwd = impl.gelu_bwd
layer_norm_fwd = impl.layer_norm_fwd
layer_norm_bwd = impl.layer_norm_bwd
softmax_rows = impl.softmax_rows
softmax_rows_bwd = impl.softmax_rows_bwd
perplexity_search = impl.perplexity_search
tsne_gradient = impl.tsne_gradient
logistic_gd = impl.logistic_gd
adam_update = impl.adam_update
