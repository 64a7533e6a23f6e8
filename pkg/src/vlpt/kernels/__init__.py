"""Hot numeric kernels with two interchangeable backends.

The compiled Cython extension (`vlpt.kernels._fast`) is used when it built
successfully; otherwise the pure-numpy reference takes over. Override with
the environment variable VLPT_KERNELS=compiled|python, or at runtime via
`set_backend`. `benchmarks/bench_kernels.py` compares the two.
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import _fast  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _fast = None
    HAVE_COMPILED = False

_KERNEL_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "layernorm_rows",
    "layernorm_rows_backward",
    "gelu",
    "gelu_backward",
    "adam_update",
)

_active = None
_backend_name = ""


def set_backend(name: str) -> None:
    """Select the kernel backend: 'compiled', 'python', or 'auto'."""
    global _active, _backend_name
    if name == "auto":
        name = "compiled" if HAVE_COMPILED else "python"
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernels requested but the extension is not built")
        _active = _fast
    elif name == "python":
        _active = reference
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    _backend_name = name
    g = globals()
    for fn in _KERNEL_NAMES:
        g[fn] = getattr(_active, fn)


def backend_name() -> str:
    return _backend_name


set_backend(os.environ.get("VLPT_KERNELS", "auto"))
