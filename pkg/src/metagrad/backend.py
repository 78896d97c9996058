"""Backend selection for the graph evaluator.

Two interchangeable cores exist: ``_graph_fast`` (Cython, compiled at
install time) and ``_graph_py`` (pure numpy). The compiled one is used
when available. Set METAGRAD_BACKEND=python to force the fallback, or
METAGRAD_BACKEND=fast to fail loudly if the extension is missing.

Re-evaluating the same graph twice yields bit-identical values within a
backend. Across backends, results agree to floating-point rounding but
are not guaranteed bit-equal (numpy's vectorized transcendentals may
differ from libm by an ulp).
"""

import os

from . import _graph_py

_requested = os.environ.get("METAGRAD_BACKEND", "auto").lower()

if _requested == "python":
    _core_mod = _graph_py
    _name = "python"
elif _requested == "fast":
    from . import _graph_fast as _core_mod  # raises if not built

    _name = "fast"
elif _requested == "auto":
    try:
        from . import _graph_fast as _core_mod

        _name = "fast"
    except ImportError:
        _core_mod = _graph_py
        _name = "python"
else:
    raise RuntimeError(
        f"METAGRAD_BACKEND must be auto, fast or python, got {_requested!r}"
    )

GraphCore = _core_mod.GraphCore


def backend_name():
    """Name of the active evaluation backend ('fast' or 'python')."""
    return _name


def make_core(force=None):
    """Create a graph core, optionally forcing a specific backend by name."""
    if force is None:
        return GraphCore()
    if force == "python":
        return _graph_py.GraphCore()
    if force == "fast":
        from . import _graph_fast

        return _graph_fast.GraphCore()
    raise ValueError(f"unknown backend {force!r}")
