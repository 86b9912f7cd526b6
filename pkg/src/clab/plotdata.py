"""Plot-ready data files: whitespace-delimited columns with ``#`` header comments."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .cache import atomic_write_text


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12e}"


def emit_plot_data(path, columns: dict, comments: list[str] | tuple = ()) -> Path:
    """Write ``columns`` (name -> sequence, equal lengths) to ``path``.

    An empty report still produces the header, so downstream scripts can
    rely on the file existing.
    """
    names = list(columns)
    lengths = {len(v) for v in columns.values()}
    if len(lengths) > 1:
        raise ValueError(f"columns differ in length: {sorted(lengths)}")
    lines = [f"# {c}" for c in comments]
    lines.append("# " + " ".join(names))
    n = lengths.pop() if lengths else 0
    for i in range(n):
        lines.append(" ".join(_fmt(columns[k][i]) for k in names))
    path = Path(path)
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def error_map(path, coords: list[np.ndarray], values: np.ndarray, mask: np.ndarray | None = None, comments=()) -> Path:
    """Lexicographic ``(x, y[, z], value)`` dump of a grid field, optionally masked."""
    vals = np.real(np.asarray(values))
    sel = np.ones(vals.shape, bool) if mask is None else mask
    names = ["x", "y", "z"][: len(coords)]
    cols = {nm: c[sel] for nm, c in zip(names, coords)}
    cols["value"] = vals[sel]
    return emit_plot_data(path, cols, comments)
