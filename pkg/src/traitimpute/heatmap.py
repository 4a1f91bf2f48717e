"""Standalone SVG rendering of a per-cell error grid."""

from __future__ import annotations

import numpy as np

MISSING_COLOR = "#4060C0"


def error_color(error: float, saturation: float = 0.5) -> str:
    """White at 0, pure red at ``error >= saturation``, linear in between."""
    t = min(max(error / saturation, 0.0), 1.0)
    level = int(round(255 * (1.0 - t)))
    return f"#FF{level:02X}{level:02X}"


def render_heatmap_svg(errors, tested, dims: tuple[int, int] | None = None, saturation: float = 0.5,
                       cell: int = 4) -> str:
    """One ``<rect>`` per cell; untested cells are blue, tested cells follow the red ramp.

    Args:
        errors: ``(n_rows, n_cols)`` absolute errors; ignored where ``tested`` is False.
        tested: boolean array of the same shape.
        dims: expected ``(n_rows, n_cols)``; checked against both arrays when given.
        saturation: error at which the ramp reaches full red.
        cell: side length of one cell in pixels.
    """
    errors = np.asarray(errors, dtype=np.float64)
    tested = np.asarray(tested, dtype=bool)
    if errors.ndim != 2 or errors.shape != tested.shape:
        raise ValueError(f"errors {errors.shape} and mask {tested.shape} must be equal 2-D shapes")
    if dims is not None and tuple(dims) != errors.shape:
        raise ValueError(f"dims {tuple(dims)} do not match arrays of shape {errors.shape}")
    if saturation <= 0:
        raise ValueError("saturation must be positive")
    n_rows, n_cols = errors.shape
    width, height = n_cols * cell, n_rows * cell
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" shape-rendering="crispEdges">',
    ]
    for u in range(n_rows):
        for i in range(n_cols):
            fill = error_color(errors[u, i], saturation) if tested[u, i] else MISSING_COLOR
            parts.append(f'<rect x="{i * cell}" y="{u * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
