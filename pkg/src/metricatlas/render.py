"""Static figure emission: tensor-ellipse glyphs, mask outline, curves.

Figures are written to SVG or PNG files and never displayed.  Output is
deterministic: the SVG hash salt is pinned and no timestamps are embedded.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import EllipseCollection

from .errors import MetricAtlasError
from .fields import MaskField, MetricField, unpack_sym
from .geodesics import Curve

matplotlib.rcParams["svg.hashsalt"] = "metricatlas"

#: default curve colors, cycled
CURVE_COLORS = ("black", "tab:blue", "tab:orange", "tab:green", "tab:red",
                "tab:purple", "tab:brown")


def _glyph_params(mats, scale):
    """Ellipse widths/heights/angles from 2x2 SPD matrices.

    Axis lengths are proportional to the square roots of the eigenvalues,
    normalized so the largest glyph has diameter ``scale``.
    """
    w, v = np.linalg.eigh(mats)
    w = np.sqrt(np.maximum(w, 0.0))
    wmax = w.max() if w.size else 1.0
    if wmax <= 0:
        wmax = 1.0
    w = w / wmax * scale
    angles = np.degrees(np.arctan2(v[:, 1, 1], v[:, 0, 1]))
    return w[:, 1], w[:, 0], angles  # major, minor, major-axis angle


def render_figure(
    path,
    field=None,
    mask: MaskField | None = None,
    curves=(),
    labels=(),
    stride: int = 3,
    glyph_scale: float = 0.9,
    title: str | None = None,
):
    """Compose glyphs, mask outline and curves into one figure file.

    Parameters
    ----------
    path : str
        Output file; format chosen by extension (``.svg`` or ``.png``).
    field : MetricField or TensorImage, optional
        2D symmetric-matrix field rendered as ellipse glyphs on a strided
        sub-lattice.  Metric glyphs are drawn from the inverse matrix so
        that "easy" directions appear long, matching tensor glyphs.
    mask : MaskField, optional
        Drawn as an outline; also restricts which glyphs appear.
    curves : sequence of Curve or (N, 2) arrays
    labels : sequence of str, optional legend entries for the curves
    stride : int
        Glyph sub-sampling in voxels.
    """
    ext = str(path).rsplit(".", 1)[-1].lower()
    if ext not in ("svg", "png"):
        raise MetricAtlasError(f"unsupported figure format {ext!r} (svg or png)")

    fig, ax = plt.subplots(figsize=(6, 6))
    grid = None

    if field is not None:
        grid = field.grid
        if grid.dim != 2:
            raise MetricAtlasError("rendering supports 2D grids only")
        mats = unpack_sym(field.data, 2)
        kind = getattr(field, "mtf_kind", None)
        is_metric = kind == "metric" or (kind is None and isinstance(field, MetricField))
        if is_metric:
            mats = np.linalg.inv(mats)
        sl = (slice(None, None, stride),) * 2
        sub = mats[sl].reshape(-1, 2, 2)
        xy = grid.coords()[sl].reshape(-1, 2)
        keep = np.ones(len(xy), dtype=bool)
        if mask is not None:
            keep = mask.data[sl].reshape(-1)
        cell = stride * min(grid.spacing)
        major, minor, ang = _glyph_params(sub[keep], glyph_scale * cell)
        ec = EllipseCollection(
            major, minor, ang,
            units="xy",
            offsets=xy[keep],
            offset_transform=ax.transData,
            facecolors="lightsteelblue",
            edgecolors="slategray",
            linewidths=0.4,
        )
        ax.add_collection(ec)

    if mask is not None:
        grid = grid or mask.grid
        x = mask.grid.axis_coords(0)
        y = mask.grid.axis_coords(1)
        ax.contour(
            x, y, mask.data.astype(float).T,
            levels=[0.5], colors="dimgray", linewidths=1.0,
        )

    for i, c in enumerate(curves):
        pts = c.points if isinstance(c, Curve) else np.asarray(c, dtype=float)
        label = labels[i] if i < len(labels) else None
        ax.plot(
            pts[:, 0], pts[:, 1],
            color=CURVE_COLORS[i % len(CURVE_COLORS)],
            linewidth=1.6, label=label,
        )

    if grid is not None:
        lo, hi = grid.bounds
        ax.set_xlim(lo[0], hi[0])
        ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    if labels:
        ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    metadata = {"Date": None} if ext == "svg" else None
    fig.savefig(path, metadata=metadata, dpi=150)
    plt.close(fig)
