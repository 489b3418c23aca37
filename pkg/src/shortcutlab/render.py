"""Dependency-free SVG/HTML figures: patching heatmaps, token colouring,
score histograms and ROC curves."""

from __future__ import annotations

import html
import logging
import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

NEG_RGB = (49, 54, 149)
MID_RGB = (247, 247, 247)
POS_RGB = (165, 0, 38)


def diverging_color(value: float, vmax: float) -> str:
    """Blue (negative) through near-white (0) to red (positive); saturates at ``|value| = vmax``."""
    if vmax <= 0 or not math.isfinite(value):
        t = 0.0
    else:
        t = max(-1.0, min(1.0, value / vmax))
    end = POS_RGB if t > 0 else NEG_RGB
    a = abs(t)
    rgb = [round(m + (e - m) * a) for m, e in zip(MID_RGB, end)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _esc(text) -> str:
    return html.escape(str(text), quote=True)


def _svg(width: float, height: float, body: list[str], metadata: Mapping | None = None) -> str:
    meta = ""
    if metadata:
        items = "".join(f'<entry key="{_esc(k)}">{_esc(v)}</entry>' for k, v in metadata.items())
        meta = f"<metadata>{items}</metadata>"
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
        f'viewBox="0 0 {width:g} {height:g}" font-family="sans-serif" font-size="11">'
        + meta
        + "".join(body)
        + "</svg>\n"
    )


def is_well_formed(svg_text: str) -> bool:
    """True when the text parses as XML with a single ``svg`` root."""
    try:
        root = ET.fromstring(svg_text)
    except ET.ParseError:
        return False
    return root.tag.endswith("svg")


def heatmap_svg(
    grid: np.ndarray,
    row_labels: Sequence[str],
    col_labels: Sequence[str],
    title: str = "",
    metadata: Mapping | None = None,
    cell: int = 36,
) -> str:
    """Rows x columns grid coloured on a diverging scale centred at zero.

    NaN cells are drawn hatched-grey (not applicable). An all-NaN or empty grid
    still yields a valid SVG, with a logged warning.
    """
    grid = np.asarray(grid, dtype=float)
    finite = grid[np.isfinite(grid)]
    if finite.size == 0:
        log.warning("heatmap has no finite values; drawing an empty grid")
    vmax = float(np.abs(finite).max()) if finite.size else 0.0
    left, top = 60, 30 if title else 12
    n_rows, n_cols = grid.shape if grid.ndim == 2 else (0, 0)
    width = left + n_cols * cell + 90
    height = top + n_rows * cell + 30
    body = []
    if title:
        body.append(f'<text x="{left}" y="18" font-size="13">{_esc(title)}</text>')
    for r in range(n_rows):
        y = top + r * cell
        body.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:g}" text-anchor="end">{_esc(row_labels[r])}</text>')
        for c in range(n_cols):
            x = left + c * cell
            v = grid[r, c]
            fill = diverging_color(v, vmax) if math.isfinite(v) else "#cccccc"
            tip = "n/a" if not math.isfinite(v) else f"{v:.4g}"
            body.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ffffff">'
                f"<title>{_esc(row_labels[r])} {_esc(col_labels[c])}: {tip}</title></rect>"
            )
    for c in range(n_cols):
        x = left + c * cell + cell / 2
        body.append(f'<text x="{x:g}" y="{top + n_rows * cell + 16}" text-anchor="middle">{_esc(col_labels[c])}</text>')
    # colour bar
    bx = left + n_cols * cell + 20
    for i in range(10):
        v = vmax * (1 - 2 * i / 9) if vmax else 0.0
        body.append(
            f'<rect x="{bx}" y="{top + i * 12}" width="14" height="12" fill="{diverging_color(v, vmax)}"/>'
        )
    body.append(f'<text x="{bx + 18}" y="{top + 10}">{vmax:.3g}</text>')
    body.append(f'<text x="{bx + 18}" y="{top + 118}">{-vmax:.3g}</text>')
    return _svg(width, height, body, metadata)


def patch_heatmap_svg(rows: Sequence[Mapping], n_layers: int, n_heads: int, title: str = "", metadata=None) -> str:
    """Heatmap of patch CSV rows: layers down, heads then MLP across."""
    grid = np.full((n_layers, n_heads + 1), np.nan)
    for row in rows:
        col = n_heads if row["component"] == "mlp" else int(row["component"])
        grid[int(row["layer"]), col] = row["mean_delta_ld"]
    cols = [f"h{h}" for h in range(n_heads)] + ["mlp"]
    return heatmap_svg(grid, [f"L{l}" for l in range(n_layers)], cols, title, metadata)


def token_html(tokens: Sequence[str], scores: Sequence[float], title: str = "") -> str:
    """Tokens as coloured spans; colour scale per review, top token in bold."""
    s = np.asarray(scores, dtype=float)
    vmax = float(np.abs(s).max()) if s.size else 0.0
    top = int(np.argmax(np.abs(s))) if s.size else -1
    spans = []
    for i, (tok, v) in enumerate(zip(tokens, s)):
        style = f"background:{diverging_color(v, vmax)};padding:1px 2px"
        if i == top:
            style += ";font-weight:bold;outline:1px solid #000"
        spans.append(f'<span style="{style}" title="{v:.4g}">{_esc(tok)}</span>')
    head = f"<h4>{_esc(title)}</h4>" if title else ""
    return f"<div>{head}<p>{' '.join(spans)}</p></div>\n"


def token_svg(tokens: Sequence[str], scores: Sequence[float], metadata=None, per_line: int = 14) -> str:
    """SVG counterpart of :func:`token_html`; the max-|score| token is annotated."""
    s = np.asarray(scores, dtype=float)
    vmax = float(np.abs(s).max()) if s.size else 0.0
    top = int(np.argmax(np.abs(s))) if s.size else -1
    body, x, y = [], 8, 20
    for i, (tok, v) in enumerate(zip(tokens, s)):
        w = 8 + 7 * len(tok)
        if i and i % per_line == 0:
            x, y = 8, y + 26
        body.append(f'<rect x="{x}" y="{y - 13}" width="{w}" height="18" fill="{diverging_color(v, vmax)}"/>')
        weight = ' font-weight="bold"' if i == top else ""
        body.append(f'<text x="{x + 4}" y="{y}"{weight}>{_esc(tok)}</text>')
        if i == top:
            body.append(f'<text x="{x}" y="{y + 16}" font-size="9">max {v:.3g}</text>')
        x += w + 3
    width = max(200, 8 + per_line * 70)
    return _svg(width, y + 24, body, metadata)


def histogram_svg(groups: Mapping[str, Sequence[float]], bins: int = 30, title: str = "", metadata=None) -> str:
    """Overlaid step histograms (density) for each named score group."""
    colors = ["#a50026", "#313695", "#1a9850", "#762a83"]
    data = {k: np.asarray(v, dtype=float) for k, v in groups.items()}
    allv = np.concatenate([v for v in data.values() if v.size]) if data else np.zeros(0)
    W, H, pad = 420, 260, 40
    body = []
    if title:
        body.append(f'<text x="{pad}" y="16" font-size="13">{_esc(title)}</text>')
    if allv.size == 0:
        log.warning("histogram has no data")
        return _svg(W, H, body, metadata)
    lo, hi = float(allv.min()), float(allv.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    dens = {k: np.histogram(v, bins=edges, density=True)[0] if v.size else np.zeros(bins) for k, v in data.items()}
    ymax = max(float(d.max()) for d in dens.values()) or 1.0
    sx = (W - 2 * pad) / (hi - lo)
    sy = (H - 2 * pad) / ymax
    body.append(f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="#000"/>')
    for j, (name, d) in enumerate(dens.items()):
        pts = []
        for i in range(bins):
            x0 = pad + (edges[i] - lo) * sx
            x1 = pad + (edges[i + 1] - lo) * sx
            yv = H - pad - d[i] * sy
            pts += [f"{x0:.2f},{yv:.2f}", f"{x1:.2f},{yv:.2f}"]
        color = colors[j % len(colors)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        body.append(f'<text x="{W - pad - 110}" y="{pad + 14 * j}" fill="{color}">{_esc(name)}</text>')
    body.append(f'<text x="{pad}" y="{H - pad + 16}">{lo:.3g}</text>')
    body.append(f'<text x="{W - pad}" y="{H - pad + 16}" text-anchor="end">{hi:.3g}</text>')
    return _svg(W, H, body, metadata)


def roc_svg(curves: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "", metadata=None) -> str:
    """ROC curves ``name -> (fpr, tpr)`` on the unit square with the chance diagonal."""
    colors = ["#a50026", "#313695", "#1a9850", "#762a83", "#e08214", "#4d4d4d"]
    S, pad = 240, 40
    body = []
    if title:
        body.append(f'<text x="{pad}" y="16" font-size="13">{_esc(title)}</text>')
    body.append(f'<rect x="{pad}" y="{pad}" width="{S}" height="{S}" fill="none" stroke="#000"/>')
    body.append(f'<line x1="{pad}" y1="{pad + S}" x2="{pad + S}" y2="{pad}" stroke="#999" stroke-dasharray="4"/>')
    for j, (name, (fpr, tpr)) in enumerate(curves.items()):
        pts = " ".join(f"{pad + f * S:.2f},{pad + S - t * S:.2f}" for f, t in zip(fpr, tpr))
        color = colors[j % len(colors)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{pad + S + 8}" y="{pad + 14 * j + 10}" fill="{color}">{_esc(name)}</text>')
    body.append(f'<text x="{pad + S / 2}" y="{pad + S + 18}" text-anchor="middle">false positive rate</text>')
    return _svg(S + 2 * pad + 140, S + 2 * pad, body, metadata)


def write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
