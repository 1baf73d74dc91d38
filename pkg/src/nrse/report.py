"""Correlation statistics and report artifacts (CSV tables and SVG plots).

Frame error rate stands in for word error rate throughout: the synthetic
task has frame-level classes and no decoder.  Every artifact header says so.

Artifacts written by :func:`build_report`
----------------------------------------
``correlations.csv``   ``layer,r,n``, one row per tapped layer
``scores.csv``         ``utterance_id,layer,nrse,frame_error`` for all layers
``metrics.csv``        ``pass,k,eval_matched_fer,eval_mismatched_fer``
``baseline.csv``       ``split,fer`` of the unadapted model (when given)
``scatter_layer<L>.svg``  NRSE against frame error, one point per utterance
``activations.svg``    heat image of the first neurons of a tapped layer
                       for one matched and one mismatched utterance
``report.txt``         plain-text summary
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import atomic
from .errors import InputError
from .selection import METRICS_HEADER, SCORE_HEADER, ScoreTable

STAND_IN_NOTE = "frame error rate (fer) stands in for word error rate"
HEATMAP_NEURONS = 20


def pearson_r(x, y) -> float:
    """Pearson product-moment correlation of two equal-length sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"pearson_r needs two 1-D sequences of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InputError("undefined correlation: need at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise InputError("undefined correlation: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass
class LayerCorrelation:
    layer: int
    r: float
    n: int


@dataclass
class Report:
    correlations: list[LayerCorrelation]
    metrics_rows: list[list]
    artifacts: dict[str, Path] = field(default_factory=dict)


# ----------------------------------------------------------------------------
# SVG


def _num(v: float) -> str:
    return f"{v:.2f}"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def scatter_svg(x, y, title: str, xlabel: str, ylabel: str, width=480, height=360) -> str:
    """Scatter plot with data-space bounds padded to the data range."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ml, mr, mt, mb = 60, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def bounds(v):
        lo, hi = float(v.min()), float(v.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    (x0, x1), (y0, y1) = bounds(x), bounds(y)
    px = ml + (x - x0) / (x1 - x0) * pw
    py = mt + ph - (y - y0) / (y1 - y0) * ph
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{_esc(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">'
        f'{_esc(xlabel)}</text>',
        f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        tx, ty = ml + frac * pw, mt + ph - frac * ph
        out.append(f'<text x="{tx:.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">'
                   f'{x0 + frac * (x1 - x0):.3f}</text>')
        out.append(f'<text x="{ml - 6}" y="{ty + 4:.1f}" text-anchor="end" font-size="10">'
                   f'{y0 + frac * (y1 - y0):.3f}</text>')
    out.append('<g class="points" fill="steelblue" fill-opacity="0.7">')
    out += [f'<circle cx="{_num(a)}" cy="{_num(b)}" r="3"/>' for a, b in zip(px, py)]
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(panels: list[tuple[str, np.ndarray]], title: str, cell_w=2, cell_h=8) -> str:
    """Gray-scale heat image, one panel per ``(label, T x N trace)``;
    rows are neurons, columns frames, black is 1."""
    ml, gap, top = 110, 30, 40
    width = ml + max(p.shape[0] for _, p in panels) * cell_w + 20
    height = top + sum(p.shape[1] * cell_h + gap for _, p in panels)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{_esc(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="10" y="20" font-size="13">{_esc(title)}</text>',
    ]
    y = top
    for label, trace in panels:
        t, n = trace.shape
        out.append(f'<text x="10" y="{y + n * cell_h / 2:.1f}" font-size="11">{_esc(label)}</text>')
        out.append('<g class="panel" shape-rendering="crispEdges">')
        levels = np.clip(np.round(255 * (1.0 - trace)), 0, 255).astype(int)
        for j in range(n):
            for i in range(t):
                g = levels[i, j]
                out.append(f'<rect x="{ml + i * cell_w}" y="{y + j * cell_h}" width="{cell_w}" '
                           f'height="{cell_h}" fill="rgb({g},{g},{g})"/>')
        out.append("</g>")
        y += n * cell_h + gap
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------
# report


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def build_report(tables: dict[int, ScoreTable], metrics_rows, out_dir,
                 traces: dict[str, np.ndarray] | None = None, trace_layer: int | None = None,
                 baseline: dict | None = None, neurons: int = HEATMAP_NEURONS) -> Report:
    """Write correlation, score, metrics and plot artifacts to ``out_dir``.

    Parameters
    ----------
    tables
        Score table per tapped layer; every row needs a frame error.
    metrics_rows
        ``[pass, k, eval_matched_fer, eval_mismatched_fer]`` per pass
        (e.g. ``LoopHistory.metrics_rows()``); may be empty.
    traces
        Optional ``{"matched": T x N, "mismatched": T x N}`` activations of
        layer ``trace_layer`` for the heat image.
    baseline
        Optional ``{"eval_matched_fer": ..., ...}`` of the unadapted model.

    Every input is checked before anything is written; on failure an
    :class:`InputError` lists all absent or unusable inputs.  Files are
    written atomically and removed again if a later write fails.
    """
    absent = []
    if not tables:
        absent.append("score tables (no layers)")
    for layer, table in sorted((tables or {}).items()):
        if len(table) == 0:
            absent.append(f"score table for layer {layer} (empty)")
        elif not table.has_errors():
            absent.append(f"frame errors in score table for layer {layer}")
    if traces is not None:
        for name in ("matched", "mismatched"):
            tr = traces.get(name)
            if tr is None or np.asarray(tr).ndim != 2 or np.asarray(tr).size == 0:
                absent.append(f"{name} activation trace")
    if absent:
        raise InputError("cannot build report, missing: " + "; ".join(absent))

    files: dict[str, str] = {}
    correlations = []
    for layer, table in sorted(tables.items()):
        x, y = table.values(), table.errors()
        try:
            r = pearson_r(x, y)
        except InputError as exc:
            raise InputError(f"layer {layer}: {exc}") from None
        correlations.append(LayerCorrelation(layer, r, len(table)))
        files[f"scatter_layer{layer}.svg"] = scatter_svg(
            x, y, f"layer {layer}: NRSE vs frame error (r = {r:.3f}, n = {len(table)}); {STAND_IN_NOTE}",
            "NRSE", "frame error rate")
    files["correlations.csv"] = atomic.csv_text(
        ["layer", "r", "n"], [[c.layer, f"{c.r:.6f}", c.n] for c in correlations])
    files["scores.csv"] = atomic.csv_text(SCORE_HEADER, [
        [row.utterance_id, row.layer, f"{row.nrse:.9f}", _fmt(row.frame_error)]
        for _, t in sorted(tables.items()) for row in t.rows])
    metrics_rows = [list(r) for r in (metrics_rows or [])]
    files["metrics.csv"] = atomic.csv_text(
        METRICS_HEADER, [[i, k, _fmt(m), _fmt(mm)] for i, k, m, mm in metrics_rows])
    if baseline:
        files["baseline.csv"] = atomic.csv_text(
            ["split", "fer"], [[k.removesuffix("_fer"), _fmt(v)] for k, v in sorted(baseline.items())
                               if k.endswith("_fer")])
    if traces is not None:
        panels = [(name, np.asarray(traces[name], dtype=np.float64)[:, :neurons])
                  for name in ("matched", "mismatched")]
        layer_txt = f"layer {trace_layer} " if trace_layer is not None else ""
        files["activations.svg"] = heatmap_svg(
            panels, f"{layer_txt}activations, first {panels[0][1].shape[1]} neurons over frames")

    lines = [f"NRSE report; {STAND_IN_NOTE}.", "", "correlation of NRSE with frame error per layer:"]
    lines += [f"  layer {c.layer}: r = {c.r:+.4f} (n = {c.n})" for c in correlations]
    if baseline:
        lines += ["", "unadapted model:"]
        lines += [f"  {k} = {v:.4f}" for k, v in sorted(baseline.items()) if k.endswith("_fer")]
    if metrics_rows:
        lines += ["", "adaptation passes (pass, k, matched fer, mismatched fer):"]
        lines += [f"  P{i}  k={k}  {_fmt(m) or '-'}  {_fmt(mm) or '-'}" for i, k, m, mm in metrics_rows]
    files["report.txt"] = "\n".join(lines) + "\n"

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for name, text in files.items():
            atomic.write_text(out_dir / name, text)
            written.append(out_dir / name)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return Report(correlations, metrics_rows, {name: out_dir / name for name in files})
