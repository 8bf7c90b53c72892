"""Minimal deterministic SVG emitters for frames, curves, bars, and quivers.

Hand-rolled on purpose: the output is plain text with no embedded ids or
timestamps, so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import math

import numpy as np

from .geom import Pose2
from .sim import SimConfig, _block_geometry


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _svg(width: float, height: float, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
        f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _polygon(points, fill: str, stroke: str, opacity: float = 1.0) -> str:
    pts = " ".join(f"{_fmt(p[0])},{_fmt(p[1])}" for p in points)
    return (
        f'<polygon points="{pts}" fill="{fill}" stroke="{stroke}" '
        f'fill-opacity="{_fmt(opacity)}"/>'
    )


def _polyline(points, stroke: str, width: float = 1.5) -> str:
    pts = " ".join(f"{_fmt(p[0])},{_fmt(p[1])}" for p in points)
    return f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{_fmt(width)}"/>'


def _line(a, b, stroke: str, width: float = 1.0, dash: str | None = None) -> str:
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return (
        f'<line x1="{_fmt(a[0])}" y1="{_fmt(a[1])}" x2="{_fmt(b[0])}" y2="{_fmt(b[1])}" '
        f'stroke="{stroke}" stroke-width="{_fmt(width)}"{d}/>'
    )


def _text(x, y, s, size=12, anchor="start") -> str:
    return (
        f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
        f'font-family="monospace" text-anchor="{anchor}">{s}</text>'
    )


def _flip(points, height: float) -> np.ndarray:
    """Workspace y-up to SVG y-down."""
    pts = np.asarray(points, dtype=float)
    out = pts.copy()
    out[..., 1] = height - pts[..., 1]
    return out


def frame_svg(cfg: SimConfig, block_pose: Pose2, ee_pos, keypoints=None) -> str:
    """One workspace frame: target footprint, block, ID boundary, disc."""
    w, h = cfg.workspace
    geo = _block_geometry(cfg.t_block)
    body = [f'<rect width="{_fmt(w)}" height="{_fmt(h)}" fill="#fafafa" stroke="#999"/>']
    if cfg.id_axis == "x":
        a, b = (cfg.id_boundary, 0.0), (cfg.id_boundary, h)
    else:
        a, b = (0.0, h - cfg.id_boundary), (w, h - cfg.id_boundary)
    body.append(_line(a, b, "#888", 1.0, dash="6,4"))
    body.append(
        _polygon(_flip(cfg.target_pose.transform(geo["outline"]), h), "#9ecae1", "#3182bd", 0.5)
    )
    body.append(
        _polygon(_flip(block_pose.transform(geo["outline"]), h), "#bdbdbd", "#636363", 0.9)
    )
    ee = _flip(np.asarray(ee_pos, dtype=float), h)
    body.append(
        f'<circle cx="{_fmt(ee[0])}" cy="{_fmt(ee[1])}" r="{_fmt(cfg.ee_radius)}" '
        f'fill="#74c476" stroke="#238b45"/>'
    )
    if keypoints is not None:
        for p in _flip(keypoints, h):
            body.append(
                f'<circle cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="3" fill="#e6550d"/>'
            )
    return _svg(w, h, body)


def density_curve_svg(densities, threshold: float, width=640, height=240) -> str:
    """Per-step density on a log axis with the switching threshold."""
    dens = np.asarray(densities, dtype=float)
    floor = max(threshold * 1e-6, 1e-300)
    logd = np.log10(np.maximum(dens, floor))
    log_thr = math.log10(max(threshold, floor))
    lo = min(logd.min(), log_thr) - 0.5
    hi = max(logd.max(), log_thr) + 0.5
    margin = 30.0

    def sx(i):
        return margin + (width - 2 * margin) * (i / max(len(dens) - 1, 1))

    def sy(v):
        return height - margin - (height - 2 * margin) * ((v - lo) / (hi - lo))

    body = [f'<rect width="{_fmt(width)}" height="{_fmt(height)}" fill="#ffffff" stroke="#999"/>']
    body.append(_line((margin, sy(log_thr)), (width - margin, sy(log_thr)), "#d62728", 1.0, "5,4"))
    body.append(_polyline([(sx(i), sy(v)) for i, v in enumerate(logd)], "#1f77b4"))
    body.append(_text(margin, 16, "log10 mean keypoint density per step"))
    body.append(_text(width - margin, sy(log_thr) - 4, "threshold", anchor="end"))
    return _svg(width, height, body)


def bars_svg(rates: dict[str, float], width=480, height=260) -> str:
    """Success-rate bars in insertion order of ``rates``."""
    margin = 40.0
    n = max(len(rates), 1)
    slot = (width - 2 * margin) / n
    body = [f'<rect width="{_fmt(width)}" height="{_fmt(height)}" fill="#ffffff" stroke="#999"/>']
    for i, (label, rate) in enumerate(rates.items()):
        bar_h = (height - 2 * margin) * rate
        x = margin + i * slot + 0.15 * slot
        y = height - margin - bar_h
        body.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(0.7 * slot)}" '
            f'height="{_fmt(bar_h)}" fill="#1f77b4"/>'
        )
        body.append(_text(x + 0.35 * slot, height - margin + 16, label, anchor="middle"))
        body.append(_text(x + 0.35 * slot, y - 5, f"{rate:.2f}", anchor="middle"))
    body.append(_line((margin, height - margin), (width - margin, height - margin), "#333"))
    return _svg(width, height, body)


def quiver_svg(cfg: SimConfig, manifold, template, grid: int = 20) -> str:
    """Recovery-direction field: the template placed at each grid point."""
    w, h = cfg.workspace
    body = [f'<rect width="{_fmt(w)}" height="{_fmt(h)}" fill="#fafafa" stroke="#999"/>']
    tmpl = np.asarray(template, dtype=float)
    xs = np.linspace(w / (grid + 1), w - w / (grid + 1), grid)
    ys = np.linspace(h / (grid + 1), h - h / (grid + 1), grid)
    max_len = 0.45 * w / (grid + 1)
    for gy in ys:
        for gx in xs:
            rt = manifold.recovery_tuple(tmpl + np.array([gx, gy]))
            norm = float(np.linalg.norm(rt.delta))
            if norm < 1e-15:
                continue
            d = rt.delta / norm * max_len
            a = _flip(np.array([gx, gy]), h)
            b = _flip(np.array([gx + d[0], gy + d[1]]), h)
            body.append(_line(a, b, "#1f77b4", 1.2))
            body.append(f'<circle cx="{_fmt(a[0])}" cy="{_fmt(a[1])}" r="1.5" fill="#1f77b4"/>')
    return _svg(w, h, body)
