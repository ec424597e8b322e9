"""Minimal deterministic SVG output for training curves and plan-view traces."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 640, 360, 40
STYLE = (".ego{stroke:#1f77b4;fill:none;stroke-width:2}"
         ".adversary{stroke:#d62728;fill:none;stroke-width:2}"
         ".background{stroke:#7f7f7f;fill:none;stroke-width:1}"
         ".curve{stroke:#2ca02c;fill:none;stroke-width:1.5}"
         ".curve2{stroke:#9467bd;fill:none;stroke-width:1;stroke-dasharray:4 2}"
         ".axis{stroke:#000;stroke-width:1}"
         "text{font-family:sans-serif;font-size:11px}")


def _num(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], equal_aspect: bool = False):
        allx = np.concatenate([np.asarray(x, float) for x in xs])
        ally = np.concatenate([np.asarray(y, float) for y in ys])
        self.x0, self.x1 = float(allx.min()), float(allx.max())
        self.y0, self.y1 = float(ally.min()), float(ally.max())
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.sx = (WIDTH - 2 * PAD) / (self.x1 - self.x0)
        self.sy = (HEIGHT - 2 * PAD) / (self.y1 - self.y0)
        if equal_aspect:
            self.sx = self.sy = min(self.sx, self.sy)

    def pt(self, x: float, y: float) -> Tuple[float, float]:
        return PAD + (x - self.x0) * self.sx, HEIGHT - PAD - (y - self.y0) * self.sy

    def polyline(self, x, y, cls: str) -> str:
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in (self.pt(float(u), float(v)) for u, v in zip(x, y)))
        return f'<polyline class="{cls}" points="{pts}"/>'


def _document(title: str, body: List[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    return "\n".join([head, f"<style>{STYLE}</style>", f"<title>{escape(title)}</title>", *body, "</svg>"]) + "\n"


def _axes(c: _Canvas, xlabel: str, ylabel: str) -> List[str]:
    x0, y0 = c.pt(c.x0, c.y0)
    x1, y1 = c.pt(c.x1, c.y1)
    return [
        f'<line class="axis" x1="{_num(x0)}" y1="{_num(y0)}" x2="{_num(x1)}" y2="{_num(y0)}"/>',
        f'<line class="axis" x1="{_num(x0)}" y1="{_num(y0)}" x2="{_num(x0)}" y2="{_num(y1)}"/>',
        f'<text x="{_num(x0)}" y="{_num(y0 + 15)}">{c.x0:.4g}</text>',
        f'<text x="{_num(x1 - 20)}" y="{_num(y0 + 15)}">{c.x1:.4g}</text>',
        f'<text x="2" y="{_num(y0)}">{c.y0:.4g}</text>',
        f'<text x="2" y="{_num(y1 + 4)}">{c.y1:.4g}</text>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 6}">{escape(xlabel)}</text>',
        f'<text x="{PAD}" y="14">{escape(ylabel)}</text>',
    ]


def reward_curve_svg(metrics: Sequence[Dict[str, float]], title: str = "training reward") -> str:
    if not metrics:
        raise ValueError("no metrics rows to plot")
    it = np.array([float(r["iteration"]) for r in metrics])
    adv = np.array([float(r["mean_adv_reward"]) for r in metrics])
    tot = np.array([float(r["mean_reward"]) for r in metrics])
    c = _Canvas([it, it], [adv, tot])
    body = _axes(c, "iteration", "mean adversarial score (solid), mean reward (dashed)")
    body += [c.polyline(it, adv, "curve"), c.polyline(it, tot, "curve2")]
    return _document(title, body)


def trace_svg(series: Dict[str, Tuple[np.ndarray, np.ndarray]], title: str = "episode") -> str:
    """Plan view; keys are roles (``ego``, ``adversary``, ``background:*``)."""
    if not series:
        raise ValueError("no vehicle series to plot")
    c = _Canvas([v[0] for v in series.values()], [v[1] for v in series.values()], equal_aspect=False)
    body = _axes(c, "x [m]", "y [m]")
    for role in sorted(series):
        cls = "background" if role.startswith("background") else role
        x, y = series[role]
        body.append(c.polyline(x, y, cls))
    return _document(title, body)


def write_svg(path, text: str) -> None:
    Path(path).write_text(text)
