"""Self-contained SVG scatter of per-task prediction error against task size."""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET

WIDTH, HEIGHT = 960, 640
MARGIN = {"left": 80, "right": 30, "top": 40, "bottom": 70}
STYLES = {
    "cp": "fill:none;stroke:#d62728;stroke-width:2",
    "global": "fill:none;stroke:#2ca02c;stroke-width:2",
    "smooth": "fill:none;stroke:#000000;stroke-width:2;stroke-dasharray:8,5",
}


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, xs, ys):
        lo, hi = min(xs), max(xs)
        if hi <= lo:
            lo, hi = lo / 1.5, hi * 1.5
        self.lx0, self.lx1 = math.log(lo) - 0.05, math.log(hi) + 0.05
        self.y0, self.y1 = 0.0, max(ys) * 1.1 if max(ys) > 0 else 1.0
        self.px0, self.px1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.py0, self.py1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def x(self, n):
        t = (math.log(n) - self.lx0) / (self.lx1 - self.lx0)
        return self.px0 + t * (self.px1 - self.px0)

    def y(self, v):
        t = (v - self.y0) / (self.y1 - self.y0)
        return self.py0 + t * (self.py1 - self.py0)


def _path(ax, pts):
    return " ".join(("M" if i == 0 else "L") + f"{_f(ax.x(n))},{_f(ax.y(v))}" for i, (n, v) in enumerate(pts))


def error_scatter_svg(report, panel: str = "train") -> str:
    """One marker per task (radius proportional to mean log duration) plus
    the estimated-error curve, the global-model line and the smoothed errors."""
    attr = "cv_rmse_pct" if panel == "train" else "test_rmse_pct"
    points = [
        (t.n_train, getattr(t, attr), t.mean_log_duration or 0.0, t.task_key)
        for t in report.tasks
        if getattr(t, attr) is not None and t.n_train > 0
    ]
    curves = {}
    if report.curves.get("cp"):
        curves["cp"] = list(report.curves["cp"])
    smooth = report.curves.get(f"smooth_{panel}")
    if smooth:
        curves["smooth"] = list(smooth)
    glob = None
    for a in report.aggregates:
        if a.method == "global":
            glob = a.train_cv_rmse_pct if panel == "train" else a.test_rmse_pct

    xs = [p[0] for p in points] + [n for c in curves.values() for n, _ in c]
    ys = [p[1] for p in points] + [v for c in curves.values() for _, v in c] + ([glob] if glob is not None else [])
    if not xs:
        xs, ys = [1.0, 10.0], [1.0]
    ax = _Axes(xs, ys)
    if glob is not None:
        lo, hi = math.exp(ax.lx0), math.exp(ax.lx1)
        curves["global"] = [(lo, glob), (hi, glob)]

    svg = ET.Element(
        "svg",
        {"xmlns": "http://www.w3.org/2000/svg", "viewBox": f"0 0 {WIDTH} {HEIGHT}", "width": str(WIDTH), "height": str(HEIGHT)},
    )
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(WIDTH), "height": str(HEIGHT), "style": "fill:#ffffff"})
    title = ET.SubElement(svg, "text", {"x": str(WIDTH // 2), "y": "24", "style": "font:16px sans-serif;text-anchor:middle"})
    title.text = f"{report.mode} tasks, {panel} error"

    axes = ET.SubElement(svg, "g", {"class": "axes", "style": "stroke:#444444;stroke-width:1"})
    ET.SubElement(axes, "line", {"x1": _f(ax.px0), "y1": _f(ax.py0), "x2": _f(ax.px1), "y2": _f(ax.py0)})
    ET.SubElement(axes, "line", {"x1": _f(ax.px0), "y1": _f(ax.py0), "x2": _f(ax.px0), "y2": _f(ax.py1)})
    labels = ET.SubElement(svg, "g", {"class": "labels", "style": "font:12px sans-serif;fill:#222222"})
    for k in range(math.floor(ax.lx0 / math.log(10)), math.ceil(ax.lx1 / math.log(10)) + 1):
        for m in (1, 2, 5):
            n = m * 10.0**k
            if ax.lx0 <= math.log(n) <= ax.lx1:
                px = ax.x(n)
                ET.SubElement(axes, "line", {"x1": _f(px), "y1": _f(ax.py0), "x2": _f(px), "y2": _f(ax.py0 + 5)})
                t = ET.SubElement(labels, "text", {"x": _f(px), "y": _f(ax.py0 + 20), "style": "text-anchor:middle"})
                t.text = f"{n:g}"
    step = _nice_step(ax.y1 - ax.y0)
    v = 0.0
    while v <= ax.y1:
        py = ax.y(v)
        ET.SubElement(axes, "line", {"x1": _f(ax.px0 - 5), "y1": _f(py), "x2": _f(ax.px0), "y2": _f(py)})
        t = ET.SubElement(labels, "text", {"x": _f(ax.px0 - 8), "y": _f(py + 4), "style": "text-anchor:end"})
        t.text = f"{v:g}"
        v += step
    xl = ET.SubElement(labels, "text", {"x": str(WIDTH // 2), "y": str(HEIGHT - 20), "style": "text-anchor:middle"})
    xl.text = "task sample size (log scale)"
    yl = ET.SubElement(
        labels, "text", {"x": "20", "y": str(HEIGHT // 2), "transform": f"rotate(-90 20 {HEIGHT // 2})", "style": "text-anchor:middle"}
    )
    yl.text = "RMSE (%)"

    marks = ET.SubElement(svg, "g", {"class": "tasks", "style": "fill:#1f77b4;fill-opacity:0.5;stroke:#1f77b4"})
    for n, v, size, key in points:
        c = ET.SubElement(marks, "circle", {"class": "task", "cx": _f(ax.x(n)), "cy": _f(ax.y(v)), "r": _f(1.2 * size)})
        ET.SubElement(c, "title").text = f"{key}: n={n}, {v:.1f}%"
    lines = ET.SubElement(svg, "g", {"class": "curves"})
    for name in ("cp", "global", "smooth"):
        if name in curves:
            ET.SubElement(lines, "path", {"class": f"curve {name}", "d": _path(ax, curves[name]), "style": STYLES[name]})
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"


def _nice_step(span: float) -> float:
    raw = span / 6
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * mag:
            return m * mag
    return 10 * mag
