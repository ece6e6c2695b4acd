"""
Self-emitted SVG figures: collision rate against density with per-seed
spread, predictor error against density, and replay frames with barrier
level sets. Output is a deterministic byte stream for a given input.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..schemas.bench import BenchmarkTable
from ..schemas.decomp import DecompEvalReport

logger = logging.getLogger(__name__)

Point = Tuple[float, float]
Segment = Tuple[Point, Point]

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
LEVEL_COLORS = {0.0: "#b2182b", 0.25: "#ef8a62", 0.5: "#67a9cf", 0.75: "#2166ac"}


def _f(value: float) -> str:
    return f"{value:.2f}"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class SvgCanvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.svg = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                    f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
                    f'viewBox="0 0 {width} {height}">\n'
                    f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n')

    def line(self, p0: Point, p1: Point, stroke: str = "black", width: float = 1.0, extra: str = ""):
        self.svg += (f'<line x1="{_f(p0[0])}" y1="{_f(p0[1])}" x2="{_f(p1[0])}" y2="{_f(p1[1])}" '
                     f'stroke="{stroke}" stroke-width="{_f(width)}" {extra}/>\n')

    def polyline(self, points: Sequence[Point], stroke: str, width: float = 1.5, extra: str = ""):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points)
        self.svg += f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{_f(width)}" {extra}/>\n'

    def polygon(self, points: Sequence[Point], fill: str, opacity: float = 0.2):
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points)
        self.svg += f'<polygon points="{pts}" fill="{fill}" fill-opacity="{_f(opacity)}" stroke="none"/>\n'

    def circle(self, center: Point, radius: float, fill: str = "none", stroke: str = "black", extra: str = ""):
        self.svg += (f'<circle cx="{_f(center[0])}" cy="{_f(center[1])}" r="{_f(radius)}" fill="{fill}" '
                     f'stroke="{stroke}" {extra}/>\n')

    def text(self, at: Point, string: str, size: int = 12, anchor: str = "start"):
        self.svg += (f'<text x="{_f(at[0])}" y="{_f(at[1])}" font-family="sans-serif" font-size="{size}" '
                     f'text-anchor="{anchor}">{_escape(string)}</text>\n')

    def get_svg(self) -> str:
        return f"{self.svg}</svg>\n"


@dataclass(frozen=True)
class Axes:
    """Linear map from a data box to a pixel box (y grows upward in data)"""

    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    left: float
    top: float
    width: float
    height: float

    def __call__(self, x: float, y: float) -> Point:
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        px = self.left + (x - x0) / (x1 - x0 or 1.0) * self.width
        py = self.top + self.height - (y - y0) / (y1 - y0 or 1.0) * self.height
        return px, py

    def draw_frame(self, canvas: SvgCanvas, x_label: str, y_label: str, ticks: int = 5):
        bottom = self.top + self.height
        canvas.line((self.left, bottom), (self.left + self.width, bottom))
        canvas.line((self.left, self.top), (self.left, bottom))
        for v in np.linspace(*self.x_range, ticks):
            px, _ = self(v, self.y_range[0])
            canvas.line((px, bottom), (px, bottom + 4))
            canvas.text((px, bottom + 16), f"{v:g}", size=10, anchor="middle")
        for v in np.linspace(*self.y_range, ticks):
            _, py = self(self.x_range[0], v)
            canvas.line((self.left - 4, py), (self.left, py))
            canvas.text((self.left - 6, py + 3), f"{v:.3g}", size=10, anchor="end")
        canvas.text((self.left + self.width / 2, bottom + 34), x_label, anchor="middle")
        canvas.text((14, self.top + self.height / 2), y_label, anchor="middle")


def _line_chart(series: Dict[str, pd.DataFrame], x_label: str, y_label: str, title: str,
                y_floor: Optional[float] = 0.0) -> str:
    """``series`` maps a legend label to a frame with columns x, mean, low, high"""
    canvas = SvgCanvas(640, 420)
    frames = [f for f in series.values() if len(f)]
    xs = np.concatenate([f["x"].to_numpy(dtype=float) for f in frames]) if frames else np.array([0.0, 1.0])
    lows = np.concatenate([f["low"].to_numpy(dtype=float) for f in frames]) if frames else np.array([0.0])
    highs = np.concatenate([f["high"].to_numpy(dtype=float) for f in frames]) if frames else np.array([1.0])
    y_min = min(float(lows.min()), y_floor) if y_floor is not None else float(lows.min())
    y_max = max(float(highs.max()), y_min + 1e-9)
    axes = Axes((float(xs.min()), float(xs.max())), (y_min, y_max), left=70, top=40, width=420, height=320)
    axes.draw_frame(canvas, x_label, y_label)
    canvas.text((axes.left + axes.width / 2, 22), title, size=14, anchor="middle")

    for i, (label, frame) in enumerate(series.items()):
        if not len(frame):
            continue
        color = PALETTE[i % len(PALETTE)]
        frame = frame.sort_values("x")
        upper = [axes(x, y) for x, y in zip(frame["x"], frame["high"])]
        lower = [axes(x, y) for x, y in zip(frame["x"], frame["low"])]
        canvas.polygon(upper + lower[::-1], fill=color)
        canvas.polyline([axes(x, y) for x, y in zip(frame["x"], frame["mean"])], stroke=color)
        legend_y = axes.top + 14 + 18 * i
        canvas.line((510, legend_y - 4), (530, legend_y - 4), stroke=color, width=2)
        canvas.text((536, legend_y), label, size=11)
    return canvas.get_svg()


def _spread(frame: pd.DataFrame, x: str, y: str) -> pd.DataFrame:
    """Mean per x with a one-standard-deviation band across the remaining rows"""
    grouped = frame.groupby(x)[y]
    mean = grouped.mean()
    std = grouped.std(ddof=0).fillna(0.0)
    return pd.DataFrame({"x": mean.index.to_numpy(dtype=float), "mean": mean.to_numpy(),
                         "low": (mean - std).to_numpy(), "high": (mean + std).to_numpy()})


def collision_rate_svg(table: BenchmarkTable, dynamics: Optional[str] = None) -> str:
    frame = pd.DataFrame([r.model_dump(mode="json") for r in table.rows])
    if dynamics is not None and len(frame):
        frame = frame[frame["dynamics"] == dynamics]
    series = {}
    if len(frame):
        for method in sorted(frame["method"].unique()):
            series[method] = _spread(frame[frame["method"] == method], "obstacles", "collision_rate")
    title = f"Collision rate ({dynamics})" if dynamics else "Collision rate"
    return _line_chart(series, "obstacles", "collision rate", title)


def decomposition_svg(report: DecompEvalReport, metric: str = "mean_l2") -> str:
    frame = pd.DataFrame([r.model_dump(mode="json") for r in report.rows])
    series = {}
    if len(frame):
        for kind in sorted(frame["kind"].unique()):
            series[kind] = _spread(frame[frame["kind"] == kind], "density", metric)
    return _line_chart(series, "obstacles", f"{metric} (m)", "One-step prediction error")


# -- level sets -----------------------------------------------------------------

# edges: 0 bottom (c00-c10), 1 right (c10-c11), 2 top (c01-c11), 3 left (c00-c01)
_EDGE_CORNERS = ((0, 1), (1, 3), (2, 3), (0, 2))


def marching_squares(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, level: float) -> List[Segment]:
    """
    Contour segments of ``values`` (ny, nx), sampled at (xs[i], ys[j]), at
    ``level``. Saddle cells are split by the cell-center average.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(ys), len(xs)) or min(values.shape) < 2:
        return []
    above = values > level
    corners = np.stack([above[:-1, :-1], above[:-1, 1:], above[1:, :-1], above[1:, 1:]])
    mixed = np.any(corners, axis=0) & ~np.all(corners, axis=0)
    segments: List[Segment] = []
    for j, i in zip(*np.nonzero(mixed)):
        v = (values[j, i], values[j, i + 1], values[j + 1, i], values[j + 1, i + 1])
        p = ((xs[i], ys[j]), (xs[i + 1], ys[j]), (xs[i], ys[j + 1]), (xs[i + 1], ys[j + 1]))
        crossings = []
        for edge, (a, b) in enumerate(_EDGE_CORNERS):
            if (v[a] > level) != (v[b] > level):
                t = (level - v[a]) / (v[b] - v[a])
                crossings.append((edge, (float(p[a][0] + t * (p[b][0] - p[a][0])),
                                         float(p[a][1] + t * (p[b][1] - p[a][1])))))
        if len(crossings) == 2:
            segments.append((crossings[0][1], crossings[1][1]))
        elif len(crossings) == 4:
            pts = dict(crossings)
            center_above = np.mean(v) > level
            if center_above == (v[0] > level):
                segments.extend([(pts[0], pts[1]), (pts[2], pts[3])])
            else:
                segments.extend([(pts[0], pts[3]), (pts[1], pts[2])])
    return segments


def replay_frame_svg(xs: np.ndarray, ys: np.ndarray, grid: np.ndarray, levels: Sequence[float],
                     obstacles: np.ndarray, obstacle_radius: float, ego_path: np.ndarray,
                     goal: Optional[Sequence[float]] = None, title: str = "") -> str:
    canvas = SvgCanvas(560, 580)
    axes = Axes((float(xs[0]), float(xs[-1])), (float(ys[0]), float(ys[-1])), left=40, top=40, width=500, height=500)
    canvas.text((280, 24), title, size=14, anchor="middle")
    canvas.polygon([axes(xs[0], ys[0]), axes(xs[-1], ys[0]), axes(xs[-1], ys[-1]), axes(xs[0], ys[-1])],
                   fill="#f7f7f7", opacity=1.0)
    for level in levels:
        color = LEVEL_COLORS.get(float(level), "#444444")
        for a, b in marching_squares(grid, xs, ys, level):
            canvas.line(axes(*a), axes(*b), stroke=color, width=1.2)
    scale = axes.width / (float(xs[-1]) - float(xs[0]) or 1.0)
    for x, y in np.asarray(obstacles).reshape(-1, 2):
        canvas.circle(axes(x, y), obstacle_radius * scale, fill="#999999", stroke="#333333")
    if len(ego_path):
        canvas.polyline([axes(x, y) for x, y in np.asarray(ego_path)[:, :2]], stroke="#1f77b4", width=2)
        canvas.circle(axes(*ego_path[-1][:2]), 4, fill="#1f77b4", stroke="none")
    if goal is not None:
        canvas.circle(axes(*goal), 5, fill="none", stroke="#2ca02c", extra='stroke-width="2"')
    return canvas.get_svg()


def write_svg(svg: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    logger.debug(f"wrote {path}")
    return path
