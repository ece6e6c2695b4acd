import numpy as np
import pandas as pd
import pytest

from src.schemas.bench import BenchmarkRow, BenchmarkTable
from src.schemas.decomp import DecompEvalReport, DecompRow, PredictorKind
from src.services.plotting import (
    Axes,
    SvgCanvas,
    _spread,
    collision_rate_svg,
    decomposition_svg,
    marching_squares,
    replay_frame_svg,
    write_svg,
)

XS = np.array([0.0, 1.0])
YS = np.array([0.0, 1.0])


def sorted_segment(segment):
    return tuple(sorted(segment))


def test_single_crossing_cell():
    values = np.array([[0.0, 0.0], [1.0, 1.0]])
    segments = marching_squares(values, XS, YS, 0.5)
    assert len(segments) == 1
    np.testing.assert_allclose(sorted_segment(segments[0]), [[0.0, 0.5], [1.0, 0.5]])


def test_crossing_is_interpolated():
    values = np.array([[0.0, 0.0], [4.0, 4.0]])
    (a, b), = marching_squares(values, XS, YS, 1.0)
    assert a[1] == pytest.approx(0.25)
    assert b[1] == pytest.approx(0.25)


@pytest.mark.parametrize("values", [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])])
def test_saddle_cell_gives_two_segments(values):
    assert len(marching_squares(values, XS, YS, 0.5)) == 2


def test_uniform_and_malformed_grids_give_nothing():
    assert marching_squares(np.ones((2, 2)), XS, YS, 0.5) == []
    assert marching_squares(np.zeros((3, 2)), XS, YS, 0.5) == []
    assert marching_squares(np.zeros((1, 1)), XS[:1], YS[:1], 0.5) == []


def test_circle_contour_encloses_center():
    xs = ys = np.linspace(-2.0, 2.0, 41)
    gx, gy = np.meshgrid(xs, ys)
    segments = marching_squares(np.hypot(gx, gy) - 1.0, xs, ys, 0.0)
    points = np.array([p for seg in segments for p in seg])
    np.testing.assert_allclose(np.hypot(points[:, 0], points[:, 1]), 1.0, atol=0.02)


def test_axes_map_data_box_to_pixels():
    axes = Axes((0.0, 10.0), (0.0, 1.0), left=10, top=20, width=100, height=50)
    assert axes(0.0, 0.0) == pytest.approx((10.0, 70.0))
    assert axes(10.0, 1.0) == pytest.approx((110.0, 20.0))


def test_canvas_escapes_text():
    canvas = SvgCanvas(10, 10)
    canvas.text((0, 0), "a<b & c")
    svg = canvas.get_svg()
    assert svg.startswith('<?xml version="1.0" encoding="UTF-8"?>')
    assert svg.endswith("</svg>\n")
    assert "a&lt;b &amp; c" in svg


def test_spread_bands_by_x():
    frame = pd.DataFrame({"obstacles": [6, 6, 24], "collision_rate": [0.0, 0.2, 0.5]})
    spread = _spread(frame, "obstacles", "collision_rate")
    assert list(spread["x"]) == [6.0, 24.0]
    assert spread.loc[0, "mean"] == pytest.approx(0.1)
    assert spread.loc[0, "high"] == pytest.approx(0.2)
    assert spread.loc[1, "low"] == pytest.approx(0.5)


def benchmark_table():
    rows = []
    for method in ("sncbf", "spfm"):
        for density in (6, 24):
            for seed in (0, 1):
                rows.append(BenchmarkRow(dynamics="dubins", method=method, obstacles=density, seed=seed, episodes=10,
                                         collision_rate=0.1 * seed + (0.3 if method == "spfm" else 0.0),
                                         mean_steps=50.0, frozen_fraction=0.0))
    return BenchmarkTable(rows=rows)


def test_collision_rate_svg_is_deterministic():
    table = benchmark_table()
    svg = collision_rate_svg(table, "dubins")
    assert svg == collision_rate_svg(table, "dubins")
    assert svg.count("<polyline") == 2
    assert "Collision rate (dubins)" in svg


def test_collision_rate_svg_handles_an_empty_table():
    svg = collision_rate_svg(BenchmarkTable())
    assert "<polyline" not in svg
    assert svg.endswith("</svg>\n")


def test_decomposition_svg_draws_one_series_per_kind():
    report = DecompEvalReport(densities=[6, 24], rows=[
        DecompRow(kind=kind, density=d, mean_l2=0.01 * d, mean_maxnorm=0.01, eps95=0.02)
        for kind in (PredictorKind.CSM, PredictorKind.COSM) for d in (6, 24)])
    svg = decomposition_svg(report)
    assert svg.count("<polyline") == 2
    assert ">csm<" in svg and ">cosm<" in svg


def test_replay_frame_draws_levels_obstacles_and_path(tmp_path):
    xs = ys = np.linspace(-1.0, 1.0, 11)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.hypot(gx, gy) - 0.5
    svg = replay_frame_svg(xs, ys, grid, [0.0, 0.25], np.array([[0.0, 0.0]]), 0.2,
                           np.array([[-1.0, -1.0], [-0.5, -0.5]]), goal=(1.0, 1.0), title="frame 0")
    assert "<line" in svg
    assert svg.count("<circle") == 3
    assert "frame 0" in svg
    path = write_svg(svg, tmp_path / "figs" / "replay.svg")
    assert path.read_text(encoding="utf-8") == svg
