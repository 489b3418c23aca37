import re

import numpy as np

from shortcutlab import render as R

FILL = re.compile(r'<rect x="\d+" y="\d+" width="36" height="36" fill="(#[0-9a-f]{6})"')


def test_diverging_scale():
    assert R.diverging_color(0.0, 1.0) == "#f7f7f7"
    assert R.diverging_color(1.0, 1.0) == "#a50026"
    assert R.diverging_color(-2.0, 1.0) == "#313695"
    assert R.diverging_color(0.5, 0.0) == "#f7f7f7"


def test_zero_grid_is_uniform_mid_colour():
    svg = R.heatmap_svg(np.zeros((3, 4)), ["a", "b", "c"], list("wxyz"))
    fills = FILL.findall(svg)
    assert len(fills) == 12 and set(fills) == {"#f7f7f7"}
    assert R.is_well_formed(svg)


def test_single_nonzero_cell_is_the_only_saturated_one():
    grid = np.zeros((2, 3))
    grid[1, 2] = -0.7
    fills = FILL.findall(R.heatmap_svg(grid, ["a", "b"], ["x", "y", "z"]))
    assert fills.count("#313695") == 1 and fills.count("#f7f7f7") == 5


def test_nan_cells_and_empty_grid_stay_valid():
    grid = np.array([[np.nan, 1.0]])
    svg = R.heatmap_svg(grid, ["a"], ["x", "y"], metadata={"seed": 3})
    assert "#cccccc" in svg and "<metadata>" in svg and R.is_well_formed(svg)
    assert R.is_well_formed(R.heatmap_svg(np.full((1, 1), np.nan), ["a"], ["x"]))


def test_patch_heatmap_layout():
    rows = [
        {"layer": 0, "component": "0", "mean_delta_ld": 1.0},
        {"layer": 1, "component": "mlp", "mean_delta_ld": -1.0},
    ]
    svg = R.patch_heatmap_svg(rows, 2, 2, title="direct")
    assert R.is_well_formed(svg)
    assert ">mlp<" in svg and ">L1<" in svg


def test_token_views_mark_the_top_token():
    html = R.token_html(["a", "<b>", "c"], [0.1, -0.9, 0.2])
    assert "&lt;b&gt;" in html and "font-weight:bold" in html
    svg = R.token_svg(["a", "b", "c"], [0.1, -0.9, 0.2], metadata={"method": "HTA"})
    assert R.is_well_formed(svg) and "max -0.9" in svg


def test_histogram_and_roc_are_well_formed():
    assert R.is_well_formed(R.histogram_svg({"shortcut": [1, 2, 3], "random": [0, 0.5]}, bins=5))
    assert R.is_well_formed(R.histogram_svg({}))
    assert R.is_well_formed(R.roc_svg({"HTA": ([0, 0.5, 1], [0, 0.9, 1])}, title="ROC"))


def test_malformed_text_is_rejected():
    assert not R.is_well_formed("<svg><g></svg>")
    assert not R.is_well_formed("<html/>")
