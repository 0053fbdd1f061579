import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from qlmq.errors import ContractError
from qlmq.svgplot import _diverging_color, _pool, barchart_svg, heatmap_svg, histogram_svg


def parse(svg: str) -> ET.Element:
    return ET.fromstring(svg)


def tags(root: ET.Element, name: str):
    return [el for el in root.iter() if el.tag.rsplit("}", 1)[-1] == name]


class TestColormap:
    def test_endpoints_and_center(self):
        assert _diverging_color(-1.0) == "rgb(59,76,192)"
        assert _diverging_color(0.0) == "rgb(255,255,255)"
        assert _diverging_color(1.0) == "rgb(180,4,38)"

    def test_out_of_range_saturates(self):
        assert _diverging_color(5.0) == _diverging_color(1.0)
        assert _diverging_color(-5.0) == _diverging_color(-1.0)

    def test_monotone_red_channel_on_negative_side(self):
        reds = [int(re.match(r"rgb\((\d+),", _diverging_color(t)).group(1))
                for t in np.linspace(0, -1, 6)]
        assert reds == sorted(reds, reverse=True)


class TestPooling:
    def test_small_matrix_untouched(self):
        m = np.arange(12.0).reshape(3, 4)
        pooled, f = _pool(m, 160)
        assert f == 1 and pooled is m

    def test_block_mean_and_nan_padding(self):
        m = np.arange(9.0).reshape(3, 3)
        pooled, f = _pool(m, 2)
        assert f == 2 and pooled.shape == (2, 2)
        assert pooled[0, 0] == np.mean([0, 1, 3, 4])
        assert pooled[1, 1] == 8.0  # lone corner cell, padding ignored


class TestHeatmap:
    def test_document_structure(self):
        m = np.array([[1.0, -1.0], [0.0, 0.5]])
        svg = heatmap_svg(m, title="pairwise")
        root = parse(svg)
        assert root.get("width") and root.get("viewBox")
        rects = tags(root, "rect")
        # 4 cells + background + frame + 24 colorbar steps
        assert len(rects) == 4 + 2 + 24
        text = " ".join(t.text or "" for t in tags(root, "text"))
        assert "pairwise" in text and "2 x 2 cells" in text

    def test_cell_colors_match_values(self):
        svg = heatmap_svg(np.array([[1.0, -1.0]]))
        assert 'fill="rgb(180,4,38)"' in svg and 'fill="rgb(59,76,192)"' in svg

    def test_nan_cells_render_gray(self):
        svg = heatmap_svg(np.array([[np.nan, 0.0]]))
        assert 'fill="rgb(238,238,238)"' in svg

    def test_large_matrix_pools_and_says_so(self):
        m = np.zeros((400, 400))
        svg = heatmap_svg(m, title="big", max_cells=160)
        assert "block mean x3" in svg
        root = parse(svg)
        grid = [r for r in tags(root, "rect") if r.get("height") not in (None, "360")]
        assert len(tags(root, "rect")) < 400 * 400 / 4

    def test_escapes_markup_in_title(self):
        svg = heatmap_svg(np.eye(2), title="a<b & c")
        assert "a&lt;b &amp; c" in svg
        parse(svg)

    def test_rejects_bad_input(self):
        with pytest.raises(ContractError, match="2-D"):
            heatmap_svg(np.zeros(3))
        with pytest.raises(ContractError, match="vmin < vmax"):
            heatmap_svg(np.eye(2), vmin=1.0, vmax=1.0)


class TestHistogram:
    COUNTS = [1, 5, 2]
    EDGES = [-1.0, 0.0, 1.0, 2.0]

    def test_document_structure(self):
        svg = histogram_svg(self.COUNTS, self.EDGES, title="weights of w_o")
        root = parse(svg)
        paths = tags(root, "path")
        assert len(paths) == 1
        assert paths[0].get("d").count("Z") == 3  # one closed run per bin
        assert "weights of w_o" in svg

    def test_clip_markers(self):
        svg = histogram_svg(self.COUNTS, self.EDGES, clip_values=[-0.5, 0.5])
        root = parse(svg)
        markers = [e for e in tags(root, "line") if e.get("class") == "clip-marker"]
        assert len(markers) == 2
        assert all(m.get("stroke-dasharray") for m in markers)

    def test_out_of_range_clip_values_skipped(self):
        svg = histogram_svg(self.COUNTS, self.EDGES, clip_values=[99.0])
        assert "clip-marker" not in svg

    def test_axis_labels_cover_edges_and_peak(self):
        svg = histogram_svg(self.COUNTS, self.EDGES)
        assert ">-1<" in svg and ">2<" in svg and ">5<" in svg

    def test_rejects_mismatched_edges(self):
        with pytest.raises(ContractError, match=r"edges \[n\+1\]"):
            histogram_svg([1, 2], [0.0, 1.0])
        with pytest.raises(ContractError, match="at least one bin"):
            histogram_svg([], [0.0])


class TestBarchart:
    def test_document_structure(self):
        svg = barchart_svg(["a", "b", "c"], [1.0, 3.0, 2.0], title="sizes")
        root = parse(svg)
        bars = [r for r in tags(root, "rect") if r.get("fill") == "rgb(93,120,190)"]
        assert len(bars) == 3
        heights = [float(b.get("height")) for b in bars]
        assert heights[1] == max(heights)
        labels = [t.text for t in tags(root, "text")]
        assert {"a", "b", "c"} <= set(labels)

    def test_many_labels_thin_out(self):
        n = 64
        svg = barchart_svg([f"m{i}" for i in range(n)], np.ones(n))
        root = parse(svg)
        shown = [t.text for t in tags(root, "text") if t.text and t.text.startswith("m")]
        assert len(shown) == 16
        bars = [r for r in tags(root, "rect") if r.get("fill") == "rgb(93,120,190)"]
        assert len(bars) == n

    def test_rejects_length_mismatch(self):
        with pytest.raises(ContractError, match="equally many"):
            barchart_svg(["a"], [1.0, 2.0])
