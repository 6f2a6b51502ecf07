"""Part-membership maps, misalignment statistics, sweep reports."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partpool import diagnose as diag
from partpool.errors import ConfigError, DataError
from partpool.retrieval import EvalResult


def orthogonal_stripes(m=4, n=2, p=2, c=4):
    """A tensor whose stripes live on disjoint channel axes, so nearest-part
    labels are exact."""
    t = np.zeros((m, n, c))
    stripe = m // p
    for k in range(p):
        t[k * stripe:(k + 1) * stripe, :, k] = 1.0 + k
    g = np.zeros((p, c))
    for k in range(p):
        g[k, k] = 1.0
    return t, g


class TestNearestMap:
    def test_orthogonal_stripes_label_exactly(self):
        t, g = orthogonal_stripes()
        pm = diag.nearest_part_map(t, g)
        want = np.repeat([0, 1], 2)[:, None] * np.ones((1, 2), dtype=int)
        np.testing.assert_array_equal(pm.labels, want)
        assert pm.source == "nearest" and pm.zero_norm_cells == 0

    def test_outlier_cell_detected(self):
        t, g = orthogonal_stripes()
        t[0, 0] = 0.0
        t[0, 0, 1] = 5.0  # top-left cell now looks like part 1
        pm = diag.nearest_part_map(t, g)
        assert pm.labels[0, 0] == 1
        assert diag.outlier_rate(t, g) == pytest.approx(1.0 / 8.0)

    def test_zero_fiber_keeps_stripe_index(self):
        t, g = orthogonal_stripes()
        t[3, 1] = 0.0
        pm = diag.nearest_part_map(t, g)
        assert pm.labels[3, 1] == 1  # bottom stripe
        assert pm.zero_norm_cells == 1

    def test_zero_part_vector_rejected(self):
        t, g = orthogonal_stripes()
        g[1] = 0.0
        with pytest.raises(DataError):
            diag.nearest_part_map(t, g)

    def test_aligned_tensor_has_zero_outliers(self):
        t, g = orthogonal_stripes(m=6, n=3, p=3, c=5)
        assert diag.outlier_rate(t, g) == 0.0


class TestArgmaxMap:
    def test_masses_and_labels(self):
        a = np.zeros((2, 2, 2))
        a[0, :, 0] = 0.9
        a[0, :, 1] = 0.1
        a[1, :, 0] = 0.2
        a[1, :, 1] = 0.8
        pm = diag.rpp_argmax_map(a)
        np.testing.assert_array_equal(pm.labels, [[0, 0], [1, 1]])
        np.testing.assert_allclose(pm.masses, [2.2, 1.8])
        assert pm.empty_parts == []

    def test_starved_part_flagged_empty(self):
        a = np.zeros((2, 2, 3))
        a[..., 0] = 1.0  # parts 1 and 2 never win and have no mass
        pm = diag.rpp_argmax_map(a)
        assert pm.empty_parts == [1, 2]

    def test_part_never_argmax_is_empty_despite_mass(self):
        a = np.full((2, 2, 2), 0.5)
        a[..., 0] = 0.6
        a[..., 1] = 0.4  # part 1 holds mass but never wins a cell
        pm = diag.rpp_argmax_map(a)
        assert pm.empty_parts == [1]


class TestCollapse:
    def test_duplicates_by_near_parallel_vectors(self):
        a = np.zeros((2, 2, 2))
        a[..., 0] = 0.5
        a[..., 1] = 0.5
        a[0, 0, 0] = 0.6
        a[0, 0, 1] = 0.4
        a[1, 1, 0] = 0.4
        a[1, 1, 1] = 0.6
        g = np.array([[1.0, 1.0], [1.0001, 1.0]])
        out = diag.part_collapse(a, g)
        assert out["duplicates"] == [(0, 1)]
        assert out["fired"]

    def test_healthy_parts_do_not_fire(self):
        t, g = orthogonal_stripes()
        a = np.zeros((4, 2, 2))
        a[:2, :, 0] = 1.0
        a[2:, :, 1] = 1.0
        out = diag.part_collapse(a, g)
        assert out == {"empty": [], "duplicates": [], "fired": False}


class TestBoundaries:
    def test_clean_layering_hand_values(self):
        labels = np.repeat([0, 0, 1, 1, 2, 2], 2).reshape(6, 2)
        np.testing.assert_allclose(diag.boundary_positions(labels, 3),
                                   [2.0, 4.0])

    def test_uniform_reference(self):
        np.testing.assert_allclose(diag.uniform_boundaries(12, 4),
                                   [3.0, 6.0, 9.0])

    def test_ragged_columns_average(self):
        labels = np.array([[0, 0], [0, 1], [1, 1], [1, 1]])
        # column 0 has 2 cells below part 1, column 1 has 1
        np.testing.assert_allclose(diag.boundary_positions(labels, 2), [1.5])

    def test_shifted_band_rows(self):
        # 16-row image, 4 bands, downsampled to 8 tensor rows: boundaries at
        # image rows 4,8,12 -> tensor rows 2,4,6; a +2 shift moves each down
        # by one tensor row
        np.testing.assert_allclose(
            diag.band_boundaries_in_tensor(16, 4, 0, 8), [2.0, 4.0, 6.0])
        np.testing.assert_allclose(
            diag.band_boundaries_in_tensor(16, 4, 2, 8), [3.0, 5.0, 7.0])

    def test_shift_clipped_at_edges(self):
        out = diag.band_boundaries_in_tensor(16, 4, -16, 8)
        np.testing.assert_allclose(out, [0.0, 0.0, 0.0])

    def test_boundary_error_hand_value(self):
        labels = np.repeat([0, 1], 4).reshape(8, 1)
        assert diag.boundary_error(labels, np.array([3.0])) == pytest.approx(1.0)

    @given(shift=st.integers(-4, 4))
    def test_tensor_boundaries_track_shift_linearly(self, shift):
        base = diag.band_boundaries_in_tensor(48, 4, 0, 12)
        moved = diag.band_boundaries_in_tensor(48, 4, shift, 12)
        inside = (base + shift * 12 / 48 > 0) & (base + shift * 12 / 48 < 12)
        np.testing.assert_allclose(moved[inside],
                                   (base + shift * 12 / 48)[inside])


class TestRendering:
    def test_grid_round_trip(self, tmp_path):
        labels = np.array([[0, 1, 2], [2, 1, 0]])
        pm = diag.PartMap(labels=labels, p=3, source="nearest")
        path = tmp_path / "map.txt"
        diag.write_grid(pm, path)
        np.testing.assert_array_equal(diag.read_grid(path), labels)

    def test_png_has_map_dimensions(self, tmp_path):
        from PIL import Image
        labels = np.zeros((4, 2), dtype=int)
        pm = diag.PartMap(labels=labels, p=2, source="rpp")
        path = tmp_path / "map.png"
        diag.render_part_map(pm, path, cell=8)
        with Image.open(path) as im:
            assert im.size == (16, 32)  # (W*cell, H*cell)


class TestSweepReport:
    def _result(self, r1):
        cmc = np.full(10, r1)
        return EvalResult(cmc=cmc, mean_ap=r1 * 0.9, num_evaluated=5,
                          num_skipped=0)

    def test_rows_merge_config_and_metrics(self):
        rep = diag.sweep_report("p", [{"p": 2, "seed": 0}, {"p": 4, "seed": 0}],
                                [self._result(0.5), self._result(0.75)])
        assert rep.axis == "p"
        assert rep.rows[0]["p"] == 2
        assert rep.rows[1]["rank1"] == pytest.approx(0.75)
        assert rep.rows[1]["mAP"] == pytest.approx(0.675)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            diag.sweep_report("p", [{"p": 2}], [])

    def test_write_and_load_round_trip(self, tmp_path):
        rep = diag.sweep_report("p", [{"p": 2, "seed": 0}],
                                [self._result(0.5)])
        paths = diag.write_report(rep, tmp_path)
        assert set(paths) >= {"json", "csv", "svg"}
        back = diag.load_report(paths["json"])
        assert back.axis == rep.axis
        assert back.rows == rep.rows
        assert (tmp_path / "report.csv").read_text().startswith("p,")
