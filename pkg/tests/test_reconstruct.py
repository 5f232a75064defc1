import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvistereo.core import DisparityMap, ShapeError, TiltGeometry
from curvistereo.reconstruct import (
    depth_from_disparity,
    export_ply,
    read_ply,
    refine_disparity,
    reproject,
    trace_edges,
    triangulate,
)
from curvistereo.synth import RenderConfig, generate_scene, gt_disparity


def dec_sin(x: Decimal) -> Decimal:
    """Taylor series for sine in 50-digit decimal arithmetic."""
    getcontext().prec = 50
    term, total, k = x, x, 1
    while abs(term) > Decimal(10) ** -45:
        term *= -x * x / ((2 * k) * (2 * k + 1))
        total += term
        k += 1
    return total


def dec_pi() -> Decimal:
    getcontext().prec = 50
    return Decimal("3.14159265358979323846264338327950288419716939937510")


def row_case(u, d, det_cols, w=20):
    disp = DisparityMap(np.zeros((1, w)), np.zeros((1, w), bool))
    disp.disp[0, u] = d
    disp.mask[0, u] = True
    det_l = np.zeros((1, w))
    det_l[0, u] = 1.0
    det_r = np.zeros((1, w))
    for c, val in det_cols.items():
        det_r[0, c] = val
    return disp, det_l, det_r


class TestRefine:
    def test_on_detection_unchanged(self):
        disp, dl, dr = row_case(5, 3.0, {8: 1.0})
        out = refine_disparity(disp, dl, dr)
        assert out.mask[0, 5] and out.disp[0, 5] == 3.0

    def test_snap_two_right(self):
        # symmetric response around column 10 so the sub-pixel term vanishes
        disp, dl, dr = row_case(5, 3.0, {9: 0.3, 10: 1.0, 11: 0.3})
        out = refine_disparity(disp, dl, dr)
        assert out.disp[0, 5] == pytest.approx(5.0, abs=1e-12)

    def test_subpixel_fit(self):
        disp, dl, dr = row_case(5, 3.0, {9: 0.2, 10: 1.0, 11: 0.6})
        out = refine_disparity(disp, dl, dr)
        r_m, r_0, r_p = 0.2, 1.0, 0.6
        want = 10 + 0.5 * (r_m - r_p) / (r_m - 2 * r_0 + r_p) - 5
        assert out.disp[0, 5] == pytest.approx(want, abs=1e-12)

    def test_no_candidate_removed(self):
        disp, dl, dr = row_case(5, 3.0, {15: 1.0})
        out = refine_disparity(disp, dl, dr)
        assert not out.mask.any()

    def test_shape_mismatch(self):
        disp, dl, dr = row_case(5, 3.0, {8: 1.0})
        with pytest.raises(ShapeError):
            refine_disparity(disp, dl, dr[:, :10])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_never_grows_and_bounded_move(self, seed):
        rng = np.random.default_rng(seed)
        h, w = 6, 24
        disp = DisparityMap(rng.uniform(-4, 4, (h, w)), rng.random((h, w)) < 0.4)
        dl = rng.random((h, w))
        dr = rng.random((h, w))
        out = refine_disparity(disp, dl, dr)
        assert out.count <= disp.count
        assert np.all(~out.mask | disp.mask)
        moved = np.abs(out.disp - disp.disp)[out.mask]
        assert np.all(moved <= 3 + 0.5 + 1e-9)


class TestDepth:
    def test_sixty_degrees(self):
        assert depth_from_disparity(2.0, 60.0) == pytest.approx(2.0, abs=1e-15)

    def test_zero(self):
        assert depth_from_disparity(0.0, 8.0) == 0.0

    def test_high_precision_oracle(self):
        half = Decimal(4) * dec_pi() / Decimal(180)
        want = Decimal(13) / (2 * dec_sin(half))
        assert depth_from_disparity(13.0, 8.0) == pytest.approx(float(want), rel=1e-15)

    def test_phi_range(self):
        for phi in (0.0, -3.0, 180.0):
            with pytest.raises(ValueError):
                depth_from_disparity(1.0, phi)

    @given(st.floats(-50, 50), st.floats(0.5, 120))
    def test_linear_inverse(self, d, phi):
        z = depth_from_disparity(d, phi)
        assert z * 2 * math.sin(math.radians(phi) / 2) == pytest.approx(d, abs=1e-12)
        np.testing.assert_allclose(depth_from_disparity(np.array([d, 2 * d]), phi), [z, 2 * z], rtol=1e-12, atol=1e-12)


class TestTriangulate:
    def test_single_pixel(self):
        disp = DisparityMap(np.zeros((30, 30)), np.zeros((30, 30), bool))
        disp.disp[20, 10] = 2.0
        disp.mask[20, 10] = True
        rec = triangulate(disp, TiltGeometry(phi=60.0))
        np.testing.assert_allclose(rec.points, [[11.0, 20.0, 2.0]], atol=1e-12)

    def test_zero_disparity(self):
        disp = DisparityMap(np.zeros((5, 5)), np.ones((5, 5), bool))
        assert np.all(triangulate(disp, TiltGeometry()).points[:, 2] == 0)

    def test_empty(self):
        rec = triangulate(DisparityMap(np.zeros((4, 4)), np.zeros((4, 4), bool)), TiltGeometry())
        assert len(rec) == 0 and rec.points.shape == (0, 3)

    @pytest.mark.parametrize("phi", [2.0, 4.0, 8.0, 12.0])
    def test_round_trip_through_views(self, phi):
        cfg = RenderConfig()
        scene = generate_scene(np.random.default_rng(int(phi)), 3)
        gt = gt_disparity(scene, phi, cfg)
        rec = triangulate(gt, TiltGeometry(phi=phi), scene.cx)
        left = reproject(rec, -phi / 2)
        right = reproject(rec, phi / 2)
        pix = rec.pixels.astype(np.float64)
        rms_l = math.sqrt(np.mean(np.sum((left - pix) ** 2, axis=1)))
        pix_r = pix + np.column_stack([rec.disparities, np.zeros(len(pix))])
        rms_r = math.sqrt(np.mean(np.sum((right - pix_r) ** 2, axis=1)))
        assert rms_l < 0.5 and rms_r < 0.5


class TestReproject:
    def rec(self):
        disp = DisparityMap(np.zeros((8, 8)), np.zeros((8, 8), bool))
        disp.disp[[1, 3, 5], [2, 4, 6]] = [1.0, -2.0, 3.0]
        disp.mask[[1, 3, 5], [2, 4, 6]] = True
        return triangulate(disp, TiltGeometry(phi=8.0), cx=3.5)

    def test_identity(self):
        r = self.rec()
        np.testing.assert_allclose(reproject(r, 0.0), r.points[:, :2], atol=1e-12)

    def test_quarter_turn(self):
        r = self.rec()
        np.testing.assert_allclose(reproject(r, 90.0)[:, 0], r.points[:, 2] + 3.5, atol=1e-12)


class TestPly:
    def test_empty(self, tmp_path):
        rec = triangulate(DisparityMap(np.zeros((4, 4)), np.zeros((4, 4), bool)), TiltGeometry())
        export_ply(rec, tmp_path / "e.ply")
        text = (tmp_path / "e.ply").read_text()
        assert "element vertex 0" in text
        v, e = read_ply(tmp_path / "e.ply")
        assert v.shape == (0, 3) and e.shape == (0, 2)

    def test_three_points_round_trip(self, tmp_path):
        disp = DisparityMap(np.zeros((5, 5)), np.zeros((5, 5), bool))
        disp.disp[1, 1:4] = [0.3, 0.7, 1.1]
        disp.mask[1, 1:4] = True
        rec = triangulate(disp, TiltGeometry(phi=8.0))
        export_ply(rec, tmp_path / "p.ply")
        assert "element vertex 3" in (tmp_path / "p.ply").read_text()
        v, e = read_ply(tmp_path / "p.ply")
        np.testing.assert_array_equal(v, rec.points.astype(np.float32))
        assert len(e) == 2

    def test_not_ply(self, tmp_path):
        (tmp_path / "x.ply").write_text("hello\n")
        with pytest.raises(ValueError):
            read_ply(tmp_path / "x.ply")


class TestTraceEdges:
    def test_line_and_separate_blob(self):
        pix = np.array([[0, 0], [1, 1], [2, 2], [3, 3], [10, 10]])
        edges = trace_edges(pix)
        assert len(edges) == 3
        linked = {tuple(sorted(e)) for e in edges.tolist()}
        assert linked == {(0, 1), (1, 2), (2, 3)}
