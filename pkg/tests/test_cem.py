import math

import numpy as np
import pytest

from gibbsnet import thermo
from gibbsnet.cem import (
    BinaryPhaseSplit,
    CemError,
    binodal_scan,
    curve_from_gamma,
    detect_gaps,
    lower_convex_envelope,
    refine_common_tangent,
)
from gibbsnet.thermo import delta_g_mix_curve, margules_gE, margules_ln_gamma, stability_scan


def margules_binodal_oracle(A: float) -> float:
    """Bisection on ln(x/(1-x)) + A(1-2x) = 0, the symmetric binodal equation."""
    assert A > 2.0

    def f(x):
        return math.log(x / (1.0 - x)) + A * (1.0 - 2.0 * x)

    lo, hi = 1e-12, 0.5 - 1e-9
    assert f(lo) < 0.0 < f(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def envelope_oracle(points):
    """Vertex k is on the lower envelope iff no spanning chord undercuts it."""
    n = len(points)
    verts = []
    for k in range(n):
        xk, gk = points[k]
        env = gk
        for i in range(k + 1):
            for j in range(k, n):
                xi, gi = points[i]
                xj, gj = points[j]
                if xi <= xk <= xj and xi < xj:
                    t = (xk - xi) / (xj - xi)
                    env = min(env, gi + t * (gj - gi))
        if gk - env <= 1e-12:
            verts.append(k)
    return verts


class TestLowerConvexEnvelope:
    def test_convex_parabola_keeps_everything(self):
        pts = [(x, (x - 0.3) ** 2) for x in np.linspace(0, 1, 21)]
        assert lower_convex_envelope(pts) == list(range(21))

    def test_straight_line_keeps_everything(self):
        pts = [(x, 2.0 * x - 1.0) for x in np.linspace(0, 1, 11)]
        assert lower_convex_envelope(pts) == list(range(11))

    def test_double_well_skips_bump(self):
        curve = delta_g_mix_curve(lambda x1, T: margules_gE(2.5, x1), 300.0)
        pts = list(zip(curve.xs, curve.values))
        hull = lower_convex_envelope(pts)
        assert hull == envelope_oracle(pts)
        assert len(hull) < 101  # the interior bump was skipped

    def test_matches_oracle_on_random_curves(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            xs = np.linspace(0.0, 1.0, 31)
            coeffs = rng.normal(size=4)
            gs = sum(c * np.sin((k + 1) * math.pi * xs) for k, c in enumerate(coeffs))
            pts = list(zip(xs, gs))
            assert lower_convex_envelope(pts) == envelope_oracle(pts)

    def test_too_few_points(self):
        with pytest.raises(CemError):
            lower_convex_envelope([(0.0, 0.0)])

    def test_convexity_of_kept_chain(self):
        rng = np.random.default_rng(9)
        xs = np.linspace(0.0, 1.0, 50)
        gs = rng.normal(size=50)
        pts = list(zip(xs, gs))
        hull = lower_convex_envelope(pts)
        for a, b, c in zip(hull, hull[1:], hull[2:]):
            cross = ((xs[b] - xs[a]) * (gs[c] - gs[a])
                     - (gs[b] - gs[a]) * (xs[c] - xs[a]))
            assert cross >= -1e-13  # non-negative up to the collinearity clearance


class TestDetectGaps:
    def test_ideal_curve_has_none(self):
        curve = delta_g_mix_curve(lambda x1, T: 0.0, 300.0)
        assert detect_gaps(curve) == []

    def test_margules_gap_is_symmetric_and_near_oracle(self):
        curve = delta_g_mix_curve(lambda x1, T: margules_gE(2.5, x1), 300.0)
        gaps = detect_gaps(curve)
        assert len(gaps) == 1
        (g,) = gaps
        assert g.x1_lo + g.x1_hi == pytest.approx(1.0, abs=1e-12)
        oracle = margules_binodal_oracle(2.5)
        assert abs(g.x1_lo - oracle) <= 0.01
        assert abs(g.x1_hi - (1.0 - oracle)) <= 0.01

    def test_near_critical_grid_resolution_limit(self):
        # At A=2.01 the analytic binodal is ~(0.42, 0.58); on a 0.01 grid the
        # gap may or may not resolve, but never wider than the truth + 2 steps.
        curve = delta_g_mix_curve(lambda x1, T: margules_gE(2.01, x1), 300.0)
        gaps = detect_gaps(curve)
        oracle = margules_binodal_oracle(2.01)
        if gaps:
            (g,) = gaps
            assert g.x1_lo >= oracle - 0.02
            assert g.x1_hi <= 1.0 - oracle + 0.02

    def test_mirrored_curve_gives_mirrored_gaps(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            A = float(rng.uniform(2.05, 4.0))
            shift = float(rng.uniform(-0.5, 0.5))
            ge = lambda x1, T: A * x1 * (1.0 - x1) + shift * x1 * x1 * (1.0 - x1)
            curve = delta_g_mix_curve(ge, 300.0)
            rev = thermo.DGmixCurve(curve.values[::-1].copy(), 300.0)
            gaps = detect_gaps(curve)
            mirrored = detect_gaps(rev)
            assert len(gaps) == len(mirrored)
            for g, m in zip(gaps, reversed(mirrored)):
                # mirroring is exact at the grid-index level
                assert round(100 * g.x1_lo) == 100 - round(100 * m.x1_hi)
                assert round(100 * g.x1_hi) == 100 - round(100 * m.x1_lo)
                assert g.x1_lo == pytest.approx(1.0 - m.x1_hi, abs=1e-15)
                assert g.x1_hi == pytest.approx(1.0 - m.x1_lo, abs=1e-15)

    def test_every_gap_contains_spinodal_point(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            A = float(rng.uniform(2.1, 4.0))
            ge = lambda x1, T: margules_gE(A, x1)
            gaps = detect_gaps(delta_g_mix_curve(ge, 300.0))
            scan = stability_scan(ge, 300.0)
            for g in gaps:
                inside = (scan.xs > g.x1_lo) & (scan.xs < g.x1_hi)
                assert (scan.S[inside] < 0.0).any()


def _margules_gamma(A):
    return lambda x1, T: margules_ln_gamma(A, x1)


class TestRefineCommonTangent:
    def test_margules_matches_bisection_oracle(self):
        gamma = _margules_gamma(2.5)
        (gap,) = detect_gaps(delta_g_mix_curve(lambda x1, T: margules_gE(2.5, x1), 300.0))
        refined = refine_common_tangent(gamma, 300.0, gap)
        oracle = margules_binodal_oracle(2.5)
        assert refined.x1_lo == pytest.approx(oracle, abs=1e-8)
        assert refined.x1_hi == pytest.approx(1.0 - oracle, abs=1e-8)
        assert refined.refined

    def test_isoactivity_residuals(self):
        gamma = _margules_gamma(3.0)
        (gap,) = detect_gaps(delta_g_mix_curve(lambda x1, T: margules_gE(3.0, x1), 300.0))
        r = refine_common_tangent(gamma, 300.0, gap)
        for i, (xa, xb) in enumerate([(r.x1_lo, r.x1_hi),
                                      (1.0 - r.x1_lo, 1.0 - r.x1_hi)]):
            ga = gamma(r.x1_lo, 300.0)[i]
            gb = gamma(r.x1_hi, 300.0)[i]
            assert abs(math.log(xa) + ga - math.log(xb) - gb) < 1e-10

    def test_symmetric_model_symmetric_split(self):
        gamma = _margules_gamma(2.7)
        (gap,) = detect_gaps(delta_g_mix_curve(lambda x1, T: margules_gE(2.7, x1), 300.0))
        r = refine_common_tangent(gamma, 300.0, gap)
        assert r.x1_lo + r.x1_hi == pytest.approx(1.0, abs=1e-12)

    def test_no_split_in_single_phase_region(self):
        with pytest.raises(CemError, match="no stable split"):
            refine_common_tangent(_margules_gamma(1.5), 300.0,
                                  BinaryPhaseSplit(0.2, 0.8))

    def test_random_margules_family(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            A = float(rng.uniform(2.05, 4.0))
            (gap,) = detect_gaps(delta_g_mix_curve(lambda x1, T: margules_gE(A, x1), 300.0))
            r = refine_common_tangent(_margules_gamma(A), 300.0, gap)
            oracle = margules_binodal_oracle(A)
            assert r.x1_lo == pytest.approx(oracle, abs=1e-8)
            # refined answer stays within one grid step of the hull segment
            assert gap.x1_lo - 0.0100001 <= r.x1_lo <= r.x1_hi <= gap.x1_hi + 0.0100001


class TestBinodalScan:
    def test_ucst_bracketed(self):
        # A(T) = 600/T: gap exists iff A > 2, i.e. iff T < 300
        def gamma(x1, T):
            return margules_ln_gamma(600.0 / T, x1)

        Ts = list(np.arange(280.0, 321.0, 5.0))
        scan = binodal_scan(gamma, Ts)
        assert len(scan.consolute) == 1
        t_gap, t_none, kind = scan.consolute[0]
        assert kind == "UCST"
        assert t_gap < 300.0 <= t_none

    def test_always_miscible(self):
        scan = binodal_scan(_margules_gamma(1.0), [280.0, 300.0, 320.0])
        assert all(not s for s in scan.splits)
        assert scan.consolute == []

    def test_always_split_no_consolute(self):
        scan = binodal_scan(_margules_gamma(3.0), [280.0, 300.0, 320.0])
        assert all(len(s) == 1 for s in scan.splits)
        assert scan.consolute == []

    def test_csv_export(self, tmp_path):
        from gibbsnet.cem import write_binodal_csv

        scan = binodal_scan(_margules_gamma(3.0), [280.0, 300.0])
        path = tmp_path / "binodal.csv"
        write_binodal_csv(scan, path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "T,x1_lo,x1_hi,refined"
        assert len(rows) == 3
        t, lo, hi, flag = rows[1].split(",")
        assert float(t) == 280.0 and flag == "1"
        assert 0.0 < float(lo) < float(hi) < 1.0


class TestCurveFromGamma:
    def test_consistent_with_direct_curve(self):
        direct = delta_g_mix_curve(lambda x1, T: margules_gE(2.5, x1), 300.0)
        via_gamma = curve_from_gamma(_margules_gamma(2.5), 300.0)
        assert np.allclose(direct.values, via_gamma.values, atol=1e-12)
