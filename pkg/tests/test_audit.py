import json
import math

import numpy as np
import pytest

from snslab.audit import (admissible, dissipation_certificate, energy_certificate, enstrophy_certificate,
                          lq_vorticity_certificate, mean_stderr, ratio_verdict, run_ensemble_grid,
                          skeleton_gradient_growth, time_regularity_certificate, time_regularity_norm,
                          time_seminorm_from_gram, uniqueness_contraction_probe)
from snslab.dynamics import SimulationParams, TrajectoryRecord, catalog_control, initial_vorticity, taylor_green
from snslab.noise import build_covariance, make_coefficient
from snslab.rng import Stream
from snslab.spectral import SpectralField, build_basis, random_field

NU_GRID = (1e-1, 1e-2, 1e-3, 1e-4)


def noisy_params(n=8, T=0.2, dt=0.01, zeta=None):
    b = build_basis(n)
    cov = build_covariance(b, 2.0, 1.0, 3)
    zeta = initial_vorticity(b, "random_smooth", 1.0, 3, 0) if zeta is None else zeta
    return SimulationParams(b, 0.1, T, dt, zeta, sigma=make_coefficient(b, "constant:1.0"), cov=cov, noise=True)


# ---------------------------------------------------------------------------
# verdict logic
# ---------------------------------------------------------------------------

def test_ratio_verdict_cases():
    se0 = np.zeros(4)
    r, ri, v = ratio_verdict(np.array([1.0, 1.5, 1.9, 1.2]), se0)
    assert v == "pass" and math.isclose(r[0], 1.9)
    assert ratio_verdict(np.array([1.0, 3.0, 1.0, 1.0]), se0)[2] == "fail"
    # interval straddles the bound: never a silent pass
    assert ratio_verdict(np.array([1.0, 1.9, 1.0, 1.0]), np.array([0.0, 0.2, 0.0, 0.0]))[2] == "inconclusive"
    assert ratio_verdict(np.zeros(4), se0)[2] == "pass"
    assert ratio_verdict(np.array([1.0, np.nan, 1.0, 1.0]), se0)[2] == "fail"
    assert ratio_verdict(np.array([0.0, 1.0, 1.0, 1.0]), se0)[2] == "fail"
    # per-control columns: one failing column fails the certificate
    m = np.array([[1.0, 1.0], [1.1, 5.0]])
    assert ratio_verdict(m, np.zeros_like(m))[2] == "fail"


def test_mean_stderr():
    m, s = mean_stderr(np.array([1.0, 2.0, 3.0, 4.0]))
    assert m == 2.5 and math.isclose(s, math.sqrt(5 / 3) / 2)
    assert mean_stderr(np.array([3.0])) == (3.0, 0.0)


def test_admissible():
    cov = build_covariance(build_basis(8), 2.0, 1.0, 4)
    h = catalog_control("random", cov, 1.0, 3.0)
    assert admissible(h, 3.0) and not admissible(h, 2.9)


# ---------------------------------------------------------------------------
# deterministic oracles
# ---------------------------------------------------------------------------

def test_zero_solution_certificates_are_zero():
    b = build_basis(8)
    p = SimulationParams(b, 0.1, 0.2, 0.01, SpectralField.zeros(b))
    for cert in (energy_certificate(p, NU_GRID), dissipation_certificate(p, NU_GRID),
                 enstrophy_certificate(p, NU_GRID), lq_vorticity_certificate(p, NU_GRID, q=4, q_fit=(2, 4))):
        assert np.all(cert.mean == 0) and cert.verdict == "pass"


def test_dissipation_linear_in_nu_for_smooth_run():
    b = build_basis(16)
    p = SimulationParams(b, 0.1, 1.0, 5e-3, initial_vorticity(b, "random_smooth", 1.0, 4, 1))
    cert = dissipation_certificate(p, NU_GRID)
    assert np.all(cert.mean >= 0)
    slope = np.polyfit(np.log(NU_GRID), np.log(cert.mean[:, 0]), 1)[0]
    assert abs(slope - 1) <= 0.1
    # hence the max/min ratio over four decades cannot stay within 2
    assert cert.verdict == "fail"


def test_taylor_green_enstrophy_statistics():
    b = build_basis(8)
    zeta = taylor_green(b)
    p = SimulationParams(b, 0.1, 0.5, 0.01, zeta)
    cert = enstrophy_certificate(p, NU_GRID)
    u_v = math.sqrt(float(b.hs_sq(b.biot_savart(zeta.coeffs), 1.0, vector=True)))
    assert np.allclose(cert.extra["sup_normV"]["mean"][:, 0], u_v**2, rtol=1e-14)
    assert np.allclose(cert.mean[:, 0], float(b.l2sq(zeta.coeffs)), rtol=1e-14)


def test_elliptic_identity(basis):
    rng = np.random.default_rng(5)
    for _ in range(10):
        u = random_field(basis, "vector2", rng)
        lap = np.sqrt(basis.l2sq(u.coeffs * basis.ksq, vector=True))
        grad_xi = np.sqrt(basis.l2sq(basis.gradient(basis.curl(u.coeffs)), vector=True))
        assert abs(lap - grad_xi) <= 1e-12 * lap


def test_lq_certificate_skeleton_conservation():
    b = build_basis(16)
    zeta = initial_vorticity(b, "random_smooth", 1.0, 4, 2)
    p = SimulationParams(b, 0.0, 0.5, 2e-3, zeta)
    # nu -> 0 on this grid is the inviscid skeleton with h = 0
    cert = lq_vorticity_certificate(p, (1e-10, 1e-11, 1e-12), q=4, q_fit=(2, 4, 8))
    xq = float(b.lq(zeta.coeffs, 4)) ** 4
    assert np.allclose(cert.mean[:, 0], xq, rtol=1e-6)
    g = skeleton_gradient_growth(p, None, (2, 4, 8, 16))
    assert g["slope"] <= 1.0 and np.all(np.isfinite(g["sup_grad_lq"]))
    with pytest.raises(ValueError):
        lq_vorticity_certificate(p, NU_GRID, q=3)


def test_gradient_to_curl_ratio_bounded_in_q(basis):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10):
        u = basis.biot_savart(random_field(basis, "scalar", rng, decay=1.5).coeffs)
        xi = basis.curl(u)
        for q in (2, 4, 8, 16):
            worst = max(worst, float(basis.grad_lq(u, q)) / (q * float(basis.lq(xi, q))))
    assert worst <= 1.0


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_grid():
    p = noisy_params()
    grid = run_ensemble_grid(p, NU_GRID, [None], 64, Stream(3), q_set=(2, 4))
    return p, grid


def test_ensemble_certificates_on_shared_grid(small_grid):
    p, grid = small_grid
    e1 = energy_certificate(grid=grid)
    en1 = enstrophy_certificate(grid=grid)
    lq2 = lq_vorticity_certificate(grid=grid, q=2)
    assert e1.verdict == "pass" and en1.verdict == "pass"
    # q = 2 reduces to the enstrophy statistic, sample by sample
    assert np.abs(en1.mean - lq2.mean).max() <= 4 * en1.stderr.max()
    assert np.allclose(en1.mean, lq2.mean, rtol=1e-12)
    d = json.loads(json.dumps(e1.to_dict()))
    assert d["bound_id"] == "energy_p1" and len(d["ci_lo"]) == len(NU_GRID)


def test_ensemble_is_reproducible(small_grid):
    p, grid = small_grid
    again = run_ensemble_grid(p, NU_GRID[:2], [None], 64, Stream(3), q_set=(2, 4))
    for a in range(2):
        for k, v in again.point(a, 0).series.items():
            assert np.array_equal(v, grid.point(a, 0).series[k])


def test_ensemble_rejects_inadmissible_control():
    p = noisy_params()
    h = catalog_control("constant_mode", p.cov, p.T, 5.0)
    with pytest.raises(ValueError, match="outside S_M"):
        run_ensemble_grid(p, NU_GRID, [h], 4, Stream(0), M=4.0)


def test_blow_up_is_reported_as_failure():
    p = noisy_params(dt=0.03)
    h = catalog_control("constant_mode", p.cov, p.T, 1e5)
    cert = energy_certificate(p, NU_GRID, [h], n_samples=2, stream=Stream(0))
    assert cert.verdict == "fail" and "step" in cert.message


# ---------------------------------------------------------------------------
# time regularity
# ---------------------------------------------------------------------------

def linear_record(n_t=201, T=1.0):
    b = build_basis(8)
    f = initial_vorticity(b, "random_smooth", 1.0, 3, 4).coeffs
    t = np.linspace(0, T, n_t)
    snaps = t[:, None, None] * f[None]
    return TrajectoryRecord(t, {}, t, snaps, b), b, f


def test_time_seminorm_closed_form():
    rec, b, f = linear_record()
    norm_f = math.sqrt(float(b.l2sq(b.biot_savart(f), vector=True)))
    # int int |t - s|^4 |f|^4 / |t - s|^(1 + 1) ds dt = |f|^4 T^4 / 6
    from snslab.audit import _gram
    gram = _gram(b, rec.snapshots[None], "H")[0]
    semi = time_seminorm_from_gram(gram, rec.snapshot_times, 0.25, 4)
    assert abs(semi / (norm_f**4 / 6) - 1) <= 0.01
    full = time_regularity_norm(rec, 0.25, 4)
    assert math.isclose(full - semi, norm_f**4 / 5, rel_tol=1e-3)


def test_time_seminorm_constant_and_errors():
    b = build_basis(8)
    f = initial_vorticity(b, "random_smooth", 1.0, 3, 4).coeffs
    t = np.linspace(0, 1, 21)
    rec = TrajectoryRecord(t, {}, t, np.broadcast_to(f, (21, *f.shape)).copy(), b)
    from snslab.audit import _gram
    gram = _gram(b, rec.snapshots[None], "H")[0]
    assert time_seminorm_from_gram(gram, t, 0.25, 2) == 0.0
    with pytest.raises(ValueError):
        time_seminorm_from_gram(gram, t, 0.5, 2)
    with pytest.raises(ValueError, match="uniform"):
        time_seminorm_from_gram(gram, t**2, 0.25, 2)


def test_time_regularity_certificate_runs():
    p = noisy_params(T=0.2, dt=0.01)
    cert = time_regularity_certificate(p, NU_GRID, n_samples=32, stream=Stream(1), gram_stride=2)
    assert np.all(np.isfinite(cert.mean)) and cert.verdict == "pass"


# ---------------------------------------------------------------------------
# skeleton uniqueness
# ---------------------------------------------------------------------------

def skeleton_params(T=0.5):
    b = build_basis(16)
    cov = build_covariance(b, 2.0, 1.0, 4)
    zeta = initial_vorticity(b, "random_smooth", 1.0, 4, 0)
    ctrl = catalog_control("constant_mode", cov, T, 4.0)
    return SimulationParams(b, 0.0, T, 5e-3, zeta, sigma=make_coefficient(b), cov=cov, control=ctrl)


def test_uniqueness_twin_and_perturbed():
    p = skeleton_params()
    twin = uniqueness_contraction_probe(p, None)
    assert twin.twin and twin.passed and twin.distance.max() <= 1e-10
    delta = random_field(p.basis, "scalar", np.random.default_rng(0), max_mode=4) * 1e-6
    r1 = uniqueness_contraction_probe(p, delta)
    r2 = uniqueness_contraction_probe(p, delta * 2.0)
    assert r1.passed and r1.residual <= 0.1
    assert np.all(r1.growth <= np.exp(r1.envelope_rate * r1.times) * (1 + 1e-12))
    early = slice(0, 11)
    assert np.all(np.abs(r2.distance[early] / r1.distance[early] - 2) <= 0.1)
