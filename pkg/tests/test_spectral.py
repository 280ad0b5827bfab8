import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snslab.spectral import (H1, H_HALF, L2, BasisMismatchError, NormSpec, SpectralField, biot_savart, build_basis,
                             curl, dump_field, fractional_norm_dual, inner, leray_project, load_field, norm,
                             random_field, read_field, transport_term, write_field)


# ---------------------------------------------------------------------------
# independent oracles on full (k1, k2) coefficient tables
# ---------------------------------------------------------------------------

def full_table(basis, c):
    """Dictionary k -> complex coefficient rebuilt from the half layout."""
    M = basis.grid_size
    N = basis.n_modes
    out = {}
    for k1 in range(-N, N + 1):
        for k2 in range(-N, N + 1):
            out[(k1, k2)] = c[k1 % M, k2] if k2 >= 0 else np.conj(c[(-k1) % M, -k2])
    return out


def convolution_transport(basis, xi):
    """``u . grad xi`` by the direct double sum over wavenumber pairs, all inside the 2/3 box."""
    K = basis.dealias_cutoff
    tab = full_table(basis, xi)
    box = [(a, b) for a in range(-K, K + 1) for b in range(-K, K + 1)]
    vel = {}
    for p in box:
        k2 = p[0] ** 2 + p[1] ** 2
        psi = 0.0 if k2 == 0 else -tab[p] / k2
        vel[p] = (-1j * p[1] * psi, 1j * p[0] * psi)
    out = {}
    for p in box:
        up = vel[p]
        for q in box:
            k = (p[0] + q[0], p[1] + q[1])
            if max(abs(k[0]), abs(k[1])) > K:
                continue
            out[k] = out.get(k, 0.0) + (up[0] * 1j * q[0] + up[1] * 1j * q[1]) * tab[q]
    return out


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def test_transport_matches_convolution_oracle():
    b = build_basis(8)
    rng = np.random.default_rng(0)
    for _ in range(3):
        xi = random_field(b, "scalar", rng)
        got = transport_term(biot_savart(xi), xi).coeffs
        ref = convolution_transport(b, xi.coeffs)
        table = full_table(b, got)
        scale = max(abs(v) for v in ref.values())
        err = max(abs(table[k] - v) for k, v in ref.items())
        outside = max(abs(v) for k, v in table.items() if k not in ref)
        assert err <= 1e-12 * scale
        assert outside == 0.0


def test_taylor_green_operators():
    b = build_basis(16)
    u = SpectralField.from_function(b, lambda x, y: np.stack([-np.sin(x) * np.cos(y), np.cos(x) * np.sin(y)]))
    xi = curl(u)
    X, Y = b.grid
    assert np.abs(xi.physical() + 2 * np.sin(X) * np.sin(Y)).max() < 1e-13
    assert np.abs(biot_savart(xi).coeffs - u.coeffs).max() < 1e-14
    assert np.abs(transport_term(u, xi).physical()).max() < 1e-13


def test_transport_orthogonality(basis):
    rng = np.random.default_rng(basis.n_modes)
    for _ in range(20):
        xi = random_field(basis, "scalar", rng)
        t = transport_term(biot_savart(xi), xi)
        assert abs(inner(t, xi)) <= 1e-12 * norm(t, L2) * norm(xi, L2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.sampled_from([4, 8, 16]))
def test_leray_projection_properties(seed, n):
    b = build_basis(n)
    v = random_field(b, "vector2", np.random.default_rng(seed), divergence_free=False)
    p = leray_project(v)
    assert p.divergence_defect() <= 1e-14
    assert np.abs(leray_project(p).coeffs - p.coeffs).max() <= 1e-14 * max(1.0, np.abs(p.coeffs).max())
    # orthogonal projection: |Pv| <= |v| and (v - Pv) _|_ Pv
    assert norm(p, L2) <= norm(v, L2) * (1 + 1e-14)
    assert abs(inner(v - p, p)) <= 1e-12 * norm(v, L2) ** 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.sampled_from([4, 8, 16]))
def test_curl_biot_savart_round_trip(seed, n):
    b = build_basis(n)
    xi = random_field(b, "scalar", np.random.default_rng(seed))
    u = biot_savart(xi)
    assert u.divergence_defect() <= 1e-14
    assert np.abs(curl(u).coeffs - xi.coeffs).max() <= 1e-13 * np.abs(xi.coeffs).max()
    assert xi.hermitian_defect() <= 1e-15 * np.abs(xi.coeffs).max()
    assert not np.iscomplexobj(xi.physical())


def test_physical_round_trip_and_parseval(basis):
    rng = np.random.default_rng(3)
    f = random_field(basis, "scalar", rng)
    g = SpectralField.from_physical(basis, f.physical())
    assert np.abs(g.coeffs - f.coeffs).max() < 1e-13
    quad = (2 * np.pi) ** 2 * np.mean(f.physical() ** 2)
    assert math.isclose(norm(f, L2) ** 2, quad, rel_tol=1e-12)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def test_norm_closed_forms():
    b = build_basis(8)
    sinx = SpectralField.from_function(b, lambda x, y: np.sin(x))
    assert math.isclose(norm(sinx, L2), math.pi * math.sqrt(2), rel_tol=1e-13)
    # H^1: (1 + 1) |sin x|^2 = 4 pi^2
    assert math.isclose(norm(sinx, H1), 2 * math.pi, rel_tol=1e-13)
    assert math.isclose(norm(sinx, H_HALF), math.sqrt(math.sqrt(2)) * math.pi * math.sqrt(2), rel_tol=1e-13)
    sin4 = SpectralField.from_function(b, lambda x, y: np.sin(4 * x))
    assert math.isclose(fractional_norm_dual(sin4, 1.0), math.pi * math.sqrt(2) / 16, rel_tol=1e-12)
    # L^4 of sin x: (int sin^4)^(1/4) = (3 pi^2 / 2)^(1/4)
    assert math.isclose(norm(sinx, NormSpec("Lq", q=4)), (1.5 * math.pi**2) ** 0.25, rel_tol=1e-12)
    # sup is sampled on the collocation grid, which misses the peak by half a cell
    M = b.grid_size
    sup = norm(sinx, NormSpec("sup"))
    assert math.cos(math.pi / M) - 1e-14 <= sup <= 1.0


def test_norm_errors():
    b = build_basis(8)
    f = random_field(b, "scalar", np.random.default_rng(1))
    with pytest.raises(ValueError, match="quadrature accuracy"):
        norm(f, NormSpec("Lq", q=100))
    with pytest.raises(ValueError, match="beta > 1/2"):
        fractional_norm_dual(f, 0.5)
    with pytest.raises(ValueError):
        NormSpec("W")


def test_biot_savart_rejects_mean():
    b = build_basis(8)
    c = np.zeros(b.spectral_shape, complex)
    c[0, 0] = 1.0
    with pytest.raises(ValueError, match="non-mean-zero"):
        biot_savart(SpectralField(b, "scalar", c))


def test_basis_validation_and_mismatch():
    with pytest.raises(ValueError, match="too small"):
        build_basis(3)
    a = random_field(build_basis(8), "scalar", np.random.default_rng(0))
    c = random_field(build_basis(16), "scalar", np.random.default_rng(0))
    with pytest.raises(BasisMismatchError):
        a + c


def test_dealias_exact_on_grid():
    # the 2/3 cutoff on the 2N+2 grid is alias free: the product of two cutoff
    # fields evaluated on the grid equals the exact product's truncation
    b = build_basis(8)
    K = b.dealias_cutoff
    assert K == 5
    assert b.grid_size >= 3 * K + 1


# ---------------------------------------------------------------------------
# dump format
# ---------------------------------------------------------------------------

def test_dump_round_trip(tmp_path):
    b = build_basis(6)
    rng = np.random.default_rng(5)
    for kind in ("scalar", "vector2"):
        f = random_field(b, kind, rng)
        g = load_field(dump_field(f))
        assert g.kind == kind and g.basis == b
        assert np.array_equal(g.coeffs, f.coeffs)
    write_field(f, tmp_path / "f.txt")
    assert np.array_equal(read_field(tmp_path / "f.txt").coeffs, f.coeffs)


def test_dump_rejects_bad_input():
    b = build_basis(4)
    text = dump_field(random_field(b, "scalar", np.random.default_rng(0)))
    lines = text.splitlines()
    # break Hermitian symmetry on one mode
    i = next(i for i, ln in enumerate(lines) if ln.startswith("1 2 0"))
    parts = lines[i].split()
    parts[3] = "5.0"
    bad = "\n".join(lines[:i] + [" ".join(parts)] + lines[i + 1:])
    with pytest.raises(ValueError, match="not Hermitian"):
        load_field(bad)
    with pytest.raises(ValueError, match="zero mode"):
        load_field(text + "0 0 0 1.0 0.0\n")
    with pytest.raises(ValueError, match="header"):
        load_field("1 0 0 0 0\n")


# ---------------------------------------------------------------------------
# inequalities and approximate cancellations
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("q", [4, 6])
def test_lq_transport_cancellation_up_to_dealiasing(q):
    b = build_basis(16)
    rng = np.random.default_rng(q)
    for _ in range(10):
        u = random_field(b, "vector2", rng, max_mode=5, decay=2.0)
        xi = random_field(b, "scalar", rng, max_mode=5, decay=2.0)
        t = transport_term(u, xi).physical()
        x = xi.physical()
        pairing = (2 * np.pi) ** 2 * np.mean(t * np.abs(x) ** (q - 2) * x)
        scale = norm(u, L2) * norm(xi, NormSpec("Lq", q=q)) ** (q - 1)
        assert abs(pairing) <= 1e-8 * scale


def test_gradient_curl_comparison():
    b = build_basis(16)
    rng = np.random.default_rng(8)
    ratios = {q: [] for q in (2, 4, 8, 16)}
    for _ in range(20):
        u = biot_savart(random_field(b, "scalar", rng, max_mode=6, decay=1.0))
        xi = curl(u)
        for q in ratios:
            g = float(b.grad_lq(u.coeffs, q))
            ratios[q].append(g / (q * norm(xi, NormSpec("Lq", q=q))))
    C = max(max(v) for v in ratios.values())
    # q = 2 is an identity: |grad u|_2 = |curl u|_2 for divergence-free u
    assert np.allclose(np.array(ratios[2]) * 2, 1.0, rtol=1e-12)
    assert C <= 0.5 + 1e-12


def test_interpolation_inequality(basis):
    rng = np.random.default_rng(12)
    for _ in range(20):
        f = random_field(basis, "scalar", rng, decay=rng.uniform(0, 2))
        assert norm(f, H_HALF) ** 2 <= norm(f, L2) * norm(f, H1) * (1 + 1e-13)
    shell = SpectralField.from_function(basis, lambda x, y: np.cos(x + 2 * y))
    assert math.isclose(norm(shell, H_HALF) ** 2, norm(shell, L2) * norm(shell, H1), rel_tol=1e-13)


@pytest.mark.parametrize("n", [8, 16, 32, 64])
def test_dual_norm_of_zero_and_parseval(n):
    b = build_basis(n)
    assert fractional_norm_dual(SpectralField.zeros(b), 1.0) == 0.0
    f = random_field(b, "scalar", np.random.default_rng(0))
    back = SpectralField.from_physical(b, f.physical()).physical()
    assert np.abs(back - f.physical()).max() <= 1e-12 * np.abs(f.physical()).max()
