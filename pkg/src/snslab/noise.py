"""Trace-class Wiener forcing and Nemytski noise coefficients.

The covariance eigenbasis consists of real divergence-free Fourier velocity
modes. For each wavenumber ``k`` in the upper half plane there are two
eigenfunctions,

    e_{k,cos}(x) = tau_k sqrt(2) cos(k.x) / (2 pi),
    e_{k,sin}(x) = tau_k sqrt(2) sin(k.x) / (2 pi),      tau_k = k_perp / |k|,

both with eigenvalue ``q_k = amplitude * |k|^(-2 alpha)``. Coordinates in
this basis are ordered ``[cos modes..., sin modes...]``. Control paths and
radonifying estimates work in the H0-orthonormal basis ``sqrt(q_j) e_j``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .rng import Stream, ensemble_normals
from .spectral import TWO_PI, SpectralBasis, SpectralField, read_field

ALPHA_MIN = 1.5
_S0 = math.sqrt(2.0) / (4.0 * math.pi)  # Fourier amplitude of sqrt(2) cos(k.x) / (2 pi)


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Eigen-decomposition of Q on the modes ``0 < |k|_inf <= mode_cutoff``.

    ``modes`` optionally restricts the index set to an explicit list of
    wavenumbers (either member of a +-k pair may be given).
    """

    basis: SpectralBasis
    alpha: float = 2.0
    amplitude: float = 1.0
    mode_cutoff: int | None = None
    modes: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.mode_cutoff is None:
            object.__setattr__(self, "mode_cutoff", self.basis.n_modes)
        if not 1 <= self.mode_cutoff <= self.basis.n_modes:
            raise ValueError("noise mode cutoff must lie in [1, n_modes]")

    @functools.cached_property
    def wavenumbers(self) -> np.ndarray:
        """Half-plane wavenumbers, shape ``(n_k, 2)``."""
        if self.modes is not None:
            ks = set()
            for k1, k2 in self.modes:
                k1, k2 = int(k1), int(k2)
                if (k1, k2) == (0, 0) or max(abs(k1), abs(k2)) > self.basis.n_modes:
                    raise ValueError(f"noise mode ({k1},{k2}) outside the basis")
                if k2 < 0 or (k2 == 0 and k1 < 0):
                    k1, k2 = -k1, -k2
                ks.add((k1, k2))
            return np.array(sorted(ks, key=lambda k: (k[0] ** 2 + k[1] ** 2, k)), dtype=int)
        n = self.mode_cutoff
        ks = [(k1, k2) for k1 in range(-n, n + 1) for k2 in range(0, n + 1)
              if k2 > 0 or k1 > 0]
        return np.array(sorted(ks, key=lambda k: (k[0] ** 2 + k[1] ** 2, k)), dtype=int)

    @property
    def n_k(self) -> int:
        return len(self.wavenumbers)

    @property
    def n_eig(self) -> int:
        return 2 * self.n_k

    @functools.cached_property
    def k_weights(self) -> np.ndarray:
        k = self.wavenumbers
        return self.amplitude * np.sum(k**2, axis=1).astype(float) ** (-self.alpha)

    @functools.cached_property
    def weights(self) -> np.ndarray:
        """Eigenvalues ``q_j`` in coordinate order."""
        return np.concatenate([self.k_weights, self.k_weights])

    @functools.cached_property
    def eig_wavenumbers(self) -> np.ndarray:
        return np.concatenate([self.wavenumbers, self.wavenumbers])

    @property
    def trace(self) -> float:
        return float(self.weights.sum())

    @property
    def gradient_trace(self) -> float:
        """``sum_j q_j |k_j|^2``."""
        return float(np.sum(self.weights * np.sum(self.eig_wavenumbers**2, axis=1)))

    @property
    def q_max(self) -> float:
        return float(self.weights.max())

    @functools.cached_property
    def _scatter(self):
        M = self.basis.grid_size
        k = self.wavenumbers
        norm_k = np.sqrt(np.sum(k**2, axis=1))
        tau = np.stack([-k[:, 1], k[:, 0]]) / norm_k  # (2, n_k)
        i1 = k[:, 0] % M
        i2 = k[:, 1]
        mirror = np.nonzero(k[:, 1] == 0)[0]
        return tau, i1, i2, mirror, (-k[mirror, 0]) % M

    def coords_to_coeffs(self, coords: np.ndarray) -> np.ndarray:
        """Velocity coefficients of ``sum_j coords_j e_j``; coords shape ``(..., n_eig)``."""
        coords = np.asarray(coords, dtype=float)
        tau, i1, i2, mirror, m1 = self._scatter
        z = _S0 * (coords[..., : self.n_k] - 1j * coords[..., self.n_k:])
        out = np.zeros((*coords.shape[:-1], 2, *self.basis.spectral_shape), dtype=complex)
        for comp in range(2):
            vals = tau[comp] * z
            out[..., comp, i1, i2] = vals
            out[..., comp, m1, 0] = np.conj(vals[..., mirror])
        return out

    def coeffs_to_coords(self, c: np.ndarray) -> np.ndarray:
        """Projections ``(u, e_j)_H`` of velocity coefficients ``c``."""
        tau, i1, i2, _, _ = self._scatter
        proj = tau[0] * c[..., 0, i1, i2] + tau[1] * c[..., 1, i1, i2]
        scale = TWO_PI**2 * 2.0 * _S0
        return np.concatenate([scale * proj.real, -scale * proj.imag], axis=-1)

    def eigenfunction(self, j: int) -> SpectralField:
        coords = np.zeros(self.n_eig)
        coords[j] = 1.0
        return SpectralField(self.basis, "vector2", self.coords_to_coeffs(coords))

    def h0_to_coeffs(self, h: np.ndarray) -> np.ndarray:
        """Velocity coefficients of ``sum_j h_j sqrt(q_j) e_j`` (H0-orthonormal coordinates)."""
        return self.coords_to_coeffs(np.asarray(h) * np.sqrt(self.weights))

    def index_of(self, k1: int, k2: int, parity: str = "cos") -> int:
        if k2 < 0 or (k2 == 0 and k1 < 0):
            k1, k2 = -k1, -k2
            # sin(-k.x) = -sin(k.x): same eigenfunction up to sign
        hits = np.nonzero((self.wavenumbers[:, 0] == k1) & (self.wavenumbers[:, 1] == k2))[0]
        if hits.size == 0:
            raise KeyError(f"mode ({k1},{k2}) not in covariance")
        return int(hits[0]) + (0 if parity == "cos" else self.n_k)


def build_covariance(basis: SpectralBasis, alpha: float = 2.0, amplitude: float = 1.0,
                     mode_cutoff: int | None = None, modes=None) -> CovarianceSpec:
    if alpha < ALPHA_MIN:
        raise ValueError(f"covariance not trace-class-stable under refinement (alpha={alpha} < {ALPHA_MIN})")
    if not amplitude > 0:
        raise ValueError("covariance amplitude must be positive")
    if modes is not None:
        modes = tuple((int(a), int(b)) for a, b in modes)
    return CovarianceSpec(basis, float(alpha), float(amplitude), mode_cutoff, modes)


@dataclass(frozen=True)
class WienerIncrement:
    dt: float
    field: SpectralField
    seed_coords: tuple[int, ...]
    coords: np.ndarray = field(repr=False, compare=False, default=None)


def increment_coords(spec: CovarianceSpec, dt: float, normals: np.ndarray) -> np.ndarray:
    return normals * np.sqrt(spec.weights * dt)


def sample_increment(spec: CovarianceSpec, dt: float, stream: Stream, step: int = 0) -> WienerIncrement:
    """``W(t + dt) - W(t)`` for the (stream, step) coordinate."""
    if not dt > 0:
        raise ValueError("increment requires dt > 0")
    coords = increment_coords(spec, dt, stream.normals(spec.n_eig, step))
    f = SpectralField(spec.basis, "vector2", spec.coords_to_coeffs(coords))
    return WienerIncrement(float(dt), f, (*stream.as_list(), int(step)), coords)


def sample_increments(spec: CovarianceSpec, dt: float, stream: Stream, n_samples: int, step: int,
                      start: int = 0) -> np.ndarray:
    """Ensemble version: H-coordinates of shape ``(n_samples, n_eig)``."""
    if not dt > 0:
        raise ValueError("increment requires dt > 0")
    return increment_coords(spec, dt, ensemble_normals(stream, n_samples, spec.n_eig, step, start))


# --------------------------------------------------------------------------
# Nemytski coefficients
# --------------------------------------------------------------------------

G2_KINDS = {"zero": _kernels.G2_ZERO, "scaled_identity": _kernels.G2_SCALED_IDENTITY,
            "saturating": _kernels.G2_SATURATING}


@dataclass(frozen=True, eq=False)
class NemytskiCoefficient:
    """``(sigma(t, u) phi)(x) = (g1(x) + g2(u(x)) + nu * c_delta) * phi(x)``, componentwise.

    The product is Leray-projected and its mean removed. ``g1`` is held as
    physical values of shape ``(2, M, M)`` and is constant in time.
    """

    basis: SpectralBasis
    g1: np.ndarray
    g2: str = "zero"
    kappa: float = 0.0
    m: float = 1.0
    role: str = "diffusion"
    c_delta: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if self.g2 not in G2_KINDS:
            raise ValueError(f"unknown g2 catalog entry {self.g2!r}")
        if self.role not in ("diffusion", "control"):
            raise ValueError(f"unknown coefficient role {self.role!r}")
        if self.kappa < 0 or (self.g2 == "saturating" and not self.m > 0):
            raise ValueError("g2 parameters must satisfy kappa >= 0, m > 0")
        g1 = np.broadcast_to(np.asarray(self.g1, dtype=float), (2, self.basis.grid_size, self.basis.grid_size)).copy()
        g1.setflags(write=False)
        object.__setattr__(self, "g1", g1)

    @property
    def lipschitz(self) -> float:
        """Pointwise Lipschitz constant of g2 in y."""
        return 0.0 if self.g2 == "zero" else self.kappa

    @functools.cached_property
    def effective_g1(self) -> np.ndarray:
        return self.g1 + self.nu * self.c_delta

    @functools.cached_property
    def g1_sup(self) -> float:
        return float(np.sqrt(np.sum(self.effective_g1**2, axis=0)).max())

    @functools.cached_property
    def grad_g1_sup(self) -> float:
        b = self.basis
        c = b.to_spectral(self.effective_g1)
        g = b.to_physical(np.stack([b.gradient(c[0]), b.gradient(c[1])]))
        return float(np.sqrt(np.sum(g**2, axis=(0, 1))).max())

    @functools.cached_property
    def uniform_scalar(self) -> float | None:
        """The constant ``c`` when ``sigma(t, u) = c Id``, else None."""
        g = self.effective_g1
        if self.g2 == "zero" and np.all(g == g.flat[0]):
            return float(g.flat[0])
        return None

    def apply_coeffs(self, t: float, u: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Array-level application; ``u`` and ``phi`` are velocity coefficient arrays
        that broadcast against each other over leading axes."""
        b = self.basis
        c = self.uniform_scalar
        if c is not None:
            # state-independent: the result keeps phi's shape and broadcasts against u
            out = c * b.leray(phi * b.storable)
            out[..., 0, 0] = 0.0
            return out
        up = b.to_physical(u)
        pp = b.to_physical(phi)
        g1 = self.effective_g1
        o1, o2 = _kernels.nemytski(up[..., 0, :, :], up[..., 1, :, :], pp[..., 0, :, :], pp[..., 1, :, :],
                                   g1[0], g1[1], G2_KINDS[self.g2], self.kappa, self.m)
        out = b.leray(b.to_spectral(np.stack([o1, o2], axis=-3)))
        out[..., 0, 0] = 0.0
        return out

    def apply(self, t: float, u: SpectralField, phi: SpectralField) -> SpectralField:
        if u.basis != self.basis or phi.basis != self.basis:
            from .spectral import BasisMismatchError
            raise BasisMismatchError("coefficient, state and direction must share a basis")
        return SpectralField(self.basis, "vector2", self.apply_coeffs(t, u.coeffs, phi.coeffs))

    # catalog constants (see module docs of the audit helpers)

    def growth_constants(self, cov: CovarianceSpec) -> tuple[float, float]:
        """``(K0, K1)`` with ``|sigma(t,u)|^2_{L_Q} <= K0 + K1 |u|_H^2``."""
        return 2.0 * cov.trace * self.g1_sup**2, self.lipschitz**2 * cov.trace / (2.0 * math.pi**2)

    def lipschitz_constant(self, cov: CovarianceSpec) -> float:
        """``L1`` with ``|sigma(u) - sigma(v)|^2_{L_Q} <= L1 |u - v|_H^2``."""
        return self.lipschitz**2 * cov.trace / (4.0 * math.pi**2)

    def curl_growth_constants(self, cov: CovarianceSpec) -> tuple[float, float]:
        """``(K0, K1)`` with ``|curl sigma(t,u)|^2_{L_Q} <= K0 + K1 ||u||_V^2``."""
        tr, s1 = cov.trace, cov.gradient_trace
        k0 = 16.0 * (tr * self.grad_g1_sup**2 + s1 * self.g1_sup**2)
        k1 = 4.0 / math.pi**2 * self.lipschitz**2 * max(tr, s1)
        return k0, k1

    def curl_lq_constants(self, cov: CovarianceSpec, q: float, grad_curl_ratio: float) -> tuple[float, float, float]:
        """``(K3, K4, K5)`` with ``||curl sigma(t,u)||^2_{R(H0,L^q)} <= K3 + K4 ||u||_q^2 + K5 ||curl u||_q^2``.

        ``grad_curl_ratio`` bounds ``||grad u||_q / ||curl u||_q`` on the fields of interest.
        """
        mq = gaussian_abs_moment(q) ** (2.0 / q)
        tr, s1 = cov.trace, cov.gradient_trace
        pre = mq * 4.0 / math.pi**2
        k3 = pre * (tr * self.grad_g1_sup**2 + s1 * self.g1_sup**2) * (4.0 * math.pi**2) ** (2.0 / q)
        k4 = pre * self.lipschitz**2 * s1
        k5 = pre * self.lipschitz**2 * tr * grad_curl_ratio**2
        return k3, k4, k5


def gaussian_abs_moment(q: float) -> float:
    """``E|Z|^q`` for a standard normal Z."""
    return 2.0 ** (q / 2.0) * math.gamma((q + 1.0) / 2.0) / math.sqrt(math.pi)


def make_coefficient(basis: SpectralBasis, g1="constant:1.0", g2="zero", role: str = "diffusion",
                     c_delta: float = 0.0) -> NemytskiCoefficient:
    """Build a coefficient from catalog strings.

    ``g1`` is ``constant:<c>`` or ``modes:<path>`` (a vector field dump), or an
    array of physical values; ``g2`` is ``zero``, ``scaled_identity:<kappa>`` or
    ``saturating:<kappa>,<m>``.
    """
    if isinstance(g1, str):
        kind, _, arg = g1.partition(":")
        if kind == "constant":
            g1v = np.full((2, basis.grid_size, basis.grid_size), float(arg))
        elif kind == "modes":
            f = read_field(arg)
            if f.kind != "vector2" or f.basis != basis:
                raise ValueError(f"g1 modes file {arg!r} must hold a vector2 field on n_modes={basis.n_modes}")
            g1v = f.physical()
        else:
            raise ValueError(f"unknown g1 form {g1!r}")
    else:
        g1v = np.asarray(g1, dtype=float)
    kind, _, arg = g2.partition(":")
    kappa, m = 0.0, 1.0
    if kind == "scaled_identity":
        kappa = float(arg)
    elif kind == "saturating":
        a, b = arg.split(",")
        kappa, m = float(a), float(b)
    elif kind != "zero":
        raise ValueError(f"unknown g2 form {g2!r}")
    return NemytskiCoefficient(basis, g1v, kind, kappa, m, role, float(c_delta))


def viscosity_family(base: NemytskiCoefficient, nu: float) -> NemytskiCoefficient:
    """``sigma_nu = sigma_0 + nu * c_delta * Id`` (Leray-projected).

    The deviation obeys ``|sigma_nu - sigma_0|_{L(H0,H)} <= C(nu)`` with
    ``C(nu) = nu * c_delta * sqrt(q_max)``, independent of ``u``.
    """
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    if nu == 0:
        return base
    return replace(base, nu=float(nu))


def deviation_bound(coef: NemytskiCoefficient, cov: CovarianceSpec) -> float:
    return coef.nu * abs(coef.c_delta) * math.sqrt(cov.q_max)


def operator_norm_h0(coef: NemytskiCoefficient, other: NemytskiCoefficient, cov: CovarianceSpec,
                     t: float, u: SpectralField) -> float:
    """``|sigma(t,u) - other(t,u)|_{L(H0,H)}`` on the covariance modes (largest singular value)."""
    basis = coef.basis
    phis = cov.h0_to_coeffs(np.eye(cov.n_eig))
    diff = coef.apply_coeffs(t, u.coeffs, phis) - other.apply_coeffs(t, u.coeffs, phis)
    # orthonormal real coordinates for the image: weighted real/imag parts
    w = np.sqrt(TWO_PI**2 * basis.multiplicity)
    mat = np.concatenate([(diff.real * w).reshape(cov.n_eig, -1), (diff.imag * w).reshape(cov.n_eig, -1)], axis=1)
    return float(np.linalg.norm(mat, ord=2))


def lq_norm(coef: NemytskiCoefficient, t: float, u: SpectralField, spec: CovarianceSpec,
            curl: bool = False, chunk: int = 256) -> float:
    """L_Q (Hilbert-Schmidt) norm ``(sum_j q_j |sigma(t,u) e_j|_H^2)^(1/2)``.

    With ``curl=True`` the image is mapped through curl first.
    """
    b = coef.basis
    total = 0.0
    for start in range(0, spec.n_eig, chunk):
        idx = np.arange(start, min(start + chunk, spec.n_eig))
        coords = np.zeros((idx.size, spec.n_eig))
        coords[np.arange(idx.size), idx] = np.sqrt(spec.weights[idx])
        img = coef.apply_coeffs(t, u.coeffs, spec.coords_to_coeffs(coords))
        if curl:
            total += float(np.sum(b.l2sq(b.curl(img))))
        else:
            total += float(np.sum(b.l2sq(img, vector=True)))
    return math.sqrt(total)


# --------------------------------------------------------------------------
# radonifying norm estimator
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FiniteRankOperator:
    """``K e_k = images[k]`` for an orthonormal input basis ``e_k``."""

    basis: SpectralBasis
    images: np.ndarray
    vector: bool = False

    @property
    def n_inputs(self) -> int:
        return self.images.shape[0]

    def apply(self, beta: np.ndarray) -> np.ndarray:
        return np.tensordot(beta, self.images, axes=(-1, 0))

    def hilbert_schmidt(self) -> float:
        return math.sqrt(float(np.sum(self.basis.l2sq(self.images, self.vector))))


@dataclass(frozen=True, eq=False)
class CoefficientOperator:
    """``phi -> sigma(t, u) phi`` (optionally followed by curl) on the H0-orthonormal basis."""

    coef: NemytskiCoefficient
    cov: CovarianceSpec
    u: SpectralField
    t: float = 0.0
    curl: bool = False

    @property
    def basis(self) -> SpectralBasis:
        return self.coef.basis

    @property
    def vector(self) -> bool:
        return not self.curl

    @property
    def n_inputs(self) -> int:
        return self.cov.n_eig

    def apply(self, beta: np.ndarray) -> np.ndarray:
        img = self.coef.apply_coeffs(self.t, self.u.coeffs, self.cov.h0_to_coeffs(beta))
        return self.basis.curl(img) if self.curl else img


def radonifying_norm_mc(K, target_q: float, n_samples: int, stream: Stream,
                        chunk: int = 512) -> tuple[float, float]:
    """Monte Carlo estimate of ``(E || sum_k beta_k K e_k ||_{L^q}^2)^(1/2)``.

    Returns ``(estimate, stderr)``; the stderr is propagated through the
    square root by the delta method.
    """
    if n_samples < 100:
        raise ValueError("radonifying estimator needs at least 100 samples")
    if not 2.0 <= target_q <= 64.0:
        raise ValueError("target_q must lie in [2, 64]")
    vals = np.empty(n_samples)
    for start in range(0, n_samples, chunk):
        n = min(chunk, n_samples - start)
        beta = ensemble_normals(stream, n, K.n_inputs, 0, start)
        s = K.apply(beta)
        vals[start:start + n] = K.basis.lq(s, target_q, K.vector) ** 2
    if not np.all(np.isfinite(vals)):
        bad = int(np.argmin(np.isfinite(vals)))
        raise FloatingPointError(f"non-finite radonifying sample at index {bad}")
    m = float(vals.mean())
    if m == 0.0:
        return 0.0, 0.0
    se_m = float(vals.std(ddof=1) / math.sqrt(n_samples))
    est = math.sqrt(m)
    return est, se_m / (2.0 * est)
