"""Fourier representation of fields on the 2pi-periodic torus.

Coefficients are stored in the real-FFT half layout: a scalar field is an
array of shape ``(..., M, M // 2 + 1)`` with ``M = 2 * n_modes + 2`` the
collocation grid size; axis ``-2`` carries ``k1`` (FFT ordering) and axis ``-1``
carries ``k2 >= 0``. A vector field has an extra component axis in front of
the two spectral axes. The normalisation is that of Fourier series,
``f(x) = sum_k c_k exp(i k.x)``, so ``|f|_{L2}^2 = (2pi)^2 sum_k |c_k|^2``.

Only modes with ``|k1|, |k2| <= n_modes`` are retained and the grid Nyquist
row and column are always zero. The mean mode is pinned: curl, Biot-Savart,
transport and the noise operators never populate it, and ``biot_savart``
rejects a vorticity that carries one.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import _kernels

TWO_PI = 2.0 * np.pi
LQ_MAX = 64.0


class BasisMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralBasis:
    """Retained wavenumbers ``|k1|, |k2| <= n_modes`` on the 2pi-torus."""

    n_modes: int
    domain_period: float = field(default=TWO_PI, init=False)

    @property
    def dealias_cutoff(self) -> int:
        return (2 * self.n_modes) // 3

    @property
    def grid_size(self) -> int:
        return 2 * self.n_modes + 2

    @property
    def spectral_shape(self) -> tuple[int, int]:
        return (self.grid_size, self.grid_size // 2 + 1)

    @functools.cached_property
    def k1(self) -> np.ndarray:
        M = self.grid_size
        return (np.fft.fftfreq(M) * M)[:, None] * np.ones(self.spectral_shape)

    @functools.cached_property
    def k2(self) -> np.ndarray:
        M = self.grid_size
        return np.fft.rfftfreq(M)[None, :] * M * np.ones(self.spectral_shape)

    @functools.cached_property
    def ksq(self) -> np.ndarray:
        return self.k1**2 + self.k2**2

    @functools.cached_property
    def inv_ksq(self) -> np.ndarray:
        out = np.zeros(self.spectral_shape)
        nz = self.ksq > 0
        out[nz] = 1.0 / self.ksq[nz]
        return out

    @functools.cached_property
    def retained(self) -> np.ndarray:
        N = self.n_modes
        mask = (np.abs(self.k1) <= N) & (self.k2 <= N)
        mask[0, 0] = False
        return mask

    @functools.cached_property
    def storable(self) -> np.ndarray:
        mask = self.retained.copy()
        mask[0, 0] = True
        return mask

    @functools.cached_property
    def dealias_mask(self) -> np.ndarray:
        c = self.dealias_cutoff
        mask = (np.abs(self.k1) <= c) & (self.k2 <= c)
        mask[0, 0] = False
        return mask

    @functools.cached_property
    def multiplicity(self) -> np.ndarray:
        """Parseval weight of each stored half-plane entry (1 on the k2=0 column)."""
        w = np.full(self.spectral_shape, 2.0)
        w[:, 0] = 1.0
        return w * self.storable

    @functools.cached_property
    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        x = TWO_PI * np.arange(self.grid_size) / self.grid_size
        return np.meshgrid(x, x, indexing="ij")

    # -- transforms ------------------------------------------------------

    def to_physical(self, c: np.ndarray) -> np.ndarray:
        M = self.grid_size
        return sfft.irfft2(c, s=(M, M), norm="forward")

    def to_spectral(self, f: np.ndarray) -> np.ndarray:
        return sfft.rfft2(f, norm="forward") * self.storable

    # -- diagonal operators on raw coefficient arrays --------------------

    def curl(self, u: np.ndarray) -> np.ndarray:
        return 1j * self.k1 * u[..., 1, :, :] - 1j * self.k2 * u[..., 0, :, :]

    def stream(self, xi: np.ndarray) -> np.ndarray:
        return -xi * self.inv_ksq

    def biot_savart(self, xi: np.ndarray) -> np.ndarray:
        psi = self.stream(xi)
        return np.stack([-1j * self.k2 * psi, 1j * self.k1 * psi], axis=-3)

    def gradient(self, f: np.ndarray) -> np.ndarray:
        return np.stack([1j * self.k1 * f, 1j * self.k2 * f], axis=-3)

    def divergence(self, v: np.ndarray) -> np.ndarray:
        return 1j * self.k1 * v[..., 0, :, :] + 1j * self.k2 * v[..., 1, :, :]

    def leray(self, v: np.ndarray) -> np.ndarray:
        kdotv = (self.k1 * v[..., 0, :, :] + self.k2 * v[..., 1, :, :]) * self.inv_ksq
        return np.stack([v[..., 0, :, :] - self.k1 * kdotv, v[..., 1, :, :] - self.k2 * kdotv], axis=-3)

    def dealias(self, c: np.ndarray) -> np.ndarray:
        return c * self.dealias_mask

    def transport(self, u: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Dealiased ``u . grad(xi)`` for velocity ``u`` and scalar ``xi``."""
        u = u * self.dealias_mask
        xi = xi * self.dealias_mask
        up = self.to_physical(u)
        gp = self.to_physical(self.gradient(xi))
        prod = _kernels.advect_product(up[..., 0, :, :], up[..., 1, :, :], gp[..., 0, :, :], gp[..., 1, :, :])
        return self.to_spectral(prod) * self.dealias_mask

    # -- quadratic forms ---------------------------------------------------

    def _sum_modes(self, w: np.ndarray, c: np.ndarray, vector: bool) -> np.ndarray:
        s = np.sum(self.multiplicity * w * np.abs(c) ** 2, axis=(-2, -1))
        if vector:
            s = s.sum(axis=-1)
        return TWO_PI**2 * s

    def l2sq(self, c: np.ndarray, vector: bool = False) -> np.ndarray:
        return self._sum_modes(1.0, c, vector)

    def hs_sq(self, c: np.ndarray, s: float, vector: bool = False) -> np.ndarray:
        return self._sum_modes((1.0 + self.ksq) ** s, c, vector)

    def dual_sq(self, c: np.ndarray, beta: float, vector: bool = False) -> np.ndarray:
        return self._sum_modes(self.inv_ksq ** (2.0 * beta), c, vector)

    def inner(self, a: np.ndarray, b: np.ndarray, vector: bool = False) -> np.ndarray:
        s = np.sum(self.multiplicity * (a * np.conj(b)).real, axis=(-2, -1))
        if vector:
            s = s.sum(axis=-1)
        return TWO_PI**2 * s

    def lq(self, c: np.ndarray, q: float, vector: bool = False) -> np.ndarray:
        f = self.to_physical(c)
        mag = np.sqrt(np.sum(f**2, axis=-3)) if vector else np.abs(f)
        return (TWO_PI**2 * np.mean(mag**q, axis=(-2, -1))) ** (1.0 / q)

    def sup(self, c: np.ndarray, vector: bool = False) -> np.ndarray:
        f = self.to_physical(c)
        mag = np.sqrt(np.sum(f**2, axis=-3)) if vector else np.abs(f)
        return mag.max(axis=(-2, -1))

    def grad_lq(self, u: np.ndarray, q: float) -> np.ndarray:
        """``|| grad u ||_q`` with the pointwise Frobenius norm of the Jacobian."""
        g = self.to_physical(np.stack([self.gradient(u[..., 0, :, :]), self.gradient(u[..., 1, :, :])], axis=-4))
        mag = np.sqrt(np.sum(g**2, axis=(-4, -3)))
        return (TWO_PI**2 * np.mean(mag**q, axis=(-2, -1))) ** (1.0 / q)


@functools.lru_cache(maxsize=None)
def build_basis(n_modes: int) -> SpectralBasis:
    if int(n_modes) != n_modes or n_modes < 4:
        raise ValueError("basis too small for dealiased transport")
    return SpectralBasis(int(n_modes))


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralField:
    basis: SpectralBasis
    kind: str
    coeffs: np.ndarray

    def __post_init__(self):
        if self.kind not in ("scalar", "vector2"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        expected = self.basis.spectral_shape if self.kind == "scalar" else (2, *self.basis.spectral_shape)
        if self.coeffs.shape != expected:
            raise ValueError(f"coefficient array has shape {self.coeffs.shape}, expected {expected}")
        c = np.array(self.coeffs, dtype=np.complex128) * self.basis.storable
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def is_vector(self) -> bool:
        return self.kind == "vector2"

    @classmethod
    def zeros(cls, basis: SpectralBasis, kind: str = "scalar") -> "SpectralField":
        shape = basis.spectral_shape if kind == "scalar" else (2, *basis.spectral_shape)
        return cls(basis, kind, np.zeros(shape, dtype=np.complex128))

    @classmethod
    def from_physical(cls, basis: SpectralBasis, values, kind: str | None = None) -> "SpectralField":
        values = np.asarray(values, dtype=float)
        if kind is None:
            kind = "vector2" if values.ndim == 3 else "scalar"
        return cls(basis, kind, basis.to_spectral(values))

    @classmethod
    def from_function(cls, basis: SpectralBasis, fn, kind: str | None = None) -> "SpectralField":
        X, Y = basis.grid
        return cls.from_physical(basis, np.asarray(fn(X, Y), dtype=float), kind)

    def physical(self) -> np.ndarray:
        return self.basis.to_physical(self.coeffs)

    @property
    def mean(self) -> np.ndarray:
        return self.coeffs[..., 0, 0].real

    def mean_free(self) -> "SpectralField":
        c = self.coeffs.copy()
        c[..., 0, 0] = 0.0
        return SpectralField(self.basis, self.kind, c)

    def hermitian_defect(self) -> float:
        """Largest mismatch ``|c(-k) - conj(c(k))|`` over the self-conjugate k2=0 column."""
        col = self.coeffs[..., :, 0]
        mirrored = np.roll(col[..., ::-1], 1, axis=-1)
        return float(np.max(np.abs(col - np.conj(mirrored)), initial=0.0))

    def divergence_defect(self) -> float:
        """``max_k |k . u(k)| / max_k |k||u(k)|`` for a vector field."""
        if not self.is_vector:
            raise ValueError("divergence defect is defined for vector fields")
        b = self.basis
        num = np.abs(b.k1 * self.coeffs[0] + b.k2 * self.coeffs[1]).max()
        den = (np.sqrt(b.ksq) * np.sqrt(np.abs(self.coeffs[0]) ** 2 + np.abs(self.coeffs[1]) ** 2)).max()
        return float(num / den) if den > 0 else 0.0

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return SpectralField(self.basis, self.kind, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same(self, other)
        return SpectralField(self.basis, self.kind, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "SpectralField":
        return SpectralField(self.basis, self.kind, self.coeffs * a)

    __rmul__ = __mul__


def _check_same(a: SpectralField, b: SpectralField) -> None:
    if a.basis != b.basis:
        raise BasisMismatchError(f"basis mismatch: n_modes {a.basis.n_modes} vs {b.basis.n_modes}")
    if a.kind != b.kind:
        raise ValueError(f"kind mismatch: {a.kind} vs {b.kind}")


def _has_mean(f: SpectralField) -> bool:
    m = np.abs(f.coeffs[..., 0, 0]).max()
    return m > 1e-12 * max(1.0, float(np.abs(f.coeffs).max()))


def _require(f: SpectralField, kind: str) -> None:
    if f.kind != kind:
        raise ValueError(f"expected a {kind} field, got {f.kind}")


def random_field(basis: SpectralBasis, kind: str, rng: np.random.Generator, max_mode: int | None = None,
                 decay: float = 0.0, divergence_free: bool = True) -> SpectralField:
    """Random real field with Gaussian coefficients ~ |k|^-decay on ``|k|_inf <= max_mode``."""
    shape = basis.spectral_shape if kind == "scalar" else (2, *basis.spectral_shape)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    mask = basis.retained.copy()
    if max_mode is not None:
        mask &= (np.abs(basis.k1) <= max_mode) & (basis.k2 <= max_mode)
    amp = np.where(basis.ksq > 0, basis.ksq, 1.0) ** (-0.5 * decay)
    c = c * mask * amp
    # the k2 = 0 column must be Hermitian on its own
    c = basis.to_spectral(basis.to_physical(c)) * mask
    if kind == "vector2" and divergence_free:
        c = basis.leray(c)
    return SpectralField(basis, kind, c)


# --------------------------------------------------------------------------
# operators on fields
# --------------------------------------------------------------------------

def curl(u: SpectralField) -> SpectralField:
    _require(u, "vector2")
    return SpectralField(u.basis, "scalar", u.basis.curl(u.coeffs))


def biot_savart(xi: SpectralField) -> SpectralField:
    _require(xi, "scalar")
    if _has_mean(xi):
        raise ValueError("Biot-Savart undefined for non-mean-zero vorticity")
    return SpectralField(xi.basis, "vector2", xi.basis.biot_savart(xi.coeffs))


def transport_term(u: SpectralField, xi: SpectralField) -> SpectralField:
    _require(u, "vector2")
    _require(xi, "scalar")
    if u.basis != xi.basis:
        raise BasisMismatchError("basis mismatch between velocity and vorticity")
    return SpectralField(u.basis, "scalar", u.basis.transport(u.coeffs, xi.coeffs))


def leray_project(v: SpectralField) -> SpectralField:
    _require(v, "vector2")
    return SpectralField(v.basis, "vector2", v.basis.leray(v.coeffs))


def inner(a: SpectralField, b: SpectralField) -> float:
    _check_same(a, b)
    return float(a.basis.inner(a.coeffs, b.coeffs, a.is_vector))


@dataclass(frozen=True)
class NormSpec:
    """Norm family and exponent.

    ``family`` is one of ``"L2"``, ``"H_s"`` (uses ``s``), ``"Lq"`` (uses ``q``),
    ``"sup"``. ``time_aggregation`` is consumed by trajectory-level helpers.
    """

    family: str
    s: float = 0.0
    q: float = 2.0
    time_aggregation: str = "none"

    def __post_init__(self):
        if self.family not in ("L2", "H_s", "Lq", "sup"):
            raise ValueError(f"unknown norm family {self.family!r}")
        if self.time_aggregation not in ("none", "sup_t", "L2_t", "Lq_t"):
            raise ValueError(f"unknown time aggregation {self.time_aggregation!r}")
        if self.family == "Lq" and not 1.0 <= self.q:
            raise ValueError("Lq exponent must be >= 1")


L2 = NormSpec("L2")
H1 = NormSpec("H_s", s=1.0)
H_HALF = NormSpec("H_s", s=0.5)
X_NORM = NormSpec("H_s", s=0.5, time_aggregation="L2_t")


def coeff_norm(basis: SpectralBasis, c: np.ndarray, spec: NormSpec, vector: bool) -> np.ndarray:
    """Array-level version of :func:`norm`; broadcasts over leading axes."""
    if spec.family == "L2":
        return np.sqrt(basis.l2sq(c, vector))
    if spec.family == "H_s":
        return np.sqrt(basis.hs_sq(c, spec.s, vector))
    if spec.family == "Lq":
        if spec.q > LQ_MAX:
            raise ValueError("quadrature accuracy not guaranteed for q > 64")
        return basis.lq(c, spec.q, vector)
    return basis.sup(c, vector)


def norm(f: SpectralField, spec: NormSpec) -> float:
    """Norm of a single field.

    ``sup`` is the maximum over collocation points, hence a lower bound of the
    true supremum.
    """
    if spec.time_aggregation != "none":
        raise ValueError("time-aggregated norms apply to trajectories, not single fields")
    return float(coeff_norm(f.basis, f.coeffs, spec, f.is_vector))


def fractional_norm_dual(f: SpectralField, beta: float) -> float:
    """Norm in D(A^-beta): coefficients weighted by ``|k|^(-2 beta)``."""
    if beta <= 0.5:
        raise ValueError("fractional dual norm requires beta > 1/2")
    if _has_mean(f):
        raise ValueError("fractional dual norm requires a mean-zero field")
    return float(np.sqrt(f.basis.dual_sq(f.coeffs, beta, f.is_vector)))


# --------------------------------------------------------------------------
# field dump format
# --------------------------------------------------------------------------

def _modes(basis: SpectralBasis):
    N = basis.n_modes
    for k1 in range(-N, N + 1):
        for k2 in range(-N, N + 1):
            if (k1, k2) != (0, 0):
                yield k1, k2


def _coeff_at(basis: SpectralBasis, c: np.ndarray, k1: int, k2: int) -> complex:
    M = basis.grid_size
    if k2 >= 0:
        return complex(c[k1 % M, k2])
    return complex(np.conj(c[(-k1) % M, -k2]))


def dump_field(f: SpectralField) -> str:
    lines = [f"field kind={f.kind} n_modes={f.basis.n_modes}"]
    comps = [f.coeffs] if not f.is_vector else [f.coeffs[0], f.coeffs[1]]
    for k1, k2 in _modes(f.basis):
        for comp, c in enumerate(comps):
            z = _coeff_at(f.basis, c, k1, k2)
            lines.append(f"{k1} {k2} {comp} {z.real:.16e} {z.imag:.16e}")
    return "\n".join(lines) + "\n"


def load_field(text: str, tol: float = 1e-12) -> SpectralField:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "field":
        raise ValueError("missing 'field' header line")
    header = dict(tok.split("=", 1) for tok in rows[0][1:])
    kind = header.get("kind")
    if kind not in ("scalar", "vector2"):
        raise ValueError(f"bad field kind {kind!r}")
    basis = build_basis(int(header["n_modes"]))
    ncomp = 1 if kind == "scalar" else 2
    N = basis.n_modes
    table = np.zeros((ncomp, 2 * N + 1, 2 * N + 1), dtype=complex)
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != 5:
            raise ValueError(f"line {lineno}: expected 'k1 k2 comp re im'")
        k1, k2, comp = int(r[0]), int(r[1]), int(r[2])
        if max(abs(k1), abs(k2)) > N or comp >= ncomp:
            raise ValueError(f"line {lineno}: mode ({k1},{k2}) comp {comp} outside basis")
        if (k1, k2) == (0, 0) and (float(r[3]) != 0.0 or float(r[4]) != 0.0):
            raise ValueError("zero mode must carry coefficient 0")
        table[comp, k1 + N, k2 + N] = complex(float(r[3]), float(r[4]))
    mirrored = np.conj(table[:, ::-1, ::-1])
    scale = max(np.abs(table).max(), 1.0)
    if np.abs(table - mirrored).max() > tol * scale:
        raise ValueError("field is not Hermitian: coeff(-k) != conj(coeff(k))")
    M = basis.grid_size
    c = np.zeros((ncomp, *basis.spectral_shape), dtype=complex)
    for k1 in range(-N, N + 1):
        for k2 in range(0, N + 1):
            c[:, k1 % M, k2] = table[:, k1 + N, k2 + N]
    return SpectralField(basis, kind, c[0] if kind == "scalar" else c)


def write_field(f: SpectralField, path) -> None:
    Path(path).write_text(dump_field(f))


def read_field(path) -> SpectralField:
    return load_field(Path(path).read_text())
