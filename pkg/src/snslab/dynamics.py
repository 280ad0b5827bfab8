"""Time integration of the stochastic / controlled / inviscid vorticity equations.

The state is the vorticity ``xi`` in spectral form; the velocity is recovered
by Biot-Savart at every stage. One step of size ``dt``:

1. ``N(xi, t) = -u . grad(xi) + curl(sigma_tilde(t, u) h)``, with ``h`` frozen over the step;
2. integrating-factor Heun with ``E = exp(-nu |k|^2 dt)``::

       xi*     = E (xi_n + dt N(xi_n, t))
       xi_n+1  = E xi_n + dt/2 (E N(xi_n, t) + N(xi*, t + dt))

3. Ito noise ``sqrt(nu) curl(sigma(t, u_n) dW)`` added after the factor.

All array routines accept a leading batch axis, so ensembles, finite-difference
gradient batches and importance-sampled ensembles share one code path.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .noise import CovarianceSpec, NemytskiCoefficient, viscosity_family
from .rng import Stream, ensemble_normals
from ._kernels import advect_product
from .spectral import SpectralBasis, SpectralField, biot_savart, build_basis, dump_field

SCHEME_VERSION = "if-heun-em/1"
SERIES_COLUMNS = ("normH", "normV", "normHalf", "curl_l2", "curl_l4", "curl_l8", "grad_l4")
CFL_START = 0.5
CFL_ABORT = 1.0


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


# --------------------------------------------------------------------------
# controls
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant H0-valued path on ``n_intervals`` uniform intervals of [0, T].

    ``coords[i, m]`` is the coordinate of mode ``modes[m]`` (an index into the
    covariance eigenbasis) against the H0-orthonormal vector ``sqrt(q_j) e_j``,
    so ``|h|_0^2 = sum_m coords[i, m]^2``.
    """

    T: float
    coords: np.ndarray
    modes: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coords, dtype=float))
        m = np.asarray(self.modes, dtype=int).ravel()
        if c.shape[1] != m.size:
            raise ValueError("control coordinates and mode list disagree")
        if not self.T > 0:
            raise ValueError("control horizon must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "modes", m)

    @property
    def n_intervals(self) -> int:
        return self.coords.shape[0]

    @property
    def interval(self) -> float:
        return self.T / self.n_intervals

    @property
    def energy(self) -> float:
        return 0.5 * float(np.sum(self.coords**2)) * self.interval

    def full_coords(self, cov: CovarianceSpec) -> np.ndarray:
        out = np.zeros((self.n_intervals, cov.n_eig))
        out[:, self.modes] = self.coords
        return out

    def with_coords(self, coords) -> "ControlPath":
        return ControlPath(self.T, np.asarray(coords, dtype=float).reshape(self.coords.shape), self.modes)

    def scaled(self, lam: float) -> "ControlPath":
        return self.with_coords(lam * self.coords)


def control_modes(cov: CovarianceSpec, cutoff: int = 4) -> np.ndarray:
    """Eigen-indices of the covariance modes with ``|k|_inf <= cutoff``."""
    k = cov.eig_wavenumbers
    return np.nonzero(np.max(np.abs(k), axis=1) <= cutoff)[0]


def zero_control(cov: CovarianceSpec, T: float, n_intervals: int = 1, cutoff: int = 4) -> ControlPath:
    modes = control_modes(cov, cutoff)
    return ControlPath(T, np.zeros((n_intervals, modes.size)), modes)


def catalog_control(name: str, cov: CovarianceSpec, T: float, M: float, n_intervals: int = 10,
                    cutoff: int = 4, seed: int = 0) -> ControlPath:
    """Named controls scaled onto the boundary of S_M (``int |h|_0^2 = M``).

    ``zero``; ``constant_mode`` (lowest cos mode, constant in time);
    ``oscillating`` (a diagonal mode modulated by ``sin(2 pi t / T)``);
    ``random`` (Gaussian coordinates on all control modes, seeded).
    """
    modes = control_modes(cov, cutoff)
    c = np.zeros((n_intervals, modes.size))
    mids = (np.arange(n_intervals) + 0.5) * T / n_intervals
    if name == "zero":
        return ControlPath(T, c, modes)
    if name == "constant_mode":
        c[:, 0] = 1.0
    elif name == "oscillating":
        k = cov.eig_wavenumbers[modes]
        diag = np.nonzero((np.abs(k[:, 0]) == 1) & (np.abs(k[:, 1]) == 1))[0]
        c[:, diag[0] if diag.size else min(1, modes.size - 1)] = np.sin(2 * np.pi * mids / T)
    elif name == "random":
        c = np.random.default_rng(seed).standard_normal(c.shape)
    else:
        raise ValueError(f"unknown control {name!r}")
    path = ControlPath(T, c, modes)
    return path.scaled(math.sqrt(M / (2.0 * path.energy)))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SimulationParams:
    basis: SpectralBasis
    nu: float
    T: float
    dt: float
    zeta: SpectralField
    sigma: NemytskiCoefficient | None = None
    sigma_tilde: NemytskiCoefficient | None = None
    cov: CovarianceSpec | None = None
    noise: bool = False
    control: ControlPath | None = None
    transport: bool = True
    stride: int = 1
    cfl_check: bool = True

    def __post_init__(self):
        if self.nu < 0 or not self.T > 0 or not self.dt > 0:
            raise ValueError("need nu >= 0, T > 0, dt > 0")
        if self.zeta.kind != "scalar" or self.zeta.basis != self.basis:
            raise ValueError("initial condition must be a scalar vorticity on the simulation basis")
        if abs(self.zeta.mean) > 1e-12 * max(1.0, float(np.abs(self.zeta.coeffs).max())):
            raise ValueError("initial vorticity must be mean-zero")
        if self.noise:
            if not self.nu > 0:
                raise ValueError("noise requires nu > 0 (sqrt(nu) scaling makes nu = 0 noise vacuous)")
            if self.sigma is None or self.cov is None:
                raise ValueError("noise requires a diffusion coefficient and a covariance")
        if self.control is not None:
            if self.cov is None or (self.sigma_tilde is None and self.sigma is None):
                raise ValueError("a control path requires a covariance and a control coefficient")
        if self.cfl_check:
            umax = float(self.basis.sup(self.basis.biot_savart(self.zeta.coeffs), vector=True))
            if self.dt * self.basis.n_modes * umax > CFL_START:
                raise ValueError(
                    f"dt={self.dt} violates the advective CFL bound 0.5/(N max|u|) = "
                    f"{CFL_START / (self.basis.n_modes * umax):.3g}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def control_coef(self) -> NemytskiCoefficient | None:
        return self.sigma_tilde if self.sigma_tilde is not None else self.sigma

    def replace(self, **kw) -> "SimulationParams":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SimulationParams(**d)

    def with_viscosity(self, nu: float) -> "SimulationParams":
        kw = {"nu": nu}
        if self.sigma is not None:
            kw["sigma"] = viscosity_family(self.sigma, nu)
        if self.sigma_tilde is not None:
            kw["sigma_tilde"] = viscosity_family(self.sigma_tilde, nu)
        if nu == 0:
            kw["noise"] = False
        return self.replace(**kw)

    def fingerprint(self) -> str:
        def coef_desc(c):
            if c is None:
                return None
            return [c.g2, c.kappa, c.m, c.role, c.c_delta, c.nu, hashlib.sha256(c.g1.tobytes()).hexdigest()]

        desc = {
            "n_modes": self.basis.n_modes, "nu": self.nu, "T": self.T, "dt": self.dt,
            "zeta": hashlib.sha256(self.zeta.coeffs.tobytes()).hexdigest(),
            "sigma": coef_desc(self.sigma), "sigma_tilde": coef_desc(self.sigma_tilde),
            "cov": None if self.cov is None else [self.cov.alpha, self.cov.amplitude, self.cov.mode_cutoff,
                                                  None if self.cov.modes is None else list(self.cov.modes)],
            "noise": self.noise, "transport": self.transport, "stride": self.stride,
            "control": None if self.control is None else [
                self.control.T, hashlib.sha256(self.control.coords.tobytes()).hexdigest(),
                self.control.modes.tolist()],
            "scheme": SCHEME_VERSION,
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# measurements
# --------------------------------------------------------------------------

_LQ_NAME = re.compile(r"^(curl|grad)_l(\d+(?:\.\d+)?)$")


def measure(basis: SpectralBasis, xi: np.ndarray, names, reference: np.ndarray | None = None,
            beta: float = 1.0) -> dict[str, np.ndarray]:
    """Scalar diagnostics of vorticity coefficients ``xi`` (leading batch axes allowed).

    Names: ``normH`` |u|_H, ``normV`` ||u||_V, ``normHalf`` ||u||_{H^1/2},
    ``grad_sq`` |grad u|_H^2, ``curl_l<q>`` ||xi||_q, ``grad_l<q>`` ||grad u||_q,
    ``lap`` |Laplacian u|_H, ``dist_half`` / ``dist_weak`` distances of u to the
    velocity of ``reference`` in H^1/2 and D(A^-beta).
    """
    out = {}
    if not names:
        return out
    u = basis.biot_savart(xi)
    xi_phys = None
    for name in names:
        if name == "normH":
            out[name] = np.sqrt(basis.l2sq(u, vector=True))
        elif name == "normV":
            out[name] = np.sqrt(basis.hs_sq(u, 1.0, vector=True))
        elif name == "normHalf":
            out[name] = np.sqrt(basis.hs_sq(u, 0.5, vector=True))
        elif name == "grad_sq":
            out[name] = basis.l2sq(xi)
        elif name == "lap":
            out[name] = np.sqrt(basis.l2sq(basis.gradient(xi), vector=True))
        elif name == "curl_l2":
            out[name] = np.sqrt(basis.l2sq(xi))
        elif name in ("dist_half", "dist_weak"):
            d = u - basis.biot_savart(reference)
            out[name] = np.sqrt(basis.hs_sq(d, 0.5, vector=True) if name == "dist_half"
                                else basis.dual_sq(d, beta, vector=True))
        else:
            m = _LQ_NAME.match(name)
            if not m:
                raise KeyError(f"unknown measurement {name!r}")
            q = float(m.group(2))
            if m.group(1) == "curl":
                if xi_phys is None:
                    xi_phys = basis.to_physical(xi)
                out[name] = (4 * np.pi**2 * np.mean(np.abs(xi_phys) ** q, axis=(-2, -1))) ** (1.0 / q)
            else:
                out[name] = basis.grad_lq(u, q)
    return out


# --------------------------------------------------------------------------
# integrator
# --------------------------------------------------------------------------

@dataclass
class IntegrationResult:
    times: np.ndarray
    series: dict[str, np.ndarray]
    final: np.ndarray
    snapshots: np.ndarray | None = None
    snapshot_times: np.ndarray | None = None
    log_weights: np.ndarray | None = None


def _control_coeffs(params: SimulationParams, control: np.ndarray, t_mid: float) -> np.ndarray:
    n_int = control.shape[-2]
    i = min(int(t_mid / params.T * n_int), n_int - 1)
    return params.cov.h0_to_coeffs(control[..., i, :])


def _drift(params: SimulationParams, xi: np.ndarray, t: float, h_coeffs, step: int, forcing=None):
    """Deterministic drift; returns ``(N, u)`` with ``u`` None when nothing needed it.

    ``forcing`` is a precomputed ``curl(sigma_tilde h)`` for state-independent coefficients.
    """
    b = params.basis
    u = None
    if params.transport:
        u = b.biot_savart(xi)
        ud = u * b.dealias_mask
        up = b.to_physical(ud)
        if params.cfl_check:
            cfl = params.dt * b.n_modes * float(np.sqrt(np.sum(up**2, axis=-3)).max())
            if not np.isfinite(cfl) or cfl > CFL_ABORT:
                raise SimulationError(f"CFL violation: dt*N*max|u| = {cfl:.3g}", step)
        gp = b.to_physical(b.gradient(xi * b.dealias_mask))
        prod = advect_product(up[..., 0, :, :], up[..., 1, :, :], gp[..., 0, :, :], gp[..., 1, :, :])
        out = -b.to_spectral(prod) * b.dealias_mask
    else:
        out = np.zeros_like(xi)
    if forcing is not None:
        out = out + forcing
    elif h_coeffs is not None:
        if u is None:
            u = b.biot_savart(xi)
        out = out + b.curl(params.control_coef.apply_coeffs(t, u, h_coeffs))
    return out, u


def integrate(params: SimulationParams, xi0: np.ndarray, *, noise=None, control=None, tilt: bool = False,
              measures=SERIES_COLUMNS, snapshot_stride: int | None = None, reference=None,
              beta: float = 1.0) -> IntegrationResult:
    """Integrate a batch of vorticity states over [0, T].

    ``noise(step)`` returns standard normals of shape ``(batch, n_eig)`` (or
    ``(n_eig,)``) for the step; ``control`` holds H0 coordinates of shape
    ``([batch,] n_intervals, n_eig)``. With ``tilt=True`` the control is read as
    an importance-sampling drift and the log Girsanov weights
    ``-nu^-1/2 sum (h, dW)_0 - (2 nu)^-1 int |h|_0^2`` are accumulated.
    ``reference`` (``(n_steps + 1, M, H)`` vorticity) enables ``dist_*`` measures.
    """
    b = params.basis
    n = params.n_steps
    dt = params.dt
    xi = np.array(xi0, dtype=complex)
    E = np.exp(-params.nu * b.ksq * dt)
    times = np.arange(n + 1) * dt
    stride = params.stride if snapshot_stride is None else snapshot_stride
    use_noise = params.noise and noise is not None
    if tilt and not use_noise:
        raise ValueError("importance sampling needs noise")
    if control is not None:
        control = np.asarray(control, dtype=float)

    def record(k, state):
        ref = None if reference is None else reference[k]
        vals = measure(b, state, measures, ref, beta)
        for name, v in vals.items():
            series[name][..., k] = v

    batch_shape = xi.shape[:-2]
    series = {name: np.empty((*batch_shape, n + 1)) for name in measures}
    snaps, snap_t = [], []
    logw = np.zeros(batch_shape) if tilt else None
    sqrt_nu = math.sqrt(params.nu)
    record(0, xi)
    if stride:
        snaps.append(xi.copy())
        snap_t.append(0.0)
    ccoef = params.control_coef
    uniform_control = ccoef is not None and ccoef.uniform_scalar is not None
    uniform_noise = params.sigma is not None and params.sigma.uniform_scalar is not None
    forcing_cache = {}
    for step in range(n):
        t = step * dt
        h = forcing = None
        if control is not None:
            n_int = control.shape[-2]
            i_int = min(int((t + 0.5 * dt) / params.T * n_int), n_int - 1)
            if uniform_control:
                if i_int not in forcing_cache:
                    forcing_cache.clear()
                    hc = params.cov.h0_to_coeffs(control[..., i_int, :])
                    forcing_cache[i_int] = ccoef.uniform_scalar * b.curl(hc * b.storable)
                forcing = forcing_cache[i_int]
            else:
                h = params.cov.h0_to_coeffs(control[..., i_int, :])
        n0, u = _drift(params, xi, t, h, step, forcing)
        xs = E * (xi + dt * n0)
        n1, _ = _drift(params, xs, t + dt, h, step, forcing)
        new = E * xi + 0.5 * dt * (E * n0 + n1)
        if use_noise:
            z = noise(step)
            dw = params.cov.coords_to_coeffs(z * np.sqrt(params.cov.weights * dt))
            if uniform_noise:
                # curl kills the gradient part, so the projection can be skipped
                new = new + (sqrt_nu * params.sigma.uniform_scalar) * b.curl(dw * b.storable)
            else:
                if u is None:
                    u = b.biot_savart(xi)
                new = new + sqrt_nu * b.curl(params.sigma.apply_coeffs(t, u, dw))
            if tilt:
                n_int = control.shape[-2]
                hc = control[..., min(int((t + 0.5 * dt) / params.T * n_int), n_int - 1), :]
                logw += -np.sum(hc * z, axis=-1) * math.sqrt(dt) / sqrt_nu - np.sum(hc**2, axis=-1) * dt / (2 * params.nu)
        xi = new
        if not np.all(np.isfinite(xi)):
            raise SimulationError("non-finite vorticity", step + 1)
        record(step + 1, xi)
        if stride and ((step + 1) % stride == 0 or step + 1 == n):
            snaps.append(xi.copy())
            snap_t.append((step + 1) * dt)
    return IntegrationResult(
        times, series, xi,
        np.stack(snaps) if stride else None,
        np.array(snap_t) if stride else None,
        logw,
    )


def step(state: SpectralField, t: float, params: SimulationParams, noise_increment=None,
         control_value=None) -> SpectralField:
    """Advance one step of size ``params.dt``.

    ``noise_increment`` is a :class:`~snslab.noise.WienerIncrement` (required
    iff noise is on); ``control_value`` is the H0 coordinate vector over the
    full covariance eigenbasis (required iff a control path is set).
    """
    if params.noise != (noise_increment is not None):
        raise ValueError("noise increment must be given exactly when noise is on")
    if (params.control is not None) != (control_value is not None):
        raise ValueError("control value must be given exactly when a control path is set")
    b = params.basis
    dt = params.dt
    E = np.exp(-params.nu * b.ksq * dt)
    h = None if control_value is None else params.cov.h0_to_coeffs(np.asarray(control_value))
    xi = state.coeffs
    n0, u = _drift(params, xi, t, h, 0)
    n1, _ = _drift(params, E * (xi + dt * n0), t + dt, h, 0)
    new = E * xi + 0.5 * dt * (E * n0 + n1)
    if noise_increment is not None:
        if u is None:
            u = b.biot_savart(xi)
        new = new + math.sqrt(params.nu) * b.curl(params.sigma.apply_coeffs(t, u, noise_increment.field.coeffs))
    if not np.all(np.isfinite(new)):
        raise SimulationError("non-finite vorticity", 0)
    return SpectralField(b, "scalar", new)


# --------------------------------------------------------------------------
# single trajectories
# --------------------------------------------------------------------------

@dataclass(eq=False)
class TrajectoryRecord:
    times: np.ndarray
    series: dict[str, np.ndarray]
    snapshot_times: np.ndarray
    snapshots: np.ndarray
    basis: SpectralBasis
    seed_coords: list[int] = field(default_factory=list)
    fingerprint: str = ""

    def velocity(self, i: int) -> SpectralField:
        return biot_savart(SpectralField(self.basis, "scalar", self.snapshots[i]))

    def vorticity(self, i: int) -> SpectralField:
        return SpectralField(self.basis, "scalar", self.snapshots[i])


def stream_noise(params: SimulationParams, stream: Stream):
    """Noise source for one trajectory: step ``n`` reads stream coordinate ``(stream, n)``."""
    return lambda step: stream.normals(params.cov.n_eig, step)


def ensemble_noise(params: SimulationParams, stream: Stream, n_samples: int, start: int = 0):
    """Noise source for samples ``start..start+n_samples-1`` drawn in fixed blocks."""
    n_eig = params.cov.n_eig
    return lambda step: ensemble_normals(stream, n_samples, n_eig, step, start)


def simulate(params: SimulationParams, stream: Stream | None = None, measures=SERIES_COLUMNS) -> TrajectoryRecord:
    """Full trajectory on [0, T]; deterministic given ``(params, stream)``.

    With ``nu = 0``, noise off and a control path this is the skeleton map.
    """
    if params.noise and stream is None:
        raise ValueError("noise on requires a stream")
    control = None if params.control is None else params.control.full_coords(params.cov)
    noise = stream_noise(params, stream) if params.noise else None
    res = integrate(params, params.zeta.coeffs, noise=noise, control=control, measures=measures,
                    snapshot_stride=max(params.stride, 1))
    return TrajectoryRecord(res.times, res.series, res.snapshot_times, res.snapshots, params.basis,
                            [] if stream is None else stream.as_list(), params.fingerprint())


def write_trajectory(record: TrajectoryRecord, outdir, params: SimulationParams | None = None) -> list[Path]:
    """Write ``series.csv``, one snapshot dump per stored time and ``manifest.json``."""
    out = Path(outdir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    cols = [c for c in SERIES_COLUMNS if c in record.series]
    lines = [",".join(["t", *cols])]
    for k, t in enumerate(record.times):
        lines.append(",".join([f"{t:.16e}", *(f"{record.series[c][k]:.16e}" for c in cols)]))
    files = [out / "series.csv"]
    files[0].write_text("\n".join(lines) + "\n")
    for i, t in enumerate(record.snapshot_times):
        p = out / "snapshots" / f"xi_{i:05d}.txt"
        p.write_text(dump_field(record.vorticity(i)))
        files.append(p)
    manifest = {"fingerprint": record.fingerprint, "stream": record.seed_coords, "scheme": SCHEME_VERSION,
                "snapshot_times": [float(t) for t in record.snapshot_times]}
    if params is not None:
        manifest.update({"nu": params.nu, "T": params.T, "dt": params.dt, "n_modes": params.basis.n_modes})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append(out / "manifest.json")
    return files


def trapezoid(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.trapezoid(y, x, axis=-1) if hasattr(np, "trapezoid") else np.trapz(y, x, axis=-1)


def trajectory_distance(a: TrajectoryRecord, b: TrajectoryRecord, metric: str = "X", beta: float = 1.0) -> float:
    """``X``: (int_0^T ||u_a - u_b||_{H^1/2}^2 dt)^1/2 by the trapezoid rule on the
    snapshot grid; ``weak``: max over snapshots of the D(A^-beta) distance."""
    if a.basis != b.basis:
        raise ValueError("trajectories live on different bases")
    if a.snapshot_times.shape != b.snapshot_times.shape or not np.allclose(a.snapshot_times, b.snapshot_times,
                                                                           rtol=0, atol=1e-12):
        raise ValueError("trajectory sample times are misaligned")
    basis = a.basis
    d = basis.biot_savart(a.snapshots) - basis.biot_savart(b.snapshots)
    if metric == "X":
        return float(np.sqrt(trapezoid(basis.hs_sq(d, 0.5, vector=True), a.snapshot_times)))
    if metric in ("weak", "weak_beta"):
        if beta <= 0.5:
            raise ValueError("weak metric requires beta > 1/2")
        return float(np.sqrt(basis.dual_sq(d, beta, vector=True)).max())
    raise ValueError(f"unknown metric {metric!r}")


# --------------------------------------------------------------------------
# vanishing viscosity
# --------------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    nu: np.ndarray
    d_x: np.ndarray
    d_x_stderr: np.ndarray
    d_weak: np.ndarray
    d_weak_stderr: np.ndarray
    n_samples: int
    slope: float
    monotone: bool
    warnings: list[str] = field(default_factory=list)

    def rows(self):
        for i in range(self.nu.size):
            yield (float(self.nu[i]), float(self.d_x[i]), float(self.d_x_stderr[i]),
                   float(self.d_weak[i]), float(self.d_weak_stderr[i]))


def skeleton_reference(params: SimulationParams, control: np.ndarray | None) -> np.ndarray:
    """Vorticity of the inviscid controlled solution at every step, shape ``(n_steps + 1, M, H)``."""
    sk = params.with_viscosity(0.0).replace(noise=False)
    res = integrate(sk, sk.zeta.coeffs, control=control, measures=(), snapshot_stride=1)
    return res.snapshots


def vanishing_viscosity_sweep(params: SimulationParams, nu_grid, n_samples: int = 1, stream: Stream | None = None,
                              beta: float = 1.0, chunk: int = 64) -> ConvergenceTable:
    """Distances between ``u^nu_h`` and the skeleton ``u^0_h`` along a decreasing ``nu`` grid.

    ``params`` fixes the initial condition, the (deterministic) control, the
    coefficients and the noise flag; its own ``nu`` is ignored.
    """
    nu_grid = np.asarray(nu_grid, dtype=float)
    if nu_grid.size < 3:
        raise ValueError("viscosity grid needs at least 3 points")
    if np.any(np.diff(nu_grid) >= 0) or np.any(nu_grid <= 0):
        raise ValueError("viscosity grid must be positive and strictly decreasing")
    if params.noise and stream is None:
        raise ValueError("noisy sweep requires a stream")
    control = None if params.control is None else params.control.full_coords(params.cov)
    ref = skeleton_reference(params, control)
    n_samples = n_samples if params.noise else 1
    dx = np.empty((nu_grid.size, n_samples))
    dw = np.empty((nu_grid.size, n_samples))
    for i, nu in enumerate(nu_grid):
        p = params.with_viscosity(float(nu))
        for start in range(0, n_samples, chunk):
            n = min(chunk, n_samples - start)
            xi0 = np.broadcast_to(p.zeta.coeffs, (n, *p.basis.spectral_shape))
            noise = ensemble_noise(p, stream.child(i), n, start) if p.noise else None
            res = integrate(p, xi0, noise=noise, control=control, measures=("dist_half", "dist_weak"),
                            snapshot_stride=0, reference=ref, beta=beta)
            dx[i, start:start + n] = np.sqrt(trapezoid(res.series["dist_half"] ** 2, res.times))
            dw[i, start:start + n] = res.series["dist_weak"].max(axis=-1)
    mean_x = dx.mean(axis=1)
    se = (lambda a: a.std(axis=1, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else (lambda a: np.zeros(a.shape[0]))
    pos = mean_x > 0
    slope = float(np.polyfit(np.log(nu_grid[pos]), np.log(mean_x[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    monotone = bool(np.all(np.diff(mean_x) < 0))
    msgs = []
    if not monotone:
        msgs.append("distances are not strictly decreasing along the viscosity grid")
        warnings.warn(msgs[-1], RuntimeWarning, stacklevel=2)
    return ConvergenceTable(nu_grid, mean_x, se(dx), dw.mean(axis=1), se(dw), n_samples, slope, monotone, msgs)


def weak_form_residual(record: TrajectoryRecord, params: SimulationParams, test_modes: int = 8) -> float:
    """Largest residual of the weak formulation against the lowest covariance test modes.

    Needs a noise-free record with snapshots at every step. The residual is a
    discretisation diagnostic; dealiasing makes it nonzero even in exact arithmetic.
    """
    if params.noise:
        raise ValueError("weak-form residual is only defined for noise-free runs")
    if record.snapshots.shape[0] != record.times.size:
        raise ValueError("weak-form residual needs snapshots at every step")
    b = params.basis
    cov = params.cov
    if cov is None:
        from .noise import build_covariance
        cov = build_covariance(b)
    V = cov.coords_to_coeffs(np.eye(cov.n_eig)[:test_modes])  # (m, 2, M, H)
    U = b.biot_savart(record.snapshots)                         # (n_t, 2, M, H)
    lhs = b.inner(U[:, None], V[None], vector=True)             # (n_t, m)
    AV = V * b.ksq
    visc = params.nu * b.inner(U[:, None], AV[None], vector=True)
    # <B(u, v), u> = -<B(u, u), v>; B(u, u) = P(u . grad u)
    up = b.to_physical(U * b.dealias_mask)
    grads = b.to_physical(np.stack([b.gradient(U[:, 0] * b.dealias_mask), b.gradient(U[:, 1] * b.dealias_mask)], axis=1))
    adv = np.einsum("tjxy,tijxy->tixy", up, grads)
    Buu = b.leray(b.to_spectral(adv) * b.dealias_mask)
    nonlin = -b.inner(Buu[:, None], V[None], vector=True)
    integrand = visc + nonlin
    if params.control is not None:
        control = params.control.full_coords(cov)
        f = np.stack([params.control_coef.apply_coeffs(t, U[k], _control_coeffs(params, control, min(t, params.T - 1e-12)))
                      for k, t in enumerate(record.times)])
        integrand = integrand - b.inner(f[:, None], V[None], vector=True)
    integral = np.concatenate([np.zeros((1, V.shape[0])),
                               np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(record.times)[:, None], axis=0)])
    res = lhs - lhs[0] + integral
    return float(np.abs(res).max())


def initial_vorticity(basis: SpectralBasis, kind: str = "random_smooth", amplitude: float = 1.0,
                      max_mode: int = 4, seed: int = 0) -> SpectralField:
    """Initial vorticity catalog: ``taylor_green``, ``random_smooth``, ``zero``.

    ``random_smooth`` draws Gaussian coefficients with ``|k|^-2`` decay on
    ``|k|_inf <= max_mode`` and rescales the velocity to ``max|u| = amplitude``.
    """
    if kind == "zero":
        return SpectralField.zeros(basis)
    if kind == "taylor_green":
        return SpectralField.from_function(basis, lambda x, y: -2.0 * amplitude * np.sin(x) * np.sin(y))
    if kind == "random_smooth":
        from .spectral import random_field
        xi = random_field(basis, "scalar", np.random.default_rng(seed), max_mode=max_mode, decay=2.0)
        umax = float(basis.sup(basis.biot_savart(xi.coeffs), vector=True))
        return xi * (amplitude / umax)
    raise ValueError(f"unknown initial condition {kind!r}")


def taylor_green(basis: SpectralBasis, amplitude: float = 1.0) -> SpectralField:
    return initial_vorticity(basis, "taylor_green", amplitude)


__all__ = [
    "ControlPath", "SimulationParams", "TrajectoryRecord", "ConvergenceTable", "IntegrationResult",
    "SimulationError", "build_basis", "catalog_control", "control_modes", "zero_control", "integrate",
    "measure", "simulate", "step", "trajectory_distance", "vanishing_viscosity_sweep", "write_trajectory",
    "initial_vorticity", "taylor_green", "skeleton_reference", "weak_form_residual", "ensemble_noise",
    "stream_noise", "SERIES_COLUMNS", "SCHEME_VERSION",
]
