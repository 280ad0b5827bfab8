"""Rate-function estimates, rare-event Monte Carlo and the small-noise diagnostic.

The rate of an event is approximated by minimising the control energy over
piecewise-constant controls on a truncated set of covariance modes, subject
to the skeleton (nu = 0, noise-free, controlled) trajectory meeting the event.
The constraint enters through a quadratic penalty whose weight is doubled
until the shortfall is within tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm as _normal

from .audit import admissible
from .dynamics import ControlPath, SimulationParams, control_modes, ensemble_noise, integrate, trapezoid
from .rng import BLOCK, Stream

OBSERVABLES = ("terminal_H_norm", "terminal_mode", "X_norm")
Z95 = float(_normal.ppf(0.975))


@dataclass(frozen=True)
class RareEventSpec:
    """``observable(u) >= level`` (``exceed``) or ``<= level`` (``deceed``).

    ``mode = (k1, k2, parity)`` selects the eigenfunction for ``terminal_mode``.
    """

    observable: str
    level: float
    direction: str = "exceed"
    mode: tuple | None = None

    def __post_init__(self):
        if self.observable not in OBSERVABLES:
            raise ValueError(f"observable must be one of {OBSERVABLES}; arbitrary functionals are not supported")
        if self.direction not in ("exceed", "deceed"):
            raise ValueError("direction must be 'exceed' or 'deceed'")
        if self.observable == "terminal_mode" and self.mode is None:
            raise ValueError("terminal_mode needs a mode (k1, k2, parity)")

    @property
    def measures(self) -> tuple:
        return ("normHalf",) if self.observable == "X_norm" else ()

    def evaluate(self, params: SimulationParams, final: np.ndarray, times=None, series=None) -> np.ndarray:
        b = params.basis
        if self.observable == "terminal_H_norm":
            return np.sqrt(b.l2sq(b.biot_savart(final), vector=True))
        if self.observable == "terminal_mode":
            k1, k2, parity = self.mode
            j = params.cov.index_of(int(k1), int(k2), parity)
            return params.cov.coeffs_to_coords(b.biot_savart(final))[..., j]
        return np.sqrt(trapezoid(series["normHalf"] ** 2, times))

    def occurs(self, values: np.ndarray) -> np.ndarray:
        return values >= self.level if self.direction == "exceed" else values <= self.level

    def shortfall(self, values: np.ndarray) -> np.ndarray:
        d = self.level - values if self.direction == "exceed" else values - self.level
        return np.maximum(d, 0.0)

    def is_rare(self, skeleton_value: float) -> bool:
        """True when the uncontrolled skeleton misses the event."""
        return not bool(self.occurs(np.asarray(skeleton_value)))


# --------------------------------------------------------------------------
# control energy
# --------------------------------------------------------------------------

def control_energy(h: ControlPath) -> float:
    """``1/2 int_0^T |h|_0^2 dt``, exact for piecewise-constant paths."""
    return h.energy


# --------------------------------------------------------------------------
# skeleton evaluation
# --------------------------------------------------------------------------

def skeleton_params(params: SimulationParams) -> SimulationParams:
    """The nu = 0, noise-free setting driven by the control coefficient at nu = 0."""
    return params.with_viscosity(0.0).replace(noise=False, control=None)


def skeleton_observable(params: SimulationParams, spec: RareEventSpec, controls: np.ndarray | None) -> np.ndarray:
    """Observable of the skeleton for a batch of full-eigenbasis controls ``(B, n_int, n_eig)``."""
    sk = skeleton_params(params)
    B = 1 if controls is None else controls.shape[0]
    xi0 = np.broadcast_to(sk.zeta.coeffs, (B, *sk.basis.spectral_shape))
    res = integrate(sk, xi0, control=controls, measures=spec.measures, snapshot_stride=0)
    return spec.evaluate(sk, res.final, res.times, res.series)


# --------------------------------------------------------------------------
# rate estimate
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OptConfig:
    n_intervals: int = 10
    mode_cutoff: int = 4
    starts: int = 4
    lambda0: float = 1.0
    lambda_max: float = 1e10
    tol: float = 1e-3
    maxiter: int = 200
    fd_step: float = 1e-6
    seed: int = 0


@dataclass
class RateEstimate:
    value: float
    control: ControlPath
    feasibility_gap: float
    observable: float
    trace: list = field(default_factory=list)
    local_minima: list = field(default_factory=list)

    def time_variation(self) -> float:
        """``(max - min) / |mean|`` over intervals of the dominant control coordinate."""
        c = self.control.coords
        if not np.any(c):
            return 0.0
        j = int(np.argmax(np.sum(c**2, axis=0)))
        return float((c[:, j].max() - c[:, j].min()) / abs(c[:, j].mean()))

    def to_dict(self) -> dict:
        return {"I": self.value, "feasibility_gap": self.feasibility_gap, "observable": self.observable,
                "time_variation": self.time_variation(), "trace": self.trace, "local_minima": self.local_minima,
                "n_intervals": self.control.n_intervals, "modes": self.control.modes.tolist()}


class Unreachable(RuntimeError):
    pass


def rate_estimate(params: SimulationParams, spec: RareEventSpec, opt: OptConfig = OptConfig()) -> RateEstimate:
    """Penalised minimisation of the control energy with lambda doubling and multi-start.

    ``J(h) = energy(h) + lambda * shortfall(observable)^2``; the observable
    gradient is taken by central differences, evaluated as one batched
    skeleton run. Start 0 is the zero control; the others are seeded from
    ``Stream(opt.seed).child("rate", start)``.
    """
    if params.cov is None or params.control_coef is None:
        raise ValueError("rate estimate needs a covariance and a control coefficient")
    cov = params.cov
    T = params.T
    modes = control_modes(cov, opt.mode_cutoff)
    shape = (opt.n_intervals, modes.size)
    dt_c = T / opt.n_intervals
    tol = opt.tol * max(abs(spec.level), 1e-12)
    template = ControlPath(T, np.zeros(shape), modes)

    def full(x):
        x = np.atleast_2d(x).reshape(-1, *shape)
        out = np.zeros((x.shape[0], opt.n_intervals, cov.n_eig))
        out[:, :, modes] = x
        return out

    v0 = float(skeleton_observable(params, spec, full(np.zeros(shape)))[0])
    if spec.occurs(np.asarray(v0)):
        return RateEstimate(0.0, template, 0.0, v0, [{"note": "uncontrolled skeleton meets the event"}],
                            [{"start": 0, "energy": 0.0, "gap": 0.0, "feasible": True}])

    n = int(np.prod(shape))
    trace, minima = [], []
    best = None

    def objective(x, lam):
        eps = opt.fd_step * max(1.0, float(np.abs(x).max()))
        X = np.concatenate([x[None], x + eps * np.eye(n), x - eps * np.eye(n)])
        vals = skeleton_observable(params, spec, full(X))
        v = vals[0]
        grad_v = (vals[1:n + 1] - vals[n + 1:]) / (2 * eps)
        s = float(spec.shortfall(np.asarray(v)))
        sign = -1.0 if spec.direction == "exceed" else 1.0
        J = 0.5 * dt_c * float(x @ x) + lam * s * s
        g = dt_c * x + (2.0 * lam * s * sign * grad_v if s > 0 else 0.0)
        return J, g

    for start in range(opt.starts):
        if start == 0:
            x = np.zeros(n)
        else:
            rng = Stream(opt.seed).child("rate", start).generator()
            x = rng.standard_normal(n) * abs(spec.level) / math.sqrt(n * T)
        lam = opt.lambda0
        found = None
        while lam <= opt.lambda_max:
            res = minimize(objective, x, args=(lam,), jac=True, method="L-BFGS-B",
                           options={"maxiter": opt.maxiter, "gtol": 1e-12, "ftol": 1e-15})
            x = res.x
            v = float(skeleton_observable(params, spec, full(x))[0])
            gap = float(spec.shortfall(np.asarray(v)))
            trace.append({"start": start, "lambda": lam, "iterations": int(res.nit), "J": float(res.fun),
                          "gap": gap, "grad_norm": float(np.linalg.norm(res.jac))})
            if gap <= tol:
                found = (0.5 * dt_c * float(x @ x), x.copy(), gap, v)
                break
            lam *= 2.0
        if found is None:
            minima.append({"start": start, "energy": 0.5 * dt_c * float(x @ x), "gap": gap, "feasible": False})
            continue
        minima.append({"start": start, "energy": found[0], "gap": found[2], "feasible": True})
        if best is None or found[0] < best[0]:
            best = found
    if best is None:
        raise Unreachable("target unreachable at this control resolution")
    energy, x, gap, v = best
    return RateEstimate(energy, template.with_coords(x.reshape(shape)), gap, v, trace, minima)


def linear_rate(level: float, c0: float, T: float, q: float = 1.0) -> float:
    """Closed-form rate ``r^2 / (2 c0^2 q T)`` of a one-mode linear-quadratic problem."""
    return level**2 / (2.0 * c0**2 * q * T)


# --------------------------------------------------------------------------
# Monte Carlo tails
# --------------------------------------------------------------------------

@dataclass
class TailEstimate:
    nu: float
    p: float
    ci_lo: float
    ci_hi: float
    stderr: float
    n_samples: int
    tilted: bool
    ess: float
    inconclusive: bool = False
    mean_weight: float = 1.0
    weight_stderr: float = 0.0

    @property
    def nu_log_p(self) -> float:
        return self.nu * math.log(self.p) if self.p > 0 else -math.inf

    def to_dict(self) -> dict:
        return dict(self.__dict__, nu_log_p=self.nu_log_p)


def _wilson(k: int, n: int) -> tuple[float, float]:
    p = k / n
    den = 1.0 + Z95**2 / n
    mid = (p + Z95**2 / (2 * n)) / den
    half = Z95 * math.sqrt(p * (1 - p) / n + Z95**2 / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def mc_tail(params: SimulationParams, spec: RareEventSpec, n_samples: int, stream: Stream,
            tilt: ControlPath | None = None, chunk: int = 16 * BLOCK) -> TailEstimate:
    """``P(event)`` at ``params.nu`` by plain MC or by importance sampling under the tilt ``h``.

    With a tilt the ensemble is driven by ``sigma h dt`` and every sample carries the
    likelihood ratio ``exp(-nu^-1/2 int (h, dW)_0 - (2 nu)^-1 int |h|_0^2 dt)``.
    """
    if not params.nu > 0 or not params.noise:
        raise ValueError("tail estimates need nu > 0 and noise on")
    p = params.replace(sigma_tilde=None, control=None)
    ctrl = None if tilt is None else tilt.full_coords(p.cov)
    hits = 0
    ys, ws = [], []
    for start in range(0, n_samples, chunk):
        n = min(chunk, n_samples - start)
        xi0 = np.broadcast_to(p.zeta.coeffs, (n, *p.basis.spectral_shape))
        res = integrate(p, xi0, noise=ensemble_noise(p, stream, n, start), control=ctrl, tilt=tilt is not None,
                        measures=spec.measures, snapshot_stride=0)
        occ = spec.occurs(spec.evaluate(p, res.final, res.times, res.series))
        if tilt is None:
            hits += int(np.sum(occ))
        else:
            w = np.exp(res.log_weights)
            ws.append(w)
            ys.append(w * occ)
    if tilt is None:
        ph = hits / n_samples
        lo, hi = _wilson(hits, n_samples)
        se = math.sqrt(ph * (1 - ph) / n_samples)
        return TailEstimate(params.nu, ph, lo, hi, se, n_samples, False, float(n_samples))
    y = np.concatenate(ys)
    w = np.concatenate(ws)
    ph = float(y.mean())
    se = float(y.std(ddof=1) / math.sqrt(n_samples))
    ess = float(y.sum() ** 2 / np.sum(y**2)) if np.any(y) else 0.0
    return TailEstimate(params.nu, ph, max(0.0, ph - Z95 * se), ph + Z95 * se, se, n_samples, True, ess,
                        ess < 10, float(w.mean()), float(w.std(ddof=1) / math.sqrt(n_samples)))


# --------------------------------------------------------------------------
# diagnostic table
# --------------------------------------------------------------------------

@dataclass
class LdpTable:
    rows: list
    rate: float
    intercept: float
    slope: float
    final_gap: float
    gap_shrinks: bool
    trend_flag: bool

    def csv(self) -> str:
        lines = ["nu,p_hat,ci_lo,ci_hi,nu_log_p,minus_I"]
        for r in self.rows:
            lines.append(",".join(f"{r[k]:.17g}" for k in ("nu", "p", "ci_lo", "ci_hi", "nu_log_p", "minus_I")))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def ldp_diagnostic(rate: RateEstimate | float, results: list[TailEstimate]) -> LdpTable:
    """Rows ``(nu, p, nu log p, -I, gap)`` along decreasing nu and the fit ``nu log p = a + b nu``.

    ``gap`` is ``|nu log p + I| / I`` (absolute when ``I = 0``). ``trend_flag`` is raised
    when the gap fails to decrease along the grid; no verdict is attached to it.
    """
    I = rate.value if isinstance(rate, RateEstimate) else float(rate)
    ok = sorted((r for r in results if not r.inconclusive and r.p > 0), key=lambda r: -r.nu)
    if len(ok) < 3:
        raise ValueError("diagnostic needs at least 3 grid points with conclusive estimates")
    rows = []
    for r in ok:
        gap = abs(r.nu_log_p + I) / I if I > 0 else abs(r.nu_log_p)
        rows.append({"nu": r.nu, "p": r.p, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "nu_log_p": r.nu_log_p,
                     "minus_I": -I, "gap": gap, "ess": r.ess})
    nus = np.array([r["nu"] for r in rows])
    nlp = np.array([r["nu_log_p"] for r in rows])
    slope, intercept = np.polyfit(nus, nlp, 1)
    gaps = np.array([r["gap"] for r in rows])
    shrinks = bool(np.all(np.diff(gaps) < 0))
    return LdpTable(rows, I, float(intercept), float(slope), float(gaps[-1]), shrinks, not shrinks)


# --------------------------------------------------------------------------
# compactness / continuity probe
# --------------------------------------------------------------------------

@dataclass
class CompactnessReport:
    mode: str
    data: dict

    def to_dict(self) -> dict:
        return {"mode": self.mode, **{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.data.items()}}


def _x_distances(basis, snaps: np.ndarray, times: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d = basis.biot_savart(snaps - ref)
    return np.sqrt(trapezoid(basis.hs_sq(d, 0.5, vector=True), times))


def _resample(h: ControlPath, n_intervals: int) -> np.ndarray:
    if n_intervals % h.n_intervals:
        raise ValueError("probe resolution must be a multiple of the base control resolution")
    return np.repeat(h.coords, n_intervals // h.n_intervals, axis=0)


def compactness_probe(params: SimulationParams, h_base: ControlPath, M: float, mode: str = "weak_continuity",
                      direction=None, amplitude: float | None = None, ns=(1, 2, 4, 8, 16),
                      n_controls: int = 32, seed: int = 0, snapshot_stride: int | None = None) -> CompactnessReport:
    """Skeleton continuity probes on S_M.

    ``weak_continuity``: ``h_n = h_base + amplitude * direction * sin(2 pi n t / T)``, a weakly
    null perturbation; reports ``d_X(u_{h_n}, u_{h_base})`` along ``ns``.
    ``level_set``: ``n_controls`` random controls on the sphere ``int |h|_0^2 = M``, their pairwise
    ``d_X`` matrix and its change when the time step is halved.
    """
    if not admissible(h_base, M):
        raise ValueError("base control is outside S_M")
    sk = skeleton_params(params)
    b = sk.basis
    cov = sk.cov
    T = sk.T
    n_steps = sk.n_steps
    stride = snapshot_stride or max(1, n_steps // 50)
    if mode == "weak_continuity":
        n_int = max(h_base.n_intervals, 8 * max(ns))
        n_int = -(-n_int // h_base.n_intervals) * h_base.n_intervals
        base = _resample(h_base, n_int)
        g = np.zeros(h_base.modes.size)
        if direction is None:
            g[0] = 1.0
        else:
            g[:] = np.asarray(direction, dtype=float)
        norm_base = math.sqrt(2.0 * h_base.energy)
        if amplitude is None:
            amplitude = (math.sqrt(M) - norm_base) / (np.linalg.norm(g) * math.sqrt(T)) if np.any(g) else 0.0
        mids = (np.arange(n_int) + 0.5) * T / n_int
        paths = [base] + [base + amplitude * np.sin(2 * np.pi * n * mids / T)[:, None] * g[None] for n in ns]
        for c in paths:
            if not admissible(ControlPath(T, c, h_base.modes), M):
                raise ValueError("perturbed control leaves S_M; lower the amplitude")
        full = np.zeros((len(paths), n_int, cov.n_eig))
        full[:, :, h_base.modes] = np.stack(paths)
        xi0 = np.broadcast_to(sk.zeta.coeffs, (len(paths), *b.spectral_shape))
        res = integrate(sk, xi0, control=full, measures=(), snapshot_stride=stride)
        snaps = np.moveaxis(res.snapshots, 0, 1)
        d = _x_distances(b, snaps[1:], res.snapshot_times, snaps[:1])
        passed = bool(d[-1] <= 0.25 * d[0]) if d[0] > 0 else bool(np.all(d == 0))
        return CompactnessReport(mode, {"n": list(ns), "d_X": d, "amplitude": amplitude, "passed": passed})
    if mode == "level_set":
        rng = Stream(seed).child("level_set").generator()
        c = rng.standard_normal((n_controls, h_base.n_intervals, h_base.modes.size))
        energy = 0.5 * np.sum(c**2, axis=(1, 2)) * h_base.interval
        c *= np.sqrt(M / (2.0 * energy))[:, None, None]
        full = np.zeros((n_controls, h_base.n_intervals, cov.n_eig))
        full[:, :, h_base.modes] = c
        xi0 = np.broadcast_to(sk.zeta.coeffs, (n_controls, *b.spectral_shape))
        mats = []
        for refine, st in ((sk, stride), (sk.replace(dt=sk.dt / 2), 2 * stride)):
            res = integrate(refine, xi0, control=full, measures=(), snapshot_stride=st)
            u = b.biot_savart(np.moveaxis(res.snapshots, 0, 1)) * np.sqrt((1.0 + b.ksq) ** 0.5)
            flat = (u * np.sqrt(b.multiplicity * 4 * np.pi**2)).reshape(n_controls, u.shape[1], -1)
            G = np.einsum("itk,jtk->tij", flat, np.conj(flat)).real
            diag = np.einsum("tii->ti", G)
            d2 = np.maximum(diag[:, :, None] + diag[:, None, :] - 2 * G, 0.0)
            D = np.sqrt(trapezoid(np.moveaxis(d2, 0, -1), res.snapshot_times))
            np.fill_diagonal(D, 0.0)
            mats.append(0.5 * (D + D.T))
        change = float(np.abs(mats[0] - mats[1]).max() / max(mats[1].max(), 1e-300))
        return CompactnessReport(mode, {"distances": mats[0], "distances_refined": mats[1],
                                        "refinement_change": change, "n_controls": n_controls})
    raise ValueError(f"unknown probe mode {mode!r}")


__all__ = [
    "CompactnessReport", "LdpTable", "OptConfig", "RareEventSpec", "RateEstimate", "TailEstimate", "Unreachable",
    "admissible", "compactness_probe", "control_energy", "ldp_diagnostic", "linear_rate", "mc_tail",
    "rate_estimate", "skeleton_observable", "skeleton_params", "OBSERVABLES",
]
