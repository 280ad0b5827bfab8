"""Named experiment suites, run manifests and reports.

Stream layout: the master seed ``s`` gives ``Stream(s)``; suites read
``child(<suite>, ...)`` coordinates (certificates: ``("certificates",)`` then
``(nu index, control index)`` and ensemble blocks; sweeps: ``("sweep", control index)``;
ldp: ``("ldp", nu index)``), so adding samples or grid points never perturbs
existing draws.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
import traceback
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import __version__
from .audit import (dissipation_certificate, energy_certificate, enstrophy_certificate, lq_vorticity_certificate,
                    run_ensemble_grid, time_regularity_certificate, uniqueness_contraction_probe)
from .config import fingerprint, serialize
from .dynamics import (SimulationParams, catalog_control, initial_vorticity, simulate, taylor_green,
                       vanishing_viscosity_sweep, write_trajectory)
from .ldp import OptConfig, RareEventSpec, compactness_probe, ldp_diagnostic, linear_rate, mc_tail, rate_estimate
from .noise import build_covariance, make_coefficient
from .rng import Stream
from .spectral import build_basis, random_field

SEED_ENV = "SNSLAB_SEED"


def fmt(x) -> str:
    return f"{float(x):.17g}"


class StageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# setup from config
# --------------------------------------------------------------------------

def build_setup(cfg: dict, nu: float | None = None, **overrides) -> SimulationParams:
    b = build_basis(cfg["basis"]["n_modes"])
    nz = cfg["noise"]
    pairs = nz["modes"]
    modes = [(pairs[i], pairs[i + 1]) for i in range(0, len(pairs), 2)] or None
    cov = build_covariance(b, nz["alpha"], nz["amplitude"], nz["mode_cutoff"] or None,
                           overrides.pop("cov_modes", modes))
    s = cfg["sigma"]
    sigma = make_coefficient(b, s["g1"], s["g2"], "diffusion", s["c_delta"])
    st = cfg["sigma_tilde"]
    sigma_tilde = None if st["same_as_sigma"] else make_coefficient(b, st["g1"], st["g2"], "control", st["c_delta"])
    ini = cfg["initial"]
    zeta = overrides.pop("zeta", None) or initial_vorticity(b, ini["kind"], ini["amplitude"], ini["max_mode"], ini["seed"])
    t = cfg["time"]
    nu = cfg["grid"]["nu"][0] if nu is None else nu
    kw = dict(basis=b, nu=nu, T=t["T"], dt=t["dt"], zeta=zeta, sigma=sigma, sigma_tilde=sigma_tilde, cov=cov,
              noise=nu > 0, stride=t["stride"])
    kw.update(overrides)
    return SimulationParams(**kw)


# --------------------------------------------------------------------------
# suites; each returns a list of verdict entries and writes its own files
# --------------------------------------------------------------------------

def _entry(bound_id: str, passed: bool | str, **data) -> dict:
    verdict = passed if isinstance(passed, str) else ("pass" if passed else "fail")
    return {"bound_id": bound_id, "verdict": verdict, **data}


def suite_conservation(cfg: dict, out: Path, master: Stream) -> list[dict]:
    cc = cfg["conservation"]
    entries = []
    rng = master.child("conservation").generator()
    worst_t = worst_d = 0.0
    for n in cc["sizes"]:
        b = build_basis(n)
        xi = b.to_spectral(rng.standard_normal((cc["n_fields"], b.grid_size, b.grid_size))) * b.retained
        u = b.biot_savart(xi)
        tr = b.transport(u, xi)
        rel = np.abs(b.inner(tr, xi)) / np.maximum(np.sqrt(b.l2sq(tr) * b.l2sq(xi)), 1e-300)
        worst_t = max(worst_t, float(rel.max()))
        v = b.to_spectral(rng.standard_normal((cc["n_fields"], 2, b.grid_size, b.grid_size)))
        div = np.sqrt(b.l2sq(b.divergence(b.leray(v)))) / np.sqrt(b.l2sq(v, vector=True))
        worst_d = max(worst_d, float(div.max()))
    entries.append(_entry("transport_orthogonality", worst_t <= 1e-12, value=worst_t, tolerance=1e-12))
    entries.append(_entry("leray_divergence", worst_d <= 1e-12, value=worst_d, tolerance=1e-12))

    p = build_setup(cfg, 0.0, noise=False, dt=cc["dt"], stride=max(1, int(round(0.1 / cc["dt"]))))
    rec = simulate(p)
    write_trajectory(rec, out / "trajectory", p)
    for name in ("normH", "curl_l2", "curl_l4", "curl_l8"):
        s = rec.series[name]
        drift = float(np.abs(s / s[0] - 1.0).max()) if s[0] > 0 else float(np.abs(s).max())
        entries.append(_entry(f"inviscid_drift_{name}", drift <= cc["tol"], value=drift, tolerance=cc["tol"]))

    b = p.basis
    tg = taylor_green(b)
    steady = build_setup(cfg, 0.0, noise=False, dt=cc["dt"], zeta=tg, stride=1, T=cc["dt"] * 10)
    rec = simulate(steady)
    change = float(np.abs(np.diff(rec.snapshots, axis=0)).max())
    entries.append(_entry("taylor_green_steady", change <= 1e-10, value=change, tolerance=1e-10))
    for nu in (0.1, 0.01):
        pv = build_setup(cfg, nu, noise=False, dt=cc["dt"], zeta=tg, stride=max(1, int(round(0.1 / cc["dt"]))))
        rec = simulate(pv)
        err = max(float(np.abs(rec.snapshots[i] - tg.coeffs * math.exp(-2 * nu * t)).max())
                  for i, t in enumerate(rec.snapshot_times))
        entries.append(_entry(f"taylor_green_decay_nu{nu:g}", err <= 1e-8, value=err, tolerance=1e-8))
    return entries


def _controls(names, cov, T, M, intervals, seed):
    return [None if n == "zero" else catalog_control(n, cov, T, M, intervals, seed=seed) for n in names]


def suite_certificates(cfg: dict, out: Path, master: Stream) -> list[dict]:
    ce = cfg["certificates"]
    p = build_setup(cfg)
    nu_grid = cfg["grid"]["nu"]
    controls = _controls(ce["controls"], p.cov, p.T, ce["M"], ce["control_intervals"], cfg[""]["seed"])
    grid = run_ensemble_grid(p, nu_grid, controls, ce["n_samples"], master.child("certificates"), ce["M"],
                             q_set=tuple(ce["q"]), gram_stride=ce["gram_stride"] if ce["time_regularity"] else None)
    certs = [energy_certificate(grid=grid, p=k, M=ce["M"]) for k in ce["p"]]
    certs.append(dissipation_certificate(grid=grid, M=ce["M"]))
    certs += [enstrophy_certificate(grid=grid, p=k, M=ce["M"]) for k in ce["p"]]
    certs += [lq_vorticity_certificate(p, grid=grid, q=q, M=ce["M"]) for q in ce["q"]]
    if ce["time_regularity"]:
        certs.append(time_regularity_certificate(p, grid=grid, alpha=ce["alpha"], p=2, M=ce["M"]))
    lines = ["bound_id,nu,control,mean,stderr,ci_lo,ci_hi,verdict"]
    for c in certs:
        lo, hi = c.ci
        for a, nu in enumerate(c.nu_grid):
            for k in range(c.mean.shape[1]):
                lines.append(",".join([c.bound_id, fmt(nu), ce["controls"][k], fmt(c.mean[a, k]), fmt(c.stderr[a, k]),
                                       fmt(lo[a, k]), fmt(hi[a, k]), c.verdict]))
    (out / "certificates.csv").write_text("\n".join(lines) + "\n")
    return [c.to_dict() for c in certs]


def suite_viscosity_sweep(cfg: dict, out: Path, master: Stream) -> list[dict]:
    sw = cfg["sweep"]
    nu_grid = cfg["grid"]["nu"]
    base = build_setup(cfg, nu_grid[0])
    base = base.replace(noise=sw["noise"])
    rows = ["case,nu,d_x,d_x_stderr,d_weak,d_weak_stderr"]
    entries = []
    cases = [(n, catalog_control(n, base.cov, base.T, sw["M"], sw["control_intervals"], seed=cfg[""]["seed"]), base)
             for n in sw["controls"]]
    if sw["taylor_green"]:
        tg = build_setup(cfg, nu_grid[0], zeta=taylor_green(base.basis), noise=False)
        cases.append(("taylor_green", None, tg))
    for i, (name, h, p) in enumerate(cases):
        table = vanishing_viscosity_sweep(p.replace(control=h), nu_grid, sw["n_samples"], master.child("sweep", i),
                                          beta=sw["beta"])
        for r in table.rows():
            rows.append(",".join([name, *(fmt(v) for v in r)]))
        entries.append(_entry(f"sweep_{name}_monotone", table.monotone, slope=table.slope,
                              d_x=table.d_x.tolist(), nu_grid=list(nu_grid)))
        if name == "taylor_green":
            entries.append(_entry("sweep_taylor_green_slope", abs(table.slope - 1.0) <= 0.05, value=table.slope,
                                  tolerance=0.05))
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    return entries


def ldp_setup(cfg: dict):
    ld = cfg["ldp"]
    k1, k2 = ld["mode"]
    kw = {}
    if ld["linear"]:
        b = build_basis(cfg["basis"]["n_modes"])
        kw = {"transport": False, "cov_modes": [(k1, k2)], "zeta": initial_vorticity(b, "zero")}
    p = build_setup(cfg, ld["nu"][0], **kw)
    spec = RareEventSpec(ld["observable"], ld["level"], ld["direction"], (k1, k2, ld["parity"]))
    opt = OptConfig(n_intervals=ld["n_intervals"], mode_cutoff=ld["mode_cutoff"], starts=ld["starts"], tol=ld["tol"],
                    seed=cfg[""]["seed"])
    return p, spec, opt


def suite_ldp(cfg: dict, out: Path, master: Stream) -> list[dict]:
    ld = cfg["ldp"]
    p, spec, opt = ldp_setup(cfg)
    rate = rate_estimate(p, spec, opt)
    entries = [_entry("ldp_rate_feasible", rate.feasibility_gap <= opt.tol * abs(spec.level), value=rate.value,
                      gap=rate.feasibility_gap)]
    coef = p.control_coef
    if ld["linear"] and coef.uniform_scalar is not None and spec.observable == "terminal_mode":
        j = p.cov.index_of(*spec.mode)
        ref = linear_rate(spec.level, coef.uniform_scalar, p.T, float(p.cov.weights[j]))
        err = abs(rate.value - ref) / ref
        entries.append(_entry("ldp_rate_closed_form", err <= 0.02, value=rate.value, reference=ref, rel_error=err,
                              time_variation=rate.time_variation()))
    (out / "rate_estimate.json").write_text(json.dumps(rate.to_dict(), indent=2, sort_keys=True) + "\n")
    k = p.cov.eig_wavenumbers[rate.control.modes]
    half = p.cov.n_k
    labels = [f"{a}:{b}:{'cos' if m < half else 'sin'}" for (a, b), m in zip(k, rate.control.modes)]
    lines = [",".join(["interval", *labels])]
    for i, row in enumerate(rate.control.coords):
        lines.append(",".join([str(i), *(fmt(v) for v in row)]))
    (out / "hstar.csv").write_text("\n".join(lines) + "\n")
    results = []
    for i, (nu, n) in enumerate(zip(ld["nu"], ld["n_samples"])):
        results.append(mc_tail(p.with_viscosity(nu), spec, n, master.child("ldp", i),
                               tilt=None if rate.value == 0 else rate.control))
    entries.append(_entry("ldp_mc_conclusive", all(not r.inconclusive for r in results),
                          ess=[r.ess for r in results]))
    try:
        table = ldp_diagnostic(rate, results)
    except ValueError as exc:
        (out / "ldp_table.csv").write_text("nu,p_hat,ci_lo,ci_hi,nu_log_p,minus_I\n")
        entries.append(_entry("ldp_gap", "inconclusive", message=str(exc)))
        return entries
    (out / "ldp_table.csv").write_text(table.csv())
    entries.append(_entry("ldp_gap", table.final_gap <= ld["gap_tolerance"], value=table.final_gap,
                          tolerance=ld["gap_tolerance"], intercept=table.intercept, gap_shrinks=table.gap_shrinks,
                          trend_flag=table.trend_flag))
    return entries


def suite_skeleton(cfg: dict, out: Path, master: Stream) -> list[dict]:
    sk = cfg["skeleton"]
    p = build_setup(cfg, 0.0, noise=False)
    h = catalog_control(sk["control"], p.cov, p.T, sk["M"] / 4, sk["control_intervals"], seed=cfg[""]["seed"])
    rec = simulate(p.replace(control=h))
    write_trajectory(rec, out / "trajectory", p)
    entries = []
    twin = uniqueness_contraction_probe(p, None)
    entries.append(_entry("skeleton_twin", twin.passed, value=float(twin.distance.max()), tolerance=1e-10))
    rng = master.child("skeleton").generator()
    d = random_field(p.basis, "scalar", rng, max_mode=p.basis.n_modes // 2, decay=2.0)
    d = d * (sk["perturbation"] / math.sqrt(float(p.basis.l2sq(p.basis.biot_savart(d.coeffs), vector=True))))
    pert = uniqueness_contraction_probe(p, d, residual_tol=sk["residual_tol"])
    entries.append(_entry("skeleton_gronwall", pert.passed, value=pert.residual, tolerance=sk["residual_tol"],
                          rate=pert.rate, envelope_rate=pert.envelope_rate))
    probe = compactness_probe(p, h, sk["M"], "weak_continuity", ns=tuple(sk["probe_ns"]))
    entries.append(_entry("skeleton_weak_continuity", probe.data["passed"], d_x=probe.data["d_X"].tolist(),
                          n=probe.data["n"]))
    return entries


SUITE_FUNCS = {
    "conservation": suite_conservation,
    "certificates": suite_certificates,
    "viscosity_sweep": suite_viscosity_sweep,
    "ldp": suite_ldp,
    "skeleton": suite_skeleton,
}


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(cfg: dict) -> tuple[int, str]:
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return cfg[""]["seed"], "config"
    seed = int(env)
    if seed < 0:
        raise ValueError(f"{SEED_ENV} must be non-negative")
    return seed, "env"


def run_suite(cfg: dict, out: str | Path | None = None, threads: int = 1) -> dict:
    """Execute the configured suite; returns the manifest (also written to ``manifest.json``).

    ``manifest["exit_code"]`` is 0 iff every stage ran and every verdict is ``pass``.
    """
    seed, source = resolve_seed(cfg)
    cfg = json.loads(json.dumps(cfg))
    cfg[""]["seed"] = seed
    out = Path(out or cfg[""]["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(serialize(cfg))
    suite = cfg[""]["suite"]
    stages = {}
    entries = []
    t0 = time.perf_counter()
    try:
        with sfft.set_workers(max(1, int(threads))):
            entries = SUITE_FUNCS[suite](cfg, out, Stream(seed))
        stages[suite] = "ok"
    except Exception as exc:  # stage failures are recorded, not raised
        stages[suite] = f"failed: {type(exc).__name__}: {exc}"
        (out / "FAILED").write_text(traceback.format_exc())
    (out / "certificates.json").write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[path.relative_to(out).as_posix()] = sha256_file(path)
    ok = all(s == "ok" for s in stages.values()) and all(e["verdict"] == "pass" for e in entries)
    manifest = {
        "artifact_version": __version__, "config_fingerprint": fingerprint(cfg), "suite": suite, "seed": seed,
        "seed_source": source, "threads": int(threads), "wall_time": time.perf_counter() - t0, "stages": stages,
        "files": files, "status": "ok" if all(s == "ok" for s in stages.values()) else "failed",
        "exit_code": 0 if ok else 1,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _ratio(e: dict):
    r = e.get("ratio")
    if isinstance(r, list) and r:
        return float(max(r))
    return None


def report(manifest_path: str | Path, fmt_name: str = "summary_text") -> list[Path]:
    """Aggregate ``certificates.json`` (and ``ldp_table.csv`` when present) next to a manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    out = manifest_path.parent
    cert_path = out / "certificates.json"
    if not cert_path.is_file():
        raise FileNotFoundError(f"missing input: {cert_path}")
    entries = json.loads(cert_path.read_text())
    rows = []
    for e in entries:
        rows.append({"bound_id": e["bound_id"], "verdict": e["verdict"], "ratio": _ratio(e),
                     "value": e.get("value", e.get("constant"))})
    ldp_rows = []
    ldp_path = out / "ldp_table.csv"
    if ldp_path.is_file():
        lines = ldp_path.read_text().splitlines()
        head = lines[0].split(",")
        ldp_rows = [dict(zip(head, map(float, ln.split(",")))) for ln in lines[1:] if ln]
    written = []
    if fmt_name == "csv":
        p = out / "report.csv"
        lines = ["bound_id,verdict,ratio,value"]
        for r in rows:
            lines.append(",".join([r["bound_id"], r["verdict"], "" if r["ratio"] is None else fmt(r["ratio"]),
                                   "" if r["value"] is None or isinstance(r["value"], list) else fmt(r["value"])]))
        p.write_text("\n".join(lines) + "\n")
        written.append(p)
    elif fmt_name == "json":
        p = out / "report.json"
        p.write_text(json.dumps({"certificates": rows, "ldp_table": ldp_rows,
                                 "fingerprint": json.loads(manifest_path.read_text()).get("config_fingerprint")},
                                indent=2, sort_keys=True) + "\n")
        written.append(p)
    elif fmt_name == "summary_text":
        p = out / "report.txt"
        lines = [f"{r['bound_id']}: {r['verdict']} ratio={'n/a' if r['ratio'] is None else format(r['ratio'], '.4g')}"
                 for r in rows]
        p.write_text("\n".join(lines) + ("\n" if lines else ""))
        written.append(p)
    else:
        raise ValueError(f"unknown report format {fmt_name!r}")
    return written


__all__ = ["SEED_ENV", "SUITE_FUNCS", "build_setup", "report", "resolve_seed", "run_suite", "sha256_file"]
