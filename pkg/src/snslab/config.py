"""Experiment configuration: TOML text with a strict, typed schema.

Every key has a default; unknown keys, type mismatches and constraint
violations raise :class:`ConfigError` naming the dotted key (and its line
when it came from text). The fingerprint is the sha256 of the canonical
serialisation, which :func:`parse_config` reads back to an equal config.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

FORMAT_VERSION = 1
SUITES = ("conservation", "certificates", "viscosity_sweep", "ldp", "skeleton")
CONTROLS = ("zero", "constant_mode", "oscillating", "random")

# section -> key -> (type, default); type "float" accepts ints, "floats"/"ints"/"strs" are lists
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "": {
        "suite": ("str", "certificates"),
        "seed": ("int", 0),
        "output": ("str", "runs/out"),
        "format_version": ("int", FORMAT_VERSION),
    },
    "basis": {"n_modes": ("int", 32)},
    "noise": {
        "alpha": ("float", 2.0),
        "amplitude": ("float", 1.0),
        "mode_cutoff": ("int", 0),
        "modes": ("ints", []),
    },
    "sigma": {"g1": ("str", "constant:1.0"), "g2": ("str", "zero"), "c_delta": ("float", 0.0)},
    "sigma_tilde": {
        "same_as_sigma": ("bool", True),
        "g1": ("str", "constant:1.0"),
        "g2": ("str", "zero"),
        "c_delta": ("float", 0.0),
    },
    "initial": {
        "kind": ("str", "random_smooth"),
        "amplitude": ("float", 1.0),
        "max_mode": ("int", 4),
        "seed": ("int", 0),
    },
    "time": {"T": ("float", 1.0), "dt": ("float", 5e-3), "stride": ("int", 10)},
    "grid": {"nu": ("floats", [1e-1, 1e-2, 1e-3, 1e-4])},
    "conservation": {
        "n_fields": ("int", 1000),
        "sizes": ("ints", [8, 16, 32]),
        "dt": ("float", 1e-3),
        "tol": ("float", 1e-5),
    },
    "certificates": {
        "n_samples": ("int", 200),
        "p": ("ints", [1, 2]),
        "q": ("ints", [2, 4]),
        "M": ("float", 4.0),
        "controls": ("strs", ["zero"]),
        "control_intervals": ("int", 10),
        "time_regularity": ("bool", False),
        "alpha": ("float", 0.25),
        "gram_stride": ("int", 10),
    },
    "sweep": {
        "controls": ("strs", ["constant_mode", "oscillating", "random"]),
        "M": ("float", 4.0),
        "control_intervals": ("int", 10),
        "n_samples": ("int", 1),
        "noise": ("bool", False),
        "beta": ("float", 1.0),
        "taylor_green": ("bool", True),
    },
    "ldp": {
        "linear": ("bool", True),
        "observable": ("str", "terminal_mode"),
        "mode": ("ints", [1, 0]),
        "parity": ("str", "cos"),
        "level": ("float", 1.0),
        "direction": ("str", "exceed"),
        "nu": ("floats", [0.05, 0.02, 0.01]),
        "n_samples": ("ints", [80000, 120000, 160000]),
        "n_intervals": ("int", 10),
        "mode_cutoff": ("int", 4),
        "starts": ("int", 4),
        "tol": ("float", 1e-3),
        "gap_tolerance": ("float", 0.15),
    },
    "skeleton": {
        "perturbation": ("float", 1e-6),
        "residual_tol": ("float", 0.1),
        "control": ("str", "constant_mode"),
        "M": ("float", 4.0),
        "control_intervals": ("int", 10),
        "probe_ns": ("ints", [1, 2, 4, 8, 16]),
    },
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None):
        where = f"{key}" + (f" (line {line})" if line else "")
        super().__init__(f"{where}: {message}")
        self.key = key
        self.line = line


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _flat(key: str) -> tuple[str, str]:
    return ("", key) if "." not in key else tuple(key.split(".", 1))


def _check_type(key: str, kind: str, value, line):
    def bad():
        raise ConfigError(key, f"expected {kind}, got {type(value).__name__} {value!r}", line)

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            bad()
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad()
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            bad()
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            bad()
        return value
    if not isinstance(value, list):
        bad()
    item = {"floats": "float", "ints": "int", "strs": "str"}[kind]
    return [_check_type(key, item, v, line) for v in value]


def _key_lines(text: str) -> dict[str, int]:
    """Line of each dotted key in ``text`` (tables and dotted assignments)."""
    lines, table = {}, ""
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[([A-Za-z0-9_.\s]+)\]$", s)
        if m:
            table = m.group(1).strip()
            continue
        m = re.match(r"^([A-Za-z0-9_.\s\"]+?)\s*=", s)
        if m:
            k = m.group(1).replace('"', "").replace(" ", "")
            lines.setdefault(f"{table}.{k}" if table else k, n)
    return lines


def _walk(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            yield from _walk(v, key)
        else:
            yield key, v


def validate(cfg: dict, lines: dict | None = None) -> dict:
    """Type-check and constraint-check a nested config dict; returns a normalised copy."""
    lines = lines or {}
    out = defaults()
    for key, value in _walk(cfg):
        sec, name = _flat(key)
        if sec not in SCHEMA or name not in SCHEMA[sec]:
            raise ConfigError(key, "unknown key", lines.get(key))
        out[sec][name] = _check_type(key, SCHEMA[sec][name][0], value, lines.get(key))
    _constraints(out, lines)
    return out


def _constraints(c: dict, lines: dict):
    def need(ok, key, msg):
        if not ok:
            raise ConfigError(key, msg, lines.get(key))

    g = c[""]
    need(g["suite"] in SUITES, "suite", f"must be one of {SUITES}")
    need(g["seed"] >= 0, "seed", "must be non-negative")
    need(g["format_version"] == FORMAT_VERSION, "format_version", f"unsupported (expected {FORMAT_VERSION})")
    need(4 <= c["basis"]["n_modes"] <= 64, "basis.n_modes", "must be in [4, 64]")
    need(c["noise"]["alpha"] >= 1.5, "noise.alpha",
         f"covariance exponent {c['noise']['alpha']} is below the trace-class floor 1.5")
    need(c["noise"]["amplitude"] > 0, "noise.amplitude", "must be positive")
    need(c["noise"]["mode_cutoff"] >= 0, "noise.mode_cutoff", "must be non-negative (0 = all modes)")
    need(len(c["noise"]["modes"]) % 2 == 0, "noise.modes", "must list wavenumber pairs k1, k2, ...")
    need(c["initial"]["kind"] in ("random_smooth", "taylor_green", "zero"), "initial.kind",
         "must be random_smooth, taylor_green or zero")
    t = c["time"]
    need(t["T"] > 0, "time.T", "must be positive")
    need(0 < t["dt"] <= t["T"], "time.dt", "must be in (0, T]")
    need(abs(t["T"] / t["dt"] - round(t["T"] / t["dt"])) < 1e-9, "time.dt", "must divide T")
    need(t["stride"] >= 1, "time.stride", "must be >= 1")
    nu = c["grid"]["nu"]
    need(len(nu) >= 1 and all(v > 0 for v in nu) and all(a > b for a, b in zip(nu, nu[1:])), "grid.nu",
         "must be positive and strictly decreasing")
    ce = c["certificates"]
    need(ce["n_samples"] >= 1, "certificates.n_samples", "must be >= 1")
    need(all(p in (1, 2, 3) for p in ce["p"]), "certificates.p", "entries must be in {1, 2, 3}")
    need(all(q in (2, 4, 8, 16) for q in ce["q"]), "certificates.q", "entries must be in {2, 4, 8, 16}")
    need(ce["M"] >= 0, "certificates.M", "must be non-negative")
    need(all(h in CONTROLS for h in ce["controls"]), "certificates.controls", f"entries must be in {CONTROLS}")
    need(0 < ce["alpha"] < 0.5, "certificates.alpha", "must be in (0, 1/2)")
    sw = c["sweep"]
    need(all(h in CONTROLS for h in sw["controls"]), "sweep.controls", f"entries must be in {CONTROLS}")
    need(len(nu) >= 3 or g["suite"] != "viscosity_sweep", "grid.nu", "a sweep needs at least 3 points")
    need(sw["beta"] > 0.5, "sweep.beta", "must exceed 1/2")
    ld = c["ldp"]
    need(ld["observable"] in ("terminal_H_norm", "terminal_mode", "X_norm"), "ldp.observable",
         "must be terminal_H_norm, terminal_mode or X_norm")
    need(len(ld["mode"]) == 2, "ldp.mode", "must be a wavenumber pair")
    need(ld["parity"] in ("cos", "sin"), "ldp.parity", "must be cos or sin")
    need(ld["direction"] in ("exceed", "deceed"), "ldp.direction", "must be exceed or deceed")
    need(all(v > 0 for v in ld["nu"]) and all(a > b for a, b in zip(ld["nu"], ld["nu"][1:])), "ldp.nu",
         "must be positive and strictly decreasing")
    need(len(ld["n_samples"]) == len(ld["nu"]), "ldp.n_samples", "needs one sample count per ldp.nu entry")
    need(ld["starts"] >= 1, "ldp.starts", "must be >= 1")
    sk = c["skeleton"]
    need(sk["control"] in CONTROLS, "skeleton.control", f"must be in {CONTROLS}")
    need(sk["perturbation"] >= 0, "skeleton.perturbation", "must be non-negative")


def parse_config(text: str) -> dict:
    """Parse and validate TOML text; defaults fill every missing key."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError("<syntax>", str(exc), int(m.group(1)) if m else None) from None
    return validate(raw, _key_lines(text))


def _emit(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite config value")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    return "[" + ", ".join(_emit(x) for x in v) + "]"


def serialize(cfg: dict) -> str:
    """Canonical TOML text (sorted keys, shortest round-trip floats)."""
    out = [f"{k} = {_emit(v)}" for k, v in sorted(cfg[""].items())]
    for sec in sorted(s for s in cfg if s):
        out.append(f"\n[{sec}]")
        out.extend(f"{k} = {_emit(v)}" for k, v in sorted(cfg[sec].items()))
    return "\n".join(out) + "\n"


def fingerprint(cfg: dict) -> str:
    return hashlib.sha256(serialize(cfg).encode("utf-8")).hexdigest()


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


__all__ = ["ConfigError", "FORMAT_VERSION", "SCHEMA", "SUITES", "defaults", "fingerprint", "load_config",
           "parse_config", "serialize", "validate"]
