"""Batch front end: ``covquant <command> --config cfg.json --output dir``.

Every command writes ``report.json`` (resolved config, results, checks and
overall pass flag) and ``tables.csv``.  Reports carry no timestamp, so equal
configs and seeds give byte-identical files.

Exit codes: 0 all hard checks pass, 1 a hard check fails, 2 config error,
3 numerical blow-up.
"""
import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .exceptions import BlowUpError, ConfigError, ResonanceError
from .formal_rep import (
    FormalSeries,
    check_rep,
    linearize,
    poincare_basis,
    poincare_structure_constants,
)
from .functional_algebra import (
    HbarSeries,
    PolyFunctional,
    multiply,
    poisson,
    random_functional,
    star_bracket,
    star_normal,
    star_series,
)
from .kleingordon import (
    Potential,
    WaveOperatorEstimate,
    build_interaction,
    check_linearization,
    drift_study,
    energy,
    evolve_modes,
    momentum,
    probe_residual,
    scattering_operator,
    spectral_images,
)
from .modes import ModeGrid, ModeVector, decompose, dump_field, gaussian_cauchy
from .pushforward import (
    NumericPullbackGradient,
    PushedStarProduct,
    check_ham_identity,
    check_ham_identity_numeric,
    split_residuals,
    stacked_poisson,
    star_pm,
    star_pm_series,
)

log = logging.getLogger("covquant")

COMMANDS = (
    "lattice-evolve",
    "wave-operators",
    "scatter",
    "lie-check",
    "linearize",
    "star-check",
    "push-star",
    "ham-check",
)
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3

_SCATTER_GRID = {"d": 2, "n_per_axis": 64, "box_length": 2 * math.pi * 8, "mass": 1.0}
_SMALL_GRID = {"d": 1, "n_per_axis": 4, "box_length": 2 * math.pi, "mass": 1.0}
_SAMPLES = {"count": 1, "amplitude": 0.1, "width": 2.0, "momentum": 0.5}

DEFAULTS = {
    "lattice-evolve": {
        "grid": _SCATTER_GRID,
        "numerics": {"dt": 0.01, "t_final": 50.0, "record_every": 100, "tolerances": {"energy": 1e-6, "momentum": 1e-10}},
        "samples": _SAMPLES,
    },
    "wave-operators": {
        "grid": _SCATTER_GRID,
        "numerics": {
            "dt": 0.01,
            "horizons": [12.5, 25.0, 50.0],
            "direction": "+",
            "tolerances": {"linearization": 1e-3, "momentum": 1e-10},
        },
        "samples": _SAMPLES,
    },
    "scatter": {
        "grid": _SCATTER_GRID,
        "numerics": {"dt": 0.01, "horizons": [12.5, 25.0], "tolerances": {"energy": 1e-3}},
        "samples": _SAMPLES,
    },
    "lie-check": {
        "grid": {"d": 1, "n_per_axis": 16, "box_length": 2 * math.pi * 4, "mass": 1.0},
        "numerics": {"degree_cap": 3, "tolerances": {"closure": 1e-12, "boost_order": 1.8, "probe_floor": 1e-13}},
        "samples": {"count": 1, "amplitude": 1.0, "width": 1.5, "momentum": 0.0},
    },
    "linearize": {
        "grid": _SMALL_GRID,
        "numerics": {"degree_cap": 3, "resonance_tol": None, "on_resonance": "raise", "tolerances": {"intertwining": 1e-10}},
    },
    "star-check": {
        "grid": _SMALL_GRID,
        "numerics": {"hbar_order": 3, "max_degree": 12, "tolerances": {"associativity": 1e-11, "classical_limit": 1e-12}},
        "samples": {"count": 2, "terms": 6, "degree": 3},
    },
    "push-star": {
        "grid": _SMALL_GRID,
        "numerics": {
            "mode": "formal",
            "degree_cap": 3,
            "max_degree": 4,
            "hbar_order": 1,
            "dt": 0.05,
            "horizons": [2.0],
            "direction": "+",
            "on_resonance": "skip",
            "resonance_tol": None,
            "tolerances": {"represented": 1e-10, "roundtrip": 1e-10},
        },
        "samples": _SAMPLES,
    },
    "ham-check": {
        "grid": _SMALL_GRID,
        "numerics": {
            "mode": "formal",
            "degree_cap": 4,
            "max_degree": 4,
            "hbar_order": 2,
            "k": [1, 2],
            "dt": 0.01,
            "horizons": [12.5, 25.0, 50.0],
            "direction": "+",
            "on_resonance": "skip",
            "resonance_tol": None,
            "tolerances": {"represented": 1e-10},
        },
        "samples": {"count": 10, "amplitude": 0.1, "width": 2.0, "momentum": 0.5},
    },
}
_COMMON = {"potential": {"coeffs": {"4": 0.1}}, "seed": 0, "inputs": {}}
# dynamics needs a bounded-below energy; the formal commands are algebraic
_NEEDS_POSITIVITY = {"lattice-evolve", "wave-operators", "scatter"}


# -- configuration -------------------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "coeffs":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict, command=None, seed=None) -> dict:
    """Merge ``raw`` over the command defaults and validate; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError(field="config", message="top level must be a JSON object")
    command = command or raw.get("command")
    if command not in COMMANDS:
        raise ConfigError(field="command", message=f"expected one of {', '.join(COMMANDS)}, got {command!r}")
    cfg = _merge(_merge(_COMMON, DEFAULTS[command]), {k: v for k, v in raw.items() if k != "command"})
    cfg["command"] = command
    if seed is not None:
        cfg["seed"] = seed
    _validate(cfg)
    return cfg


def _positive(value, field, integer=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value) and value > 0
    if integer:
        ok = ok and float(value) == int(value)
    if not ok:
        kind = "a positive integer" if integer else "a positive number"
        raise ConfigError(field=field, message=f"must be {kind}, got {value!r}")


def _validate(cfg):
    g = cfg["grid"]
    for key in ("d", "n_per_axis", "box_length", "mass"):
        if key not in g:
            raise ConfigError(field=f"grid.{key}", message="missing")
    _positive(g["d"], "grid.d", integer=True)
    _positive(g["n_per_axis"], "grid.n_per_axis", integer=True)
    _positive(g["box_length"], "grid.box_length")
    _positive(g["mass"], "grid.mass")
    if not 1 <= g["d"] <= 3:
        raise ConfigError(field="grid.d", message=f"must be 1, 2 or 3, got {g['d']}")
    if g["n_per_axis"] % 2:
        raise ConfigError(field="grid.n_per_axis", message="must be even")
    Potential.from_config(cfg["potential"])
    num = cfg["numerics"]
    for key, tol in num.get("tolerances", {}).items():
        _positive(tol, f"numerics.tolerances.{key}")
    if "dt" in num:
        _positive(num["dt"], "numerics.dt")
    for key in ("t_final",):
        if key in num:
            _positive(num[key], f"numerics.{key}")
    if "horizons" in num:
        if not isinstance(num["horizons"], list) or not num["horizons"]:
            raise ConfigError(field="numerics.horizons", message="must be a non-empty list")
        for T in num["horizons"]:
            _positive(T, "numerics.horizons")
    for key in ("degree_cap", "max_degree", "record_every"):
        if key in num:
            _positive(num[key], f"numerics.{key}", integer=True)
    if "hbar_order" in num and not (isinstance(num["hbar_order"], int) and num["hbar_order"] >= 0):
        raise ConfigError(field="numerics.hbar_order", message="must be a non-negative integer")
    if num.get("resonance_tol") is not None:
        _positive(num["resonance_tol"], "numerics.resonance_tol")
    if num.get("direction", "+") not in ("+", "-"):
        raise ConfigError(field="numerics.direction", message="must be '+' or '-'")
    if num.get("on_resonance", "raise") not in ("raise", "skip"):
        raise ConfigError(field="numerics.on_resonance", message="must be 'raise' or 'skip'")
    if num.get("mode", "formal") not in ("formal", "numeric"):
        raise ConfigError(field="numerics.mode", message="must be 'formal' or 'numeric'")
    ks = num.get("k", [1])
    if not isinstance(ks, list) or not all(isinstance(k, int) and k >= 1 for k in ks):
        raise ConfigError(field="numerics.k", message="must be a list of integers >= 1")
    if "samples" in cfg and "count" in cfg["samples"]:
        _positive(cfg["samples"]["count"], "samples.count", integer=True)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(field="seed", message="must be an integer")


def _positivity(cfg, V, grid):
    try:
        V.certify_positive(grid.mass)
        return {"certified": True}
    except ConfigError as err:
        if cfg["command"] in _NEEDS_POSITIVITY or (
            cfg["command"] == "ham-check" and cfg["numerics"].get("mode") == "numeric"
        ):
            raise
        return {"certified": False, "message": str(err)}


# -- shared helpers ---------------------------------------------------------------------------

class _Checks:
    def __init__(self):
        self.rows = []

    def add(self, name, value, tolerance, op="<", hard=True):
        value = float(value)
        if op == "<":
            ok = value < tolerance
        elif op == ">=":
            ok = value >= tolerance
        elif op == ">":
            ok = value > tolerance
        else:
            raise ValueError(op)
        self.rows.append({"name": name, "value": value, "op": op, "tolerance": tolerance, "hard": hard, "passed": bool(ok)})
        return ok

    def flag(self, name, ok, hard=True, detail=None):
        row = {"name": name, "hard": hard, "passed": bool(ok)}
        if detail is not None:
            row["detail"] = detail
        self.rows.append(row)
        return ok

    @property
    def passed(self):
        return all(r["passed"] for r in self.rows if r["hard"])


def make_samples(grid: ModeGrid, scfg: dict, rng) -> ModeVector:
    """Batch of Gaussian bumps with seeded centers and momenta."""
    count = int(scfg.get("count", 1))
    abar, a = [], []
    for _ in range(count):
        center = rng.uniform(-grid.box_length / 8, grid.box_length / 8, size=grid.d) if count > 1 else None
        p = scfg.get("momentum", 0.0) * (rng.normal() if count > 1 else 1.0)
        v = decompose(gaussian_cauchy(grid, scfg.get("amplitude", 0.1), scfg.get("width", 2.0), p, center))
        abar.append(v.abar)
        a.append(v.a)
    return ModeVector(grid, np.array(abar), np.array(a))


def _max(x):
    return float(np.max(np.abs(x)))


def _decreasing(values):
    return all(b < a for a, b in zip(values, values[1:]))


# -- commands ---------------------------------------------------------------------------------

def cmd_lattice_evolve(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    v = make_samples(grid, cfg["samples"], rng)
    E0 = np.real(energy(v, V))
    P0 = momentum(v)
    rows = [[0.0, *np.atleast_1d(E0).tolist(), *P0.reshape(-1).tolist()]]
    worst = {"energy": 0.0, "momentum": 0.0}

    def record(t, z):
        w = ModeVector.from_stacked(grid, z)
        E = np.real(energy(w, V))
        P = momentum(w)
        worst["energy"] = max(worst["energy"], _max((E - E0) / E0))
        worst["momentum"] = max(worst["momentum"], _max(P - P0))
        rows.append([t, *np.atleast_1d(E).tolist(), *P.reshape(-1).tolist()])

    w = evolve_modes(v, V, num["t_final"], num["dt"], callback=record, every=num["record_every"])
    (out_dir / "snapshot.json").write_text(json.dumps(dump_field(w), sort_keys=True) + "\n")
    checks = _Checks()
    checks.add("relative_energy_drift", worst["energy"], num["tolerances"]["energy"])
    checks.add("momentum_drift", worst["momentum"], num["tolerances"]["momentum"])
    count = int(cfg["samples"]["count"])
    header = ["t"] + [f"H_{s}" for s in range(count)] + [f"P{j}_{s}" for s in range(count) for j in range(1, grid.d + 1)]
    results = {"steps": int(round(num["t_final"] / num["dt"])), "max_relative_energy_drift": worst["energy"], "max_momentum_drift": worst["momentum"]}
    return results, checks, header, rows


def cmd_wave_operators(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    v = make_samples(grid, cfg["samples"], rng)
    drifts, _, est = drift_study(V, num["horizons"], num["dt"], v, num["direction"])
    lin = check_linearization(V, num["horizons"], num["dt"], v, num["direction"], boosts=False)
    Ts = sorted(drifts)
    dvals = [_max(drifts[T]) for T in Ts]
    checks = _Checks()
    # monotone drift is diagnostic: the limit in T is asymptotic
    checks.flag("drift_decreasing", _decreasing(dvals), hard=False, detail=dvals)
    checks.flag("H_residual_decreasing", _decreasing(lin["H_relative"]), hard=False, detail=lin["H_relative"])
    checks.add("H_relative_residual_at_max_T", lin["H_relative"][-1], num["tolerances"]["linearization"])
    checks.add("momentum_residual", max(lin["P"]), num["tolerances"]["momentum"])
    header = ["T", "drift", "H_residual", "H_relative", "P_residual"]
    rows = [[T, d, h, hr, p] for T, d, h, hr, p in zip(Ts, dvals, lin["H"], lin["H_relative"], lin["P"])]
    results = {"convergence_log": est.convergence_log, "linearization": lin}
    return results, checks, header, rows


def cmd_scatter(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    v = make_samples(grid, cfg["samples"], rng)
    free = Potential()
    h0 = np.real(energy(v, free))
    rows, errs = [], []
    for T in num["horizons"]:
        s = scattering_operator(V, T, num["dt"], v)
        err = _max((np.real(energy(s, free)) - h0) / h0)
        dev = float(np.max(np.sqrt(np.sum(np.abs(s.stacked() - v.stacked()) ** 2, axis=-1) * grid.weight)))
        errs.append(err)
        rows.append([T, err, dev])
    checks = _Checks()
    checks.add("free_energy_conservation_at_max_T", errs[-1], num["tolerances"]["energy"])
    checks.flag("free_energy_error_decreasing", _decreasing(errs), hard=False, detail=errs)
    return {"H0_relative_error": errs}, checks, ["T", "H0_relative_error", "deviation_norm"], rows


def _lattice_pair(X, Y):
    return X.startswith("M") or Y.startswith("M")


def cmd_lie_check(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    tol = num["tolerances"]
    cap = num["degree_cap"]
    rep = build_interaction(grid, V, cap, functionals=False).rep()
    basis = poincare_basis(grid.d)
    sc = poincare_structure_constants(grid.d)
    pairs = [(basis[i], basis[j]) for i in range(len(basis)) for j in range(i + 1, len(basis))]
    exact = [p for p in pairs if not _lattice_pair(*p)]
    lattice = [p for p in pairs if _lattice_pair(*p)]
    checks = _Checks()
    rows = []
    report = check_rep(rep, tol["closure"], pairs=exact)
    for (X, Y), res in sorted(report.residuals.items()):
        for n, r in sorted(res.items()):
            rows.append([X, Y, n, "coefficient", grid.n_per_axis, r, ""])
        checks.add(f"closure[{X},{Y}]", max(res.values(), default=0.0), tol["closure"])
    # boost and rotation pairs: smooth-probe residual under refinement
    probes = {}
    for n in (grid.n_per_axis, 2 * grid.n_per_axis):
        g = ModeGrid(grid.d, n, grid.box_length, grid.mass)
        images = spectral_images(g, V, cap)
        scfg = cfg["samples"]
        psi = decompose(gaussian_cauchy(g, scfg["amplitude"], scfg["width"], scfg["momentum"])).stacked()
        for X, Y in lattice:
            for deg in range(1, cap + 1):
                r = probe_residual(images, sc, X, Y, psi, deg)
                probes[(X, Y, deg, n)] = float(np.sqrt(g.weight * np.sum(np.abs(r) ** 2)))
    lattice_out = []
    for X, Y in lattice:
        for deg in range(1, cap + 1):
            r0, r1 = probes[(X, Y, deg, grid.n_per_axis)], probes[(X, Y, deg, 2 * grid.n_per_axis)]
            if max(r0, r1) <= tol["probe_floor"]:
                order = None
            else:
                order = math.log2(r0 / r1) if r1 > 0 else math.inf
                checks.add(f"refinement_order[{X},{Y}]^{deg}", order, tol["boost_order"], op=">=")
            rows.append([X, Y, deg, "probe", grid.n_per_axis, r0, ""])
            rows.append([X, Y, deg, "probe", 2 * grid.n_per_axis, r1, "" if order is None else order])
            lattice_out.append({"X": X, "Y": Y, "degree": deg, "residuals": [r0, r1], "order": order})
    results = {"closure": report.to_json(), "lattice_pairs": lattice_out}
    return results, checks, ["X", "Y", "degree", "kind", "n_per_axis", "residual", "order"], rows


def _linearize(cfg, grid, V, cap):
    num = cfg["numerics"]
    rep = build_interaction(grid, V, cap, functionals=False).rep()
    return linearize(rep, resonance_tol=num.get("resonance_tol"), degree_cap=cap, on_resonance=num["on_resonance"])


def _residual_checks(checks, report: dict, tol, rows):
    for label, res in sorted(report["intertwining"].items()):
        for n, r in sorted(res.items()):
            rows.append([label, n, r, report["min_denominator"].get(n, "")])
        # boosts carry the lattice position-operator error; only translations are hard
        hard = not label.startswith("M")
        checks.add(f"intertwining[{label}]", max(res.values(), default=0.0), tol, hard=hard)
    for n, dmin in sorted(report["min_denominator"].items()):
        checks.add(f"min_denominator^{n}", dmin, report["resonance_tol"], op=">")


def cmd_linearize(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    checks = _Checks()
    try:
        omega, report = _linearize(cfg, grid, V, num["degree_cap"])
    except ResonanceError as err:
        tuples = [[int(t[0]), [int(i) for i in t[1]], float(t[2])] for t in err.tuples[:50]]
        checks.flag("no_resonance", False, detail={"degree": err.degree, "count": len(err.tuples)})
        return {"resonance": {"degree": err.degree, "message": str(err), "tuples": tuples}}, checks, ["out", "inputs", "denominator"], [
            [t[0], " ".join(map(str, t[1])), t[2]] for t in tuples
        ]
    (out_dir / "omega.json").write_text(json.dumps(omega.to_json(), sort_keys=True) + "\n")
    rj = report.to_json()
    rows = []
    _residual_checks(checks, rj, num["tolerances"]["intertwining"], rows)
    return {"residual_report": rj, "omega_file": "omega.json"}, checks, ["generator", "degree", "residual", "min_denominator"], rows


def _load_functional(path, grid):
    payload = json.loads(Path(path).read_text())
    F = PolyFunctional.from_json(payload)
    if F.grid.grid_hash != grid.grid_hash:
        raise ConfigError(field="inputs", message=f"functional in {path} was built on a different grid")
    return F


def cmd_star_check(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    h, D = num["hbar_order"], num["max_degree"]
    inputs = cfg["inputs"]
    if inputs.get("F") and inputs.get("G"):
        F, G = _load_functional(inputs["F"], grid), _load_functional(inputs["G"], grid)
    else:
        scfg = cfg["samples"]
        F, G = (random_functional(grid, rng, scfg["terms"], scfg["degree"], max_degree=D) for _ in range(2))
    fs = {"F": F, "G": G}
    checks = _Checks()
    rows = []
    worst = {}
    for a in fs:
        for b in fs:
            for c in fs:
                A, B, C = fs[a], fs[b], fs[c]
                left = star_series(star_normal(A, B, h), HbarSeries([C]), h)
                right = star_series(HbarSeries([A]), star_normal(B, C, h), h)
                diff = left - right
                for p in range(h + 1):
                    r = diff[p].max_abs()
                    worst[p] = max(worst.get(p, 0.0), r)
                    rows.append([f"({a}{b}){c}-{a}({b}{c})", p, r])
    for p, r in sorted(worst.items()):
        checks.add(f"associativity^hbar{p}", r, num["tolerances"]["associativity"])
    br = star_bracket(F, G, 0)[0]
    pb = poisson(F, G)
    checks.add("classical_limit", (br - pb).max_abs(), num["tolerances"]["classical_limit"])
    checks.add("poisson_antisymmetry", (pb + poisson(G, F)).max_abs(), num["tolerances"]["classical_limit"])
    results = {"associativity_by_order": {str(p): r for p, r in sorted(worst.items())}, "inputs": {"F": F.to_json(), "G": G.to_json()}}
    return results, checks, ["triple", "hbar_order", "residual"], rows


def _formal_product(cfg, grid, V, cap):
    inputs = cfg["inputs"]
    if inputs.get("omega"):
        omega = FormalSeries.from_json(json.loads(Path(inputs["omega"]).read_text()))
        if omega.dim != 2 * grid.size:
            raise ConfigError(field="inputs.omega", message=f"series dimension {omega.dim} does not match the grid")
        info = {"source": "file"}
    else:
        omega, report = _linearize(cfg, grid, V, cap)
        info = {"source": "linearize", "residual_report": report.to_json()}
    return PushedStarProduct(omega), info


def _numeric_poisson_check(cfg, grid, V, rng, checks, rows):
    num = cfg["numerics"]
    v = make_samples(grid, cfg["samples"], rng)
    dim = 2 * grid.size
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    B = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    A, B = A + A.T, B + B.T
    out = []
    for T in num["horizons"]:
        est = WaveOperatorEstimate(num["direction"], float(T), num["dt"], V, grid)
        prod = PushedStarProduct(est, mode="numeric", samples=v, tolerance=num["tolerances"]["roundtrip"])
        pb = NumericPullbackGradient(est)
        z = v.stacked()
        _, gA = pb.value_and_grad(z, lambda w: (np.einsum("...i,ij,...j->...", w, A, w), 2 * w @ A.T))
        _, gB = pb.value_and_grad(z, lambda w: (np.einsum("...i,ij,...j->...", w, B, w), 2 * w @ B.T))
        w = est.apply_stacked(z)
        lhs = stacked_poisson(grid, gA, gB)
        rhs = stacked_poisson(grid, 2 * w @ A.T, 2 * w @ B.T)
        rel = _max((lhs - rhs) / rhs)
        rows.append([T, "poisson_map", rel])
        rows.append([T, "roundtrip", prod.roundtrip_error])
        out.append({"T": float(T), "poisson_map_relative": rel, "roundtrip": prod.roundtrip_error})
        checks.add(f"poisson_map[T={T}]", rel, num["tolerances"]["represented"])
        checks.add(f"roundtrip[T={T}]", prod.roundtrip_error, num["tolerances"]["roundtrip"])
    return out


def cmd_push_star(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    checks = _Checks()
    rows = []
    if num["mode"] == "numeric":
        res = _numeric_poisson_check(cfg, grid, V, rng, checks, rows)
        return {"mode": "numeric", "rows": res}, checks, ["T", "quantity", "value"], rows
    D, h = num["max_degree"], num["hbar_order"]
    prod, info = _formal_product(cfg, grid, V, num["degree_cap"])
    checks.add("roundtrip", prod.roundtrip_error, num["tolerances"]["roundtrip"])
    funcs = build_interaction(grid, V, num["degree_cap"], max_degree=D).functionals
    labels = sorted(funcs)
    tol = num["tolerances"]["represented"]
    for i, X in enumerate(labels):
        for Y in labels[i + 1 :]:
            s = star_pm(funcs[X], funcs[Y], prod, max(h, 1), D)
            t = star_pm(funcs[Y], funcs[X], prod, max(h, 1), D)
            prod0 = split_residuals(HbarSeries([s[0] - multiply(funcs[X], funcs[Y])]), {0: s[0].exact_through})[0]
            ex1 = min(e for e in (s[1].exact_through, t[1].exact_through, D) if e is not None)
            br = (s[1] - t[1]) * (2 / 1j) - poisson(funcs[X], funcs[Y])
            bracket = split_residuals(HbarSeries([br]), {0: ex1})[0]
            finite = all(np.isfinite(s[p].max_abs()) for p in s.powers())
            rows.append([X, Y, "product_hbar0", prod0["represented"], prod0["boundary"], prod0["exact_through"]])
            rows.append([X, Y, "bracket_hbar0", bracket["represented"], bracket["boundary"], ex1])
            checks.add(f"product[{X},{Y}]", prod0["represented"], tol)
            checks.add(f"bracket[{X},{Y}]", bracket["represented"], tol)
            checks.flag(f"finite[{X},{Y}]", finite)
    # associativity on one generator triple
    H, P = funcs["P0"], funcs["P1"]
    left = star_pm_series(star_pm(H, P, prod, h, D), HbarSeries([H]), prod, h, D)
    right = star_pm_series(HbarSeries([H]), star_pm(P, H, prod, h, D), prod, h, D)
    ex = {p: min(e for e in (left[p].exact_through, right[p].exact_through, D) if e is not None) for p in left.powers()}
    for p, r in split_residuals(left - right, ex).items():
        rows.append(["(P0P1)P0", "P0(P1P0)", f"associativity_hbar{p}", r["represented"], r["boundary"], r["exact_through"]])
        checks.add(f"associativity^hbar{p}", r["represented"], tol)
    return {"mode": "formal", "omega": info}, checks, ["X", "Y", "quantity", "represented", "boundary", "exact_through"], rows


def cmd_ham_check(cfg, grid, V, rng, out_dir):
    num = cfg["numerics"]
    checks = _Checks()
    rows = []
    if num["mode"] == "numeric":
        v = make_samples(grid, cfg["samples"], rng)
        out = {}
        for k in num["k"]:
            rep = check_ham_identity_numeric(V, num["horizons"], num["dt"], v, k, num["direction"])
            out[str(k)] = rep
            for order in rep["orders_checked"]:
                vals = [r[f"hbar{order}"] for r in rep["rows"]]
                checks.flag(f"decreasing[k={k}]^hbar{order}", _decreasing(vals), detail=vals)
                rows += [[k, order, r["T"], r[f"hbar{order}"]] for r in rep["rows"]]
        return {"mode": "numeric", "by_k": out}, checks, ["k", "hbar_order", "T", "relative_residual"], rows
    D, h = num["max_degree"], num["hbar_order"]
    prod, info = _formal_product(cfg, grid, V, num["degree_cap"])
    gs = build_interaction(grid, V, num["degree_cap"], max_degree=D)
    H = gs.functionals["P0"]
    H0 = build_interaction(grid, Potential(), num["degree_cap"], max_degree=D).functionals["P0"]
    out = {}
    for k in num["k"]:
        rep = check_ham_identity(H, H0, prod, k, h, D)
        out[str(k)] = rep
        for p, r in sorted(rep["by_order"].items()):
            rows.append([k, p, r["represented"], r["boundary"], r["exact_through"]])
        checks.add(f"ham_identity[k={k}]", rep["max_represented_residual"], num["tolerances"]["represented"])
    return {"mode": "formal", "omega": info, "by_k": out}, checks, ["k", "hbar_order", "represented", "boundary", "exact_through"], rows


HANDLERS = {
    "lattice-evolve": cmd_lattice_evolve,
    "wave-operators": cmd_wave_operators,
    "scatter": cmd_scatter,
    "lie-check": cmd_lie_check,
    "linearize": cmd_linearize,
    "star-check": cmd_star_check,
    "push-star": cmd_push_star,
    "ham-check": cmd_ham_check,
}


# -- report emission -----------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_plain(obj.real), _plain(obj.imag)]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def write_report(out_dir: Path, report: dict, header, rows):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(_plain(report), indent=2, sort_keys=True) + "\n")
    with open(out_dir / "tables.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def run(cfg: dict, out_dir) -> int:
    """Execute a resolved config; writes the report files and returns the exit code."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = ModeGrid.from_config(cfg["grid"])
    V = Potential.from_config(cfg["potential"])
    positivity = _positivity(cfg, V, grid)
    rng = np.random.default_rng(cfg["seed"])
    report = {"command": cfg["command"], "config": cfg, "positivity": positivity}
    try:
        results, checks, header, rows = HANDLERS[cfg["command"]](cfg, grid, V, rng, out_dir)
    except ConfigError:
        raise
    except ValueError as err:
        # parameter combinations rejected by the library (CFL, step count, small-data ball, degree cap)
        raise ConfigError(field="numerics", message=str(err)) from err
    except BlowUpError as err:
        report.update({"status": "blow-up", "error": str(err), "time": err.time, "passed": False, "checks": []})
        write_report(out_dir, report, ["t"], [])
        return EXIT_BLOWUP
    report.update({"status": "ok", "results": results, "checks": checks.rows, "passed": checks.passed})
    write_report(out_dir, report, header, rows)
    return EXIT_PASS if checks.passed else EXIT_FAIL


def build_parser():
    p = argparse.ArgumentParser(prog="covquant", description="Star products, nonlinear representations and wave operators on a mode lattice.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults are used for missing fields)")
    p.add_argument("--output", type=Path, default=Path("covquant-out"), help="directory for report.json and tables.csv")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--quiet", action="store_true", help="only errors on stderr")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        raw = json.loads(args.config.read_text()) if args.config else {}
        cfg_command = raw.get("command") if isinstance(raw, dict) else None
        if cfg_command is not None and cfg_command != args.command:
            raise ConfigError(field="command", message=f"config says {cfg_command!r} but {args.command!r} was requested")
        cfg = resolve_config(raw, args.command, args.seed)
        code = run(cfg, args.output)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as err:
        print(f"config error: config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        report = json.loads((args.output / "report.json").read_text())
        for row in report["checks"]:
            mark = "PASS" if row["passed"] else ("FAIL" if row["hard"] else "warn")
            value = f" {row['value']:.3e} {row['op']} {row['tolerance']:.3e}" if "value" in row else ""
            log.info("%s %s%s", mark, row["name"], value)
        log.info("%s: %s (exit %d)", args.command, report.get("status"), code)
    return code


if __name__ == "__main__":
    sys.exit(main())
