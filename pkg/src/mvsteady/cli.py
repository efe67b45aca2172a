"""Batch front end for the solver toolkit.

Four subcommands cover the pipeline: ``steady-states`` enumerates all
roots of the discretized stationarity system, ``verify`` re-checks a
previously written root file on a finer quadrature, ``evolve``
integrates the uncontrolled dynamics, and ``stabilize`` runs the
receding-horizon control loop toward a selected steady state.

Reproducibility contract: the same config and seed produce byte
identical JSON output; floating-point values are printed with 17
significant digits so they round-trip exactly.  Every output file
embeds the fully resolved configuration and a schema version.

Exit codes: 0 success, 1 configuration or input error, 2 no steady
states found, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings

import numpy as np

from .analysis import (fixed_point_iterate, linear_growth_rate,
                       estimate_order_parameters, kirkwood_monroe_residual,
                       verify_steady_states)
from .cache import assemble_cached
from .config import (SCHEMA_VERSION, ConfigError, RunConfig, list_presets,
                     resolve)
from .control import MPCConfig, OCPConfig, mpc_loop
from .deflation import (DeflationConfig, NewtonConfig, ResidualSystem,
                        find_all_steady_states)
from .dynamics import BlowUpError, integrate_forward
from .potentials import make_model
from .spectral import (build_basis, build_quadrature, project_function,
                       suggest_quadrature, uniform_coefficients, uniform_mesh)

MASS_DRIFT_CAP = 1e-8
MARGINAL_RATE = 1e-6      # |growth rate| below this keeps the energy ranking
VERIFY_RESIDUAL_FLOOR = 1e-10
VERIFY_MASS_TOL = 1e-8
VERIFY_SC_TOL = 1e-3
DENSITY_POINTS_1D = 512
DENSITY_POINTS_2D = 128


# --------------------------------------------------------------- output


def _format_float(v):
    v = float(v)
    if math.isnan(v) or math.isinf(v):
        return "null"
    return f"{v:.17g}"


def _escape(s):
    out = []
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return "".join(out)


def _to_json(obj, level=0, indent=2):
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    pad = " " * (indent * level)
    inner = " " * (indent * (level + 1))
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_float(obj)
    if isinstance(obj, str):
        return f'"{_escape(obj)}"'
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [_to_json(v, level + 1, indent) for v in obj]
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(items) + "]"
        body = ",\n".join(inner + it for it in items)
        return "[\n" + body + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        parts = []
        for k in sorted(obj):
            parts.append(f'{inner}"{_escape(str(k))}": '
                         f"{_to_json(obj[k], level + 1, indent)}")
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _config_line(cfg: RunConfig):
    return "# config=" + _to_json(cfg.raw, indent=0).replace("\n", " ")


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(_to_json(obj))
        fh.write("\n")


def _write_csv(path, columns, rows, cfg, extra=()):
    with open(path, "w") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        fh.write(_config_line(cfg) + "\n")
        for line in extra:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_float(v) if isinstance(v, float)
                              else str(v) for v in row) + "\n")


def _density_mesh(cfg: RunConfig, domain):
    n = cfg.output["density_points"]
    if n <= 0:
        n = DENSITY_POINTS_1D if domain.dim == 1 else DENSITY_POINTS_2D
    return uniform_mesh(domain, n)


def _write_density(path, values, mesh, dim, cfg):
    if dim == 1:
        columns = ["x", "density"]
        rows = [(float(mesh[i, 0]), float(values[i]))
                for i in range(mesh.shape[0])]
    else:
        columns = ["x1", "x2", "density"]
        rows = [(float(mesh[i, 0]), float(mesh[i, 1]), float(values[i]))
                for i in range(mesh.shape[0])]
    _write_csv(path, columns, rows, cfg)


# ------------------------------------------------------------- pipeline


def _build(cfg: RunConfig, with_control=False):
    try:
        model = make_model(cfg.model_name, cfg.model_params)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"model.params: {err}")
    basis = build_basis(model.domain, cfg.modes_per_axis)
    pts = cfg.quadrature_points or suggest_quadrature(cfg.modes_per_axis)
    quad = build_quadrature(model.domain, pts)
    ops = assemble_cached(model, basis, quad, cfg.beta_inv, with_control,
                          cfg.output["operator_cache"])
    return model, basis, quad, ops


def _m_dist(ops, v):
    return float(np.sqrt(v @ (ops.M @ v)))


def _profile_values(profile, model, beta_inv, points):
    """Seed density for the fixed-point iteration at the given points."""
    lower = np.asarray(model.domain.lower, dtype=float)
    size = np.asarray(model.domain.size, dtype=float)
    if profile == "cosine":
        vals = np.ones(points.shape[0])
        bump = np.zeros(points.shape[0])
        for j in range(model.domain.dim):
            w = 2.0 * np.pi / size[j]
            bump += np.cos(w * (points[:, j] - lower[j]))
        return vals + 0.2 * bump
    # bump-pair: two Gaussian clusters half a period apart
    if model.domain.dim != 1:
        raise ConfigError("deflation.fp_profile: 'bump-pair' is defined for "
                          "one-dimensional domains only")
    x = points[:, 0]
    sig = math.sqrt(beta_inv / 0.5)
    vals = np.zeros_like(x)
    for frac in (0.25, 0.75):
        c = lower[0] + frac * size[0]
        d = np.abs(x - c)
        d = np.minimum(d, size[0] - d) / size[0]
        vals += np.exp(-0.5 * (d / sig) ** 2)
    return vals


def _symmetrized_fp_guess(cfg: RunConfig, model, basis):
    """Damped interaction sweep on a uniform grid, symmetrized under the
    half-period shift, projected onto the basis.  Produces cluster-pair
    seeds that plain iteration misses."""
    if model.domain.dim != 1:
        raise ConfigError("deflation.fp_symmetrize: supported for "
                          "one-dimensional domains only")
    d = cfg.deflation
    N = 1024
    mesh = uniform_mesh(model.domain, N)
    size = float(model.domain.size[0])
    K = model.W(mesh, mesh) * (size / N)
    V = model.V(mesh) if model.V is not None else 0.0
    rho = _profile_values(d["fp_profile"], model, cfg.beta_inv, mesh)
    rho /= rho.mean() * size
    tau = d["fp_damping"]
    for _ in range(d["fp_max_iter"]):
        expo = -(K @ rho + V) / cfg.beta_inv
        expo -= expo.max()
        new = np.exp(expo)
        new /= new.mean() * size
        new = 0.5 * (new + np.roll(new, N // 2))
        inc = np.abs(new - rho).max()
        rho = (1.0 - tau) * rho + tau * new
        if inc < 1e-12:
            break
    return basis.evaluate(mesh).T @ rho * (size / N)


def _fp_guess(cfg: RunConfig, model, basis, quad):
    d = cfg.deflation
    if d["fp_symmetrize"]:
        return _symmetrized_fp_guess(cfg, model, basis)
    rho0 = _profile_values(d["fp_profile"], model, cfg.beta_inv, quad.nodes)
    rho0 /= quad.integrate(rho0)
    rho, _ = fixed_point_iterate(rho0, model, cfg.beta_inv, quad,
                                 damping=d["fp_damping"],
                                 max_iter=d["fp_max_iter"])
    return project_function(rho, basis, quad)


def _guess_from_file(path, n_modes):
    try:
        a = np.load(path) if path.endswith(".npy") else np.loadtxt(path)
    except OSError as err:
        raise ConfigError(f"deflation.guess_file: {err}")
    except ValueError as err:
        raise ConfigError(f"deflation.guess_file: cannot parse {path}: {err}")
    a = np.asarray(a, dtype=float).ravel()
    if a.shape[0] != n_modes:
        raise ConfigError(f"deflation.guess_file: expected {n_modes} "
                          f"coefficients, found {a.shape[0]}")
    return a


def _initial_guesses(cfg: RunConfig, model, basis, quad, ops):
    rng = np.random.default_rng(cfg.deflation["seed"])
    guesses = []
    for kind in cfg.deflation["initial_guess"]:
        if kind == "zero":
            guesses.append(np.zeros(basis.n_modes))
        elif kind == "uniform":
            guesses.append(uniform_coefficients(basis))
        elif kind == "random-normalized":
            # uniform entries rescaled so the density has unit mass
            v = rng.random(basis.n_modes)
            while abs(ops.zeta @ v) < 1e-3:
                v = rng.random(basis.n_modes)
            guesses.append(v / (ops.zeta @ v))
        elif kind == "fixed-point-iteration":
            guesses.append(_fp_guess(cfg, model, basis, quad))
        else:    # "file", validated upstream
            guesses.append(_guess_from_file(cfg.deflation["guess_file"],
                                            basis.n_modes))
    return guesses


def _deflation_cfg(cfg: RunConfig):
    d = cfg.deflation
    return DeflationConfig(power=d["power"], shift=d["shift"],
                           accept_tol=d["accept_tol"],
                           dedup_tol=d["dedup_tol"], pos_tol=d["pos_tol"],
                           max_roots=d["max_roots"], seed=d["seed"])


def _newton_cfg(cfg: RunConfig):
    n = cfg.newton
    return NewtonConfig(step_tol=n["step_tol"], max_iter=n["max_iter"],
                        divergence_cap=n["divergence_cap"])


def _order_parameter_args(cfg: RunConfig):
    if cfg.model_name != "hkb":
        return None
    p = cfg.model_params
    if "alpha" not in p or "kappa" not in p:
        return None
    return (float(p["alpha"]), float(p["kappa"]))


def _expand_sweep(cfg: RunConfig):
    """Return [(subdir label, member config)]; label '' for plain runs."""
    if cfg.sweep is None:
        return [("", cfg)]
    key, values = cfg.sweep
    runs = []
    base = cfg.output["directory"]
    for v in values:
        member = cfg.with_overrides(**{key: v})
        label = f"{key}={v:g}"
        member.output["directory"] = os.path.join(base, label)
        runs.append((label, member))
    return runs


# ------------------------------------------------------ steady states


def _root_record(index, entry):
    rec = {
        "index": index,
        "stability": entry.stability,
        "linear_growth_rate": entry.growth_rate,
        "residual_norm": float(entry.residual_norm),
        "newton_iters": int(entry.newton_iters),
        "min_density": float(entry.min_density),
        "positive": bool(entry.positive),
        "km_residual": float(entry.km_residual),
        "free_energy": entry.free_energy,
        "translation_of": entry.translation_of,
        "coefficients": [float(c) for c in entry.coefficients],
    }
    if entry.order_parameters is not None:
        rec["order_parameters"] = entry.order_parameters
        rec["self_consistency_gap"] = float(entry.self_consistency_gap)
    if entry.exponent_fit is not None:
        rec["exponent_fit"] = entry.exponent_fit
    return rec


def _run_steady_states(cfg: RunConfig):
    outdir = cfg.output["directory"]
    os.makedirs(outdir, exist_ok=True)
    model, basis, quad, ops = _build(cfg)
    guesses = _initial_guesses(cfg, model, basis, quad, ops)
    sset = find_all_steady_states(ops, guesses, _deflation_cfg(cfg),
                                  _newton_cfg(cfg))
    verify_steady_states(sset, model, ops,
                         order_parameter_params=_order_parameter_args(cfg),
                         exponential_fit=(cfg.model_name == "o2"))
    for e in sset:
        rate = linear_growth_rate(e.coefficients, ops)
        e.growth_rate = rate
        if rate > MARGINAL_RATE:
            e.stability = "unstable"
        elif rate < -MARGINAL_RATE:
            e.stability = "stable"

    payload = {
        "schema": SCHEMA_VERSION,
        "config": cfg.raw,
        "model": {
            "name": cfg.model_name,
            "params": cfg.model_params,
            "domain": {
                "dim": model.domain.dim,
                "lower": [float(v) for v in model.domain.lower],
                "size": [float(v) for v in model.domain.size],
            },
        },
        "modes_per_axis": basis.ell,
        "n_modes": basis.n_modes,
        "quadrature_points": quad.points_per_axis,
        "beta_inv": cfg.beta_inv,
        "n_roots": len(sset),
        "n_discarded": len(sset.discarded),
        "chain_reasons": list(sset.meta.get("chain_reasons", [])),
        "roots": [_root_record(i, e) for i, e in enumerate(sset.entries)],
    }
    if "json" in cfg.output["formats"]:
        _write_json(os.path.join(outdir, "steadystates.json"), payload)
    if "csv" in cfg.output["formats"]:
        mesh = _density_mesh(cfg, model.domain)
        P = basis.evaluate(mesh)
        for i, e in enumerate(sset.entries):
            _write_density(os.path.join(outdir, f"density_{i:04d}.csv"),
                           P @ e.coefficients, mesh, model.domain.dim, cfg)

    for i, e in enumerate(sset.entries):
        extra = ""
        if e.order_parameters is not None:
            extra = (f"  m1={e.order_parameters['m1']:+.6f}"
                     f" m2={e.order_parameters['m2']:+.6f}")
        print(f"  root {i}: F={e.free_energy['total']:+.8f}  {e.stability:9s}"
              f" rate={e.growth_rate:+.3e}  |F(a)|={e.residual_norm:.2e}"
              f"{extra}")
    print(f"  {len(sset)} steady state(s) -> {outdir}")
    return 0 if len(sset) else 2


def cmd_steady_states(cfg: RunConfig):
    code = 0
    for label, member in _expand_sweep(cfg):
        if label:
            print(f"[{label}]")
        code = max(code, _run_steady_states(member))
    return code


# ------------------------------------------------------------- verify


def _load_roots(cfg: RunConfig, n_modes):
    path = os.path.join(cfg.output["directory"], "steadystates.json")
    if not os.path.exists(path):
        raise ConfigError(f"steady-state file not found: {path} "
                          "(run the steady-states command first)")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: {err}")
    roots = data.get("roots", [])
    for rec in roots:
        if len(rec.get("coefficients", [])) != n_modes:
            raise ConfigError(
                f"{path}: root {rec.get('index')} has "
                f"{len(rec.get('coefficients', []))} coefficients, expected "
                f"{n_modes}; rerun steady-states with the current config")
    return roots


def _run_verify(cfg: RunConfig):
    model, basis, quad, ops = _build(cfg)
    roots = _load_roots(cfg, basis.n_modes)
    fine = build_quadrature(model.domain, 2 * quad.points_per_axis)
    ops_fine = assemble_cached(model, basis, fine, cfg.beta_inv, False,
                               cfg.output["operator_cache"])
    coarse_system = ResidualSystem(ops)
    fine_system = ResidualSystem(ops_fine)
    coarse_tol = max(1e-8, 10.0 * cfg.deflation["accept_tol"])
    opp = _order_parameter_args(cfg)
    mesh = _density_mesh(cfg, model.domain)
    P = basis.evaluate(mesh)

    header = (f"{'root':>4} {'stability':>9} {'residual':>12} "
              f"{'residual2x':>12} {'refine_gap':>12} {'km2x':>12} "
              f"{'mass_gap':>12} {'min_rho':>12}")
    if opp is not None:
        header += f" {'sc_gap':>12}"
    header += " verdict"
    lines = [header]
    all_pass = True
    for rec in roots:
        a = np.asarray(rec["coefficients"], dtype=float)
        r_coarse = coarse_system.residual(a)[:-1]
        r_fine = fine_system.residual(a)[:-1]
        res1 = float(np.linalg.norm(r_coarse))
        res2 = float(np.linalg.norm(r_fine))
        # purely the operator refinement error at this state; a true root
        # of the coarse system cannot exceed it on the fine system
        gap = float(np.linalg.norm(r_fine - r_coarse))
        km2 = kirkwood_monroe_residual(a, model, basis, fine, cfg.beta_inv)
        mass_gap = float(abs(ops_fine.zeta @ a - 1.0))
        min_rho = float((P @ a).min())
        ok = (res1 <= coarse_tol
              and res2 <= gap + coarse_tol + VERIFY_RESIDUAL_FLOOR
              and mass_gap <= VERIFY_MASS_TOL
              and min_rho >= -cfg.deflation["pos_tol"])
        row = (f"{rec['index']:>4} {rec['stability']:>9} {res1:>12.3e} "
               f"{res2:>12.3e} {gap:>12.3e} {km2:>12.3e} "
               f"{mass_gap:>12.3e} {min_rho:>12.4f}")
        if opp is not None:
            try:
                op = estimate_order_parameters(a, basis, opp[0], opp[1],
                                               cfg.beta_inv)
                gap = float(op.self_consistency_gap)
            except ValueError:
                # invariant undefined (e.g. the density went negative)
                gap = float("inf")
            ok = ok and gap <= VERIFY_SC_TOL
            row += f" {gap:>12.3e}"
        all_pass = all_pass and ok
        lines.append(row + ("     PASS" if ok else "     FAIL"))
    if not roots:
        lines.append("  (no roots recorded)")

    table = "\n".join(lines)
    print(table)
    outdir = cfg.output["directory"]
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "report.txt"), "w") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        fh.write(_config_line(cfg) + "\n")
        fh.write(f"# quadrature_points={quad.points_per_axis} "
                 f"re-checked at {fine.points_per_axis}\n")
        fh.write(table + "\n")
        fh.write(("all roots PASS" if all_pass and roots else
                  "verification FAILED" if roots else "no roots") + "\n")
    return 0 if (all_pass and roots) else 3 if roots else 2


def cmd_verify(cfg: RunConfig):
    code = 0
    for label, member in _expand_sweep(cfg):
        if label:
            print(f"[{label}]")
        code = max(code, _run_verify(member))
    return code


# ------------------------------------------------------------- evolve


def _resolve_target(selector, roots):
    sel = str(selector).strip()
    if sel.startswith("index:"):
        try:
            idx = int(sel.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"target selector '{sel}': index must be an "
                              "integer")
        matches = [r for r in roots if r["index"] == idx]
        if not matches:
            raise ConfigError(f"target selector '{sel}': no root with that "
                              f"index ({len(roots)} recorded)")
        return matches[0]
    if sel.startswith("stability:"):
        want = sel.split(":", 1)[1]
        if want not in ("stable", "unstable"):
            raise ConfigError(f"target selector '{sel}': expected "
                              "stability:stable or stability:unstable")
        matches = [r for r in roots if r["stability"] == want]
        if len(matches) != 1:
            raise ConfigError(
                f"target selector '{sel}' matches {len(matches)} roots; "
                "it must resolve to exactly one (use index:<i>)")
        return matches[0]
    raise ConfigError(f"target selector '{sel}': expected 'index:<i>' or "
                      "'stability:<stable|unstable>'")


def _initial_state(block, basis, ops, roots, target):
    spec = str(block["initial"]).strip()
    if spec == "uniform":
        a = uniform_coefficients(basis)
    elif spec == "target":
        if target is None:
            raise ConfigError("initial 'target' requires a target selector")
        a = np.asarray(target["coefficients"], dtype=float).copy()
    elif spec.startswith("steady-state:"):
        rec = _resolve_target("index:" + spec.split(":", 1)[1], roots)
        a = np.asarray(rec["coefficients"], dtype=float).copy()
    elif spec.startswith("file:"):
        a = _guess_from_file(spec.split(":", 1)[1], basis.n_modes)
    else:
        raise ConfigError(f"initial '{spec}': expected uniform, target, "
                          "steady-state:<i>, or file:<path>")
    amp = float(block["perturbation"])
    if amp != 0.0:
        rng = np.random.default_rng(block["perturbation_seed"])
        v = rng.standard_normal(basis.n_modes)
        v -= (ops.zeta @ v) / (ops.zeta @ ops.zeta) * ops.zeta
        v /= _m_dist(ops, v)
        a = a + amp * v
    return a


class _NumericalFailure(RuntimeError):
    pass


def _check_drift(traj, ops):
    drift = traj.max_mass_drift(ops)
    if drift > MASS_DRIFT_CAP:
        raise _NumericalFailure(
            f"mass drift {drift:.3e} exceeds {MASS_DRIFT_CAP} by "
            f"t={float(traj.times[-1]):g}")
    return drift


def cmd_evolve(cfg: RunConfig):
    if cfg.sweep is not None:
        raise ConfigError("sweep: supported for steady-states and verify only")
    if cfg.evolve is None:
        raise ConfigError("evolve: required section missing")
    block = cfg.evolve
    model, basis, quad, ops = _build(cfg)
    needs_roots = (block["target"] or block["initial"] == "target"
                   or str(block["initial"]).startswith("steady-state:"))
    roots = _load_roots(cfg, basis.n_modes) if needs_roots else []
    target = _resolve_target(block["target"], roots) if block["target"] else None
    a0 = _initial_state(block, basis, ops, roots, target)
    a_target = (np.asarray(target["coefficients"], dtype=float)
                if target is not None else None)

    outdir = cfg.output["directory"]
    os.makedirs(outdir, exist_ok=True)
    dt = float(block["dt"])
    n_steps = int(round(block["t_final"] / dt))
    stride = cfg.output["snapshot_stride"]
    mesh = _density_mesh(cfg, model.domain)
    P = basis.evaluate(mesh)

    columns = ["t", "mass", "min_density"]
    if a_target is not None:
        columns.append("distance")
    columns += [f"a_{k}" for k in range(basis.n_modes)]
    write_csv = "csv" in cfg.output["formats"]

    def snapshot_row(t, a, index):
        vals = P @ a
        row = [float(t), float(ops.zeta @ a), float(vals.min())]
        if a_target is not None:
            row.append(_m_dist(ops, a - a_target))
        row += [float(c) for c in a]
        if write_csv:
            _write_density(os.path.join(outdir, f"density_{index:04d}.csv"),
                           vals, mesh, model.domain.dim, cfg)
        return row

    rows = [snapshot_row(0.0, a0, 0)]
    a = a0
    drift = 0.0
    failure = None
    done = 0
    while done < n_steps:
        chunk = min(stride, n_steps - done)
        t0, t1 = done * dt, (done + chunk) * dt
        try:
            traj = integrate_forward(a, None, (t0, t1), dt, ops)
            drift = max(drift, _check_drift(traj, ops))
        except (BlowUpError, _NumericalFailure) as err:
            failure = err
            break
        a = traj.final
        done += chunk
        rows.append(snapshot_row(done * dt, a, len(rows)))

    if write_csv:
        _write_csv(os.path.join(outdir, "trajectory.csv"), columns, rows, cfg)
    if failure is not None:
        print(f"numerical failure: {failure}; wrote {len(rows)} snapshot(s) "
              f"of the partial run -> {outdir}", file=sys.stderr)
        return 3
    summary = (f"evolved {n_steps} steps of dt={dt:g}; mass drift "
               f"{drift:.2e}")
    if a_target is not None:
        summary += (f"; distance to target {rows[0][3]:.6e} -> "
                    f"{rows[-1][3]:.6e}")
    print(summary)
    print(f"  {len(rows)} snapshot(s) -> {outdir}")
    return 0


# ---------------------------------------------------------- stabilize


def cmd_stabilize(cfg: RunConfig):
    if cfg.sweep is not None:
        raise ConfigError("sweep: supported for steady-states and verify only")
    if cfg.control is None:
        raise ConfigError("control: required section missing")
    block = cfg.control
    model, basis, quad, ops = _build(cfg, with_control=True)
    roots = _load_roots(cfg, basis.n_modes)
    target = _resolve_target(block["target"], roots)
    a_target = np.asarray(target["coefficients"], dtype=float)
    a0 = _initial_state(block, basis, ops, roots, target)

    n_outer = int(round(block["total_time"] / block["window"]))
    ocp = OCPConfig(horizon=float(block["window"]), dt=float(block["dt"]),
                    gamma=float(block["gamma"]), eta=float(block["eta"]),
                    delta=float(block["delta"]),
                    eps_u=float(block["eps_u"]),
                    max_iter=int(block["max_iter"]))
    mpc = MPCConfig(total_time=float(block["total_time"]),
                    n_outer_steps=n_outer, ocp=ocp)
    try:
        with np.errstate(over="ignore", invalid="ignore"), \
                warnings.catch_warnings():
            # per-window convergence is reported from the result flags
            warnings.simplefilter("ignore", RuntimeWarning)
            res = mpc_loop(a0, a_target, mpc, ops)
        drift = _check_drift(res.trajectory, ops)
    except (BlowUpError, _NumericalFailure, np.linalg.LinAlgError) as err:
        print(f"numerical failure in the control loop: {err}", file=sys.stderr)
        return 3

    outdir = cfg.output["directory"]
    os.makedirs(outdir, exist_ok=True)
    stride = cfg.output["snapshot_stride"]
    mesh = _density_mesh(cfg, model.domain)
    P = basis.evaluate(mesh)
    write_csv = "csv" in cfg.output["formats"]

    traj = res.trajectory
    columns = (["t", "mass", "min_density", "distance"]
               + [f"a_{k}" for k in range(basis.n_modes)])
    rows = []
    snap = 0
    for i, t in enumerate(traj.times):
        a = traj.coefficients[i]
        vals = P @ a
        rows.append([float(t), float(ops.zeta @ a), float(vals.min()),
                     _m_dist(ops, a - a_target)]
                    + [float(c) for c in a])
        if write_csv and i % stride == 0:
            _write_density(os.path.join(outdir, f"density_{snap:04d}.csv"),
                           vals, mesh, model.domain.dim, cfg)
            snap += 1
    window_lines = [
        "window {}: cost={} converged={}".format(
            j, _format_float(res.window_costs[j]),
            bool(res.window_converged[j]))
        for j in range(len(res.window_costs))]
    if write_csv:
        _write_csv(os.path.join(outdir, "trajectory.csv"), columns, rows,
                   cfg, extra=window_lines)
        u = res.applied
        dim = u.values.shape[2]
        ucols = (["t", "norm"]
                 + [f"u{d}_{k}" for d in range(dim)
                    for k in range(basis.n_modes)])
        norms = u.norms()
        urows = []
        for i, t in enumerate(u.times):
            urows.append([float(t), float(norms[i])]
                         + [float(v) for v in u.values[i].T.ravel()])
        _write_csv(os.path.join(outdir, "controls.csv"), ucols, urows, cfg)

    d = res.distances
    print(f"receding horizon: {n_outer} window(s) of {block['window']:g}s, "
          f"distance {d[0]:.6e} -> {d[-1]:.6e}, mass drift {drift:.2e}")
    unconverged = [j for j, okf in enumerate(res.window_converged) if not okf]
    if unconverged:
        print(f"  open-loop solves not fully converged in window(s) "
              f"{unconverged} (tolerance {block['eps_u']:g})")
    print(f"  trajectory, controls, {snap} density snapshot(s) -> {outdir}")
    return 0


# --------------------------------------------------------------- main


def _add_common(sub):
    sub.add_argument("--config", metavar="PATH",
                     help="TOML run configuration")
    sub.add_argument("--preset", metavar="NAME",
                     help="named built-in configuration (see below)")
    sub.add_argument("--out", metavar="DIR",
                     help="override the output directory")
    sub.add_argument("--seed", type=int, metavar="U64",
                     help="override the deflation seed")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mvsteady",
        description="Steady states, verification, and receding-horizon "
                    "stabilization of mean-field dynamics on the torus.",
        epilog="available presets: " + ", ".join(list_presets()),
    )
    commands = {
        "steady-states": (cmd_steady_states,
                          "enumerate all steady states via deflation"),
        "verify": (cmd_verify,
                   "re-check a steady-state file on a finer quadrature"),
        "evolve": (cmd_evolve, "integrate the uncontrolled dynamics"),
        "stabilize": (cmd_stabilize,
                      "drive the state to a selected steady state"),
    }
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in commands.items():
        _add_common(subparsers.add_parser(name, help=help_text))
    args = parser.parse_args(argv)

    try:
        cfg = resolve(args.preset, args.config, args.out, args.seed)
        return commands[args.command][0](cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except BlowUpError as err:
        print(f"numerical failure at t={err.t:g}: {err.norm}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
