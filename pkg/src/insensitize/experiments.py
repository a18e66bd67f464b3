"""Experiment drivers behind the command-line subcommands.

Each driver takes a validated ``ExperimentConfig`` and an output directory,
writes its artifacts and returns an exit code.  Outputs depend only on the
configuration and seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .carleman import (
    CarlemanParams,
    PsiConstructionError,
    build_psi,
    carleman_ratio,
    default_weight_constant,
    evaluate_weights,
    observability_ratio,
    psi_gradient_floor,
    random_unit_samples,
)
from .cascade import (
    ProblemError,
    ProblemSpec,
    bump_profile,
    phi,
    solve_adjoint,
    solve_cascade,
    time_weighted_source,
    weighted_source_norms,
)
from .config import Expression, ExperimentConfig
from .hum import HumConfig, result_json, solve_hum, verify_insensitization
from .mesh import (
    BulkSurfaceField,
    Mesh,
    MeshError,
    boundary_region,
    build_annulus_mesh,
    build_interval_mesh,
    interior_region,
)
from .rng import make_rng
from .solvers import ContractViolation, Potentials, level_energies, solve_backward, solve_forward
from .tree import AdaptedField, NoiseTree, TreeError, build_tree, mean_over_level

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3


@dataclass(frozen=True, eq=False)
class Experiment:
    config: ExperimentConfig
    mesh: Mesh
    tree: NoiseTree
    problem: ProblemSpec
    psi: BulkSurfaceField
    carleman: CarlemanParams
    hum: HumConfig


def _coefficient(text: str, mesh: Mesh, boundary: bool, tree: NoiseTree):
    e = Expression.parse(text)
    if e.is_constant:
        return float(e.evaluate({}))
    c = mesh.boundary_coords if boundary else mesh.interior_coords
    size = c.shape[0]
    if mesh.kind == "interval":
        env = {"x": c[:, 0], "y": np.zeros(size), "r": c[:, 0], "phi": np.zeros(size)}
    else:
        r, ph = c[:, 0], c[:, 1]
        env = {"x": r * np.cos(ph), "y": r * np.sin(ph), "r": r, "phi": ph}
    if not e.is_adapted:
        return np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), (size,)).copy()

    def level(n, t, W):
        v = e.evaluate({**env, "t": t, "W": np.asarray(W)[:, None]})
        return np.broadcast_to(np.asarray(v, dtype=float), (2**n, size)).copy()

    return AdaptedField.from_function(tree, level, tree.M)


def build_potentials(cfg: ExperimentConfig, mesh: Mesh, tree: NoiseTree) -> Potentials:
    coefs = {}
    for key in ("a1", "a2", "b1", "b2"):
        value = _coefficient(cfg.get("potentials", key), mesh, key.startswith("b"), tree)
        raw = value.raw(0) if isinstance(value, AdaptedField) else np.asarray(value)
        bad = not np.all(np.isfinite(raw))
        if isinstance(value, AdaptedField):
            bad = bad or not all(np.all(np.isfinite(value.raw(n))) for n in range(len(value)))
        if bad:
            raise cfg.error("potentials", key, "expression is not finite on the mesh")
        coefs[key] = value
    try:
        return Potentials(**coefs)
    except ContractViolation as exc:
        raise cfg.error("potentials", None, str(exc)) from exc


def build_mesh(cfg: ExperimentConfig) -> Mesh:
    g = cfg.get
    try:
        if g("geometry", "kind") == "interval":
            return build_interval_mesh(g("geometry", "j"), g("geometry", "l"))
        return build_annulus_mesh(g("geometry", "nr"), g("geometry", "nphi"), g("geometry", "r0"), g("geometry", "r1"))
    except MeshError as exc:
        raise cfg.error("geometry", None, str(exc)) from exc


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """Build every numerical object; structural violations become ``ConfigError``."""
    g = cfg.get
    mesh = build_mesh(cfg)
    try:
        tree = build_tree(g("time", "m"), g("time", "t"))
    except TreeError as exc:
        raise cfg.error("time", "m", str(exc)) from exc
    masks = {}
    for key in ("g0", "o", "g1"):
        try:
            masks[key] = interior_region(mesh, g("regions", key))
        except MeshError as exc:
            raise cfg.error("regions", key, str(exc)) from exc
    try:
        og = boundary_region(mesh, g("regions", "o_gamma"))
    except (MeshError, ValueError) as exc:
        raise cfg.error("regions", "o_gamma", str(exc)) from exc
    if not (masks["g1"] >= 1).any():
        raise cfg.error("regions", "g1", "G1 contains no mesh node")
    # region hypotheses are checked before psi so the more basic error is reported
    try:
        problem = ProblemSpec(
            mesh,
            tree,
            build_potentials(cfg, mesh, tree),
            masks["g0"],
            masks["o"],
            og,
            masks["g1"],
            AdaptedField.zeros(tree.M, (mesh.ndof,)),
            BulkSurfaceField.zeros(mesh),
            t0=g("regions", "t0"),
            allow_disjoint=g("run", "allow_disjoint_regions"),
        )
    except ProblemError as exc:
        msg = str(exc)
        key = "g1" if "G1" in msg else "t0" if "t0" in msg else "o"
        raise cfg.error("regions", key, msg) from exc
    try:
        psi = build_psi(mesh, masks["g1"], g("carleman", "psi_peak"))
    except PsiConstructionError as exc:
        raise cfg.error("regions", "g1", str(exc)) from exc

    lam, mu = g("carleman", "lambda"), g("carleman", "mu")
    wc = g("carleman", "weight_constant")
    if wc == "auto":
        wc = default_weight_constant(psi, tree.T, lam, mu)
    src_wc = g("sources", "weight_constant")
    src_wc = wc if src_wc == "auto" else src_wc

    if g("sources", "shape") == "bump":
        shape = bump_profile(mesh, g("sources", "center"), g("sources", "width"), g("sources", "amplitude"))
    else:
        shape = np.zeros(mesh.n_interior)
    xi = time_weighted_source(mesh, tree, shape, g("sources", "boundary_amplitude") * og, src_wc)
    problem = problem.replace(xi=xi, weight_constant=src_wc)
    params = CarlemanParams(lam, mu, wc, psi, masks["g1"])
    hum = HumConfig(g("hum", "eps"), g("hum", "cg_tol"), g("hum", "max_iter"))
    return Experiment(cfg, mesh, tree, problem, psi, params, hum)


# ---------------------------------------------------------------------------
# serialization


def _clean(obj):
    """Replace non-finite floats by strings so the JSON is standard."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(payload) -> str:
    return json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n"


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


class _Writer:
    def __init__(self, out: Path, formats: Sequence[str]):
        self.out = Path(out)
        self.formats = set(formats)
        self.written: list[Path] = []
        self.out.mkdir(parents=True, exist_ok=True)

    def __call__(self, name: str, text: str) -> None:
        if Path(name).suffix.lstrip(".") not in self.formats:
            return
        path = self.out / name
        path.write_text(text)
        self.written.append(path)


def _header(exp: Experiment) -> dict:
    return {
        "mesh": exp.mesh.to_dict(),
        "time": {"T": exp.tree.T, "M": exp.tree.M, "dt": exp.tree.dt},
        "seed": exp.config.get("run", "seed"),
        "potentials_sup": exp.problem.potentials.sup_norms(),
        "source_weight_constant": exp.problem.weight_constant,
    }


def _norm(mesh: Mesh, v: np.ndarray, part: Optional[slice] = None) -> float:
    w = mesh.weights if part is None else mesh.weights[part]
    v = v if part is None else v[part]
    return math.sqrt(float(np.dot(w * v, v)))


# ---------------------------------------------------------------------------
# drivers


def run_simulate(exp: Experiment, out: Path) -> int:
    m, tree, pb = exp.mesh, exp.tree, exp.problem
    sol = solve_cascade(pb)
    z0 = sol.backward.z.level(0)[0]
    ey, ez = level_energies(m, sol.y), level_energies(m, sol.z)
    summary = {
        **_header(exp),
        "phi": phi(pb, sol.forward),
        "z0_norm": _norm(m, z0),
        "z0_interior_norm": _norm(m, z0, m.interior_slice),
        "z0_boundary_norm": _norm(m, z0, m.boundary_slice),
        "weighted_source_norms": weighted_source_norms(pb),
        "y_level_energy": ey.tolist(),
        "z_level_energy": ez.tolist(),
    }
    write = _Writer(out, exp.config.get("output", "formats"))
    write("simulate.json", dumps(summary))
    rows = [(n, float(tree.time(n)), float(ey[n]), float(ez[n])) for n in range(tree.M + 1)]
    write("level_norms.csv", _csv(["level [1]", "time [time]", "E|y|^2 [field^2]", "E|z|^2 [field^2]"], rows))
    return EXIT_OK


def _report(exp: Experiment, result, rep: dict) -> str:
    ok = result.z0_norm <= result.penalty_bound
    lines = [
        "insensitizing control synthesis",
        "",
        f"mesh: {exp.mesh.kind}, {exp.mesh.ndof} unknowns; M = {exp.tree.M}, T = {exp.tree.T:g}",
        f"penalty eps = {result.eps:g}, cg_tol = {result.cg_tol:g}",
        f"CG iterations: {result.iterations} ({'converged' if result.converged else 'NOT converged'})",
        f"final relative residual: {result.final_residual:.3e}",
        "",
        f"|z_free(0)|_h             = {result.free_response_norm:.6e}",
        f"|z(0)|_h                  = {result.z0_norm:.6e}",
        f"sqrt(2 eps J) bound       = {result.penalty_bound:.6e}  ({'holds' if ok else 'VIOLATED'})",
        f"control energy            = {result.control_energy:.6e}",
        f"Phi (controlled)          = {rep['phi']:.6e}",
        f"max |dPhi/dtau1|          = {rep['tau1']['max_abs_fd']:.6e}",
        f"max |dPhi/dtau2|          = {rep['tau2']['max_abs_fd']:.6e}",
        "",
        "control norms: " + ", ".join(f"{k} = {v:.6e}" for k, v in sorted(rep["control_norms"].items())),
        "weighted source norms: "
        + ", ".join(f"{k} = {v:.6e}" for k, v in sorted(rep["weighted_source_norms"].items())),
        f"empirical control-cost constant: {rep['control_cost_constant']:.6e}",
        "",
    ]
    return "\n".join(lines)


def run_synthesize(exp: Experiment, out: Path) -> int:
    cfg = exp.config
    result = solve_hum(exp.problem, exp.hum)
    rep = verify_insensitization(
        exp.problem, result.controls, cfg.get("hum", "directions"), cfg.get("run", "seed")
    )
    write = _Writer(out, cfg.get("output", "formats"))
    payload = json.loads(result_json(result, exp.mesh, exp.tree, rep))
    payload.update(_header(exp))
    write("synthesize.json", dumps(payload))
    write("cg_history.csv", result.history_csv())
    write("report.txt", _report(exp, result, rep))
    if not result.converged:
        log.error("conjugate gradients did not converge in %d iterations", result.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# manufactured solution y(t, x) = (1 + t) (sin(pi x / L) + x / L + 1): its
# curvature vanishes at both end points, so the one-sided boundary flux is
# second-order accurate and the linear time profile is integrated exactly.


def manufactured_exact(mesh: Mesh, t: float) -> np.ndarray:
    L = mesh.params["L"]
    x = np.concatenate([mesh.interior_coords[:, 0], mesh.boundary_coords[:, 0]])
    return (1 + t) * (np.sin(np.pi * x / L) + x / L + 1)


def manufactured_source(mesh: Mesh, t: float) -> np.ndarray:
    L = mesh.params["L"]
    k = np.pi / L
    x = mesh.interior_coords[:, 0]
    prof = np.sin(k * x) + x / L + 1
    interior = prof + (1 + t) * k**2 * np.sin(k * x)
    # y_Gamma' = -d_nu y + f_Gamma at x = 0 (d_nu = -d_x) and x = L (d_nu = d_x)
    left = 1.0 - (1 + t) * (k + 1 / L)
    right = 2.0 + (1 + t) * (-k + 1 / L)
    return np.concatenate([interior, [left, right]])


def manufactured_error(J: int, L: float, T: float, M: int) -> float:
    mesh = build_interval_mesh(J, L)
    tree = build_tree(M, T)
    f = AdaptedField.deterministic([manufactured_source(mesh, tree.time(n + 1)) for n in range(M)])
    sol = solve_forward(mesh, tree, Potentials(), manufactured_exact(mesh, 0.0), f)
    err = 0.0
    for n in range(M + 1):
        e = sol.y.raw(n) - manufactured_exact(mesh, tree.time(n))
        err = max(err, math.sqrt(float(mean_over_level(e**2 @ mesh.weights))))
    return err


def exactness_errors(mesh: Mesh, tree: NoiseTree) -> dict:
    """Constant-in-space cases: ``y = W`` from unit noise, ``z = W, Z = 1`` from ``z(T) = W(T)``."""
    ones = AdaptedField.deterministic([np.ones(mesh.ndof)] * tree.M)
    fwd = solve_forward(mesh, tree, Potentials(), np.zeros(mesh.ndof), noise_source=ones)
    fe = max(float(np.max(np.abs(fwd.y.raw(n) - tree.W[n][:, None]))) for n in range(tree.M + 1))
    terminal = np.repeat(tree.W[tree.M][:, None], mesh.ndof, axis=1)
    bwd = solve_backward(mesh, tree, Potentials(), terminal)
    ze = max(float(np.max(np.abs(bwd.z.raw(n) - tree.W[n][:, None]))) for n in range(tree.M + 1))
    Ze = max(float(np.max(np.abs(bwd.Z.raw(n) - 1.0))) for n in range(tree.M))
    return {"forward_y_minus_W": fe, "backward_z_minus_W": ze, "backward_Z_minus_1": Ze}


def convergence_table(levels: Sequence[int], L: float, T: float, M: int) -> list[dict]:
    levels = list(levels)
    if len(levels) < 2:
        raise ValueError("convergence study needs at least two refinement levels")
    rows, prev = [], None
    for J in levels:
        err = manufactured_error(J, L, T, M)
        h = L / J
        order = math.log(prev[1] / err) / math.log(prev[0] / h) if prev and err > 0 else math.nan
        ex = exactness_errors(build_interval_mesh(J, L), build_tree(M, T))
        rows.append({"J": J, "h": h, "error": err, "order": order, **ex})
        prev = (h, err)
    return rows


def run_convergence(exp: Experiment, out: Path, levels: Optional[Sequence[int]] = None) -> int:
    cfg = exp.config
    levels = list(levels) if levels is not None else list(cfg.get("convergence", "levels"))
    if len(levels) < 2:
        raise cfg.error("convergence", "levels", "need at least two refinement levels")
    L = cfg.get("geometry", "l")
    rows = convergence_table(levels, L, cfg.get("time", "t"), cfg.get("convergence", "m"))
    write = _Writer(out, cfg.get("output", "formats"))
    header = [
        "J [cells]",
        "h [length]",
        "error [field]",
        "order [1]",
        "exact_y_minus_W [field]",
        "exact_z_minus_W [field]",
        "exact_Z_minus_1 [field]",
    ]
    body = [
        (r["J"], r["h"], r["error"], r["order"], r["forward_y_minus_W"], r["backward_z_minus_W"], r["backward_Z_minus_1"])
        for r in rows
    ]
    write("convergence.csv", _csv(header, body))
    write("convergence.json", dumps({"L": L, "T": cfg.get("time", "t"), "M": cfg.get("convergence", "m"), "rows": rows}))
    return EXIT_OK


def run_carleman(
    exp: Experiment, out: Path, lambdas: Optional[Sequence[float]] = None, rescale: float = 1.0
) -> int:
    cfg = exp.config
    lambdas = list(lambdas) if lambdas is not None else list(cfg.get("carleman", "lambdas"))
    if not lambdas:
        raise cfg.error("carleman", "lambdas", "lambda grid is empty")
    m, pb, base = exp.mesh, exp.problem, exp.carleman
    rng = make_rng(cfg.get("run", "seed"), "carleman-samples")
    samples = [rescale * q for q in random_unit_samples(m, rng, cfg.get("carleman", "samples"))]
    solutions = [solve_adjoint(pb, q) for q in samples]

    rows, per_lambda = [], []
    for lam in lambdas:
        params = CarlemanParams(lam, base.mu, base.weight_constant, base.psi, base.G1)
        block = {"lambda": lam}
        for kind in ("forward", "backward", "coupled"):
            ratios = []
            for i, sol in enumerate(solutions):
                r = carleman_ratio(kind, sol, pb, params)
                rows.append((lam, kind, i, r.lhs, r.rhs, r.ratio, r.log_lhs, r.log_rhs))
                ratios.append(r.ratio)
            block[kind] = {"max": max(ratios), "mean": float(np.mean(ratios)), "min": min(ratios)}
        per_lambda.append(block)

    obs = observability_ratio(pb, samples, base.weight_constant)
    if obs.failures:
        log.error("unique continuation witness failed for samples %s", obs.failures)
    wf = evaluate_weights(base, exp.tree, m)
    summary = {
        **_header(exp),
        "mu": base.mu,
        "weight_constant": base.weight_constant,
        "rescale": rescale,
        "psi_gradient_floor": psi_gradient_floor(m, base.psi, base.G1),
        "alpha_t_constant": wf.alpha_t_constant,
        "gamma_t_constant": wf.gamma_t_constant,
        "carleman": per_lambda,
        "observability": obs.to_dict(),
    }
    write = _Writer(out, cfg.get("output", "formats"))
    header = ["lambda [1]", "estimate", "sample", "lhs [weighted energy]", "rhs [weighted energy]", "ratio [1]", "log_lhs [1]", "log_rhs [1]"]
    write("carleman.csv", _csv(header, rows))
    write("carleman.json", dumps(summary))
    return EXIT_OK
