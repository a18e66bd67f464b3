"""Acceptance criteria for the discrete insensitization pipeline.

Each test records a single ``ACCEPTANCE k: PASS|FAIL`` line; the lines are
repeated in the terminal summary.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from _problems import h_inner, random_controls, random_potentials, random_problem, random_source, reference_params, reference_problem
from insensitize.carleman import (
    CarlemanParams,
    build_psi,
    carleman_ratio,
    observability_ratio,
    psi_gradient_floor,
    random_unit_samples,
)
from insensitize.cascade import phi_tau_derivative, solve_adjoint
from insensitize.cli import main, thread_limit
from insensitize.experiments import convergence_table, exactness_errors
from insensitize.hum import HumConfig, gramian_apply, solve_hum, verify_insensitization
from insensitize.mesh import build_annulus_mesh, build_interval_mesh, interior_region
from insensitize.rng import make_rng
from insensitize.solvers import duality_pairing, solve_backward, solve_forward
from insensitize.tree import build_tree

REFERENCE_INI = Path(__file__).resolve().parents[1] / "configs" / "reference.ini"
KINDS = ("forward", "backward", "coupled")
LAMBDAS = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)


def test_criterion_1_exact_duality(acceptance):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for k in range(25):
        J, M = (8, 16)[k % 2], (6, 8)[(k // 2) % 2]
        m, tree = build_interval_mesh(J), build_tree(M, 1.0)
        pot = random_potentials(m, tree, rng, 2.0)
        assert max(pot.sup_norms().values()) <= 2.0
        fwd = solve_forward(m, tree, pot, rng.standard_normal(m.ndof), random_source(m, tree, rng), random_source(m, tree, rng))
        zT = rng.standard_normal((2**M, m.ndof))
        bwd = solve_backward(m, tree, pot.negated(), zT, random_source(m, tree, rng))
        worst = max(worst, duality_pairing(m, tree, fwd, bwd).relative)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 30
    acceptance(1, ok, f"max relative duality residual {worst:.3e} (<= 1e-10), {elapsed:.2f} s (< 30 s)")
    assert ok


def test_criterion_2_derivative_identity(acceptance):
    rng = np.random.default_rng(202)
    worst = 0.0
    for k in range(20):
        pb = random_problem(rng, J=(8, 16)[k % 2], M=(6, 8)[(k // 2) % 2])
        ctl = random_controls(pb.mesh, pb.tree, rng)
        r = phi_tau_derivative(pb, ctl, rng.standard_normal(pb.mesh.ndof), 1 + k % 2)
        worst = max(worst, abs(r.fd_value - r.duality_value) / r.scale)
    ok = worst <= 1e-9
    acceptance(2, ok, f"max |fd - duality| / scale {worst:.3e} (<= 1e-9) over 20 triples")
    assert ok


def test_criterion_3_gramian_structure(acceptance):
    rng = np.random.default_rng(303)
    pb = random_problem(rng, J=8, M=6)
    m = pb.mesh
    sym, psd = 0.0, math.inf
    for _ in range(10):
        q, r = rng.standard_normal(m.ndof), rng.standard_normal(m.ndof)
        Lq, Lr = gramian_apply(pb, q).packed(), gramian_apply(pb, r).packed()
        a, b = h_inner(m, Lq, r), h_inner(m, q, Lr)
        sym = max(sym, abs(a - b) / max(abs(a), abs(b), 1e-300))
        psd = min(psd, h_inner(m, Lq, q) / h_inner(m, q, q))
    ok = sym <= 1e-10 and psd >= -1e-12
    acceptance(3, ok, f"symmetry defect {sym:.3e} (<= 1e-10), min <Lq,q>/<q,q> {psd:.3e} (>= -1e-12)")
    assert ok


@pytest.fixture(scope="module")
def reference_runs():
    start = time.perf_counter()
    runs = {}
    for J in (8, 16, 32):
        pb = reference_problem(J=J, M=10)
        res = solve_hum(pb, HumConfig(eps=1e-6))
        runs[J] = (pb, res, verify_insensitization(pb, res.controls, 10, seed=7))
    return runs, time.perf_counter() - start


def test_criterion_4a_penalty_bound(reference_runs, acceptance):
    runs, _ = reference_runs
    pb, res, _ = runs[16]
    ok = res.converged and res.z0_norm <= res.penalty_bound
    acceptance(
        "4a", ok,
        f"|z(0)|_h {res.z0_norm:.3e} <= sqrt(2 eps J) (1 + 10 cg_tol) = {res.penalty_bound:.3e}; "
        f"CG {res.iterations} iterations, converged={res.converged}",
    )
    assert ok


def test_criterion_4b_derivatives_vanish(reference_runs, acceptance):
    runs, _ = reference_runs
    _, _, rep = runs[16]
    defect = max(rep["tau1"]["max_abs_fd"], rep["tau2"]["max_abs_fd"])
    bound = 1e-4 * max(rep["phi"], 1e-12)
    ok = defect <= bound
    acceptance(
        "4b", ok,
        f"max |dPhi/dtau| {defect:.3e} vs 1e-4 max(Phi, 1e-12) = {bound:.3e} (Phi = {rep['phi']:.3e})",
    )
    assert ok


def test_criterion_4c_control_cost_constant(reference_runs, acceptance):
    runs, elapsed = reference_runs
    consts = {J: runs[J][2]["control_cost_constant"] for J in runs}
    vals = list(consts.values())
    finite = all(math.isfinite(c) and c > 0 for c in vals)
    spread = max(vals) / min(vals) if finite else math.inf
    ok = finite and spread <= 3 and elapsed < 300
    detail = ", ".join(f"J={J}: {c:.4g}" for J, c in consts.items())
    acceptance("4c", ok, f"control-cost constants {detail}; spread {spread:.3f} (<= 3); {elapsed:.1f} s (< 300 s)")
    assert ok


def test_criterion_5_solver_convergence(acceptance):
    rows = convergence_table([8, 16, 32, 64], 1.0, 1.0, 4)
    orders = [r["order"] for r in rows[1:]]
    exact = max(
        max(exactness_errors(build_interval_mesh(16), build_tree(8, 1.0)).values()),
        max(exactness_errors(build_annulus_mesh(4, 8, 1.0, 2.0), build_tree(8, 1.0)).values()),
    )
    ok = all(1.8 <= p <= 2.2 for p in orders) and exact <= 1e-12
    acceptance(5, ok, f"observed orders {', '.join(f'{p:.3f}' for p in orders)} (in [1.8, 2.2]); exactness error {exact:.2e} (<= 1e-12)")
    assert ok


def test_criterion_6_carleman_observability(acceptance):
    pb = reference_problem()
    params = reference_params(pb)
    samples = random_unit_samples(pb.mesh, make_rng(0, "acceptance-obs"), 20)
    stats = observability_ratio(pb, samples, pb.weight_constant)
    obs_ok = len(stats.ratios) == 20 and not stats.failures and all(math.isfinite(r) for r in stats.ratios)

    invariance = 0.0
    for c in (1e-3, 1e3):
        scaled = observability_ratio(pb, [c * q for q in samples], pb.weight_constant)
        invariance = max(invariance, max(abs(a / b - 1) for a, b in zip(scaled.ratios, stats.ratios)))

    carl_ok = True
    for q in samples:
        base = solve_adjoint(pb, q)
        for c in (1e-3, 1e3):
            other = solve_adjoint(pb, c * q)
            for kind in KINDS:
                r, s = carleman_ratio(kind, base, pb, params), carleman_ratio(kind, other, pb, params)
                carl_ok &= math.isfinite(r.ratio) and r.ratio > 0
                invariance = max(invariance, abs(s.ratio / r.ratio - 1))
    ok = obs_ok and carl_ok and invariance <= 1e-12
    acceptance(
        6, ok,
        f"observability max {stats.max:.4g}, {len(stats.failures)} unique-continuation failures; "
        f"Carleman ratios finite={carl_ok}; scaling invariance {invariance:.2e} (<= 1e-12)",
    )
    assert ok


def test_criterion_7_weight_machinery(acceptance):
    contract = []
    for mesh, box in ((build_interval_mesh(16), (0.5, 0.65)), (build_annulus_mesh(6, 12, 1.0, 2.0), (1.4, 1.6))):
        G1 = interior_region(mesh, box)
        psi = build_psi(mesh, G1)
        floor = psi_gradient_floor(mesh, psi, G1)
        contract.append(bool(np.all(psi.interior > 0) and np.all(psi.boundary == 0) and floor > 0))

    pb = reference_problem()
    base = reference_params(pb)
    sols = [solve_adjoint(pb, q) for q in random_unit_samples(pb.mesh, make_rng(1, "acceptance-weights"), 5)]
    finite, raised = True, None
    try:
        with np.errstate(all="raise"):
            for lam in LAMBDAS:
                p = CarlemanParams(lam, base.mu, base.weight_constant, base.psi, base.G1)
                for sol in sols:
                    for kind in KINDS:
                        r = carleman_ratio(kind, sol, pb, p)
                        finite &= all(math.isfinite(v) for v in (r.log_lhs, r.log_rhs, r.ratio))
    except FloatingPointError as exc:
        raised = exc
    ok = all(contract) and finite and raised is None
    acceptance(
        7, ok,
        f"psi contract interval={contract[0]} annulus={contract[1]}; weighted sums finite for lambda up to "
        f"{LAMBDAS[-1]:g}: {finite}; floating point exception: {raised}",
    )
    assert ok


def test_criterion_8_thread_determinism(tmp_path, acceptance):
    codes = [
        main(["synthesize", "--config", str(REFERENCE_INI), "--out", str(tmp_path / t), "--threads", t])
        for t in ("1", "4")
    ]
    a = (tmp_path / "1" / "synthesize.json").read_bytes()
    b = (tmp_path / "4" / "synthesize.json").read_bytes()
    ok = codes == [0, 0] and a == b
    acceptance(
        8, ok, f"exit codes {codes}; synthesize.json byte-identical across --threads 1/4 "
        f"(effective {thread_limit(1)}/{thread_limit(4)}): {a == b}",
    )
    assert ok
