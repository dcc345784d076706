"""Exactly solvable convex constrained problems for duality verification.

Instance family: least-squares objective with per-sample squared-error
constraints,

    minimize   (1/n) ||A theta - y||^2
    subject to (c_i' theta - t_i)^2 <= eps_i,   i = 1..m.

Each quadratic constraint is equivalent to the pair of linear constraints
|c_i' theta - t_i| <= sqrt(eps_i), so the problem is a strictly convex QP
with linear constraints and the exact optimum is found by enumerating
active sets and solving the linear KKT system. Duals are reported for the
quadratic form, i.e. in the convention

    L(theta, mu) = F(theta) + sum_i mu_i ((c_i' theta - t_i)^2 - eps_i),

under which dP*/d eps_i = -mu_i* at points where P* is differentiable.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .numerics import NumericError, ShapeError

MAX_ENUMERATED_CONSTRAINTS = 10


class InfeasibleInstanceError(ValueError):
    """The instance violates the strict feasibility assumption."""


class ActiveSetChangeError(RuntimeError):
    """The active set is not stable under the requested perturbation."""


@dataclass
class ConvexInstance:
    kind: str
    obj_matrix: np.ndarray
    obj_targets: np.ndarray
    con_matrix: np.ndarray
    con_targets: np.ndarray
    epsilon: np.ndarray

    def __post_init__(self):
        self.obj_matrix = np.atleast_2d(np.asarray(self.obj_matrix, dtype=np.float64))
        self.obj_targets = np.asarray(self.obj_targets, dtype=np.float64).reshape(-1)
        self.con_matrix = np.atleast_2d(np.asarray(self.con_matrix, dtype=np.float64))
        self.con_targets = np.asarray(self.con_targets, dtype=np.float64).reshape(-1)
        self.epsilon = np.asarray(self.epsilon, dtype=np.float64).reshape(-1)
        if self.kind not in ("constrained_scalar_ls", "constrained_multi_ls"):
            raise ValueError(f"unknown instance kind {self.kind!r}")
        n, d = self.obj_matrix.shape
        m = len(self.con_targets)
        if self.obj_targets.shape != (n,):
            raise ShapeError("objective targets must match objective rows")
        if self.con_matrix.shape != (m, d):
            raise ShapeError("constraint matrix must be (m, d)")
        if self.epsilon.shape != (m,):
            raise ShapeError("one epsilon per constraint is required")
        if (self.epsilon <= 0).any():
            raise ValueError("constraint bounds must be positive")
        if m > MAX_ENUMERATED_CONSTRAINTS:
            raise ValueError(f"at most {MAX_ENUMERATED_CONSTRAINTS} constraints supported")
        if np.linalg.matrix_rank(self.obj_matrix) < d:
            raise ValueError("objective matrix must have full column rank "
                             "(strictly convex objective required)")

    @property
    def dim(self) -> int:
        return self.obj_matrix.shape[1]

    @property
    def n_constraints(self) -> int:
        return len(self.con_targets)

    def with_epsilon(self, epsilon: np.ndarray) -> "ConvexInstance":
        return ConvexInstance(
            self.kind, self.obj_matrix, self.obj_targets,
            self.con_matrix, self.con_targets, epsilon,
        )


@dataclass
class KKTSolution:
    primal_opt: np.ndarray
    dual_opt: np.ndarray
    P_star: float
    D_star: float
    active: np.ndarray
    slacks: np.ndarray


def objective_value(inst: ConvexInstance, theta: np.ndarray) -> float:
    r = inst.obj_matrix @ theta - inst.obj_targets
    return float((r**2).mean())


def constraint_values(inst: ConvexInstance, theta: np.ndarray) -> np.ndarray:
    return (inst.con_matrix @ theta - inst.con_targets) ** 2


def strictly_feasible_point(inst: ConvexInstance) -> np.ndarray:
    """A point with every constraint strictly satisfied, via a margin LP."""
    m, d = inst.con_matrix.shape
    root_eps = np.sqrt(inst.epsilon)
    # variables (theta, s): minimize s with +-(C theta - t) - sqrt(eps) <= s
    a_ub = np.zeros((2 * m, d + 1))
    a_ub[:m, :d] = inst.con_matrix
    a_ub[m:, :d] = -inst.con_matrix
    a_ub[:, d] = -1.0
    b_ub = np.concatenate([inst.con_targets + root_eps, -inst.con_targets + root_eps])
    cost = np.zeros(d + 1)
    cost[d] = 1.0
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub,
                  bounds=[(None, None)] * (d + 1), method="highs")
    if not res.success or res.x[d] >= 0.0:
        raise InfeasibleInstanceError(
            "no strictly feasible point exists: the strict feasibility "
            "assumption is violated"
        )
    return res.x[:d]


def _quadratic_hessian(inst: ConvexInstance) -> tuple[np.ndarray, np.ndarray]:
    n = len(inst.obj_targets)
    h = (2.0 / n) * inst.obj_matrix.T @ inst.obj_matrix
    g = (2.0 / n) * inst.obj_matrix.T @ inst.obj_targets
    return h, g


def solve_instance(inst: ConvexInstance, tol: float = 1e-9) -> KKTSolution:
    """Exact primal and dual optimum by active-set enumeration.

    Raises InfeasibleInstanceError when no strictly feasible point exists
    and NumericError if no enumerated active set satisfies the KKT
    conditions (which cannot happen for a valid instance).
    """
    strictly_feasible_point(inst)
    h, g = _quadratic_hessian(inst)
    m, d = inst.con_matrix.shape
    root_eps = np.sqrt(inst.epsilon)

    for states in itertools.product((0, 1, -1), repeat=m):
        active = [i for i in range(m) if states[i] != 0]
        rows = np.array([states[i] * inst.con_matrix[i] for i in active]).reshape(len(active), d)
        bounds = np.array(
            [states[i] * inst.con_targets[i] + root_eps[i] for i in active]
        )
        na = len(active)
        kkt = np.zeros((d + na, d + na))
        kkt[:d, :d] = h
        if na:
            kkt[:d, d:] = rows.T
            kkt[d:, :d] = rows
        rhs = np.concatenate([g, bounds])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        theta, nu = sol[:d], sol[d:]
        if na and (nu < -tol).any():
            continue
        gvals = constraint_values(inst, theta)
        inactive = [i for i in range(m) if states[i] == 0]
        if inactive and (gvals[inactive] > inst.epsilon[inactive] + tol).any():
            continue

        mu = np.zeros(m)
        for idx, i in enumerate(active):
            mu[i] = max(nu[idx], 0.0) / (2.0 * root_eps[i])
        p_star = objective_value(inst, theta)
        d_star = dual_function_value(inst, mu)
        slacks = gvals - inst.epsilon
        scale = max(1.0, abs(p_star))
        stationarity = h @ theta - g + 2.0 * inst.con_matrix.T @ (
            mu * (inst.con_matrix @ theta - inst.con_targets)
        )
        if np.abs(stationarity).max() > 1e-7 * scale:
            raise NumericError("stationarity residual exceeds tolerance")
        if np.abs(mu * np.maximum(slacks, 0.0)).max(initial=0.0) > 1e-8 * scale:
            raise NumericError("complementary slackness residual exceeds tolerance")
        if abs(p_star - d_star) > 1e-8 * scale:
            raise NumericError("duality gap exceeds tolerance")
        active_mask = np.zeros(m, dtype=bool)
        active_mask[active] = True
        return KKTSolution(theta, mu, p_star, d_star, active_mask, slacks)
    raise NumericError("no active set satisfied the KKT conditions")


def dual_function_value(inst: ConvexInstance, lambdas: np.ndarray) -> float:
    """q(lambda) = min over theta of the Lagrangian, for lambda >= 0."""
    lambdas = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lambdas.shape != (inst.n_constraints,):
        raise ShapeError("one multiplier per constraint is required")
    if (lambdas < 0).any():
        raise ValueError("multipliers must be nonnegative")
    h, g = _quadratic_hessian(inst)
    h_l = h + 2.0 * (inst.con_matrix.T * lambdas) @ inst.con_matrix
    rhs = g + 2.0 * inst.con_matrix.T @ (lambdas * inst.con_targets)
    theta = np.linalg.solve(h_l, rhs)
    penalty = lambdas @ (constraint_values(inst, theta) - inst.epsilon)
    return objective_value(inst, theta) + float(penalty)


def weak_duality_probe(
    inst: ConvexInstance,
    lambda_trial: np.ndarray,
    solution: KKTSolution | None = None,
) -> tuple[float, float]:
    """Evaluate the dual function at a trial multiplier; it never exceeds P*."""
    if solution is None:
        solution = solve_instance(inst)
    dual_value = dual_function_value(inst, lambda_trial)
    if dual_value > solution.P_star + 1e-10:
        raise NumericError(
            f"weak duality violated: dual value {dual_value} exceeds "
            f"P* = {solution.P_star}"
        )
    return dual_value, solution.P_star


@dataclass
class SensitivityResult:
    numeric_derivative: float
    lambda_star: float
    abs_error: float


def sensitivity_check(
    inst: ConvexInstance, constraint_index: int, h: float
) -> SensitivityResult:
    """Central-difference dP*/d eps_i against the negated optimal dual.

    Only valid where the active set is stable under the +-h perturbation;
    instability raises ActiveSetChangeError since P* may not be
    differentiable there.
    """
    i = int(constraint_index)
    if not 0 <= i < inst.n_constraints:
        raise ValueError("constraint index out of range")
    if h <= 0 or inst.epsilon[i] - h <= 0:
        raise ValueError("perturbation step must satisfy 0 < h < eps_i")
    base = solve_instance(inst)
    values = {}
    for sign in (+1, -1):
        eps = inst.epsilon.copy()
        eps[i] += sign * h
        sol = solve_instance(inst.with_epsilon(eps))
        if not np.array_equal(sol.active, base.active):
            raise ActiveSetChangeError(
                f"active set changes under eps[{i}] perturbation by {sign * h}"
            )
        values[sign] = sol.P_star
    numeric = (values[+1] - values[-1]) / (2.0 * h)
    lam = float(base.dual_opt[i])
    return SensitivityResult(numeric, lam, abs(numeric + lam))


def verification_report(
    n_instances: int = 24,
    rng_seed: int = 0,
    n_weak_trials: int = 100,
    fd_step: float = 1e-4,
) -> dict:
    """Solve a suite of random instances and verify the duality claims.

    Per instance: duality gap, complementary slackness residual, a
    central-difference sensitivity check on every constraint (stability
    failures are recorded, not fatal), and weak-duality probes at random
    nonnegative multipliers.
    """
    instances = []
    ok = True
    for i in range(n_instances):
        seed = rng_seed * 100003 + i
        inst = random_instance(seed)
        sol = solve_instance(inst)
        comp = float(np.abs(sol.dual_opt * np.maximum(sol.slacks, 0.0)).max(initial=0.0))
        sens_entries = []
        for j in range(inst.n_constraints):
            try:
                res = sensitivity_check(inst, j, fd_step)
            except ActiveSetChangeError:
                sens_entries.append({"index": j, "stable": False})
                continue
            active = bool(sol.active[j])
            bound = 1e-3 * max(1.0, res.lambda_star) if active else 1e-6
            err = res.abs_error if active else abs(res.numeric_derivative)
            sens_entries.append({
                "index": j,
                "stable": True,
                "active": active,
                "lambda_star": res.lambda_star,
                "numeric_derivative": res.numeric_derivative,
                "abs_error": res.abs_error,
                "within_tolerance": bool(err <= bound),
            })
            ok = ok and err <= bound
        rng = np.random.default_rng([seed, 7])
        max_excess = -np.inf
        for _ in range(n_weak_trials):
            lam = rng.uniform(0.0, 2.0, size=inst.n_constraints)
            dual_value, p_star = weak_duality_probe(inst, lam, sol)
            max_excess = max(max_excess, dual_value - p_star)
        gap = abs(sol.P_star - sol.D_star)
        ok = ok and gap <= 1e-8 and comp <= 1e-8 and max_excess <= 1e-10
        instances.append({
            "seed": seed,
            "P_star": sol.P_star,
            "D_star": sol.D_star,
            "duality_gap": gap,
            "complementary_slackness": comp,
            "n_active": int(sol.active.sum()),
            "sensitivity": [e for e in sens_entries if e.get("stable")],
            "unstable_sensitivity": [e["index"] for e in sens_entries
                                     if not e.get("stable")],
            "weak_duality_max_excess": float(max_excess),
        })
    return {
        "n_instances": n_instances,
        "rng_seed": rng_seed,
        "all_checks_passed": bool(ok),
        "instances": instances,
    }


def random_instance(
    rng_seed: int,
    dim: int = 3,
    n_obj: int = 8,
    n_con: int = 4,
    pull: float = 2.0,
) -> ConvexInstance:
    """A random strictly feasible instance.

    Constraint targets are placed so a known interior point satisfies every
    constraint with margin; the objective targets pull the unconstrained
    optimum away from that point so some constraints typically activate.
    """
    rng = np.random.default_rng(rng_seed)
    a = rng.normal(size=(n_obj, dim))
    theta_bar = rng.normal(size=dim)
    c = rng.normal(size=(n_con, dim))
    delta = rng.uniform(-0.4, 0.4, size=n_con)
    margin = rng.uniform(0.2, 0.8, size=n_con)
    t = c @ theta_bar - delta
    eps = (np.abs(delta) + margin) ** 2
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    y = a @ (theta_bar + pull * direction) + 0.1 * rng.normal(size=n_obj)
    kind = "constrained_scalar_ls" if dim == 1 and n_con == 1 else "constrained_multi_ls"
    return ConvexInstance(kind, a, y, c, t, eps)
