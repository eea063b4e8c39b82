"""Bound-constrained nonlinear least squares by a trust-region reflective method.

Minimizes 0.5 * ||r(x)||^2 subject to box bounds. The trust-region
subproblem is solved in a 2-D subspace spanned by the scaled gradient
and the Gauss-Newton direction; bounds are handled by Coleman-Li
interior scaling with reflected search directions, so iterates stay
strictly feasible while the region shrinks naturally near active
bounds. After termination, components resting against a bound are
snapped onto it exactly when that does not increase the cost.

The Gauss-Newton direction comes from an orthogonal factorization of
the (scaled) Jacobian; Levenberg regularization is added when the
Jacobian's condition estimate exceeds 1e12.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.linalg import norm

from .errors import ConfigError, EvaluationError, InvalidInputError, ShapeError

__all__ = [
    "LeastSquaresProblem",
    "TrfConfig",
    "SolveResult",
    "solve",
    "check_jacobian",
]

_CONDITION_LIMIT = 1e12


@dataclass
class TrfConfig:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-8
    cost_tolerance: float = 1e-8
    initial_trust_radius: float = 1.0
    finite_difference_step: float = 1e-7

    def validate(self):
        for name in (
            "gradient_tolerance",
            "step_tolerance",
            "cost_tolerance",
            "initial_trust_radius",
            "finite_difference_step",
        ):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")


@dataclass
class LeastSquaresProblem:
    """Residual description of a box-constrained least-squares problem.

    ``jacobian_fn`` may be None, in which case forward finite
    differences are used. Bounds may contain +-inf; they must satisfy
    ``lower < upper`` elementwise.
    """

    n_vars: int
    n_residuals: int
    residual_fn: Callable[[np.ndarray], np.ndarray]
    jacobian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def bounds(self):
        lb = (
            np.full(self.n_vars, -np.inf)
            if self.lower is None
            else np.asarray(self.lower, dtype=np.float64).ravel()
        )
        ub = (
            np.full(self.n_vars, np.inf)
            if self.upper is None
            else np.asarray(self.upper, dtype=np.float64).ravel()
        )
        if lb.size != self.n_vars or ub.size != self.n_vars:
            raise ShapeError("bound vectors must have n_vars entries")
        if not np.all(lb < ub):
            raise InvalidInputError("bounds must satisfy lower < upper elementwise")
        return lb, ub


@dataclass
class SolveResult:
    x: np.ndarray
    cost: float
    projected_gradient_norm: float
    iterations: int
    termination_reason: str
    accepted_costs: list = field(default_factory=list)


def _eval_residual(problem, x):
    r = np.asarray(problem.residual_fn(x), dtype=np.float64).ravel()
    if r.size != problem.n_residuals:
        raise ShapeError(
            f"residual_fn returned {r.size} values, expected {problem.n_residuals}"
        )
    if not np.all(np.isfinite(r)):
        raise EvaluationError("residual_fn returned non-finite values", x=x.copy())
    return r


def _fd_jacobian(problem, x, r0, rel_step, lb, ub):
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        if np.isfinite(ub[j]):
            h = min(h, 0.5 * (ub[j] - x[j])) if ub[j] > x[j] else h
        xj = x.copy()
        xj[j] += h
        J[:, j] = (_eval_residual(problem, xj) - r0) / h
    return J


def _eval_jacobian(problem, x, r0, cfg, lb, ub):
    if problem.jacobian_fn is None:
        return _fd_jacobian(problem, x, r0, cfg.finite_difference_step, lb, ub)
    J = np.asarray(problem.jacobian_fn(x), dtype=np.float64)
    if J.shape != (problem.n_residuals, problem.n_vars):
        raise ShapeError(
            f"jacobian_fn returned shape {J.shape}, expected "
            f"{(problem.n_residuals, problem.n_vars)}"
        )
    if not np.all(np.isfinite(J)):
        raise EvaluationError("jacobian_fn returned non-finite values", x=x.copy())
    return J


def _strictly_feasible(x, lb, ub, rstep=1e-10):
    out = np.clip(x, lb, ub)
    if rstep == 0.0:
        on_lb = out <= lb
        on_ub = out >= ub
        out[on_lb] = np.nextafter(lb[on_lb], ub[on_lb])
        out[on_ub] = np.nextafter(ub[on_ub], lb[on_ub])
    else:
        bump = rstep * np.maximum(1.0, np.abs(out))
        on_lb = out <= lb
        on_ub = out >= ub
        out[on_lb] = np.minimum(lb[on_lb] + bump[on_lb], 0.5 * (lb[on_lb] + ub[on_lb]))
        out[on_ub] = np.maximum(ub[on_ub] - bump[on_ub], 0.5 * (lb[on_ub] + ub[on_ub]))
    return out


def _cl_scaling(x, g, lb, ub):
    """Coleman-Li scaling vector v and its derivative markers dv."""
    v = np.ones_like(x)
    dv = np.zeros_like(x)
    mask = (g < 0) & np.isfinite(ub)
    v[mask] = ub[mask] - x[mask]
    dv[mask] = -1.0
    mask = (g > 0) & np.isfinite(lb)
    v[mask] = x[mask] - lb[mask]
    dv[mask] = 1.0
    return v, dv


def _in_bounds(x, lb, ub):
    return bool(np.all((x >= lb) & (x <= ub)))


def _step_to_bound(x, s, lb, ub):
    """Largest stride t with x + t*s in bounds, and which bounds are hit."""
    non_zero = s != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        steps = np.where(s > 0, (ub - x) / s, (lb - x) / s)
    steps[~non_zero] = np.inf
    steps = np.maximum(steps, 0.0)
    min_step = float(np.min(steps))
    hits = np.equal(steps, min_step) & non_zero
    return min_step, hits * np.sign(s)


def _intersect_trust_region(x, s, radius):
    """Both roots t of ||x + t*s|| = radius (requires s != 0)."""
    a = float(s @ s)
    b = float(x @ s)
    c = float(x @ x) - radius**2
    d = np.sqrt(max(b * b - a * c, 0.0))
    t1 = (-b - d) / a
    t2 = (-b + d) / a
    return t1, t2


def _build_quadratic_1d(J, g, s, diag=None, s0=None):
    """Coefficients of q(t) = 0.5*||J(s0 + t s)||^2-type model along s."""
    v = J @ s
    a = float(v @ v)
    if diag is not None:
        a += float((s * diag) @ s)
    a *= 0.5
    b = float(g @ s)
    c = 0.0
    if s0 is not None:
        u = J @ s0
        b += float(u @ v)
        c = 0.5 * float(u @ u) + float(g @ s0)
        if diag is not None:
            b += float((s0 * diag) @ s)
            c += 0.5 * float((s0 * diag) @ s0)
    return a, b, c


def _minimize_quadratic_1d(a, b, low, high, c=0.0):
    """Minimize a*t^2 + b*t + c over [low, high]."""
    ts = [low, high]
    if a != 0.0:
        extremum = -0.5 * b / a
        if low < extremum < high:
            ts.append(extremum)
    ts = np.asarray(ts)
    values = a * ts**2 + b * ts + c
    i = int(np.argmin(values))
    return float(ts[i]), float(values[i])


def _evaluate_quadratic(J, g, s, diag=None):
    Js = J @ s
    q = float(Js @ Js)
    if diag is not None:
        q += float((s * diag) @ s)
    return 0.5 * q + float(g @ s)


def _gauss_newton_step(J_h, r, diag_h):
    """Solve min ||[J_h; sqrt(diag_h)] p + [r; 0]|| by orthogonal factorization."""
    m, n = J_h.shape
    has_diag = diag_h is not None and np.any(diag_h > 0.0)
    if has_diag:
        A = np.vstack([J_h, np.diag(np.sqrt(diag_h))])
        b = np.concatenate([r, np.zeros(n)])
    else:
        A = J_h
        b = r
    sol, _, _, s = np.linalg.lstsq(A, -b, rcond=None)
    if s.size and s[-1] > 0.0 and s[0] / s[-1] > _CONDITION_LIMIT:
        lam = (s[0] * 1e-6) ** 2  # Levenberg damping for near-singular Jacobians
        A = np.vstack([A, np.sqrt(lam) * np.eye(n)])
        b = np.concatenate([b, np.zeros(n)])
        sol, _, _, s = np.linalg.lstsq(A, -b, rcond=None)
    return sol


def _solve_trust_region_2d(B, g, radius):
    """Exact minimizer of 0.5 p^T B p + g^T p over ||p|| <= radius, dim <= 2."""
    if B.shape[0] == 1:
        a = 0.5 * float(B[0, 0])
        t, _ = _minimize_quadratic_1d(a, float(g[0]), -radius, radius)
        return np.array([t])
    # interior Newton point when B is positive definite
    det = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    if B[0, 0] > 0.0 and det > 0.0:
        p = -np.linalg.solve(B, g)
        if norm(p) <= radius:
            return p
    # boundary: parametrize p = radius*(sin th, cos th), t = tan(th/2);
    # stationarity of the model along the circle is a quartic in t
    a = radius**2 * (B[0, 0] - B[1, 1])
    b = radius**2 * B[0, 1]
    c = radius * g[0]
    d = radius * g[1]
    coeffs = np.array([c - b, 2 * (a + d), 6 * b, 2 * (d - a), -b - c])
    if np.all(coeffs == 0.0):
        return np.array([0.0, radius])
    t = np.roots(coeffs)
    t = np.real(t[np.isreal(t)])
    if t.size == 0:
        return np.array([0.0, radius])
    p = radius * np.vstack([2 * t / (1 + t**2), (1 - t**2) / (1 + t**2)])
    values = 0.5 * np.sum(p * (B @ p), axis=0) + g @ p
    return p[:, int(np.argmin(values))]


def _select_step(x, J_h, diag_h, g_h, p, p_h, d, radius, lb, ub, theta):
    """Best of trust-region step, reflected step, and constrained Cauchy step."""
    if _in_bounds(x + p, lb, ub):
        return p, p_h, -_evaluate_quadratic(J_h, g_h, p_h, diag=diag_h)

    p_stride, hits = _step_to_bound(x, p, lb, ub)

    r_h = p_h.copy()
    r_h[hits.astype(bool)] *= -1
    r = d * r_h

    p = p * p_stride
    p_h = p_h * p_stride
    x_on_bound = x + p

    _, to_tr = _intersect_trust_region(p_h, r_h, radius) if np.any(r_h) else (0.0, 0.0)
    to_bound, _ = _step_to_bound(x_on_bound, r, lb, ub)

    r_stride = min(to_bound, to_tr)
    if r_stride > 0:
        r_stride_l = (1 - theta) * p_stride / r_stride
        r_stride_u = theta * to_bound if r_stride == to_bound else to_tr
    else:
        r_stride_l, r_stride_u = 0.0, -1.0

    if r_stride_l <= r_stride_u:
        a, b, c = _build_quadratic_1d(J_h, g_h, r_h, diag=diag_h, s0=p_h)
        r_stride, r_value = _minimize_quadratic_1d(a, b, r_stride_l, r_stride_u, c=c)
        r_h = p_h + r_h * r_stride
        r = d * r_h
    else:
        r_value = np.inf

    p = p * theta
    p_h = p_h * theta
    p_value = _evaluate_quadratic(J_h, g_h, p_h, diag=diag_h)

    ag_h = -g_h
    ag = d * ag_h
    ag_norm = norm(ag_h)
    if ag_norm == 0.0:
        ag_value = np.inf
    else:
        to_tr = radius / ag_norm
        to_bound, _ = _step_to_bound(x, ag, lb, ub)
        ag_stride_max = theta * to_bound if to_bound < to_tr else to_tr
        a, b, _ = _build_quadratic_1d(J_h, g_h, ag_h, diag=diag_h)
        ag_stride, ag_value = _minimize_quadratic_1d(a, b, 0.0, ag_stride_max)
        ag_h = ag_h * ag_stride
        ag = ag * ag_stride

    if p_value < r_value and p_value < ag_value:
        return p, p_h, -p_value
    if r_value < p_value and r_value < ag_value:
        return r, r_h, -r_value
    return ag, ag_h, -ag_value


def _update_radius(radius, actual, predicted, step_h_norm, bound_hit):
    if predicted > 0:
        ratio = actual / predicted
    elif predicted == actual == 0:
        ratio = 1.0
    else:
        ratio = 0.0
    if ratio < 0.25:
        radius = 0.25 * step_h_norm
    elif ratio > 0.75 and bound_hit:
        radius *= 2.0
    return radius, ratio


def _snap_to_bounds(problem, x, r, cost, g, lb, ub, cfg):
    """Move components resting against a bound exactly onto it.

    The snap is kept only when it does not increase the cost, so the
    accepted-cost sequence stays non-increasing.
    """
    window = 100.0 * cfg.step_tolerance
    candidate = x.copy()
    snapped = False
    for j in range(x.size):
        if np.isfinite(ub[j]) and g[j] < 0 and ub[j] - x[j] <= window * max(1.0, abs(ub[j])):
            candidate[j] = ub[j]
            snapped = True
        elif np.isfinite(lb[j]) and g[j] > 0 and x[j] - lb[j] <= window * max(1.0, abs(lb[j])):
            candidate[j] = lb[j]
            snapped = True
    if not snapped:
        return x, r, cost, False
    r_new = _eval_residual(problem, candidate)
    cost_new = 0.5 * float(r_new @ r_new)
    if cost_new <= cost:
        return candidate, r_new, cost_new, True
    return x, r, cost, False


def solve(problem, x0, config=None):
    """Minimize 0.5*||r(x)||^2 within box bounds, starting from ``x0``.

    ``x0`` is clamped strictly inside the bounds if it touches them.
    Returns a :class:`SolveResult`; the returned point always satisfies
    the bounds inclusively and the accepted-step cost sequence is
    non-increasing.
    """
    cfg = config if config is not None else TrfConfig()
    cfg.validate()
    lb, ub = problem.bounds()
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    if x.size != problem.n_vars:
        raise ShapeError(f"x0 has {x.size} entries, expected {problem.n_vars}")
    x = _strictly_feasible(x, lb, ub)

    r = _eval_residual(problem, x)
    J = _eval_jacobian(problem, x, r, cfg, lb, ub)
    cost = 0.5 * float(r @ r)
    g = J.T @ r

    radius = cfg.initial_trust_radius
    reason = None
    accepted_costs = [cost]
    iteration = 0

    while iteration < cfg.max_iterations and reason is None:
        iteration += 1
        v, dv = _cl_scaling(x, g, lb, ub)
        g_proj_norm = norm(g * v, ord=np.inf)
        if g_proj_norm < cfg.gradient_tolerance:
            reason = "gradient"
            break

        d = np.sqrt(v)
        diag_h = g * dv  # nonnegative by construction
        g_h = d * g
        J_h = J * d

        gn_h = _gauss_newton_step(J_h, r, diag_h)
        basis = np.column_stack([g_h, gn_h])
        S, _ = np.linalg.qr(basis)
        JS = J_h @ S
        B_S = JS.T @ JS + (S.T * diag_h) @ S
        g_S = S.T @ g_h

        theta = max(0.995, 1.0 - g_proj_norm)
        best = None  # most improving trial of this iteration
        expansions = 0

        for _ in range(60):
            p_S = _solve_trust_region_2d(B_S, g_S, radius)
            p_h = S @ p_S
            p = d * p_h
            step, step_h, predicted = _select_step(
                x, J_h, diag_h, g_h, p, p_h, d, radius, lb, ub, theta
            )
            x_new = _strictly_feasible(x + step, lb, ub, rstep=0.0)
            r_new = _eval_residual(problem, x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            actual = cost - cost_new
            step_h_norm = norm(step_h)
            hit_boundary = step_h_norm > 0.95 * radius
            radius_next, ratio = _update_radius(
                radius, actual, predicted, step_h_norm, hit_boundary
            )
            step_norm = norm(x_new - x)
            trial = (cost_new, x_new, r_new, actual, ratio, step_norm, step_h_norm)

            if actual > 0 and (best is None or cost_new < best[0]):
                best = trial
                # internal doubling: a near-exact model truncated by the
                # region earns an immediate retry with a larger radius
                if ratio > 0.95 and hit_boundary and expansions < 6:
                    expansions += 1
                    radius = radius_next
                    continue
                radius = radius_next
            elif best is None:
                radius = radius_next  # shrink and retry
                if step_norm < cfg.step_tolerance * (cfg.step_tolerance + norm(x)):
                    reason = "step"
                    break
                if radius < 1e-14 * max(1.0, norm(x)):
                    reason = "step"
                    break
                continue
            else:
                # an expansion overshot; fall back to the best trial and
                # restart the next iteration from its natural scale
                radius = best[6]

            cost_new, x_new, r_new, actual, ratio, step_norm, _ = best
            if abs(actual) < cfg.cost_tolerance * cost and ratio > 0.25:
                reason = "cost"
            elif step_norm < cfg.step_tolerance * (cfg.step_tolerance + norm(x)):
                reason = "step"
            x, r, cost = x_new, r_new, cost_new
            accepted_costs.append(cost)
            J = _eval_jacobian(problem, x, r, cfg, lb, ub)
            g = J.T @ r
            break
        else:
            reason = "step"

    if reason is None:
        reason = "max_iterations"

    x, r, cost, snapped = _snap_to_bounds(problem, x, r, cost, g, lb, ub, cfg)
    if snapped:
        accepted_costs.append(cost)
        J = _eval_jacobian(problem, x, r, cfg, lb, ub)
        g = J.T @ r
    v, _ = _cl_scaling(x, g, lb, ub)
    v[(x <= lb) | (x >= ub)] = 0.0  # frozen exactly on an active bound
    return SolveResult(
        x=x,
        cost=cost,
        projected_gradient_norm=float(norm(g * v, ord=np.inf)),
        iterations=iteration,
        termination_reason=reason,
        accepted_costs=accepted_costs,
    )


def check_jacobian(problem, x, rel_step=1e-6):
    """Worst relative deviation of the analytic Jacobian vs central differences.

    Columns are compared one at a time; each column's deviation is
    normalized by its own magnitude (floored at a small fraction of the
    global Jacobian magnitude so empty columns do not dominate).
    """
    if problem.jacobian_fn is None:
        raise InvalidInputError("problem has no analytic jacobian_fn to check")
    lb, ub = problem.bounds()
    x = np.asarray(x, dtype=np.float64).ravel()
    r0 = _eval_residual(problem, x)
    J = np.asarray(problem.jacobian_fn(x), dtype=np.float64)
    if J.shape != (r0.size, x.size):
        raise ShapeError(f"jacobian_fn returned shape {J.shape}")
    J_fd = np.empty_like(J)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        if np.isfinite(ub[j]):
            h = min(h, 0.45 * (ub[j] - x[j]))
        if np.isfinite(lb[j]):
            h = min(h, 0.45 * (x[j] - lb[j]))
        h = max(h, 1e-12)
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        J_fd[:, j] = (_eval_residual(problem, xp) - _eval_residual(problem, xm)) / (2 * h)
    global_scale = max(float(np.max(np.abs(J_fd))), 1e-300)
    worst = 0.0
    for j in range(x.size):
        col_scale = max(float(np.max(np.abs(J_fd[:, j]))), 1e-6 * global_scale)
        dev = float(np.max(np.abs(J[:, j] - J_fd[:, j]))) / col_scale
        worst = max(worst, dev)
    return worst
