"""Hierarchical topographic factor analysis via a distributed MAP estimator.

Each subject's data (TRs x voxels after transposition) is modeled as
W_i F_i plus noise, where row k of F_i evaluates a spherical
radial-basis factor exp(-||p - mu_ik||^2 / lambda_ik) at every voxel
position p. Local factors perturb a global template: centers are drawn
around the template centers with shared covariance Sigma_mu, widths
around the template widths with shared variance sigma_lambda^2.

The local step alternates a ridge-regression weight update with two
bound-constrained nonlinear least-squares block solves, one for all
centers with widths fixed and one for all widths with centers fixed.
Splitting the blocks shrinks the Jacobian (3K or K columns instead of
4K) and drops the K prior residuals of the frozen block, which are
constant. Center/width residuals carry analytic Jacobians; data rows
are weighted by sqrt(1/(2 sigma_i^2)), prior rows by sqrt(1/(2 phi_i))
through the prior precisions, with phi_i the subsampling compensation
(T_i V_i) / (Ttilde_i Vtilde_i).

The global step combines gathered local centers/widths with the
template using one 3x3 inversion and one scalar reciprocal per factor:
with A_k = (SigmaHat_k + Sigma_mu/N)^{-1} and
b_k = (sigmaHat_k^2 + sigma_lambda^2/N)^{-1},

    mu_k    <- (Sigma_mu/N) A_k muHat_k + SigmaHat_k A_k muBar_k
    Sigma_k <- SigmaHat_k A_k (Sigma_mu/N)
    (widths analogously with b_k)

which reproduces the three-inversion conjugate update exactly.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import trf
from .collectives import rank_offsets
from .errors import (
    CollectiveContractError,
    ConfigError,
    DefinitenessError,
    ShapeError,
)
from .kernels import rbf_factor_matrix, spd_inverse

__all__ = [
    "GlobalTemplate",
    "LocalModel",
    "SubsamplePlan",
    "HtfaConfig",
    "init_template",
    "subsample",
    "update_weights",
    "build_center_problem",
    "build_width_problem",
    "local_step",
    "global_step",
    "fit",
    "connectivity_matrix",
]

_U64 = struct.Struct("<Q")


@dataclass
class GlobalTemplate:
    """Population-level factor template with posterior hyperparameters.

    ``prior_center_cov`` (Sigma_mu) and ``prior_width_var``
    (sigma_lambda^2) are constants shared by all factors; the per-factor
    ``center_cov`` / ``width_var`` are the posterior uncertainties that
    shrink as subjects accumulate.
    """

    centers: np.ndarray          # K x 3
    center_cov: Optional[np.ndarray]  # K x 3 x 3, root only mid-fit
    widths: np.ndarray           # K
    width_var: Optional[np.ndarray]   # K
    prior_center_cov: np.ndarray  # 3 x 3
    prior_width_var: float


@dataclass
class LocalModel:
    """One subject's factor configuration."""

    subject_id: str
    centers: np.ndarray   # K x 3
    widths: np.ndarray    # K
    weights: np.ndarray   # T_i x K
    noise_weight: float   # the 1/(2 sigma_i^2) data-term coefficient
    ridge_alpha2: float = 1.0


@dataclass
class SubsamplePlan:
    """How to shrink a subject's matrix before each local solve.

    The sampled count per dimension is the mean of (fraction * size)
    and the cap, rounded half-up and clamped into [1, size].
    """

    voxel_fraction: float = 0.25
    tr_fraction: float = 0.10
    max_voxels: int = 3000
    max_trs: int = 300
    with_replacement: bool = True
    seed: int = 0

    def validate(self):
        for frac in (self.voxel_fraction, self.tr_fraction):
            if not (0.0 < frac <= 1.0):
                raise ConfigError("sampling fractions must lie in (0, 1]")
        if self.max_voxels < 1 or self.max_trs < 1:
            raise ConfigError("sampling caps must be at least 1")


@dataclass
class HtfaConfig:
    k: int = 60
    outer_iterations: int = 10
    local_iterations: int = 10
    local_tolerance: float = 1e-3
    width_lower_frac: float = 0.04
    width_upper_frac: float = 1.80
    nlls: trf.TrfConfig = field(default_factory=trf.TrfConfig)
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.outer_iterations < 1:
            raise ConfigError("outer_iterations must be at least 1")
        if self.local_iterations < 0:
            raise ConfigError("local_iterations must be nonnegative")
        if self.local_tolerance <= 0:
            raise ConfigError("local_tolerance must be positive")
        if not (0.0 < self.width_lower_frac < self.width_upper_frac):
            raise ConfigError("need 0 < width_lower_frac < width_upper_frac")
        self.nlls.validate()


def width_bounds(grid, config):
    d = grid.diameter
    return config.width_lower_frac * d, config.width_upper_frac * d


def _weighted_kmeans(points, weights, k, rng, sweeps=10):
    """k-means++ seeding plus Lloyd sweeps with per-point weights."""
    n = points.shape[0]
    total = float(weights.sum())
    probs = weights / total if total > 0 else np.full(n, 1.0 / n)
    chosen = [int(rng.choice(n, p=probs))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        scores = probs * d2
        mass = float(scores.sum())
        if mass > 0:
            j = int(rng.choice(n, p=scores / mass))
        else:
            j = int(np.argmax(d2))
        chosen.append(j)
        d2 = np.minimum(d2, ((points - points[j]) ** 2).sum(axis=1))
    centers = points[np.array(chosen)].astype(np.float64).copy()
    assign = np.zeros(n, dtype=np.intp)
    for _ in range(sweeps):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        assign = np.argmin(dist, axis=1)
        for c in range(k):
            mask = assign == c
            if not mask.any():
                far = int(np.argmax(dist.min(axis=1)))
                centers[c] = points[far]
                continue
            mass = float(weights[mask].sum())
            if mass > 0:
                centers[c] = (weights[mask, None] * points[mask]).sum(axis=0) / mass
            else:
                centers[c] = points[mask].mean(axis=0)
    dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return centers, np.argmin(dist, axis=1)


def init_template(subject, config):
    """Seed the template from one subject's coordinates and activation.

    Centers come from activation-weighted k-means++ with 10 refinement
    sweeps; the initial width of each factor is its cluster's weighted
    RMS radius squared, clamped into the width bounds. Deterministic
    given ``config.seed``.
    """
    if subject.grid is None:
        raise ShapeError("template initialization needs voxel coordinates")
    grid = subject.grid
    if grid.n_voxels < config.k:
        raise ShapeError(
            f"{grid.n_voxels} voxels cannot seed {config.k} factors"
        )
    activation = np.abs(subject.X).mean(axis=1)
    if float(activation.sum()) <= 0.0:
        activation = np.ones(grid.n_voxels)
    rng = np.random.default_rng((config.seed & 0xFFFFFFFFFFFFFFFF, 0x7EA1))
    centers, assign = _weighted_kmeans(
        grid.positions, activation, config.k, rng, sweeps=10
    )
    lo, hi = width_bounds(grid, config)
    widths = np.empty(config.k)
    for c in range(config.k):
        mask = assign == c
        mass = float(activation[mask].sum())
        if mass > 0:
            rms2 = float(
                (activation[mask] * ((grid.positions[mask] - centers[c]) ** 2).sum(axis=1)).sum()
                / mass
            )
        else:
            rms2 = 0.0
        widths[c] = min(max(rms2, lo), hi)
    diameter = grid.diameter
    prior_center_cov = np.eye(3) * (diameter / config.k ** (1.0 / 3.0)) ** 2 / 12.0
    width_var = (0.1 * widths) ** 2
    return GlobalTemplate(
        centers=centers,
        center_cov=np.tile(prior_center_cov, (config.k, 1, 1)),
        widths=widths,
        width_var=width_var,
        prior_center_cov=prior_center_cov,
        prior_width_var=float(width_var.mean()),
    )


def _sample_count(fraction, cap, size):
    est = int(np.floor(0.5 * (fraction * size + cap) + 0.5))
    return min(max(est, 1), size)


def subsample(X, plan, rng=None):
    """Draw a voxel/TR submatrix with replacement from a seeded stream.

    Returns (Xtilde, voxel_indices, tr_indices, phi) where phi is the
    compensation coefficient (T V) / (Ttilde Vtilde).
    """
    plan.validate()
    if rng is None:
        rng = np.random.default_rng(plan.seed & 0xFFFFFFFFFFFFFFFF)
    n_vox, n_trs = X.shape
    take_vox = _sample_count(plan.voxel_fraction, plan.max_voxels, n_vox)
    take_trs = _sample_count(plan.tr_fraction, plan.max_trs, n_trs)
    if plan.with_replacement:
        vox = rng.integers(0, n_vox, size=take_vox)
        trs = rng.integers(0, n_trs, size=take_trs)
    else:
        vox = rng.choice(n_vox, size=take_vox, replace=False)
        trs = rng.choice(n_trs, size=take_trs, replace=False)
    phi = (n_trs * n_vox) / (take_trs * take_vox)
    return X[np.ix_(vox, trs)], vox, trs, phi


def update_weights(Xtilde, Ftilde, alpha2):
    """Ridge-regression weight rows: X F^T (F F^T + alpha^{-2} I)^{-1}.

    ``Xtilde`` is TRs x voxels here; returns the weight rows for the
    sampled TRs.
    """
    k = Ftilde.shape[0]
    gram = Ftilde @ Ftilde.T
    gram[np.diag_indices_from(gram)] += 1.0 / alpha2
    try:
        inv = spd_inverse(gram)
    except DefinitenessError:
        raise DefinitenessError(
            "factor Gram matrix is numerically singular even with the ridge term"
        ) from None
    return (Xtilde @ Ftilde.T) @ inv


def _center_bounds(grid, k):
    lo, hi = grid.bounding_box()
    return np.tile(lo, k), np.tile(hi, k)


def build_center_problem(
    Xtilde, W, widths, template, phi, grid_view, noise_weight, bounds_grid=None
):
    """Center-block NLLS problem: 3K variables, Vtilde*Ttilde + K residuals.

    ``Xtilde`` is the sampled TRs x voxels matrix, ``W`` its weight
    rows, ``grid_view`` the sampled voxels. The K width-prior residuals
    are constant with widths frozen and are dropped. Analytic Jacobian
    throughout: dF/dmu = F * 2 (p - mu) / lambda.
    """
    k = template.centers.shape[0]
    n_trs, n_vox = Xtilde.shape
    n_res = n_trs * n_vox + k
    data_w = np.sqrt(noise_weight)
    prior_w = np.sqrt(1.0 / (2.0 * phi))
    prior_prec = spd_inverse(template.prior_center_cov)
    prior_centers = template.centers
    widths = np.asarray(widths, dtype=np.float64)
    pos = grid_view.positions

    def residual(x):
        centers = x.reshape(k, 3)
        F = rbf_factor_matrix(centers, widths, grid_view)
        out = np.empty(n_res)
        out[: n_trs * n_vox] = (data_w * (Xtilde - W @ F)).ravel()
        for j in range(k):
            d = centers[j] - prior_centers[j]
            out[n_trs * n_vox + j] = prior_w * np.sqrt(max(d @ (prior_prec @ d), 0.0))
        return out

    def jacobian(x):
        centers = x.reshape(k, 3)
        F = rbf_factor_matrix(centers, widths, grid_view)
        J = np.zeros((n_res, 3 * k))
        for j in range(k):
            diff = pos - centers[j]  # Vtilde x 3
            base = F[j] * (2.0 / widths[j])
            for dim in range(3):
                dF = base * diff[:, dim]
                J[: n_trs * n_vox, 3 * j + dim] = (
                    -data_w * np.multiply.outer(W[:, j], dF)
                ).ravel()
            d = centers[j] - prior_centers[j]
            u = prior_prec @ d
            q = float(d @ u)
            if q > 1e-300:
                J[n_trs * n_vox + j, 3 * j : 3 * j + 3] = prior_w * u / np.sqrt(q)
        return J

    grid_for_bounds = bounds_grid if bounds_grid is not None else grid_view
    lo, hi = _center_bounds(grid_for_bounds, k)
    return trf.LeastSquaresProblem(
        n_vars=3 * k,
        n_residuals=n_res,
        residual_fn=residual,
        jacobian_fn=jacobian,
        lower=lo,
        upper=hi,
    )


def build_width_problem(
    Xtilde, W, centers, template, phi, grid_view, noise_weight, config, bounds_grid=None
):
    """Width-block NLLS problem: K variables, Vtilde*Ttilde + K residuals.

    Analytic Jacobian dF/dlambda = F * ||p - mu||^2 / lambda^2; the
    width-prior residuals are linear.
    """
    k = template.centers.shape[0]
    n_trs, n_vox = Xtilde.shape
    n_res = n_trs * n_vox + k
    data_w = np.sqrt(noise_weight)
    width_prior_w = np.sqrt(1.0 / (2.0 * phi * template.prior_width_var))
    prior_widths = template.widths
    centers = np.asarray(centers, dtype=np.float64).reshape(k, 3)
    pos = grid_view.positions
    d2 = np.empty((k, n_vox))
    for j in range(k):
        diff = pos - centers[j]
        d2[j] = (diff**2).sum(axis=1)

    def residual(x):
        F = rbf_factor_matrix(centers, x, grid_view)
        out = np.empty(n_res)
        out[: n_trs * n_vox] = (data_w * (Xtilde - W @ F)).ravel()
        out[n_trs * n_vox :] = width_prior_w * (x - prior_widths)
        return out

    def jacobian(x):
        F = rbf_factor_matrix(centers, x, grid_view)
        J = np.zeros((n_res, k))
        for j in range(k):
            dF = F[j] * d2[j] / x[j] ** 2
            J[: n_trs * n_vox, j] = (-data_w * np.multiply.outer(W[:, j], dF)).ravel()
            J[n_trs * n_vox + j, j] = width_prior_w
        return J

    grid_for_bounds = bounds_grid if bounds_grid is not None else grid_view
    lo, hi = width_bounds(grid_for_bounds, config)
    return trf.LeastSquaresProblem(
        n_vars=k,
        n_residuals=n_res,
        residual_fn=residual,
        jacobian_fn=jacobian,
        lower=np.full(k, lo),
        upper=np.full(k, hi),
    )


def local_step(subject, template, local, config, plan, rng=None):
    """One subject's alternating weight/center/width refinement.

    Starts by adopting the broadcast template as the local prior, then
    loops subsample -> ridge weights -> center block solve -> width
    block solve until the relative parameter change drops below
    ``config.local_tolerance`` or ``config.local_iterations`` runs out.
    """
    if config.local_iterations == 0:
        return local
    if subject.grid is None:
        raise ShapeError(f"subject {subject.subject_id} has no voxel coordinates")
    if rng is None:
        rng = np.random.default_rng(plan.seed & 0xFFFFFFFFFFFFFFFF)
    grid = subject.grid
    centers = template.centers.copy()
    widths = template.widths.copy()
    weights = local.weights.copy()
    noise_weight = local.noise_weight
    try:
        for _ in range(config.local_iterations):
            Xs, vox, trs, phi = subsample(subject.X, plan, rng)
            Xst = Xs.T  # sampled TRs x voxels
            sigma2 = max(float(Xst.var()), 1e-12)
            noise_weight = 1.0 / (2.0 * sigma2)
            view = grid.take(vox)
            F = rbf_factor_matrix(centers, widths, view)
            w_rows = update_weights(Xst, F, local.ridge_alpha2)
            weights[trs] = w_rows

            previous = np.concatenate([centers.ravel(), widths])
            problem = build_center_problem(
                Xst, w_rows, widths, template, phi, view, noise_weight, bounds_grid=grid
            )
            centers = trf.solve(problem, centers.ravel(), config.nlls).x.reshape(-1, 3)
            problem = build_width_problem(
                Xst, w_rows, centers, template, phi, view, noise_weight, config,
                bounds_grid=grid,
            )
            widths = trf.solve(problem, widths, config.nlls).x
            current = np.concatenate([centers.ravel(), widths])
            denom = max(float(np.linalg.norm(previous)), 1e-300)
            if float(np.linalg.norm(current - previous)) / denom < config.local_tolerance:
                break
    except Exception as exc:
        try:
            wrapped = type(exc)(f"subject {subject.subject_id}: {exc}")
        except Exception:
            raise exc
        raise wrapped from exc
    return LocalModel(
        subject_id=subject.subject_id,
        centers=centers,
        widths=widths,
        weights=weights,
        noise_weight=noise_weight,
        ridge_alpha2=local.ridge_alpha2,
    )


def global_step(local_centers, local_widths, template, n_subjects):
    """Combine gathered local estimates into the new template.

    Exactly one 3x3 inversion (A_k) and one scalar reciprocal (b_k) per
    factor; see the module docstring for the update equations.
    """
    k = template.centers.shape[0]
    mu_bar = local_centers.mean(axis=0)
    lam_bar = local_widths.mean(axis=0)
    scaled_cov = template.prior_center_cov / n_subjects
    scaled_var = template.prior_width_var / n_subjects
    new_centers = np.empty_like(template.centers)
    new_cov = np.empty_like(template.center_cov)
    new_widths = np.empty_like(template.widths)
    new_width_var = np.empty_like(template.width_var)
    for j in range(k):
        A = spd_inverse(template.center_cov[j] + scaled_cov)
        new_centers[j] = scaled_cov @ (A @ template.centers[j]) + template.center_cov[
            j
        ] @ (A @ mu_bar[j])
        cov = template.center_cov[j] @ A @ scaled_cov
        new_cov[j] = 0.5 * (cov + cov.T)
        b = 1.0 / (template.width_var[j] + scaled_var)
        new_widths[j] = b * scaled_var * template.widths[j] + template.width_var[
            j
        ] * b * lam_bar[j]
        new_width_var[j] = template.width_var[j] * b * scaled_var
    return GlobalTemplate(
        centers=new_centers,
        center_cov=new_cov,
        widths=new_widths,
        width_var=new_width_var,
        prior_center_cov=template.prior_center_cov,
        prior_width_var=template.prior_width_var,
    )


def _rescue_degenerate(subject, local):
    """Re-seed factors whose weight column died to the highest-residual voxel."""
    dead = np.where(~local.weights.any(axis=0))[0]
    if dead.size == 0:
        return local
    F = rbf_factor_matrix(local.centers, local.widths, subject.grid)
    R = subject.X - (local.weights @ F).T
    per_voxel = np.einsum("vt,vt->v", R, R)
    for j in dead:
        local.centers[j] = subject.grid.positions[int(np.argmax(per_voxel))]
    return local


def _pack_locals(entries, k):
    chunks = [_U64.pack(len(entries)), _U64.pack(k)]
    for gidx, model in entries:
        chunks.append(_U64.pack(gidx))
        chunks.append(model.centers.astype("<f8").tobytes())
        chunks.append(model.widths.astype("<f8").tobytes())
    return b"".join(chunks)


def _unpack_locals(blob, k):
    (count,) = _U64.unpack_from(blob, 0)
    (got_k,) = _U64.unpack_from(blob, _U64.size)
    if got_k != k:
        raise CollectiveContractError(
            f"a peer rank gathered factors for k={got_k}, root expects k={k}"
        )
    offset = 2 * _U64.size
    out = []
    for _ in range(count):
        (gidx,) = _U64.unpack_from(blob, offset)
        offset += _U64.size
        centers = np.frombuffer(blob, dtype="<f8", count=3 * k, offset=offset)
        offset += 3 * k * 8
        widths = np.frombuffer(blob, dtype="<f8", count=k, offset=offset)
        offset += k * 8
        out.append((gidx, centers.reshape(k, 3).copy(), widths.copy()))
    return out


def fit(subjects, config, plan, comm, iteration_log=None):
    """Distributed MAP fit; ``subjects`` are this worker's share.

    Outer loop: broadcast template -> per-subject local steps -> gather
    local centers/widths -> root template update. A final pass rebuilds
    every subject's full weight matrix from its final factors. Returns
    (template, local models); the template is identical on every rank.

    When ``iteration_log`` is a list, this worker's mean data-noise
    variance over its subjects is appended once per outer iteration.
    """
    config.validate()
    plan.validate()
    if not subjects:
        raise ConfigError("each worker needs at least one subject")
    for s in subjects:
        if s.grid is None:
            raise ShapeError(f"subject {s.subject_id} has no voxel coordinates")
    offset, n_total = rank_offsets(comm, len(subjects))
    k = config.k

    template = init_template(subjects[0], config) if comm.rank == 0 else None
    prior_center_cov = comm.broadcast(
        template.prior_center_cov if comm.rank == 0 else None
    )
    prior_width_var = float(
        comm.broadcast(
            np.array([[template.prior_width_var]]) if comm.rank == 0 else None
        )[0, 0]
    )

    locals_ = [
        LocalModel(
            subject_id=s.subject_id,
            centers=np.zeros((k, 3)),
            widths=np.ones(k),
            weights=np.zeros((s.X.shape[1], k)),
            noise_weight=1.0,
        )
        for s in subjects
    ]

    for outer in range(config.outer_iterations):
        packed = comm.broadcast(
            np.hstack([template.centers, template.widths[:, None]])
            if comm.rank == 0
            else None
        )
        shared = GlobalTemplate(
            centers=packed[:, :3].copy(),
            center_cov=None,
            widths=packed[:, 3].copy(),
            width_var=None,
            prior_center_cov=prior_center_cov,
            prior_width_var=prior_width_var,
        )
        for j, subject in enumerate(subjects):
            rng = np.random.default_rng(
                (plan.seed & 0xFFFFFFFFFFFFFFFF, offset + j, outer)
            )
            locals_[j] = local_step(subject, shared, locals_[j], config, plan, rng=rng)
            locals_[j] = _rescue_degenerate(subject, locals_[j])
        if iteration_log is not None:
            iteration_log.append(
                float(np.mean([0.5 / m.noise_weight for m in locals_]))
            )
        blobs = comm.gather(
            _pack_locals([(offset + j, m) for j, m in enumerate(locals_)], k)
        )
        if comm.rank == 0:
            gathered = []
            for blob in blobs:
                gathered.extend(_unpack_locals(blob, k))
            gathered.sort(key=lambda e: e[0])
            all_centers = np.stack([c for _, c, _ in gathered])
            all_widths = np.stack([w for _, _, w in gathered])
            template = global_step(all_centers, all_widths, template, n_total)

    # hand the final template to every rank
    final_centers = comm.broadcast(template.centers if comm.rank == 0 else None)
    final_widths = comm.broadcast(
        template.widths[None, :] if comm.rank == 0 else None
    )[0]
    final_cov = comm.broadcast(
        template.center_cov.reshape(k, 9) if comm.rank == 0 else None
    ).reshape(k, 3, 3)
    final_width_var = comm.broadcast(
        template.width_var[None, :] if comm.rank == 0 else None
    )[0]
    template = GlobalTemplate(
        centers=final_centers,
        center_cov=final_cov,
        widths=final_widths,
        width_var=final_width_var,
        prior_center_cov=prior_center_cov,
        prior_width_var=prior_width_var,
    )

    # final full-weight refresh against each subject's complete data
    for j, subject in enumerate(subjects):
        F = rbf_factor_matrix(locals_[j].centers, locals_[j].widths, subject.grid)
        locals_[j].weights = update_weights(
            subject.X.T, F, locals_[j].ridge_alpha2
        )
    return template, locals_


def connectivity_matrix(local):
    """Pearson correlation between factor weight columns, K x K.

    Zero-variance columns correlate 0 with everything; the diagonal
    stays 1.
    """
    W = np.asarray(local.weights, dtype=np.float64)
    n_trs, k = W.shape
    centered = W - W.mean(axis=0)
    sd = centered.std(axis=0)
    live = sd > 0
    out = np.zeros((k, k))
    if live.any():
        normalized = centered[:, live] / sd[live]
        out[np.ix_(live, live)] = (normalized.T @ normalized) / n_trs
    np.fill_diagonal(out, 1.0)
    return np.clip(out, -1.0, 1.0)
