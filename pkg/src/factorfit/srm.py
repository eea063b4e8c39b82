"""Shared response modeling via distributed constrained EM.

The model: subject i's demeaned volume at time t is W_i s_t + noise,
with W_i an orthogonal V_i x K mapping (W_i^T W_i = I), s_t a shared
K-dimensional response with covariance Sigma_s, and isotropic subject
noise with variance rho_i^2.

The E-step never forms the stacked V x V covariance. Writing
rho_0 = sum_i rho_i^{-2}, orthogonality collapses the precision-
weighted Gram matrix to rho_0 * I, and the matrix inversion lemma turns
the posterior into K x K algebra:

    var_s = (Sigma_s^{-1} + rho_0 I)^{-1}
    E[s_t | x] = Sigma_s^T (I - rho_0 var_s) sum_i rho_i^{-2} W_i^T xhat_it

so memory and communication depend on K and T only, never on the total
voxel count. Per iteration each worker ships its K x T partial sums and
scalar noise variances to the root, which accumulates them in global
subject order (making results identical no matter how subjects are
grouped onto workers), updates Sigma_s, and broadcasts the posterior
mean and the trace of the new Sigma_s back.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .collectives import rank_offsets
from .errors import CollectiveContractError, ConfigError, ShapeError
from .kernels import add_diag, polar_orthogonal, spd_inverse, trace_ata

__all__ = [
    "SrmConfig",
    "SrmModel",
    "demean",
    "init_subject",
    "e_step_local",
    "e_step_global",
    "update_sigma_s",
    "m_step_subject",
    "fit",
    "project",
    "map_between",
]

RHO_FLOOR = 1e-12

_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


@dataclass
class SrmConfig:
    k: int
    iterations: int = 10
    seed: int = 0
    tolerance: Optional[float] = None

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.tolerance is not None and self.tolerance <= 0:
            raise ConfigError("tolerance must be positive when given")


@dataclass
class SrmModel:
    """Fitted model state held by one worker.

    ``W``, ``rho2``, ``mu`` and ``subject_ids`` cover the subjects this
    worker owns (everything, for a serial fit). ``S`` is the shared
    response, present on every worker after the final broadcast.
    ``sigma_s`` and the full noise vector ``rho2_all`` live on the root
    only. ``rho0`` is the global sum of inverse noise variances.
    """

    subject_ids: list
    subject_indices: list
    W: list
    rho2: list
    mu: list
    S: np.ndarray
    rho0: float
    n_subjects: int
    sigma_s: Optional[np.ndarray] = None
    rho2_all: Optional[np.ndarray] = None
    objective_trace: list = field(default_factory=list)


def demean(X):
    """Remove each voxel's temporal mean; returns (Xhat, mu)."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=1)
    return X - mu[:, None], mu


def init_subject(n_voxels, config, subject_index):
    """Seeded random orthogonal mapping and unit noise variance.

    Deterministic in (config.seed, subject_index) and independent of
    which worker owns the subject.
    """
    if n_voxels < config.k:
        raise ShapeError(
            f"subject has {n_voxels} voxels, fewer than k={config.k} factors"
        )
    rng = np.random.default_rng((config.seed & 0xFFFFFFFFFFFFFFFF, subject_index))
    W = polar_orthogonal(rng.standard_normal((n_voxels, config.k)))
    return W, 1.0


def e_step_local(W_i, rho2_i, Xhat_i):
    """This subject's term of the reduction: rho_i^{-2} W_i^T Xhat_i."""
    return (W_i.T @ Xhat_i) / rho2_i


def e_step_global(reduced, sigma_s, rho0):
    """Posterior mean S and common posterior covariance from the reduction.

    Only K x K matrices are ever inverted.
    """
    k = sigma_s.shape[0]
    var_s = spd_inverse(add_diag(spd_inverse(sigma_s), rho0))
    S = (sigma_s.T @ (np.eye(k) - rho0 * var_s)) @ reduced
    return S, var_s


def update_sigma_s(sigma_s, rho0, S):
    """Shared-covariance update; returns the new matrix and its trace.

    The trace is what gets broadcast: every subject's noise update needs
    (1/T) sum_t tr E[s_t s_t^T], which equals tr(Sigma_s_new), so the
    posterior second moments themselves never travel.
    """
    var_s = spd_inverse(add_diag(spd_inverse(sigma_s), rho0))
    sigma_new = var_s + (S @ S.T) / S.shape[1]
    sigma_new = 0.5 * (sigma_new + sigma_new.T)
    return sigma_new, float(np.trace(sigma_new))


def m_step_subject(Xhat_i, S, trace_sigma_s_new):
    """Per-subject mapping and noise update given the broadcast S and trace."""
    A = 0.5 * (Xhat_i @ S.T)
    W_new = polar_orthogonal(A)
    n_trs = S.shape[1]
    n_voxels = Xhat_i.shape[0]
    cross = float(np.einsum("kt,kt->", W_new.T @ Xhat_i, S))
    rho2 = (trace_ata(Xhat_i) + n_trs * trace_sigma_s_new - 2.0 * cross) / (
        n_trs * n_voxels
    )
    return W_new, max(rho2, RHO_FLOOR)


def _pack_partials(entries, k, n_trs):
    """Serialize [(global_index, rho2, K x T partial)] for the gather."""
    chunks = [_U64.pack(len(entries)), _U64.pack(k), _U64.pack(n_trs)]
    for gidx, rho2, partial in entries:
        chunks.append(_U64.pack(gidx))
        chunks.append(_F64.pack(rho2))
        chunks.append(partial.astype("<f8", copy=False).tobytes())
    return b"".join(chunks)


def _unpack_partials(blob, k, n_trs):
    count, got_k, got_t = (
        _U64.unpack_from(blob, 0)[0],
        _U64.unpack_from(blob, _U64.size)[0],
        _U64.unpack_from(blob, 2 * _U64.size)[0],
    )
    if (got_k, got_t) != (k, n_trs):
        raise CollectiveContractError(
            f"E-step partials sized {(got_k, got_t)} on a peer rank, "
            f"root expects {(k, n_trs)}"
        )
    offset = 3 * _U64.size
    stride = k * n_trs * 8
    out = []
    for _ in range(count):
        (gidx,) = _U64.unpack_from(blob, offset)
        offset += _U64.size
        (rho2,) = _F64.unpack_from(blob, offset)
        offset += _F64.size
        partial = np.frombuffer(blob, dtype="<f8", count=k * n_trs, offset=offset)
        out.append((gidx, rho2, partial.reshape(k, n_trs)))
        offset += stride
    return out


def _accumulate(blobs, k, n_trs, n_subjects):
    """Root-side ordered accumulation of the gathered per-subject terms.

    Summing in ascending global subject index makes the result
    independent of how subjects are distributed across workers.
    """
    entries = []
    for blob in blobs:
        entries.extend(_unpack_partials(blob, k, n_trs))
    entries.sort(key=lambda e: e[0])
    if [e[0] for e in entries] != list(range(n_subjects)):
        raise CollectiveContractError(
            "gathered E-step terms do not cover every subject exactly once"
        )
    reduced = entries[0][2].copy()
    rho0 = 1.0 / entries[0][1]
    for _gidx, rho2, partial in entries[1:]:
        reduced += partial
        rho0 += 1.0 / rho2
    rho2_all = np.array([e[1] for e in entries])
    return reduced, rho0, rho2_all


def fit(subjects, config, comm):
    """Run the distributed EM; ``subjects`` are this worker's share.

    Every worker calls this with the same config; per-iteration flow is
    local E-step partials -> gather to root -> root posterior and
    Sigma_s update -> broadcast of S and tr(Sigma_s_new) -> local
    M-steps.
    """
    config.validate()
    if not subjects:
        raise ConfigError("each worker needs at least one subject")
    n_trs = subjects[0].X.shape[1]
    for s in subjects:
        if s.X.shape[1] != n_trs:
            raise ShapeError(
                f"subject {s.subject_id} has {s.X.shape[1]} TRs, expected {n_trs}"
            )
    if n_trs < 2:
        raise ShapeError("need at least 2 TRs")
    k = config.k

    offset, n_subjects = rank_offsets(comm, len(subjects))
    demeaned = [demean(s.X) for s in subjects]
    Xhats = [d[0] for d in demeaned]
    mus = [d[1] for d in demeaned]
    states = [
        init_subject(s.X.shape[0], config, offset + j)
        for j, s in enumerate(subjects)
    ]
    Ws = [st[0] for st in states]
    rho2s = [st[1] for st in states]

    sigma_s = np.eye(k) if comm.rank == 0 else None
    S = None
    S_prev = None
    rho0 = float("nan")
    objective_trace = []

    for _iteration in range(config.iterations):
        entries = [
            (offset + j, rho2s[j], e_step_local(Ws[j], rho2s[j], Xhats[j]))
            for j in range(len(subjects))
        ]
        blobs = comm.gather(_pack_partials(entries, k, n_trs))
        if comm.rank == 0:
            reduced, rho0, _ = _accumulate(blobs, k, n_trs, n_subjects)
            S_root, _var_s = e_step_global(reduced, sigma_s, rho0)
            sigma_s, trace_new = update_sigma_s(sigma_s, rho0, S_root)
        else:
            S_root, trace_new = None, None
        S = comm.broadcast(S_root)
        trace_new = float(comm.broadcast(
            np.array([[trace_new]]) if comm.rank == 0 else None
        )[0, 0])

        for j in range(len(subjects)):
            Ws[j], rho2s[j] = m_step_subject(Xhats[j], S, trace_new)
        objective_trace.append(float(np.mean(rho2s)))

        if config.tolerance is not None:
            if comm.rank == 0:
                if S_prev is None:
                    stop = 0.0
                else:
                    denom = max(float(np.linalg.norm(S_prev)), 1e-300)
                    stop = float(np.linalg.norm(S - S_prev) / denom < config.tolerance)
                S_prev = S.copy()
                flag = np.array([[stop]])
            else:
                flag = None
            if comm.broadcast(flag)[0, 0] > 0:
                break

    # refresh rho0 so it matches the post-M-step noise variances
    rho_blob = _U64.pack(len(subjects)) + b"".join(
        _U64.pack(offset + j) + _F64.pack(rho2s[j]) for j in range(len(subjects))
    )
    blobs = comm.gather(rho_blob)
    rho2_all = None
    if comm.rank == 0:
        pairs = []
        for blob in blobs:
            (count,) = _U64.unpack_from(blob, 0)
            pos = _U64.size
            for _ in range(count):
                (gidx,) = _U64.unpack_from(blob, pos)
                pos += _U64.size
                (val,) = _F64.unpack_from(blob, pos)
                pos += _F64.size
                pairs.append((gidx, val))
        pairs.sort(key=lambda p: p[0])
        rho2_all = np.array([v for _, v in pairs])
        rho0_final = float(np.add.reduce(1.0 / rho2_all))
    else:
        rho0_final = None
    rho0 = float(comm.broadcast(
        np.array([[rho0_final]]) if comm.rank == 0 else None
    )[0, 0])

    return SrmModel(
        subject_ids=[s.subject_id for s in subjects],
        subject_indices=list(range(offset, offset + len(subjects))),
        W=Ws,
        rho2=list(rho2s),
        mu=mus,
        S=S,
        rho0=rho0,
        n_subjects=n_subjects,
        sigma_s=sigma_s if comm.rank == 0 else None,
        rho2_all=rho2_all,
        objective_trace=objective_trace,
    )


def project(model, i, x):
    """Map one volume of held subject ``i`` into the shared space."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return model.W[i].T @ (x - model.mu[i])


def map_between(model, i, j, x):
    """Map a volume of subject ``i`` into subject ``j``'s voxel space."""
    return model.W[j] @ project(model, i, x) + model.mu[j]
