"""Naive reference computations used only for validation.

These implement the textbook forms that the optimized paths replace:
the shared-response posterior through the explicit stacked V x V
covariance, the Gaussian marginal log-likelihood, and the template
hyperparameter updates written as three inversions per factor. They are
deliberately slow and are guarded against large voxel counts; nothing
in the fitting paths calls them.
"""

import numpy as np

from .errors import InvalidInputError
from .kernels import residual_fro, spd_inverse

__all__ = [
    "MAX_ORACLE_VOXELS",
    "naive_posterior",
    "naive_log_likelihood",
    "naive_sigma_update",
    "naive_rho2",
    "naive_template_update",
]

MAX_ORACLE_VOXELS = 2000


def _stack(W_list, rho2_list, Xhat_list):
    V = sum(W.shape[0] for W in W_list)
    if V > MAX_ORACLE_VOXELS:
        raise InvalidInputError(
            f"naive oracle refuses {V} voxels (> {MAX_ORACLE_VOXELS}); "
            "it would allocate O(V^2) memory"
        )
    W = np.vstack(W_list)
    psi = np.concatenate(
        [np.full(Wi.shape[0], r) for Wi, r in zip(W_list, rho2_list)]
    )
    Xhat = np.vstack(Xhat_list)
    return W, psi, Xhat


def naive_posterior(W_list, rho2_list, sigma_s, Xhat_list):
    """Posterior mean and covariance through the explicit V x V inverse."""
    W, psi, Xhat = _stack(W_list, rho2_list, Xhat_list)
    phi = W @ sigma_s @ W.T
    phi[np.diag_indices_from(phi)] += psi
    phi_inv = spd_inverse(phi)
    proj = sigma_s.T @ W.T @ phi_inv
    S = proj @ Xhat
    var_s = sigma_s - proj @ W @ sigma_s
    return S, 0.5 * (var_s + var_s.T)


def naive_log_likelihood(W_list, rho2_list, sigma_s, Xhat_list):
    """Marginal log-likelihood of the demeaned data under the model."""
    W, psi, Xhat = _stack(W_list, rho2_list, Xhat_list)
    V, n_trs = Xhat.shape
    phi = W @ sigma_s @ W.T
    phi[np.diag_indices_from(phi)] += psi
    chol = np.linalg.cholesky(phi)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    solved = np.linalg.solve(chol, Xhat)
    quad = float(np.einsum("ij,ij->", solved, solved))
    return -0.5 * (n_trs * (V * np.log(2.0 * np.pi) + logdet) + quad)


def naive_sigma_update(S, var_s):
    """(1/T) sum_t E[s_t s_t^T] from the posterior mean and covariance."""
    return var_s + (S @ S.T) / S.shape[1]


def naive_rho2(Xhat_i, W_i, S, var_s):
    """Expected mean squared residual, posterior-covariance term included."""
    V, n_trs = Xhat_i.shape
    expected = residual_fro(Xhat_i, W_i, S) + n_trs * float(np.trace(var_s))
    return expected / (n_trs * V)


def naive_template_update(
    centers_hat,
    center_cov_hat,
    widths_hat,
    width_var_hat,
    prior_center_cov,
    prior_width_var,
    center_mean,
    width_mean,
    n_subjects,
):
    """Template hyperparameter update via three inversions per factor.

    ``center_mean`` / ``width_mean`` are the across-subject averages of
    the local estimates.
    """
    K = centers_hat.shape[0]
    new_centers = np.empty_like(centers_hat)
    new_cov = np.empty_like(center_cov_hat)
    new_widths = np.empty_like(widths_hat)
    new_width_var = np.empty_like(width_var_hat)
    prior_prec = spd_inverse(prior_center_cov)
    for k in range(K):
        post_prec = spd_inverse(center_cov_hat[k])
        combined = spd_inverse(post_prec + n_subjects * prior_prec)
        new_centers[k] = combined @ (
            post_prec @ centers_hat[k] + n_subjects * (prior_prec @ center_mean[k])
        )
        new_cov[k] = combined
        denom = 1.0 / width_var_hat[k] + n_subjects / prior_width_var
        new_width_var[k] = 1.0 / denom
        new_widths[k] = (
            widths_hat[k] / width_var_hat[k]
            + n_subjects * width_mean[k] / prior_width_var
        ) / denom
    return new_centers, new_cov, new_widths, new_width_var
