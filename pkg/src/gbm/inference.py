"""Exact E-step machinery.

Soft observations enter the emission likelihood as exponents, so the log
emission of state ``z`` at step ``t`` is ``sum_k sum_x Xc[t,k,x] log psi[k,z,x]``
over observed canonical channels; missing channels contribute nothing.
"""
from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .core import GBMError, Permutation, PosteriorStats, all_permutations

__all__ = [
    "DegenerateStep", "TooLarge", "log_emissions", "channel_log_emissions",
    "forward_backward", "brute_force_posteriors", "permutation_scores",
    "posterior_over_q", "map_permutation", "dataset_log_likelihood",
    "default_threads", "thread_map",
]

_log = logging.getLogger(__name__)

LOG_FLOOR = np.log(1e-300)


class DegenerateStep(GBMError):
    """Every state has zero likelihood at some time step."""

    def __init__(self, t, group_id=None, run_id=None):
        self.t = t
        self.group_id = group_id
        self.run_id = run_id
        if t is not None and t < 0:
            super().__init__(f"group={group_id!r}: every channel permutation has zero likelihood")
            return
        where = f"t={t}"
        if run_id is not None:
            where = f"group={group_id!r} run={run_id!r} {where}"
        super().__init__(f"all states impossible at {where}")


class TooLarge(GBMError):
    """Brute-force enumeration would exceed its cap."""


def default_threads():
    env = os.environ.get("GBM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def thread_map(fn, items, threads=None):
    """``list(map(fn, items))``, optionally on a thread pool; order preserved."""
    items = list(items)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _safe_log(psi):
    zero = psi <= 0.0
    with np.errstate(divide="ignore"):
        logpsi = np.where(zero, LOG_FLOOR, np.log(np.where(zero, 1.0, psi)))
    return logpsi, zero


def channel_log_emissions(psi, probs):
    """Per (group channel, canonical channel) log emissions.

    Returns ``L`` of shape (T, K, K, Z) with ``L[t, k, c, z]`` the log
    likelihood of group channel ``k``'s observation under canonical channel
    ``c``'s emission row for state ``z``. Missing rows are all-zero in
    ``probs`` and so contribute 0.
    """
    T, K, _ = probs.shape
    Z = psi.shape[1]
    logpsi, zero = _safe_log(psi)
    out = np.empty((T, K, K, Z))
    for k in range(K):
        for c in range(K):
            block = probs[:, k, :] @ logpsi[c].T
            if zero[c].any():
                hit = (probs[:, k, :] > 0) @ zero[c].T.astype(float)
                block[hit > 0] = -np.inf
            out[:, k, c, :] = block
    return out


def _sum_channels(L, q):
    logE = L[:, q.source[0], 0, :].copy()
    for c in range(1, len(q.source)):
        logE += L[:, q.source[c], c, :]
    return logE


def log_emissions(psi, probs):
    """Log emission table (T, Z) for canonical observations ``probs``."""
    T, K, _ = probs.shape
    logpsi, zero = _safe_log(psi)
    logE = None
    for c in range(K):
        block = probs[:, c, :] @ logpsi[c].T
        if zero[c].any():
            hit = (probs[:, c, :] > 0) @ zero[c].T.astype(float)
            block[hit > 0] = -np.inf
        logE = block if logE is None else logE + block
    return logE


def _rescale(logE):
    shift = logE.max(axis=1)
    bad = np.flatnonzero(~np.isfinite(shift))
    if bad.size:
        return None, shift, int(bad[0])
    return np.ascontiguousarray(np.exp(logE - shift[:, None])), shift, -1


def _loglik_from_logE(pi, omega, logE, backend=None):
    """Observed-data log-likelihood; ``-inf`` and the bad step if degenerate."""
    impl = kernels.get_backend(backend) if backend else kernels
    emis, shift, bad = _rescale(logE)
    if bad >= 0:
        return -np.inf, bad
    total, bad = impl.forward_loglik(pi, omega, emis)
    if bad >= 0:
        return -np.inf, bad
    return float(total + shift.sum()), -1


def _posteriors(pi, omega, logE, full_eta=True, backend=None):
    impl = kernels.get_backend(backend) if backend else kernels
    emis, shift, bad = _rescale(logE)
    if bad >= 0:
        raise DegenerateStep(bad)
    fhat, scale, bad = impl.forward(pi, omega, emis)
    if bad >= 0:
        raise DegenerateStep(bad)
    bhat = impl.backward(omega, emis, scale)
    gamma = fhat * bhat
    log_c = -(np.log(scale) + shift)
    # w[t] = P(t, z) * bhat[t, z] * C[t], in the rescaled frame
    w = emis[1:] * bhat[1:] / scale[1:, None]
    if full_eta:
        eta = fhat[:-1, :, None] * omega[None, :, :] * w[:, None, :]
    else:
        eta = (fhat[:-1].T @ w) * omega
    return gamma, eta, log_c


def _pi_omega(params):
    return (np.ascontiguousarray(params.pi, dtype=float),
            np.ascontiguousarray(params.omega, dtype=float))


def forward_backward(params, run, backend=None):
    """Scaled forward-backward on one run already in canonical channel order.

    Returns ``(stats, loglik)`` where ``stats`` is a :class:`PosteriorStats`.
    Raises :class:`DegenerateStep` if some step has zero likelihood under
    every state.
    """
    pi, omega = _pi_omega(params)
    logE = log_emissions(params.psi, run.probs)
    try:
        gamma, eta, log_c = _posteriors(pi, omega, logE, True, backend)
    except DegenerateStep as exc:
        raise DegenerateStep(exc.t, None, run.run_id) from None
    stats = PosteriorStats(gamma, eta, log_c)
    return stats, stats.loglik


def expected_counts(params, run, backend=None):
    """Sufficient statistics of one canonical run for the M-step.

    Returns ``(loglik, gamma0, trans, psi_num, psi_den)`` with ``trans``
    the summed transition responsibilities (Z, Z), ``psi_num`` (K, Z, X) and
    ``psi_den`` (K, Z).
    """
    pi, omega = _pi_omega(params)
    logE = log_emissions(params.psi, run.probs)
    try:
        gamma, trans, log_c = _posteriors(pi, omega, logE, False, backend)
    except DegenerateStep as exc:
        raise DegenerateStep(exc.t, None, run.run_id) from None
    psi_num = np.einsum("tz,tkx->kzx", gamma, run.probs)
    psi_den = gamma.T @ (~run.missing).astype(float)
    return float(-log_c.sum()), gamma[0], trans, psi_num, psi_den.T


def brute_force_posteriors(params, run, cap=1_000_000):
    """Posteriors by explicit enumeration of every state sequence.

    Test oracle for :func:`forward_backward`; emissions are evaluated
    directly as ``prod psi ** Xc``. Returns ``(gamma, eta, loglik)``.
    """
    Z = params.pi.shape[0]
    T = run.length
    if Z ** T > cap:
        raise TooLarge(f"{Z}^{T} state sequences exceeds cap {cap}")
    with np.errstate(divide="ignore"):
        # P[t, z] = prod_{k,x} psi[k, z, x] ** Xc[t, k, x]
        P = np.prod(params.psi[None, :, :, :] ** run.probs[:, :, None, :], axis=(1, 3))
        logP = np.log(P)
        logpi = np.log(params.pi)
        logom = np.log(params.omega)
    seqs = np.array(list(itertools.product(range(Z), repeat=T)), dtype=int).reshape(-1, T)
    lw = logpi[seqs[:, 0]] + logP[np.arange(T), seqs].sum(axis=1)
    if T > 1:
        lw = lw + logom[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
    ll = logsumexp(lw)
    w = np.exp(lw - ll)
    gamma = np.zeros((T, Z))
    eta = np.zeros((max(T - 1, 0), Z, Z))
    for t in range(T):
        np.add.at(gamma[t], seqs[:, t], w)
    for t in range(1, T):
        np.add.at(eta[t - 1], (seqs[:, t - 1], seqs[:, t]), w)
    return gamma, eta, float(ll)


def permutation_scores(params, group, backend=None):
    """Summed run log-likelihood of ``group`` under every channel permutation.

    Returns an array of length K!; degenerate permutations score ``-inf``.
    """
    pi, omega = _pi_omega(params)
    perms = all_permutations(params.psi.shape[0])
    scores = np.zeros(len(perms))
    for run in group.runs:
        L = channel_log_emissions(params.psi, run.probs)
        for q in perms:
            if scores[q.index] == -np.inf:
                continue
            ll, _ = _loglik_from_logE(pi, omega, _sum_channels(L, q), backend)
            scores[q.index] += ll
    return scores


def posterior_over_q(params, group, scores=None, backend=None):
    """Posterior over the K! channel permutations of one group (all runs)."""
    if scores is None:
        scores = permutation_scores(params, group, backend)
    with np.errstate(divide="ignore"):
        logpost = np.log(params.xi) + scores
    if np.all(np.isneginf(logpost)):
        raise DegenerateStep(-1, group.group_id)
    return np.exp(logpost - logsumexp(logpost))


def map_permutation(params, group, scores=None, backend=None):
    """Most probable permutation (lowest index on ties) and the posterior."""
    post = posterior_over_q(params, group, scores, backend)
    idx = int(np.argmax(post))
    return Permutation.from_index(params.psi.shape[0], idx), post


def _as_perm_map(dataset, permutations):
    if permutations is None:
        return {g.group_id: Permutation.identity(dataset.num_channels) for g in dataset.groups}
    if isinstance(permutations, dict):
        return permutations
    return {g.group_id: q for g, q in zip(dataset.groups, permutations)}


def dataset_log_likelihood(params, dataset, permutations=None, threads=1, backend=None):
    """Total observed-data log-likelihood with one permutation per group.

    ``permutations`` maps group id to :class:`Permutation` (or is a sequence
    aligned with ``dataset.groups``; ``None`` means identity). Returns
    ``(total, per_run)`` with ``per_run[(group_id, run_id)]``. The total is
    reduced in sorted (group, run) order.
    """
    perms = _as_perm_map(dataset, permutations)
    pi, omega = _pi_omega(params)
    jobs = [(g.group_id, r.permuted(perms[g.group_id])) for g, r in dataset.iter_runs()]

    def one(job):
        gid, run = job
        ll, bad = _loglik_from_logE(pi, omega, log_emissions(params.psi, run.probs), backend)
        if bad >= 0:
            raise DegenerateStep(bad, gid, run.run_id)
        return ll

    lls = thread_map(one, jobs, threads)
    per_run = {(gid, run.run_id): ll for (gid, run), ll in zip(jobs, lls)}
    total = 0.0
    for ll in lls:
        total += ll
    return total, per_run
