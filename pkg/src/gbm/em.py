"""MAP expectation-maximisation for the Group Behaviour Model.

:func:`fit_global` alternates between choosing each group's channel
permutation by maximum posterior and a MAP EM update of the shared
parameters on the realigned data of all groups. Each restart is seeded by a
single-group fit of one group whose channels are first put in a
data-determined order, so the result does not depend on how channels were
labelled. The restart with the highest final log-likelihood wins.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import Dims, GBMError, Group, ModelParams, Permutation, Priors
from .inference import (DegenerateStep, expected_counts, permutation_scores,
                        thread_map)

__all__ = [
    "FitConfig", "FitResult", "RestartResult", "MStepResult", "AllRestartsFailed",
    "SufficientStats", "m_step", "m_step_from_counts", "collect_counts",
    "initial_params", "canonical_order", "fit_single_group", "fit_global", "map_objective",
]

_log = logging.getLogger(__name__)


class AllRestartsFailed(GBMError):
    """Every restart of :func:`fit_global` hit a degenerate E-step."""


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit_single_group` and :func:`fit_global`.

    ``restart_policy`` is ``"each"`` (seed from every group in turn) or
    ``"single"`` (seed from ``seed_group``, default the first group).
    ``priors`` overrides the symmetric defaults ``prior_pi``, ``prior_omega``
    and ``prior_psi``. ``n_init`` random initialisations are tried for each
    single-group fit and the best is kept.
    """

    tolerance: float = 1e-4
    max_iters: int = 500
    priors: Priors | None = None
    prior_pi: float = 1.5
    prior_omega: float = 1.5
    prior_psi: float = 1.1
    restart_policy: str = "each"
    seed_group: str | None = None
    rng_seed: int = 0
    n_init: int = 1
    threads: int | None = None
    backend: str | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.restart_policy not in ("each", "single"):
            raise ValueError(f"unknown restart_policy {self.restart_policy!r}")

    def priors_for(self, dims):
        if self.priors is not None:
            self.priors.check(dims)
            return self.priors
        return Priors.symmetric(dims, self.prior_pi, self.prior_omega, self.prior_psi)

    def to_dict(self):
        return {
            "tolerance": self.tolerance, "max_iters": self.max_iters,
            "prior_pi": self.prior_pi, "prior_omega": self.prior_omega,
            "prior_psi": self.prior_psi, "restart_policy": self.restart_policy,
            "seed_group": self.seed_group, "rng_seed": self.rng_seed,
            "n_init": self.n_init,
        }


@dataclass
class RestartResult:
    seed_group: str
    params: ModelParams | None
    permutations: dict
    ll_trace: list
    refresh_trace: list
    objective_trace: list
    converged: bool
    error: str | None = None

    @property
    def final_ll(self):
        return self.ll_trace[-1] if self.ll_trace else -np.inf


@dataclass
class FitResult:
    """Outcome of a fit.

    ``ll_trace`` holds the observed-data log-likelihood after every M-step;
    for :func:`fit_global` its last entry is the log-likelihood after the
    final permutation re-optimisation. ``refresh_trace[i]`` is the
    log-likelihood right after the ``i``-th permutation refresh, before the
    M-step. ``objective_trace`` adds the log prior to ``ll_trace``.
    """

    params: ModelParams
    permutations: dict
    ll_trace: list
    converged: bool
    seed_group: str | None
    refresh_trace: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    empty_rows: list = field(default_factory=list)

    @property
    def final_ll(self):
        return self.ll_trace[-1]


class MStepResult(NamedTuple):
    pi: np.ndarray
    omega: np.ndarray
    psi: np.ndarray
    empty_rows: list


@dataclass
class SufficientStats:
    """Expected counts summed over runs."""

    gamma0: np.ndarray
    trans: np.ndarray
    psi_num: np.ndarray
    psi_den: np.ndarray
    num_runs: int = 0
    loglik: float = 0.0

    @classmethod
    def zeros(cls, dims):
        Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
        return cls(np.zeros(Z), np.zeros((Z, Z)), np.zeros((K, Z, X)), np.zeros((K, Z)))

    def add(self, loglik, gamma0, trans, psi_num, psi_den):
        self.gamma0 += gamma0
        self.trans += trans
        self.psi_num += psi_num
        self.psi_den += psi_den
        self.num_runs += 1
        self.loglik += loglik


def m_step_from_counts(counts, priors):
    """MAP updates of ``pi``, ``omega`` and ``psi`` from expected counts.

    Rows whose denominator is not positive (no responsibility and flat prior)
    fall back to uniform and are listed in ``empty_rows``.
    """
    Z = counts.gamma0.shape[0]
    X = counts.psi_num.shape[2]
    empty = []

    pi_num = counts.gamma0 + priors.alpha_pi - 1.0
    pi = pi_num / (counts.num_runs + priors.alpha_pi.sum() - Z)

    om_num = counts.trans + priors.alpha_omega - 1.0
    om_den = counts.trans.sum(axis=1) + priors.alpha_omega.sum(axis=1) - Z
    omega = np.empty_like(om_num)
    for z in range(Z):
        if om_den[z] > 0:
            omega[z] = om_num[z] / om_den[z]
        else:
            omega[z] = 1.0 / Z
            empty.append(("omega", z))

    ps_num = counts.psi_num + priors.alpha_psi - 1.0
    ps_den = counts.psi_den + priors.alpha_psi.sum(axis=2) - X
    psi = np.empty_like(ps_num)
    ok = ps_den > 0
    psi[ok] = ps_num[ok] / ps_den[ok][:, None]
    psi[~ok] = 1.0 / X
    empty.extend(("psi", int(k), int(z)) for k, z in np.argwhere(~ok))
    if empty:
        _log.warning("empty rows reset to uniform: %s", empty)
    return MStepResult(pi, omega, psi, empty)


def m_step(stats, canonical_obs, priors):
    """MAP M-step from per-run posterior statistics.

    ``stats`` and ``canonical_obs`` are aligned sequences of
    :class:`~gbm.core.PosteriorStats` and canonical :class:`~gbm.core.Run`.
    """
    stats = list(stats)
    runs = list(canonical_obs)
    if len(stats) != len(runs) or not runs:
        raise ValueError("stats and observations must be non-empty and aligned")
    Z = stats[0].gamma.shape[1]
    K, X = runs[0].num_channels, runs[0].num_behaviours
    counts = SufficientStats.zeros(Dims(Z, K, X))
    for s, run in zip(stats, runs):
        counts.add(s.loglik, s.gamma[0], s.eta.sum(axis=0),
                   np.einsum("tz,tkx->kzx", s.gamma, run.probs),
                   (s.gamma.T @ (~run.missing).astype(float)).T)
    return m_step_from_counts(counts, priors)


def collect_counts(params, runs, threads=None, backend=None):
    """E-step over canonical ``runs``; reduction in the order given."""
    dims = params.dims
    results = thread_map(lambda r: expected_counts(params, r, backend), runs, threads)
    counts = SufficientStats.zeros(dims)
    for res in results:
        counts.add(*res)
    return counts


def map_objective(params, priors, loglik):
    """Log-likelihood plus unnormalised Dirichlet log prior."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = [
            np.where(priors.alpha_pi > 1, (priors.alpha_pi - 1) * np.log(params.pi), 0.0).sum(),
            np.where(priors.alpha_omega > 1, (priors.alpha_omega - 1) * np.log(params.omega), 0.0).sum(),
            np.where(priors.alpha_psi > 1, (priors.alpha_psi - 1) * np.log(params.psi), 0.0).sum(),
        ]
    return float(loglik + sum(terms))


def _group_rng(seed, group_id, attempt):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(group_id.encode()), attempt])


def initial_params(group, dims, rng):
    """Random starting point: sticky transitions, emissions mixing each
    channel's observed marginal with a random categorical."""
    Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
    num = np.zeros((K, X))
    for run in group.runs:
        num += run.probs.sum(axis=0)
    marginal = (num + 1.0) / (num + 1.0).sum(axis=1, keepdims=True)
    psi = 0.5 * marginal[:, None, :] + 0.5 * rng.dirichlet(np.ones(X), size=(K, Z))
    omega = 0.8 * np.eye(Z) + 0.2 * rng.dirichlet(np.ones(Z), size=Z)
    n_perm = dims.num_permutations
    return ModelParams(pi=np.full(Z, 1.0 / Z), omega=omega, psi=psi,
                       xi=np.full(n_perm, 1.0 / n_perm))


def _em_fixed(runs, params, priors, config):
    """Plain MAP EM on canonical runs; returns (params, trace, obj, converged, empty)."""
    counts = collect_counts(params, runs, config.threads, config.backend)
    trace, objective, empty = [], [], []
    converged = False
    for it in range(config.max_iters):
        upd = m_step_from_counts(counts, priors)
        empty = upd.empty_rows
        params = params.replace(pi=upd.pi, omega=upd.omega, psi=upd.psi)
        counts = collect_counts(params, runs, config.threads, config.backend)
        trace.append(counts.loglik)
        objective.append(map_objective(params, priors, counts.loglik))
        if it > 0 and abs(trace[-1] - trace[-2]) < config.tolerance:
            converged = True
            break
    return params, trace, objective, converged, empty


def fit_single_group(group, dims, config=FitConfig(), init=None):
    """Standard MAP EM on one group with the permutation fixed to identity.

    ``init`` optionally supplies starting parameters; otherwise
    ``config.n_init`` random starts are tried and the highest final
    log-likelihood kept.
    """
    priors = config.priors_for(dims)
    ident = Permutation.identity(dims.num_channels)
    starts = [init] if init is not None else [
        initial_params(group, dims, _group_rng(config.rng_seed, group.group_id, a))
        for a in range(config.n_init)]
    best = None
    for start in starts:
        try:
            params, trace, obj, conv, empty = _em_fixed(list(group.runs), start, priors, config)
        except DegenerateStep as exc:
            raise DegenerateStep(exc.t, group.group_id, exc.run_id) from None
        if best is None or trace[-1] > best.ll_trace[-1]:
            best = FitResult(params, {group.group_id: ident}, trace, conv, group.group_id,
                             objective_trace=obj, empty_rows=empty)
    return best


def canonical_order(group):
    """Permutation putting ``group``'s channels in a data-determined order.

    Channels are sorted by their observed behaviour marginals (ties by
    index), so relabelling a group's channels does not change the order.
    """
    K = group.runs[0].num_channels
    counts = sum(r.probs.sum(axis=0) for r in group.runs)
    tot = counts.sum(axis=1, keepdims=True)
    marg = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    order = sorted(range(K), key=lambda k: (tuple(marg[k]), k))
    word = [0] * K
    for c, k in enumerate(order):
        word[k] = c
    return Permutation.from_word(word)


def _argmax_perms(scores_by_group, K):
    perms = {}
    for gid, scores in scores_by_group.items():
        perms[gid] = Permutation.from_index(K, int(np.argmax(scores)))
    return perms


def _score_all(params, dataset, config):
    groups = list(dataset.groups)
    scores = thread_map(lambda g: permutation_scores(params, g, config.backend),
                        groups, config.threads)
    out = {}
    for g, s in zip(groups, scores):
        # uniform xi: the MAP permutation is the likelihood argmax
        with np.errstate(divide="ignore"):
            s = s + np.log(params.xi)
        if np.all(np.isneginf(s)):
            raise DegenerateStep(-1, g.group_id)
        out[g.group_id] = s
    return out


def _total(scores, perms, xi):
    total = 0.0
    for gid in sorted(scores):
        total += scores[gid][perms[gid].index] - np.log(xi[perms[gid].index])
    return float(total)


def _global_phase(dataset, params, priors, config):
    K = dataset.num_channels
    ll_trace, refresh, objective = [], [], []
    scores = _score_all(params, dataset, config)
    perms = _argmax_perms(scores, K)
    converged = False
    for it in range(config.max_iters):
        refresh.append(_total(scores, perms, params.xi))
        runs = [r.permuted(perms[g.group_id]) for g, r in dataset.iter_runs()]
        counts = collect_counts(params, runs, config.threads, config.backend)
        upd = m_step_from_counts(counts, priors)
        params = params.replace(pi=upd.pi, omega=upd.omega, psi=upd.psi)
        scores = _score_all(params, dataset, config)
        ll = _total(scores, perms, params.xi)
        ll_trace.append(ll)
        objective.append(map_objective(params, priors, ll))
        if it > 0 and abs(ll_trace[-1] - ll_trace[-2]) < config.tolerance:
            converged = True
            break
        perms = _argmax_perms(scores, K)
    perms = _argmax_perms(scores, K)
    final = _total(scores, perms, params.xi)
    ll_trace.append(final)
    objective.append(map_objective(params, priors, final))
    return params, perms, ll_trace, refresh, objective, converged


def fit_global(dataset, dims, config=FitConfig()):
    """Fit one shared model across all groups with per-group permutations.

    Returns the :class:`FitResult` of the restart with the highest final
    log-likelihood; every restart is kept in ``result.restarts``.
    """
    if not dataset.groups:
        raise ValueError("dataset has no groups")
    if (dims.num_channels, dims.num_behaviours) != (dataset.num_channels, dataset.num_behaviours):
        raise ValueError("dims do not match the dataset")
    priors = config.priors_for(dims)
    if config.restart_policy == "each":
        seeds = [g.group_id for g in dataset.groups]
    else:
        seeds = [config.seed_group or dataset.groups[0].group_id]

    restarts = []
    for gid in seeds:
        try:
            g = dataset.group(gid)
            q0 = canonical_order(g)
            seed_group = Group(gid, tuple(r.permuted(q0) for r in g.runs))
            seed_fit = fit_single_group(seed_group, dims, config)
            params, perms, trace, refresh, obj, conv = _global_phase(
                dataset, seed_fit.params, priors, config)
        except DegenerateStep as exc:
            _log.warning("restart seeded from %r failed: %s", gid, exc)
            restarts.append(RestartResult(gid, None, {}, [], [], [], False, str(exc)))
            continue
        _log.info("restart %r: final log-likelihood %.6f after %d iterations",
                  gid, trace[-1], len(trace) - 1)
        restarts.append(RestartResult(gid, params, perms, trace, refresh, obj, conv))

    ok = [r for r in restarts if r.params is not None]
    if not ok:
        raise AllRestartsFailed("every restart hit a degenerate E-step")
    best = ok[0]
    for r in ok[1:]:
        if r.final_ll > best.final_ll:
            best = r
    return FitResult(best.params, best.permutations, best.ll_trace, best.converged,
                     best.seed_group, best.refresh_trace, best.objective_trace, restarts)
