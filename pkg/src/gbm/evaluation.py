"""Model comparison: normalised log-likelihood, RDL, cross-validation,
latent-size selection, anomaly scoring and state alignment.

The normalisation unit of L-hat is one observed (channel, time-point) pair.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats
from scipy.optimize import linear_sum_assignment

from .core import Dataset, GBMError, Group, ModelParams, all_permutations
from .em import FitConfig, FitResult, fit_global
from .inference import dataset_log_likelihood, map_permutation

__all__ = [
    "BaselineModel", "EvalReport", "DegenerateDenominator", "DegenerateClasses",
    "fit_baseline", "normalised_ll", "rdl", "loo_cv", "CVResult", "FoldResult",
    "select_num_states", "SelectionResult", "anomaly_scores", "AnomalyReport",
    "best_threshold", "welch_ttest", "align_states", "Alignment",
    "solve_assignment", "permute_params",
]

_log = logging.getLogger(__name__)


class DegenerateDenominator(GBMError):
    """The global model does not outscore the baseline."""


class DegenerateClasses(GBMError):
    """A class of the anomaly comparison has no scores."""


def _as_dataset(data):
    if isinstance(data, Dataset):
        return data
    if isinstance(data, Group):
        return Dataset((data,))
    return Dataset(tuple(data))


@dataclass(frozen=True)
class BaselineModel:
    """Independent categorical per channel, ignoring time: ``probs`` (K, X)."""

    probs: np.ndarray
    scope: str = "global"

    def loglik(self, dataset):
        zero = self.probs <= 0
        logp = np.log(np.where(zero, 1.0, self.probs))
        total = 0.0
        for _, run in dataset.iter_runs():
            if np.any(run.probs[:, zero] > 0):
                return -np.inf
            total += float(np.einsum("tkx,kx->", run.probs, logp))
        return total


def fit_baseline(data, alpha=1.1, scope="global"):
    """Fit the per-channel baseline by prior-smoothed expected counts.

    ``alpha`` is the Dirichlet hyperparameter (scalar or (K, X)).
    """
    ds = _as_dataset(data)
    K, X = ds.num_channels, ds.num_behaviours
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (K, X))
    counts = np.zeros((K, X))
    for _, run in ds.iter_runs():
        counts += run.probs.sum(axis=0)
    num = counts + alpha - 1.0
    den = num.sum(axis=1)
    probs = np.empty((K, X))
    for k in range(K):
        if den[k] > 0:
            probs[k] = num[k] / den[k]
        else:
            _log.warning("channel %d has no observations; baseline row set to uniform", k)
            probs[k] = 1.0 / X
    return BaselineModel(probs, scope)


@dataclass(frozen=True)
class EvalReport:
    ll_total: float
    n_units: int
    scope: str = "all"

    @property
    def ll_normalised(self):
        return self.ll_total / self.n_units

    def to_row(self):
        return {"scope": self.scope, "ll_total": self.ll_total, "n_units": self.n_units,
                "ll_normalised": self.ll_normalised}


def _model_parts(model):
    if isinstance(model, FitResult):
        return model.params, model.permutations
    return model, None


def normalised_ll(model, data, permutations=None, scope="all", threads=1):
    """Normalised log-likelihood of ``data`` under ``model``.

    ``model`` is a :class:`ModelParams`, a :class:`FitResult` or a
    :class:`BaselineModel`. For GBM models each group uses
    ``permutations[group_id]`` when given (a ``FitResult`` supplies its own),
    otherwise its MAP permutation.
    """
    ds = _as_dataset(data)
    n_units = ds.num_observed
    if n_units == 0:
        raise ValueError("scope contains no observations")
    if isinstance(model, BaselineModel):
        return EvalReport(model.loglik(ds), n_units, scope)
    params, fitted = _model_parts(model)
    given = permutations if permutations is not None else (fitted or {})
    perms = {}
    for g in ds.groups:
        perms[g.group_id] = given.get(g.group_id) or map_permutation(params, g)[0]
    total, _ = dataset_log_likelihood(params, ds, perms, threads=threads)
    return EvalReport(total, n_units, scope)


def rdl(global_report, per_group_report, baseline_report):
    """Relative difference in likelihood (percent) between a global and a
    per-group model, anchored at the baseline."""
    units = {global_report.n_units, per_group_report.n_units, baseline_report.n_units}
    if len(units) != 1:
        raise ValueError("reports must share the same scope")
    lg = global_report.ll_normalised
    denom = lg - baseline_report.ll_normalised
    if denom <= 1e-12:
        raise DegenerateDenominator(
            f"global model (L={lg:.6g}) does not beat the baseline "
            f"(L={baseline_report.ll_normalised:.6g})")
    return (lg - per_group_report.ll_normalised) / denom * 100.0


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    per_seed: dict
    baseline: EvalReport
    fit: FitResult = field(repr=False, default=None)


@dataclass
class CVResult:
    folds: list

    @property
    def mean_ll(self):
        return float(np.mean([f.report.ll_normalised for f in self.folds]))

    @property
    def pooled_ll(self):
        return (sum(f.report.ll_total for f in self.folds)
                / sum(f.report.n_units for f in self.folds))

    def seed_pooled(self):
        """Pooled held-out L-hat per restart seed."""
        seeds = sorted({s for f in self.folds for s in f.per_seed})
        out = {}
        for s in seeds:
            reps = [f.per_seed[s] for f in self.folds if s in f.per_seed]
            out[s] = sum(r.ll_total for r in reps) / sum(r.n_units for r in reps)
        return out


def _split_runs(dataset, fold):
    train, test = [], []
    for g in dataset.groups:
        held = [r for i, r in enumerate(g.runs) if i == fold]
        rest = [r for i, r in enumerate(g.runs) if i != fold]
        train.append(Group(g.group_id, tuple(rest)))
        if held:
            test.append(Group(g.group_id, tuple(held)))
    return Dataset(tuple(train)), Dataset(tuple(test))


def loo_cv(dataset, dims, config=FitConfig(), fit=fit_global):
    """Leave-one-run-out cross-validation.

    Fold ``i`` holds out the ``i``-th run (sorted by id) of every group, fits
    on the rest and scores the held-out runs with each group's training
    permutation. ``per_seed`` reports every restart's model; ``report`` is the
    restart selected by training log-likelihood.
    """
    if any(len(g.runs) < 2 for g in dataset.groups):
        raise ValueError("leave-one-run-out needs at least 2 runs per group")
    n_folds = max(len(g.runs) for g in dataset.groups)
    folds = []
    for i in range(n_folds):
        train, test = _split_runs(dataset, i)
        try:
            res = fit(train, dims, config)
        except GBMError as exc:
            raise GBMError(f"fold {i}: {exc}") from exc
        per_seed = {}
        for r in res.restarts or []:
            if r.params is not None:
                per_seed[r.seed_group] = normalised_ll(r.params, test, r.permutations,
                                                       scope=f"fold{i}")
        report = normalised_ll(res, test, scope=f"fold{i}")
        base = normalised_ll(fit_baseline(train, config.prior_psi), test, scope=f"fold{i}")
        folds.append(FoldResult(i, report, per_seed, base, res))
        _log.info("fold %d: held-out L=%.6f (baseline %.6f)", i, report.ll_normalised,
                  base.ll_normalised)
    return CVResult(folds)


@dataclass
class SelectionResult:
    """Curve data: ``rows`` are ``(num_states, seed_group, fold, ll_normalised)``."""

    rows: list
    per_seed: dict
    selected: dict

    @property
    def mean(self):
        """Mean over restart seeds of the pooled held-out L-hat, per size."""
        return {z: float(np.mean(list(v.values()))) for z, v in self.per_seed.items()}


def select_num_states(dataset, z_range, config=FitConfig()):
    """Cross-validated L-hat for each candidate number of latent states."""
    z_values = list(z_range)
    if not z_values:
        raise ValueError("z_range is empty")
    rows, per_seed, selected = [], {}, {}
    for z in z_values:
        dims = dataset.dims(z)
        cv = loo_cv(dataset, dims, config)
        for f in cv.folds:
            for seed, rep in sorted(f.per_seed.items()):
                rows.append((z, seed, f.fold, rep.ll_normalised))
        per_seed[z] = cv.seed_pooled()
        selected[z] = cv.pooled_ll
    return SelectionResult(rows, per_seed, selected)


def best_threshold(normal, other):
    """Threshold maximising accuracy of ``score > threshold -> normal``.

    Among optimal thresholds the first optimal gap between consecutive
    distinct scores is used and its midpoint returned; the open ends use
    ``min - 1`` and ``max + 1``. Returns ``(threshold, accuracy)``.
    """
    normal = np.asarray(normal, dtype=float)
    other = np.asarray(other, dtype=float)
    values = np.unique(np.concatenate([normal, other]))
    cuts = np.concatenate([[values[0] - 1.0], (values[:-1] + values[1:]) / 2, [values[-1] + 1.0]])
    n = normal.size + other.size
    acc = np.array([((normal > c).sum() + (other < c).sum()) / n for c in cuts])
    best = int(np.argmax(acc))
    return float(cuts[best]), float(acc[best])


def welch_ttest(a, b):
    """Welch's unequal-variance two-sample t-test; returns ``(t, p)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        return float("nan"), float("nan")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return float(np.sign(a.mean() - b.mean()) * np.inf), 0.0
    res = sstats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


@dataclass
class AnomalyReport:
    """``scores`` rows are ``(label, group_id, run_id or None, EvalReport)``."""

    scores: list
    threshold: float
    accuracy: float
    t: float
    p: float

    def summary(self):
        return {"threshold": self.threshold, "accuracy": self.accuracy, "t": self.t, "p": self.p}


def _score_groups(params, ds, label, per_run):
    rows = []
    for g in ds.groups:
        q, _ = map_permutation(params, g)
        units = [(r.run_id, Group(g.group_id, (r,))) for r in g.runs] if per_run else [(None, g)]
        for rid, sub in units:
            rep = normalised_ll(params, sub, {g.group_id: q}, scope=f"{label}:{g.group_id}")
            rows.append((label, g.group_id, rid, rep))
    return rows


def anomaly_scores(model, normal, other, per_run=False):
    """Score every group of two datasets under a fixed model and test
    whether their L-hat distributions separate.

    Each group's permutation is re-optimised (new groups need alignment).
    """
    params, _ = _model_parts(model)
    normal, other = _as_dataset(normal), _as_dataset(other)
    rows = _score_groups(params, normal, "normal", per_run) + _score_groups(params, other, "other", per_run)
    a = [r[3].ll_normalised for r in rows if r[0] == "normal"]
    b = [r[3].ll_normalised for r in rows if r[0] == "other"]
    if not a or not b:
        raise DegenerateClasses("both classes need at least one score")
    thr, acc = best_threshold(a, b)
    t, p = welch_ttest(a, b)
    return AnomalyReport(rows, thr, acc, t, p)


def solve_assignment(cost):
    """Minimum-cost perfect matching of a square cost matrix (Hungarian
    method); returns ``cols`` with row ``i`` assigned to ``cols[i]``."""
    rows, cols = linear_sum_assignment(np.asarray(cost, dtype=float))
    out = np.empty(len(rows), dtype=int)
    out[rows] = cols
    return out


def _row_distance(a, b, kind):
    # a: (Z, X), b: (Z, X) -> (Z, Z) pairwise
    if kind == "l1":
        return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    if kind == "l2":
        return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    if kind == "kl":
        eps = 1e-12
        la, lb = np.log(a + eps), np.log(b + eps)
        d = a[:, None, :] * (la[:, None, :] - lb[None, :, :])
        d2 = b[None, :, :] * (lb[None, :, :] - la[:, None, :])
        return (d + d2).sum(axis=2)
    raise ValueError(f"unknown distance {kind!r}")


@dataclass(frozen=True)
class Alignment:
    """``other`` channel ``channel_perm.word[k]`` matches reference channel
    ``k``; ``other`` state ``state_perm[z]`` matches reference state ``z``."""

    channel_perm: object
    state_perm: np.ndarray
    cost: float
    aligned: ModelParams


def permute_params(params, channel_perm, state_perm):
    """Reorder ``params`` so channel ``k`` is old channel ``channel_perm.word[k]``
    and state ``z`` is old state ``state_perm[z]``."""
    sp = np.asarray(state_perm)
    w = list(channel_perm.word)
    return params.replace(pi=params.pi[sp], omega=params.omega[np.ix_(sp, sp)],
                          psi=params.psi[w][:, sp, :])


def align_states(reference, other, distance="l1"):
    """Match ``other``'s channels and states to ``reference``.

    Every channel permutation is tried; for each, states are matched by the
    Hungarian method on summed per-channel emission-row distances. The
    cheapest pair wins, earliest channel permutation on ties.
    """
    if reference.psi.shape != other.psi.shape:
        raise ValueError("models have different dims")
    K = reference.psi.shape[0]
    best = None
    for c in all_permutations(K):
        cost = np.zeros((reference.psi.shape[1],) * 2)
        for k in range(K):
            cost += _row_distance(reference.psi[k], other.psi[c.word[k]], distance)
        cols = solve_assignment(cost)
        total = float(cost[np.arange(len(cols)), cols].sum())
        if best is None or total < best[2]:
            best = (c, cols, total)
    c, cols, total = best
    return Alignment(c, cols, total, permute_params(other, c, cols))

