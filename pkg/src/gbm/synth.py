"""Sampling datasets from a Group Behaviour Model.

Ground truth (state paths, permutations) is returned separately from the
dataset so downstream code only sees observations.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .core import Dataset, Group, ModelParams, Permutation, Run

__all__ = ["SynthSpec", "GroundTruth", "sample_dataset", "scramble_identities",
           "random_params", "sample_states"]


@dataclass(frozen=True)
class SynthSpec:
    """What to sample.

    ``scramble_seed=None`` keeps every group in canonical channel order;
    otherwise each group gets a uniform random permutation. ``concentration``
    selects soft observations (Dirichlet centred on the sampled behaviour);
    ``None`` gives one-hot observations.
    """

    params: ModelParams
    num_groups: int = 1
    runs_per_group: int = 1
    run_length: int = 100
    scramble_seed: int | None = None
    missing_rate: float = 0.0
    concentration: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.num_groups, self.runs_per_group, self.run_length) < 1:
            raise ValueError("num_groups, runs_per_group and run_length must be >= 1")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        if self.concentration is not None and not self.concentration > 0:
            raise ValueError("concentration must be positive")

    @property
    def dims(self):
        return self.params.dims


@dataclass(frozen=True)
class GroundTruth:
    permutations: dict
    state_paths: dict

    def to_dict(self):
        return {
            "permutations": {g: q.index for g, q in sorted(self.permutations.items())},
            "permutation_words": {g: list(q.word) for g, q in sorted(self.permutations.items())},
            "state_paths": {f"{g}/{r}": p.tolist() for (g, r), p in sorted(self.state_paths.items())},
        }


def _stream(seed, key, *extra):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(key.encode()), *extra])


def group_ids(n):
    width = max(2, len(str(n - 1)))
    return [f"g{i:0{width}d}" for i in range(n)]


def run_ids(n):
    width = max(2, len(str(n - 1)))
    return [f"r{i:0{width}d}" for i in range(n)]


def _categorical(rows, u):
    cum = np.cumsum(rows, axis=-1)
    return np.minimum((u[..., None] > cum).sum(axis=-1), rows.shape[-1] - 1)


def sample_states(pi, omega, length, rng):
    """One Markov chain path of ``length`` steps."""
    u = rng.random(length)
    cum_pi = np.cumsum(pi)
    cum_om = np.cumsum(omega, axis=1)
    last = len(pi) - 1
    path = np.empty(length, dtype=int)
    z = min(int(np.searchsorted(cum_pi, u[0], side="right")), last)
    path[0] = z
    for t in range(1, length):
        z = min(int(np.searchsorted(cum_om[z], u[t], side="right")), last)
        path[t] = z
    return path


def _sample_run(params, spec, rng):
    K, X = params.psi.shape[0], params.psi.shape[2]
    T = spec.run_length
    path = sample_states(params.pi, params.omega, T, rng)
    probs = np.zeros((T, K, X))
    for k in range(K):
        cats = _categorical(params.psi[k][path], rng.random(T))
        if spec.concentration is None:
            probs[np.arange(T), k, cats] = 1.0
        else:
            alpha = np.ones((T, X))
            alpha[np.arange(T), cats] += spec.concentration
            g = rng.gamma(alpha)
            probs[:, k, :] = g / g.sum(axis=1, keepdims=True)
    missing = rng.random((T, K)) < spec.missing_rate
    probs[missing] = 0.0
    return probs, missing, path


def sample_dataset(spec):
    """Sample a dataset and its ground truth; deterministic in ``spec``."""
    params = spec.params
    K = params.psi.shape[0]
    groups, perms, paths = [], {}, {}
    for gid in group_ids(spec.num_groups):
        rng = _stream(spec.rng_seed, gid)
        if spec.scramble_seed is None:
            q = Permutation.identity(K)
        else:
            q = Permutation.from_word(_stream(spec.scramble_seed, gid).permutation(K))
        runs = []
        for rid in run_ids(spec.runs_per_group):
            probs, missing, path = _sample_run(params, spec, rng)
            # observed channel k carries canonical channel q.word[k]
            w = list(q.word)
            runs.append(Run(rid, probs[:, w, :], missing[:, w]))
            paths[(gid, rid)] = path
        groups.append(Group(gid, tuple(runs)))
        perms[gid] = q
    return Dataset(tuple(groups)), GroundTruth(perms, paths)


def scramble_identities(dataset, seed):
    """Relabel each group's channels by an independent random permutation.

    Returns ``(scrambled, applied)`` where ``scrambled[k] = original[p.word[k]]``
    for the group's ``p = applied[group_id]``. A permutation that aligned the
    original group aligns the scrambled one after ``q.compose(p)``.
    """
    K = dataset.num_channels
    groups, applied = [], {}
    for g in dataset.groups:
        p = Permutation.from_word(_stream(seed, g.group_id, 1).permutation(K))
        groups.append(g.scrambled(p))
        applied[g.group_id] = p
    return Dataset(tuple(groups)), applied


def random_params(dims, rng, stickiness=0.9, emission_concentration=0.5):
    """Random parameters with sticky regimes and peaked emission rows.

    Lower ``emission_concentration`` gives sparser, better separated rows.
    """
    Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
    if Z == 1:
        omega = np.ones((1, 1))
    else:
        off = rng.dirichlet(np.ones(Z - 1), size=Z) * (1.0 - stickiness)
        omega = np.empty((Z, Z))
        for z in range(Z):
            omega[z] = np.insert(off[z], z, stickiness)
    psi = rng.dirichlet(np.full(X, emission_concentration), size=(K, Z))
    psi = 0.98 * psi + 0.02 / X
    n_perm = dims.num_permutations
    return ModelParams(pi=rng.dirichlet(np.full(Z, 5.0)), omega=omega, psi=psi,
                       xi=np.full(n_perm, 1.0 / n_perm))

