"""Domain types and parameter diagnostics for the Group Behaviour Model.

Conventions
-----------
A group's channels are matched to the model's canonical channels by a
:class:`Permutation`. Its ``word`` lists, for every group channel ``k``, the
canonical channel ``word[k]`` it is assigned to, so the permutation matrix has
``Q[k, word[k]] = 1`` and the canonical observations are ``Q.T @ X``.
Permutations of ``K`` channels are enumerated in lexicographic order of the
word; index 0 is the identity.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "GBMError", "IngestError", "NonConvergent", "MISSING", "Missing", "Dims",
    "ModelParams", "Priors", "Permutation", "Run", "Group", "Dataset",
    "PosteriorStats", "ValidationReport", "make_observation",
    "validate_params", "steady_state", "expected_dwell", "apply_permutation",
    "all_permutations",
]

_log = logging.getLogger(__name__)

MAX_CHANNELS = 8
PROB_TOL = 1e-9
INGEST_TOL = 1e-6


class GBMError(Exception):
    """Base class for library errors."""


class IngestError(GBMError, ValueError):
    """Malformed observations or data files."""


class NonConvergent(GBMError):
    """An iterative routine did not reach its tolerance."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class Missing:
    """Marker for an unavailable observation (missing-at-random)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __reduce__(self):
        return (Missing, ())


MISSING = Missing()


def make_observation(probs, num_behaviours=None, tol=INGEST_TOL):
    """Validate a probability vector and renormalise it exactly.

    ``MISSING`` (or ``None``) passes through as ``MISSING``.
    """
    if probs is None or probs is MISSING:
        return MISSING
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1:
        raise IngestError("observation must be a 1-d probability vector")
    if num_behaviours is not None and p.size != num_behaviours:
        raise IngestError(f"observation has {p.size} entries, expected {num_behaviours}")
    if not np.all(np.isfinite(p)):
        raise IngestError("observation contains non-finite values")
    if np.any(p < 0):
        raise IngestError("observation has negative entries")
    total = p.sum()
    if abs(total - 1.0) > tol:
        raise IngestError(f"observation sums to {total!r}, not 1 (tolerance {tol})")
    return p / total


@dataclass(frozen=True)
class Dims:
    num_states: int
    num_channels: int
    num_behaviours: int

    def __post_init__(self):
        for name in ("num_states", "num_channels", "num_behaviours"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.num_channels > MAX_CHANNELS:
            raise ValueError(
                f"num_channels={self.num_channels} exceeds {MAX_CHANNELS}; "
                "exact enumeration of permutations is impractical")

    @property
    def num_permutations(self):
        return math.factorial(self.num_channels)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def all_permutations(num_channels):
    """Every permutation of ``num_channels`` channels in enumeration order."""
    return tuple(Permutation(i, w) for i, w in
                 enumerate(itertools.permutations(range(num_channels))))


class Permutation:
    """A channel permutation, identified by its lexicographic index."""

    __slots__ = ("index", "word", "_inverse_word")

    def __init__(self, index, word):
        word = tuple(int(w) for w in word)
        if sorted(word) != list(range(len(word))):
            raise ValueError(f"{word} is not a permutation")
        if index != _word_to_index(word):
            raise ValueError(f"index {index} does not match word {word}")
        self.index = int(index)
        self.word = word
        inv = [0] * len(word)
        for k, c in enumerate(word):
            inv[c] = k
        self._inverse_word = tuple(inv)

    @classmethod
    def from_word(cls, word):
        word = tuple(int(w) for w in word)
        return cls(_word_to_index(word), word)

    @classmethod
    def from_index(cls, num_channels, index):
        n_perm = math.factorial(num_channels)
        if not 0 <= index < n_perm:
            raise ValueError(f"index {index} outside [0, {n_perm})")
        return all_permutations(num_channels)[index]

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("permutation matrix must be square")
        if not (np.isin(m, (0, 1)).all() and (m.sum(0) == 1).all() and (m.sum(1) == 1).all()):
            raise ValueError("not a permutation matrix")
        return cls.from_word(np.argmax(m, axis=1))

    @classmethod
    def identity(cls, num_channels):
        return all_permutations(num_channels)[0]

    @property
    def size(self):
        return len(self.word)

    @property
    def matrix(self):
        m = np.zeros((self.size, self.size), dtype=int)
        m[np.arange(self.size), self.word] = 1
        return m

    @property
    def source(self):
        """Group channel feeding each canonical channel (inverse word)."""
        return self._inverse_word

    def inverse(self):
        return Permutation.from_word(self._inverse_word)

    def compose(self, other):
        """Permutation ``k -> self.word[other.word[k]]``.

        If data ``D2`` relates to ``D`` by ``D2[k] = D[other.word[k]]`` and
        ``self`` aligns ``D``, the result aligns ``D2``.
        """
        if other.size != self.size:
            raise ValueError("permutation sizes differ")
        return Permutation.from_word(tuple(self.word[w] for w in other.word))

    def __eq__(self, other):
        return isinstance(other, Permutation) and self.word == other.word

    def __hash__(self):
        return hash(self.word)

    def __repr__(self):
        return f"Permutation(index={self.index}, word={self.word})"


def _word_to_index(word):
    # Lehmer code, which ranks permutations lexicographically
    n = len(word)
    index = 0
    for i, w in enumerate(word):
        smaller = sum(1 for v in word[i + 1:] if v < w)
        index += smaller * math.factorial(n - 1 - i)
    return index


def apply_permutation(q, obs_row):
    """Reorder one time-point's group observations into canonical order.

    ``obs_row`` is a length-K sequence of observations (vectors or
    ``MISSING``). Canonical channel ``c`` receives the group channel ``k``
    with ``q.word[k] == c``.
    """
    if len(obs_row) != q.size:
        raise ValueError(f"expected {q.size} channels, got {len(obs_row)}")
    return [obs_row[k] for k in q.source]


@dataclass(frozen=True)
class ModelParams:
    """Canonical parameters: initial regime ``pi`` (Z), transitions ``omega``
    (Z, Z), emissions ``psi`` (K, Z, X) and permutation prior ``xi`` (K!)."""

    pi: np.ndarray
    omega: np.ndarray
    psi: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        for name in ("pi", "omega", "psi", "xi"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.pi.ndim != 1 or self.omega.ndim != 2 or self.psi.ndim != 3 or self.xi.ndim != 1:
            raise ValueError("ModelParams arrays have the wrong number of dimensions")

    @property
    def dims(self):
        return Dims(int(self.pi.shape[0]), int(self.psi.shape[0]), int(self.psi.shape[2]))

    @classmethod
    def uniform(cls, dims):
        Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
        return cls(pi=np.full(Z, 1.0 / Z), omega=np.full((Z, Z), 1.0 / Z),
                   psi=np.full((K, Z, X), 1.0 / X),
                   xi=np.full(dims.num_permutations, 1.0 / dims.num_permutations))

    def replace(self, **changes):
        values = dict(pi=self.pi, omega=self.omega, psi=self.psi, xi=self.xi)
        values.update(changes)
        return ModelParams(**values)

    def to_dict(self):
        return {"pi": self.pi.tolist(), "omega": self.omega.tolist(),
                "psi": self.psi.tolist(), "xi": self.xi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(pi=d["pi"], omega=d["omega"], psi=d["psi"], xi=d["xi"])


@dataclass(frozen=True)
class Priors:
    """Dirichlet hyperparameters; every entry must be >= 1."""

    alpha_pi: np.ndarray
    alpha_omega: np.ndarray
    alpha_psi: np.ndarray

    def __post_init__(self):
        for name in ("alpha_pi", "alpha_omega", "alpha_psi"):
            a = _frozen(getattr(self, name))
            if np.any(a < 1.0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} entries must be finite and >= 1")
            object.__setattr__(self, name, a)

    @classmethod
    def symmetric(cls, dims, pi=1.5, omega=1.5, psi=1.1):
        Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
        return cls(np.full(Z, float(pi)), np.full((Z, Z), float(omega)),
                   np.full((K, Z, X), float(psi)))

    @classmethod
    def flat(cls, dims):
        return cls.symmetric(dims, 1.0, 1.0, 1.0)

    def check(self, dims):
        Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
        if (self.alpha_pi.shape != (Z,) or self.alpha_omega.shape != (Z, Z)
                or self.alpha_psi.shape != (K, Z, X)):
            raise ValueError("prior shapes do not match dims")

    def to_dict(self):
        return {"alpha_pi": self.alpha_pi.tolist(), "alpha_omega": self.alpha_omega.tolist(),
                "alpha_psi": self.alpha_psi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["alpha_pi"], d["alpha_omega"], d["alpha_psi"])


@dataclass(frozen=True)
class Run:
    """One recording run: ``probs`` (T, K, X) with all-zero rows where
    ``missing`` (T, K) is set."""

    run_id: str
    probs: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        missing = np.array(self.missing, dtype=bool)
        if probs.ndim != 3 or probs.shape[0] < 1:
            raise IngestError(f"run {self.run_id!r}: probs must be (T>=1, K, X)")
        if missing.shape != probs.shape[:2]:
            raise IngestError(f"run {self.run_id!r}: missing mask shape mismatch")
        if np.any(probs[missing] != 0):
            raise IngestError(f"run {self.run_id!r}: missing entries must carry no probabilities")
        present = probs[~missing]
        if present.size and (np.any(present < 0) or
                             np.max(np.abs(present.sum(axis=-1) - 1.0)) > PROB_TOL):
            raise IngestError(f"run {self.run_id!r}: observation rows must be probability vectors")
        probs.setflags(write=False)
        missing.setflags(write=False)
        object.__setattr__(self, "run_id", str(self.run_id))
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "missing", missing)

    @classmethod
    def from_observations(cls, run_id, rows, num_behaviours=None):
        """Build from a T x K nested sequence of vectors or ``MISSING``."""
        rows = [list(r) for r in rows]
        if not rows:
            raise IngestError(f"run {run_id!r} is empty")
        K = len(rows[0])
        if num_behaviours is None:
            num_behaviours = next((len(o) for r in rows for o in r
                                   if o is not MISSING and o is not None), None)
            if num_behaviours is None:
                raise IngestError("cannot infer the number of behaviours from an all-missing run")
        probs = np.zeros((len(rows), K, num_behaviours))
        missing = np.zeros((len(rows), K), dtype=bool)
        for t, r in enumerate(rows):
            if len(r) != K:
                raise IngestError(f"run {run_id!r}: time {t} has {len(r)} channels, expected {K}")
            for k, o in enumerate(r):
                o = make_observation(o, num_behaviours)
                if o is MISSING:
                    missing[t, k] = True
                else:
                    probs[t, k] = o
        return cls(run_id, probs, missing)

    @property
    def length(self):
        return self.probs.shape[0]

    @property
    def num_channels(self):
        return self.probs.shape[1]

    @property
    def num_behaviours(self):
        return self.probs.shape[2]

    @property
    def num_observed(self):
        return int((~self.missing).sum())

    def observation(self, t, k):
        return MISSING if self.missing[t, k] else self.probs[t, k].copy()

    def permuted(self, q):
        """Channels reordered into canonical order under ``q``."""
        src = list(q.source)
        return Run(self.run_id, self.probs[:, src, :], self.missing[:, src])

    def scrambled(self, p):
        """Channels relabelled so that ``new[k] = old[p.word[k]]``."""
        w = list(p.word)
        return Run(self.run_id, self.probs[:, w, :], self.missing[:, w])


@dataclass(frozen=True)
class Group:
    group_id: str
    runs: tuple

    def __post_init__(self):
        runs = tuple(sorted(self.runs, key=lambda r: r.run_id))
        if not runs:
            raise IngestError(f"group {self.group_id!r} has no runs")
        ids = [r.run_id for r in runs]
        if len(set(ids)) != len(ids):
            raise IngestError(f"group {self.group_id!r} has duplicate run ids")
        shapes = {r.probs.shape[1:] for r in runs}
        if len(shapes) != 1:
            raise IngestError(f"group {self.group_id!r}: runs disagree on channels/behaviours")
        object.__setattr__(self, "group_id", str(self.group_id))
        object.__setattr__(self, "runs", runs)

    @property
    def num_observed(self):
        return sum(r.num_observed for r in self.runs)

    def scrambled(self, p):
        return Group(self.group_id, tuple(r.scrambled(p) for r in self.runs))


@dataclass(frozen=True)
class Dataset:
    """Groups sorted by id, each with runs sorted by id."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(sorted(self.groups, key=lambda g: g.group_id))
        ids = [g.group_id for g in groups]
        if len(set(ids)) != len(ids):
            raise IngestError("duplicate group ids")
        shapes = {g.runs[0].probs.shape[1:] for g in groups}
        if len(shapes) > 1:
            raise IngestError("groups disagree on channels/behaviours")
        object.__setattr__(self, "groups", groups)

    @property
    def num_channels(self):
        return self.groups[0].runs[0].num_channels

    @property
    def num_behaviours(self):
        return self.groups[0].runs[0].num_behaviours

    @property
    def num_observed(self):
        return sum(g.num_observed for g in self.groups)

    def dims(self, num_states):
        return Dims(num_states, self.num_channels, self.num_behaviours)

    def group(self, group_id):
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise KeyError(group_id)

    def iter_runs(self):
        for g in self.groups:
            for r in g.runs:
                yield g, r


@dataclass(frozen=True)
class PosteriorStats:
    """Posterior statistics of one run.

    ``gamma`` is (T, Z); ``eta`` is (T-1, Z, Z) with ``eta[t-1][i, j]`` the
    probability of moving from ``i`` at ``t-1`` to ``j`` at ``t``;
    ``log_normalisers`` holds ``log C`` per step, so the run log-likelihood is
    ``-log_normalisers.sum()``.
    """

    gamma: np.ndarray
    eta: np.ndarray
    log_normalisers: np.ndarray

    @property
    def loglik(self):
        return float(-np.sum(self.log_normalisers))


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "ok" if self.ok else "; ".join(self.violations)


def _check_prob_rows(name, arr, report, limit):
    neg = np.argwhere(arr < 0)
    for idx in neg:
        if len(report.violations) >= limit:
            return
        report.violations.append(f"{name}{list(idx)} negative entry {arr[tuple(idx)]!r}")
    sums = arr.sum(axis=-1)
    bad = np.argwhere(np.abs(np.atleast_1d(sums) - 1.0) > PROB_TOL)
    for idx in bad:
        if len(report.violations) >= limit:
            return
        where = f"{name}{list(idx)}" if arr.ndim > 1 else name
        report.violations.append(f"{where} sums to {float(np.atleast_1d(sums)[tuple(idx)])!r}")


def validate_params(params, dims, limit=10):
    """Check shapes, non-negativity and row sums of ``params``.

    Returns a :class:`ValidationReport` listing at most ``limit`` violations.
    """
    report = ValidationReport()
    Z, K, X = dims.num_states, dims.num_channels, dims.num_behaviours
    expected = {"pi": (Z,), "omega": (Z, Z), "psi": (K, Z, X), "xi": (dims.num_permutations,)}
    for name, shape in expected.items():
        arr = getattr(params, name)
        if arr.shape != shape:
            report.violations.append(f"{name} has shape {arr.shape}, expected {shape}")
    if report.violations:
        return report
    for name in expected:
        arr = getattr(params, name)
        if not np.all(np.isfinite(arr)):
            report.violations.append(f"{name} has non-finite entries")
            continue
        _check_prob_rows(name, arr, report, limit)
    report.violations = report.violations[:limit]
    return report


def steady_state(omega, tol=1e-12, max_iter=100_000):
    """Stationary distribution of a row-stochastic matrix by power iteration.

    Starts from the uniform vector and stops once ``max|s @ omega - s| < tol``.
    Raises :class:`NonConvergent` (with the last iterate attached) for chains
    that do not settle, e.g. periodic ones.
    """
    omega = np.asarray(omega, dtype=float)
    s = np.full(omega.shape[0], 1.0 / omega.shape[0])
    for _ in range(max_iter):
        nxt = s @ omega
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - s)) < tol:
            return nxt
        s = nxt
    raise NonConvergent(f"power iteration did not reach {tol} in {max_iter} steps", last=s)


def expected_dwell(omega, tol=1e-12):
    """Expected consecutive steps spent in each state, ``1 / (1 - omega_zz)``.

    States with ``omega_zz >= 1 - tol`` are absorbing and get ``inf``.
    """
    diag = np.diag(np.asarray(omega, dtype=float))
    with np.errstate(divide="ignore"):
        dwell = np.where(diag >= 1.0 - tol, np.inf, 1.0 / (1.0 - diag))
    if np.isinf(dwell).any():
        _log.warning("infinite dwell time for states %s", np.flatnonzero(np.isinf(dwell)).tolist())
    return dwell
