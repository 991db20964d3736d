"""File formats: observation CSV, model JSON and run manifests.

Observation CSV columns are ``group_id, run_id, t, channel, missing,
p_0 .. p_{X-1}``; ``t`` and ``channel`` are 0-based. Files ending in ``.gz``
are read and written through gzip.
"""
from __future__ import annotations

import configparser
import csv
import gzip
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (INGEST_TOL, Dataset, Dims, Group, IngestError, ModelParams,
                   Permutation, Priors, Run)
from .em import FitConfig

__all__ = ["read_dataset", "write_dataset", "save_model", "load_model", "ModelDocument",
           "RunManifest", "read_manifest", "fit_document"]

BASE_COLUMNS = ["group_id", "run_id", "t", "channel", "missing"]


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        if "b" in mode:
            return gzip.open(path, mode)
        return gzip.open(path, mode + "t", newline="", encoding="utf-8")
    return open(path, mode, newline="", encoding="utf-8")


def _fmt(x):
    return repr(float(x))


def read_dataset(path, tol=INGEST_TOL):
    """Parse an observation CSV into a :class:`Dataset`.

    Raises :class:`IngestError` naming the offending line for duplicate keys,
    gaps in ``t``, inconsistent channel counts and probability vectors that
    do not sum to 1 within ``tol``.
    """
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: no runs found")
        header = [h.strip() for h in header]
        if header[:5] != BASE_COLUMNS:
            raise IngestError(f"{path}:1: header must start with {','.join(BASE_COLUMNS)}")
        pcols = header[5:]
        if not pcols or pcols != [f"p_{i}" for i in range(len(pcols))]:
            raise IngestError(f"{path}:1: probability columns must be p_0..p_{{X-1}}")
        X = len(pcols)
        runs = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            gid, rid = row[0], row[1]
            try:
                t, k, miss = int(row[2]), int(row[3]), int(row[4])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: t, channel and missing must be integers") from None
            if t < 0 or k < 0 or miss not in (0, 1):
                raise IngestError(f"{path}:{lineno}: invalid t/channel/missing value")
            if miss:
                p = None
            else:
                try:
                    p = np.array([float(v) for v in row[5:]])
                except ValueError:
                    raise IngestError(f"{path}:{lineno}: probabilities must be decimals") from None
                if not np.all(np.isfinite(p)) or np.any(p < 0):
                    raise IngestError(f"{path}:{lineno}: probabilities must be finite and >= 0")
                s = p.sum()
                if abs(s - 1.0) > tol:
                    raise IngestError(f"{path}:{lineno}: probabilities sum to {s!r}, not 1")
                p = p / s
            cells = runs.setdefault((gid, rid), {})
            if (t, k) in cells:
                raise IngestError(
                    f"{path}:{lineno}: duplicate key (group={gid}, run={rid}, t={t}, channel={k}), "
                    f"first seen on line {cells[(t, k)][0]}")
            cells[(t, k)] = (lineno, p)
    if not runs:
        raise IngestError(f"{path}: no runs found")

    K = None
    groups = {}
    for (gid, rid), cells in runs.items():
        by_t = {}
        for (t, k), (lineno, p) in cells.items():
            by_t.setdefault(t, {})[k] = (lineno, p)
        T = max(by_t) + 1
        for t in range(T):
            if t not in by_t:
                nxt = min(tt for tt in by_t if tt > t)
                line = min(ln for ln, _ in by_t[nxt].values())
                raise IngestError(f"{path}:{line}: gap in t for group={gid} run={rid}: t={t} missing")
            chans = by_t[t]
            if K is None:
                K = max(chans) + 1
            if sorted(chans) != list(range(K)):
                line = min(ln for ln, _ in chans.values())
                raise IngestError(
                    f"{path}:{line}: group={gid} run={rid} t={t} has channels {sorted(chans)}, "
                    f"expected 0..{K - 1}")
        probs = np.zeros((T, K, X))
        missing = np.zeros((T, K), dtype=bool)
        for (t, k), (_, p) in cells.items():
            if p is None:
                missing[t, k] = True
            else:
                probs[t, k] = p
        groups.setdefault(gid, []).append(Run(rid, probs, missing))
    return Dataset(tuple(Group(g, tuple(rs)) for g, rs in groups.items()))


def write_dataset(dataset, path):
    """Write ``dataset`` as an observation CSV (rows in sorted order)."""
    X = dataset.num_behaviours
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASE_COLUMNS + [f"p_{i}" for i in range(X)])
        for g, run in dataset.iter_runs():
            for t in range(run.length):
                for k in range(run.num_channels):
                    if run.missing[t, k]:
                        w.writerow([g.group_id, run.run_id, t, k, 1] + [""] * X)
                    else:
                        w.writerow([g.group_id, run.run_id, t, k, 0] + [_fmt(v) for v in run.probs[t, k]])


@dataclass
class ModelDocument:
    params: ModelParams
    priors: Priors | None = None
    permutations: dict = field(default_factory=dict)
    ll_trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    converged: bool | None = None
    seed_group: str | None = None

    @property
    def dims(self):
        return self.params.dims


def fit_document(result, priors, config, meta=None):
    """Bundle a :class:`~gbm.em.FitResult` for :func:`save_model`."""
    return ModelDocument(result.params, priors, dict(result.permutations), list(result.ll_trace),
                         config.to_dict(), dict(meta or {}), result.converged, result.seed_group)


def _document_dict(doc):
    d = doc.dims
    out = {
        "dims": {"num_states": d.num_states, "num_channels": d.num_channels,
                 "num_behaviours": d.num_behaviours},
        **doc.params.to_dict(),
        "priors": doc.priors.to_dict() if doc.priors is not None else None,
        "meta": {"created": None, "seed": None, "source_command": None, **doc.meta},
    }
    if doc.permutations:
        out["permutations"] = {g: q.index for g, q in sorted(doc.permutations.items())}
        out["ll_trace"] = [float(v) for v in doc.ll_trace]
        out["converged"] = doc.converged
        out["seed_group"] = doc.seed_group
        out["config"] = doc.config
    return out


def save_model(doc, path):
    """Write a model document as JSON (floats in shortest round-trip form)."""
    text = json.dumps(_document_dict(doc), indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    params = ModelParams.from_dict(d)
    dims = Dims(**d["dims"])
    if params.dims != dims:
        raise IngestError(f"{path}: array shapes disagree with dims")
    priors = Priors.from_dict(d["priors"]) if d.get("priors") else None
    perms = {g: Permutation.from_index(dims.num_channels, int(i))
             for g, i in d.get("permutations", {}).items()}
    return ModelDocument(params, priors, perms, d.get("ll_trace", []), d.get("config", {}),
                         d.get("meta", {}), d.get("converged"), d.get("seed_group"))


@dataclass
class RunManifest:
    """Parsed INI manifest; relative paths resolve against its directory."""

    data_path: Path
    num_states: int
    config: FitConfig
    outputs: dict
    num_channels: int | None = None
    num_behaviours: int | None = None
    source: Path | None = None


def read_manifest(path, env=os.environ):
    """Read an INI manifest.

    Sections: ``[data] path``; ``[model] num_states`` (plus optional
    ``num_channels``/``num_behaviours``); ``[priors] alpha_pi, alpha_omega,
    alpha_psi``; ``[fit] tolerance, max_iters, restart_policy, seed_group,
    rng_seed, n_init``; ``[output] model, ll_trace, permutations``.
    ``GBM_SEED`` in ``env`` overrides ``rng_seed``.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"manifest {path} does not exist")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise IngestError(f"{path}: {exc}") from None
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        data_path = resolve(cp.get("data", "path"))
        num_states = cp.getint("model", "num_states")
        fit = cp["fit"] if cp.has_section("fit") else {}
        pri = cp["priors"] if cp.has_section("priors") else {}
        seed = int(env.get("GBM_SEED", fit.get("rng_seed", "0")))
        config = FitConfig(
            tolerance=float(fit.get("tolerance", "1e-4")),
            max_iters=int(fit.get("max_iters", "500")),
            prior_pi=float(pri.get("alpha_pi", "1.5")),
            prior_omega=float(pri.get("alpha_omega", "1.5")),
            prior_psi=float(pri.get("alpha_psi", "1.1")),
            restart_policy=fit.get("restart_policy", "each"),
            seed_group=fit.get("seed_group") or None,
            rng_seed=seed,
            n_init=int(fit.get("n_init", "1")),
        )
        outputs = {}
        if cp.has_section("output"):
            outputs = {k: resolve(v) for k, v in cp["output"].items()}
        model_sec = cp["model"]
        nk = model_sec.get("num_channels")
        nx = model_sec.get("num_behaviours")
    except (configparser.Error, KeyError, ValueError) as exc:
        raise IngestError(f"{path}: {exc}") from None
    if not data_path.exists():
        raise IngestError(f"{path}: data file {data_path} does not exist")
    for name, p in outputs.items():
        if not p.parent.exists():
            raise IngestError(f"{path}: output directory for {name} ({p.parent}) does not exist")
    return RunManifest(data_path, num_states, config, outputs,
                       int(nk) if nk else None, int(nx) if nx else None, path)


def write_csv(path, header, rows):
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()
