"""Command-line interface: ``gbm {fit,score,cv,anomaly,export,simulate}``.

Exit codes: 0 success, 1 input or usage error, 2 fit written but not
converged. ``GBM_THREADS`` and ``GBM_SEED`` override the thread count and
the manifest's RNG seed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as gio
from .core import Dims, GBMError, ModelParams, expected_dwell, steady_state
from .evaluation import anomaly_scores, normalised_ll, select_num_states
from .em import fit_global
from .inference import default_threads, forward_backward, map_permutation
from .synth import SynthSpec, random_params, sample_dataset

_log = logging.getLogger("gbm")


class UsageError(GBMError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads(args):
    return args.threads if args.threads is not None else default_threads()


def _check_dims(doc_dims, dataset):
    if (doc_dims.num_channels, doc_dims.num_behaviours) != (dataset.num_channels, dataset.num_behaviours):
        raise UsageError(
            f"model has K={doc_dims.num_channels}, X={doc_dims.num_behaviours} but data has "
            f"K={dataset.num_channels}, X={dataset.num_behaviours}")


def _perm_rows(perms):
    return [(g, q.index, " ".join(map(str, q.word))) for g, q in sorted(perms.items())]


def cmd_fit(args):
    manifest = gio.read_manifest(args.manifest)
    dataset = gio.read_dataset(manifest.data_path)
    dims = dataset.dims(manifest.num_states)
    for name, want, got in (("num_channels", manifest.num_channels, dims.num_channels),
                            ("num_behaviours", manifest.num_behaviours, dims.num_behaviours)):
        if want is not None and want != got:
            raise UsageError(f"manifest {name}={want} but data has {got}")
    config = dataclasses.replace(manifest.config, threads=_threads(args))
    result = fit_global(dataset, dims, config)
    out = manifest.outputs
    base = manifest.source.parent
    model_path = out.get("model", base / "model.json")
    meta = {"seed": config.rng_seed, "source_command": f"gbm fit {manifest.source.name}"}
    gio.save_model(gio.fit_document(result, config.priors_for(dims), config, meta), model_path)
    gio.write_csv(out.get("ll_trace", base / "ll_trace.csv"), ["iteration", "ll"],
                  list(enumerate(result.ll_trace)))
    gio.write_csv(out.get("permutations", base / "permutations.csv"),
                  ["group_id", "index", "word"], _perm_rows(result.permutations))
    if not result.converged:
        print(f"not converged after {config.max_iters} iterations; results written", file=sys.stderr)
        return 2
    print(f"converged: ll={result.final_ll!r} seed_group={result.seed_group}")
    return 0


SCORE_HEADER = ["scope", "group_id", "run_id", "ll_total", "n_units", "ll_normalised"]


def _score_rows(params, dataset, per_group, per_run, threads):
    rows = []
    perms = {g.group_id: map_permutation(params, g)[0] for g in dataset.groups}
    if not per_group and not per_run:
        rep = normalised_ll(params, dataset, perms, threads=threads)
        rows.append(("all", "", "", rep.ll_total, rep.n_units, rep.ll_normalised))
    for g in dataset.groups:
        if per_group:
            rep = normalised_ll(params, g, perms, threads=threads)
            rows.append(("group", g.group_id, "", rep.ll_total, rep.n_units, rep.ll_normalised))
        if per_run:
            for r in g.runs:
                sub = type(g)(g.group_id, (r,))
                rep = normalised_ll(params, sub, perms, threads=threads)
                rows.append(("run", g.group_id, r.run_id, rep.ll_total, rep.n_units, rep.ll_normalised))
    return rows


def cmd_score(args):
    doc = gio.load_model(args.model)
    dataset = gio.read_dataset(args.data)
    _check_dims(doc.dims, dataset)
    rows = _score_rows(doc.params, dataset, args.per_group, args.per_run, _threads(args))
    _emit(args.output, SCORE_HEADER, rows)
    return 0


def _parse_range(text):
    try:
        a, b = text.split("..")
        a, b = int(a), int(b)
    except ValueError:
        raise UsageError(f"malformed range {text!r}; expected a..b") from None
    if a < 1 or b < a:
        raise UsageError(f"malformed range {text!r}; need 1 <= a <= b")
    return range(a, b + 1)


def cmd_cv(args):
    zs = _parse_range(args.z_range)
    manifest = gio.read_manifest(args.manifest)
    dataset = gio.read_dataset(manifest.data_path)
    config = dataclasses.replace(manifest.config, threads=_threads(args))
    sel = select_num_states(dataset, zs, config)
    _emit(args.output, ["z", "seed", "fold", "ll"], sel.rows)
    for z, m in sel.mean.items():
        _log.info("z=%d mean held-out L=%.6f", z, m)
    return 0


def cmd_anomaly(args):
    doc = gio.load_model(args.model)
    normal = gio.read_dataset(args.normal)
    other = gio.read_dataset(args.other)
    _check_dims(doc.dims, normal)
    _check_dims(doc.dims, other)
    rep = anomaly_scores(doc.params, normal, other, per_run=args.per_run)
    rows = [(label, gid, rid or "", r.ll_total, r.n_units, r.ll_normalised)
            for label, gid, rid, r in rep.scores]
    _emit(args.scores, ["label", "group_id", "run_id", "ll_total", "n_units", "ll_normalised"], rows)
    text = json.dumps(rep.summary(), indent=1)
    if args.summary:
        Path(args.summary).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def params_rows(params):
    rows = [("pi", "", z, "", v) for z, v in enumerate(params.pi)]
    Z = params.pi.shape[0]
    rows += [("omega", "", i, j, params.omega[i, j]) for i in range(Z) for j in range(Z)]
    K, _, X = params.psi.shape
    rows += [("psi", k, z, x, params.psi[k, z, x])
             for k in range(K) for z in range(Z) for x in range(X)]
    rows += [("xi", "", q, "", v) for q, v in enumerate(params.xi)]
    return rows


def read_params_csv(path):
    """Inverse of ``gbm export --what params``."""
    entries = {"pi": {}, "omega": {}, "psi": {}, "xi": {}}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = tuple(int(row[c]) for c in ("channel", "row", "col") if row[c] != "")
            entries[row["param"]][key] = float(row["value"])

    def build(d):
        shape = tuple(max(k[i] for k in d) + 1 for i in range(len(next(iter(d)))))
        a = np.zeros(shape)
        for k, v in d.items():
            a[k] = v
        return a

    return ModelParams(pi=build(entries["pi"]), omega=build(entries["omega"]),
                       psi=build(entries["psi"]), xi=build(entries["xi"]))


def _ethogram_rows(params, permutations, dataset):
    K, Z, X = params.psi.shape
    header = (["group_id", "run_id", "t"] + [f"gamma_{z}" for z in range(Z)]
              + [f"obs_c{k}_x{x}" for k in range(K) for x in range(X)])
    rows = []
    for g in dataset.groups:
        q = permutations.get(g.group_id) or map_permutation(params, g)[0]
        for run in g.runs:
            canon = run.permuted(q)
            stats, _ = forward_backward(params, canon)
            for t in range(canon.length):
                obs = []
                for k in range(K):
                    obs += [""] * X if canon.missing[t, k] else list(canon.probs[t, k])
                rows.append([g.group_id, run.run_id, t] + list(stats.gamma[t]) + obs)
    return header, rows


def cmd_export(args):
    doc = gio.load_model(args.model)
    p = doc.params
    if args.what == "params":
        _emit(args.output, ["param", "channel", "row", "col", "value"], params_rows(p))
    elif args.what == "steady":
        s = steady_state(p.omega)
        d = expected_dwell(p.omega)
        _emit(args.output, ["state", "steady_state", "dwell"],
              [(z, s[z], d[z]) for z in range(len(s))])
    else:
        if not args.data:
            raise UsageError("--what ethogram requires --data")
        dataset = gio.read_dataset(args.data)
        _check_dims(doc.dims, dataset)
        header, rows = _ethogram_rows(p, doc.permutations, dataset)
        _emit(args.output, header, rows)
    return 0


def cmd_simulate(args):
    if args.model:
        params = gio.load_model(args.model).params
    else:
        if None in (args.states, args.channels, args.behaviours):
            raise UsageError("give --model or all of --states, --channels, --behaviours")
        dims = Dims(args.states, args.channels, args.behaviours)
        params = random_params(dims, np.random.default_rng(args.seed), args.stickiness)
    spec = SynthSpec(params, args.groups, args.runs, args.length, args.scramble_seed,
                     args.missing_rate, args.soft, args.seed)
    dataset, truth = sample_dataset(spec)
    gio.write_dataset(dataset, args.output)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth.to_dict()) + "\n", encoding="utf-8")
    if args.model_out:
        gio.save_model(gio.ModelDocument(params, meta={"seed": args.seed,
                                                       "source_command": "gbm simulate"}),
                       args.model_out)
    return 0


def _emit(path, header, rows):
    if path and path != "-":
        gio.write_csv(path, header, rows)
    else:
        sys.stdout.write(gio.csv_text(header, rows))


def build_parser():
    p = _Parser(prog="gbm", description="Group Behaviour Model tools")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $GBM_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit", help="fit a global model from a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("score", help="normalised log-likelihood of data under a model")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--per-group", action="store_true")
    s.add_argument("--per-run", action="store_true")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("cv", help="cross-validated sweep over the number of states")
    s.add_argument("manifest")
    s.add_argument("--z-range", required=True, help="a..b inclusive")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("anomaly", help="score two datasets and compare them")
    s.add_argument("model")
    s.add_argument("normal")
    s.add_argument("other")
    s.add_argument("--scores")
    s.add_argument("--summary")
    s.add_argument("--per-run", action="store_true")
    s.set_defaults(func=cmd_anomaly)

    s = sub.add_parser("export", help="export parameters, steady state or ethograms")
    s.add_argument("model")
    s.add_argument("--what", choices=("params", "steady", "ethogram"), default="params")
    s.add_argument("--data")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("simulate", help="sample a synthetic dataset")
    s.add_argument("--model")
    s.add_argument("--states", type=int)
    s.add_argument("--channels", type=int)
    s.add_argument("--behaviours", type=int)
    s.add_argument("--stickiness", type=float, default=0.9)
    s.add_argument("--groups", type=int, default=4)
    s.add_argument("--runs", type=int, default=2)
    s.add_argument("--length", type=int, default=500)
    s.add_argument("--scramble-seed", type=int)
    s.add_argument("--missing-rate", type=float, default=0.0)
    s.add_argument("--soft", type=float, help="Dirichlet concentration for soft observations")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--truth", help="ground-truth sidecar JSON")
    s.add_argument("--model-out", help="write the generating model JSON")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GBMError, ValueError, OSError) as exc:
        print(f"gbm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
