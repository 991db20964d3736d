import gzip
import json

import numpy as np
import pytest
from conftest import separated_params

from gbm.core import Dims, IngestError, ModelParams, Priors
from gbm.em import FitConfig, fit_global
from gbm.io import (ModelDocument, fit_document, load_model, read_dataset, read_manifest,
                    save_model, write_dataset)
from gbm.synth import SynthSpec, random_params, sample_dataset

HEADER = "group_id,run_id,t,channel,missing,p_0,p_1,p_2\n"


def _write(path, body, header=HEADER):
    path.write_text(header + body, encoding="utf-8")
    return path


def _sample(seed=0, **kw):
    params = random_params(Dims(2, 2, 4), np.random.default_rng(seed))
    spec = dict(num_groups=2, runs_per_group=2, run_length=30, scramble_seed=1, missing_rate=0.2,
                concentration=3.0, rng_seed=seed)
    spec.update(kw)
    return sample_dataset(SynthSpec(params, **spec))[0]


@pytest.mark.parametrize("name", ["d.csv", "d.csv.gz"])
def test_dataset_roundtrip(tmp_path, name):
    ds = _sample()
    write_dataset(ds, tmp_path / name)
    back = read_dataset(tmp_path / name)
    assert [g.group_id for g in back.groups] == [g.group_id for g in ds.groups]
    for (g0, r0), (g1, r1) in zip(ds.iter_runs(), back.iter_runs()):
        assert r0.run_id == r1.run_id
        np.testing.assert_array_equal(r0.missing, r1.missing)
        np.testing.assert_allclose(r0.probs, r1.probs, rtol=0, atol=1e-15)


def test_gzip_is_really_compressed(tmp_path):
    write_dataset(_sample(), tmp_path / "d.csv.gz")
    with gzip.open(tmp_path / "d.csv.gz", "rt") as fh:
        assert fh.readline().startswith("group_id,run_id,t,channel,missing,p_0")


def test_ingest_renormalises_small_errors(tmp_path):
    p = _write(tmp_path / "a.csv", "g,r,0,0,0,0.2,0.3,0.5000004\n")
    run = read_dataset(p).groups[0].runs[0]
    assert run.probs[0, 0].sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("body,line,text", [
    ("g,r,0,0,0,0.2,0.3,0.6\n", 2, "sum"),
    ("g,r,0,0,0,1,0,0\ng,r,0,0,0,0,1,0\n", 3, "duplicate"),
    ("g,r,0,0,0,1,0,0\ng,r,2,0,0,1,0,0\n", 3, "gap"),
    ("g,r,0,0,0,1,0,0\ng,r,0,1,0,1,0,0\ng,r,1,0,0,1,0,0\n", 4, "channels"),
    ("g,r,0,0,0,1,0\n", 2, "fields"),
    ("g,r,x,0,0,1,0,0\n", 2, "integers"),
    ("g,r,0,0,0,1.5,-0.5,0\n", 2, ">= 0"),
])
def test_ingest_errors_name_the_line(tmp_path, body, line, text):
    p = _write(tmp_path / "bad.csv", body)
    with pytest.raises(IngestError) as info:
        read_dataset(p)
    assert f"bad.csv:{line}:" in str(info.value) and text in str(info.value)


def test_ingest_empty_and_header_only(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(IngestError, match="no runs found"):
        read_dataset(tmp_path / "e.csv")
    _write(tmp_path / "h.csv", "")
    with pytest.raises(IngestError, match="no runs found"):
        read_dataset(tmp_path / "h.csv")
    _write(tmp_path / "b.csv", "", header="a,b,c\n")
    with pytest.raises(IngestError, match=":1:"):
        read_dataset(tmp_path / "b.csv")


def test_missing_rows_have_empty_probabilities(tmp_path):
    p = _write(tmp_path / "m.csv", "g,r,0,0,1,,,\ng,r,1,0,0,0,0,1\n")
    run = read_dataset(p).groups[0].runs[0]
    assert run.missing[0, 0] and not run.missing[1, 0]


def test_model_roundtrip_is_exact(tmp_path):
    params = random_params(Dims(3, 2, 5), np.random.default_rng(1))
    doc = ModelDocument(params, Priors.symmetric(params.dims))
    save_model(doc, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    for name in ("pi", "omega", "psi", "xi"):
        assert getattr(back.params, name).tobytes() == getattr(params, name).tobytes()
    np.testing.assert_array_equal(back.priors.alpha_psi, doc.priors.alpha_psi)
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["meta"]["created"] is None
    assert d["dims"] == {"num_states": 3, "num_channels": 2, "num_behaviours": 5}


def test_fit_document_roundtrip(tmp_path):
    truth = separated_params(Z=2, K=2)
    ds, _ = sample_dataset(SynthSpec(truth, 2, 1, 200, scramble_seed=0))
    cfg = FitConfig()
    res = fit_global(ds, truth.dims, cfg)
    save_model(fit_document(res, cfg.priors_for(truth.dims), cfg, {"seed": 0}), tmp_path / "f.json")
    back = load_model(tmp_path / "f.json")
    assert back.permutations == res.permutations
    assert back.ll_trace == res.ll_trace
    assert back.converged == res.converged and back.config["tolerance"] == 1e-4


def test_load_rejects_inconsistent_dims(tmp_path):
    params = ModelParams.uniform(Dims(2, 1, 3))
    save_model(ModelDocument(params), tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["dims"]["num_states"] = 3
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(IngestError):
        load_model(tmp_path / "m.json")


def test_manifest_parsing(tmp_path):
    write_dataset(_sample(), tmp_path / "d.csv")
    (tmp_path / "out").mkdir()
    (tmp_path / "run.ini").write_text(
        "[data]\npath = d.csv\n[model]\nnum_states = 4\n[priors]\nalpha_psi = 1.0\n"
        "[fit]\ntolerance = 1e-6\nrestart_policy = single\nrng_seed = 5\n"
        "[output]\nmodel = out/m.json\n")
    m = read_manifest(tmp_path / "run.ini", env={})
    assert m.num_states == 4 and m.data_path == tmp_path / "d.csv"
    assert m.config.tolerance == 1e-6 and m.config.prior_psi == 1.0
    assert m.config.restart_policy == "single" and m.config.rng_seed == 5
    assert m.outputs["model"] == tmp_path / "out" / "m.json"
    assert read_manifest(tmp_path / "run.ini", env={"GBM_SEED": "9"}).config.rng_seed == 9


def test_manifest_errors(tmp_path):
    with pytest.raises(IngestError, match="does not exist"):
        read_manifest(tmp_path / "nope.ini")
    (tmp_path / "a.ini").write_text("[data]\npath = missing.csv\n[model]\nnum_states = 2\n")
    with pytest.raises(IngestError, match="data file"):
        read_manifest(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[model]\nnum_states = 2\n")
    with pytest.raises(IngestError):
        read_manifest(tmp_path / "b.ini")
