import json

import numpy as np
import pytest

from bayesil.architectures import build_model
from bayesil.data import gen_synthetic, split_shards, train_test_split
from bayesil.errors import ConsistencyError, FormatError
from bayesil.laplace import build_pretrained_prior
from bayesil.persistence import BLOB, MANIFEST, load_checkpoint, read_metrics, save_checkpoint, write_metrics
from bayesil.training import IncrementalLearner, StageMetrics, TrainConfig


@pytest.fixture(scope="module")
def task():
    train, test = train_test_split(gen_synthetic("blobs", 200, 3, 0.8, 0), 0.25, 0)
    return split_shards(train, 3, 0), test


def files(path):
    return (path / MANIFEST).read_bytes(), (path / BLOB).read_bytes()


@pytest.mark.parametrize("family", ["ft", "ffg", "mnf"])
def test_model_round_trip(tmp_path, family):
    model = build_model("mlp:2-6-3", family, 4)
    for p in model.parameters():
        p.data[...] = np.random.default_rng(1).standard_normal(p.shape)
    save_checkpoint(tmp_path / "a", model)
    loaded = load_checkpoint(tmp_path / "a").model
    assert loaded.describe() == model.describe()
    original = model.state_arrays()
    assert all(np.array_equal(v, original[k]) for k, v in loaded.state_arrays().items())


def test_conv_cfg_round_trip(tmp_path):
    arch = [{"type": "conv", "in": 1, "out": 2, "k": 3, "stride": 1, "pad": 1}, {"type": "flatten"}, {"type": "dense", "in": 32, "out": 3}]
    model = build_model(arch, "cfg", 2, (1, 4, 4))
    prior = model.snapshot()
    save_checkpoint(tmp_path / "c", model, prior)
    ck = load_checkpoint(tmp_path / "c")
    assert all(np.array_equal(v, prior.arrays()[k]) for k, v in ck.prior.arrays().items())
    assert ck.model.kl(ck.prior).item() == 0.0


def test_save_load_save_is_byte_identical(tmp_path, task):
    shards, test = task
    learner = IncrementalLearner(build_model("mlp:2-6-3", "mnf", 0), TrainConfig(epochs=2, batch_size=16, eval_samples=3))
    learner.fit(shards, test, stop_after=(2, 1))
    save_checkpoint(tmp_path / "one", learner.model, learner=learner, meta={"note": "x"})
    ck = load_checkpoint(tmp_path / "one")
    save_checkpoint(tmp_path / "two", ck.model, learner=ck.learner, meta=ck.meta)
    assert files(tmp_path / "one") == files(tmp_path / "two")


def test_prior_flags_survive(tmp_path):
    model = build_model("mlp:2-4-3", "mnf", 0)
    prior = build_pretrained_prior(model, build_model("mlp:2-4-3", "ft", 1).state_arrays(), 0.2)
    save_checkpoint(tmp_path / "p", model, prior)
    loaded = load_checkpoint(tmp_path / "p").prior
    assert loaded.fixed_analytic
    assert loaded.layers[0].flow.same_parameters(prior.layers[0].flow)
    assert all(np.array_equal(v, prior.arrays()[k]) for k, v in loaded.arrays().items())


def test_mnf_snapshot_round_trips_its_flow(tmp_path):
    model = build_model("mlp:2-4-3", "mnf", 3)
    snap = model.snapshot()
    save_checkpoint(tmp_path / "s", model, snap)
    loaded = load_checkpoint(tmp_path / "s").prior
    z = np.random.default_rng(0).standard_normal((4, 2))
    assert np.array_equal(loaded.layers[0].flow.log_density_at(z).data, snap.layers[0].flow.log_density_at(z).data)


def test_manifest_length_flip_is_detected(tmp_path):
    save_checkpoint(tmp_path / "m", build_model("mlp:2-4-3", "ffg", 0))
    manifest = json.loads((tmp_path / "m" / MANIFEST).read_text())
    manifest["arrays"][1]["nbytes"] += 8
    (tmp_path / "m" / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(ConsistencyError):
        load_checkpoint(tmp_path / "m")


def test_truncated_blob_is_detected(tmp_path):
    save_checkpoint(tmp_path / "t", build_model("mlp:2-4-3", "ffg", 0))
    blob = tmp_path / "t" / BLOB
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ConsistencyError):
        load_checkpoint(tmp_path / "t")


def test_offset_tampering_is_detected(tmp_path):
    save_checkpoint(tmp_path / "o", build_model("mlp:2-4-3", "ffg", 0))
    manifest = json.loads((tmp_path / "o" / MANIFEST).read_text())
    manifest["arrays"][0]["offset"] = 8
    (tmp_path / "o" / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(ConsistencyError):
        load_checkpoint(tmp_path / "o")


def test_version_mismatch(tmp_path):
    save_checkpoint(tmp_path / "v", build_model("mlp:2-4-3", "ft", 0))
    manifest = json.loads((tmp_path / "v" / MANIFEST).read_text())
    manifest["format_version"] = 99
    (tmp_path / "v" / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "v")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")


def test_no_temp_files_left_behind(tmp_path):
    save_checkpoint(tmp_path / "clean", build_model("mlp:2-4-3", "ft", 0))
    assert sorted(p.name for p in (tmp_path / "clean").iterdir()) == [MANIFEST, BLOB]


@pytest.mark.parametrize("family", ["ffg", "mnf"])
@pytest.mark.parametrize("pause", [(1, 1), (2, 2), (3, 1)])
def test_resume_is_bitwise_identical(tmp_path, task, family, pause):
    shards, test = task
    config = TrainConfig(epochs=2, batch_size=16, seed=5, eval_samples=3)
    whole = IncrementalLearner(build_model("mlp:2-6-3", family, 0), config)
    whole.fit(shards, test)

    first = IncrementalLearner(build_model("mlp:2-6-3", family, 0), config)
    first.fit(shards, test, stop_after=pause)
    save_checkpoint(tmp_path / "ck", first.model, learner=first)
    resumed = load_checkpoint(tmp_path / "ck").learner
    resumed.fit(shards, test)

    assert [m.to_dict() for m in resumed.metrics] == [m.to_dict() for m in whole.metrics]
    final = whole.model.state_arrays()
    assert all(np.array_equal(v, final[k]) for k, v in resumed.model.state_arrays().items())


# ---------------------------------------------------------------- metrics files


def metrics_fixture():
    a = StageMetrics(1, 0.05, [-10.123456789123, -9.5], [-9.0, -8.9], [22.4, 12.0], 0.8125, 0.51234567891)
    b = StageMetrics(2, 0.05, [-7.25], [-7.0], [5.0], 0.875, 0.4)
    return [a, b]


def test_single_record_csv_is_two_lines(tmp_path):
    m = StageMetrics(1, 1.0, [-1.5], [-1.0], [0.5], 0.5, 0.7)
    text = write_metrics([m], tmp_path / "m.csv").read_text()
    lines = text.splitlines()
    assert lines == ["stage,epoch,elbo,data_term,kl_term,test_accuracy,test_nll", "1,1,-1.5,-1,0.5,0.5,0.7"]


def test_csv_and_json_parse_to_the_same_records(tmp_path):
    csv_rows = read_metrics(write_metrics(metrics_fixture(), tmp_path / "m.csv"))
    json_rows = read_metrics(write_metrics(metrics_fixture(), tmp_path / "m.json"))
    assert csv_rows == json_rows
    assert csv_rows[0]["elbo"] == -10.1234568
    assert csv_rows[0]["test_accuracy"] is None and csv_rows[1]["test_accuracy"] == 0.8125


def test_stage_column_is_nondecreasing(tmp_path):
    stages = [r["stage"] for r in read_metrics(write_metrics(metrics_fixture(), tmp_path / "m.csv"))]
    assert stages == sorted(stages) == [1, 1, 2]


def test_config_sidecar(tmp_path):
    path = write_metrics(metrics_fixture(), tmp_path / "m.csv", config={"kl_scale": 0.05, "T": 2})
    assert json.loads((tmp_path / "m.csv.config.json").read_text()) == {"T": 2, "kl_scale": 0.05}
    assert path.name == "m.csv"


def test_metrics_errors(tmp_path):
    with pytest.raises(ValueError):
        write_metrics([], tmp_path / "e.csv")
    with pytest.raises(ValueError):
        write_metrics(metrics_fixture(), tmp_path / "e.txt", fmt="xml")
    with pytest.raises(OSError):
        write_metrics(metrics_fixture(), tmp_path / "missing" / "m.csv")
