import json

import numpy as np
import pytest

from longtail import metaengine, nets, persist
from longtail.space import Genotype

from conftest import tiny_arch, toy_space


def _same_params(a, b):
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].dtype == b.params[k].dtype
        assert a.params[k].tobytes() == b.params[k].tobytes()


@pytest.mark.parametrize("kind", ["recurrent", "attention", "searched"])
def test_artifact_round_trip_is_bit_exact(tmp_path, kind, tiny_scenarios):
    kw = {"genotype": Genotype.from_decisions(toy_space(), (1, 0, 1, 2, 1, 0, 1)), "n_encoder_layers": 2} if kind == "searched" else {}
    art = nets.train_model(nets.build_model(tiny_arch(kind, **kw), 0), tiny_scenarios[0], nets.TrainConfig(0.01, 32, 1, 0))
    back = persist.load_artifact(persist.save_artifact(art, tmp_path / "a"))
    _same_params(art, back)
    assert back.arch == art.arch
    assert back.history == art.history
    assert back.provenance == json.loads(json.dumps(art.provenance))
    assert np.array_equal(nets.predict(back, tiny_scenarios[0]), nets.predict(art, tiny_scenarios[0]))


def test_manifest_layout(tmp_path):
    path = persist.write_bundle(tmp_path / "b", "demo", {"b": np.arange(3, dtype=np.int16), "a": np.ones((2, 2))}, {"k": 1})
    manifest = json.loads((path / persist.MANIFEST).read_text())
    assert manifest["format"] == "demo" and manifest["version"] == persist.FORMAT_VERSION
    assert [e["name"] for e in manifest["arrays"]] == ["a", "b"]
    assert manifest["arrays"][1]["offset"] == 32 and manifest["size"] == 38
    arrays, meta = persist.read_bundle(path, "demo")
    assert arrays["b"].dtype == np.int16 and meta == {"k": 1}


def test_corrupted_blob_detected(tmp_path):
    art = nets.build_model(tiny_arch("recurrent"), 0)
    path = persist.save_artifact(art, tmp_path / "a")
    blob = bytearray((path / persist.BLOB).read_bytes())
    blob[10] ^= 0xFF
    (path / persist.BLOB).write_bytes(bytes(blob))
    with pytest.raises(persist.ChecksumError):
        persist.load_artifact(path)


def test_wrong_format_or_version_rejected(tmp_path):
    art = nets.build_model(tiny_arch("recurrent"), 0)
    path = persist.save_artifact(art, tmp_path / "a")
    with pytest.raises(persist.FormatError, match="scenario-dataset"):
        persist.load_dataset(path)
    manifest = json.loads((path / persist.MANIFEST).read_text())
    manifest["version"] = 99
    (path / persist.MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(persist.FormatError, match="version 99"):
        persist.load_artifact(path)
    with pytest.raises(FileNotFoundError):
        persist.load_artifact(tmp_path / "missing")


def test_universe_round_trip(tmp_path, tiny_scenarios):
    from conftest import tiny_universe

    persist.save_universe(tiny_scenarios, tmp_path / "u", tiny_universe(), 0)
    back = persist.load_universe(tmp_path / "u")
    assert [d.scenario_id for d in back] == [d.scenario_id for d in tiny_scenarios]
    for a, b in zip(tiny_scenarios, back):
        for f in ("profiles", "sequences", "seq_mask", "labels", "partition"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert b.seed == a.seed and b.counts() == a.counts()
    index = json.loads((tmp_path / "u" / "universe.json").read_text())
    assert index["seed"] == 0 and index["universe"]["n_scenarios"] == 3


def test_meta_state_round_trip(tmp_path, tiny_scenarios):
    state = metaengine.MetaState(nets.build_model(tiny_arch("attention"), 0), gamma=0.04, staleness_bound=2, seed=3)
    for ds in tiny_scenarios[:2]:
        state = metaengine.archive_scenario(state, ds)
    _, packet = metaengine.fine_tune(state, tiny_scenarios[2])
    state = metaengine.meta_update(state, [packet])
    back = persist.load_meta_state(persist.save_meta_state(state, tmp_path / "m"))
    _same_params(state.agnostic, back.agnostic)
    assert back.metadata() == state.metadata()
    assert back.version == 1 and back.archive_ids == (0, 1)
    for a, b in zip(state.archive, back.archive):
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()
    # the restored state keeps working
    t1, p1 = metaengine.fine_tune(state, tiny_scenarios[2])
    t2, p2 = metaengine.fine_tune(back, tiny_scenarios[2])
    _same_params(t1, t2)


def test_meta_state_directory_checked(tmp_path, tiny_scenarios):
    state = metaengine.MetaState(nets.build_model(tiny_arch("attention"), 0))
    path = persist.save_meta_state(state, tmp_path / "m")
    doc = json.loads((path / "state.json").read_text())
    doc["format"] = "other"
    (path / "state.json").write_text(json.dumps(doc))
    with pytest.raises(persist.FormatError):
        persist.load_meta_state(path)
