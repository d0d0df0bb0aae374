import json

import numpy as np
import pytest

from bsnet import synthcxr, training
from bsnet.network import BSNet, ModelConfig
from bsnet.tensor import ContractError
from bsnet.training import Checkpoint, CheckpointError, TrainConfig

SIZE = 32


def data(n, seed):
    return training.prepare(synthcxr.make_samples(n, seed, SIZE), SIZE)


def cfg(stage, **kw):
    base = dict(stage=stage, epochs=1, batch_size=8, input_size=SIZE, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny():
    return data(16, 1), data(8, 2)


@pytest.fixture(scope="module")
def pipeline():
    """Segmentation -> alignment -> scoring on 200 phantoms at 32 px.

    The default rate collapses the tiny 32 px decoder onto an all-lung mask, so
    segmentation here runs at 1e-3.
    """
    train, val = data(200, 3), data(40, 4)
    seg = training.train_segmentation(train, val, cfg("segmentation", epochs=3, lr=1e-3))
    ali = training.train_alignment(train, val, cfg("alignment"), seg.checkpoint)
    sco = training.train_scoring(train, val, cfg("scoring", epochs=3), ali.checkpoint)
    return train, val, seg, ali, sco


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert c.learning_rate == pytest.approx(3e-3)
    assert TrainConfig(stage="finetune").learning_rate == pytest.approx(3e-4)
    assert TrainConfig(lr=0.01).learning_rate == 0.01
    with pytest.raises(ContractError):
        TrainConfig(stage="pretrain")
    with pytest.raises(ContractError):
        TrainConfig(epochs=0)
    with pytest.raises(ContractError):
        TrainConfig(alpha=2)


def test_checkpoint_roundtrip(tmp_path):
    m = BSNet(ModelConfig(input_size=SIZE, seed=5))
    ck = training.snapshot(m, "scoring", cfg("scoring"), [{"epoch": 0, "val_mae": 0.5}])
    training.save_checkpoint(ck, tmp_path / "c")
    back = training.load_checkpoint(tmp_path / "c")
    assert back.digest() == ck.digest()
    assert back.stage == "scoring" and back.history == ck.history
    assert training.build_model(back).config == m.config
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    names = [e["name"] for e in manifest["params"]]
    assert sorted(names) == sorted(n for n, _ in m.named_parameters())
    assert len(names) == len(set(names))


def test_checkpoint_truncation_names_entry(tmp_path):
    m = BSNet(ModelConfig(input_size=SIZE))
    training.save_checkpoint(training.snapshot(m, "segmentation"), tmp_path / "c")
    blob = tmp_path / "c" / "params.bin"
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    last = manifest["params"][-1]
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match=last["name"]):
        training.load_checkpoint(tmp_path / "c")
    blob.write_bytes(blob.read_bytes() + b"\0" * 12)
    with pytest.raises(CheckpointError, match="trailing"):
        training.load_checkpoint(tmp_path / "c")


def test_checkpoint_manifest_errors(tmp_path):
    m = BSNet(ModelConfig(input_size=SIZE))
    d = training.save_checkpoint(training.snapshot(m, "segmentation"), tmp_path / "c")
    good = json.loads((d / "manifest.json").read_text())
    bad = json.loads(json.dumps(good))
    bad["params"][1] = dict(bad["params"][0])
    (d / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointError, match="twice"):
        training.load_checkpoint(d)
    bad = json.loads(json.dumps(good))
    bad["params"][2]["dtype"] = "f16"
    (d / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointError, match=bad["params"][2]["name"]):
        training.load_checkpoint(d)
    with pytest.raises(CheckpointError):
        training.load_checkpoint(tmp_path / "missing")


def test_load_state_shape_mismatch():
    m = BSNet(ModelConfig(input_size=SIZE))
    params = training.model_state(m)
    name = next(iter(params))
    params[name] = params[name][..., :1]
    with pytest.raises(CheckpointError, match=name):
        training.load_state(m, params)


def test_stage_prerequisites(tiny):
    train, val = tiny
    m = BSNet(ModelConfig(input_size=SIZE))
    seg_ck = training.snapshot(m, "segmentation")
    with pytest.raises(ContractError):
        training.train_alignment(train, val, cfg("alignment"), None)
    with pytest.raises(ContractError):
        training.train_scoring(train, val, cfg("scoring"), seg_ck)
    with pytest.raises(ContractError):
        training.finetune_all(train, val, cfg("finetune"), seg_ck)
    with pytest.raises(ContractError):
        training.train_alignment(train, val, cfg("alignment", input_size=64), seg_ck)


def test_segmentation_deterministic(tiny):
    train, val = tiny
    a = training.train_segmentation(train, val, cfg("segmentation"))
    b = training.train_segmentation(train, val, cfg("segmentation"))
    assert a.checkpoint.digest() == b.checkpoint.digest()
    assert a.history == b.history


def test_alignment_freezes_segmentation(tiny):
    train, val = tiny
    seg = training.train_segmentation(train, val, cfg("segmentation"))
    ali = training.train_alignment(train, val, cfg("alignment"), seg.checkpoint)
    for name, arr in seg.checkpoint.params.items():
        if not name.startswith("aligner."):
            np.testing.assert_array_equal(ali.last.params[name], arr)
    assert any(not np.array_equal(ali.last.params[n], seg.checkpoint.params[n]) for n in ali.last.params if n.startswith("aligner."))


def test_segmentation_dice_improves(pipeline):
    _, _, seg, _, _ = pipeline
    dice = [h["train_dice"] for h in seg.history]
    assert dice[-1] > dice[0]
    assert seg.history[-1]["val_dice"] > seg.history[0]["val_dice"]
    assert seg.history[-1]["val_dice"] > 0.8


def test_scoring_only_moves_head(pipeline):
    _, _, _, ali, sco = pipeline
    for name, arr in ali.checkpoint.params.items():
        if name.startswith("head."):
            continue
        np.testing.assert_array_equal(sco.last.params[name], arr)
    assert sco.checkpoint.stage == "scoring"


def test_scoring_val_mae_decreases(pipeline):
    _, _, _, _, sco = pipeline
    maes = [h["val_mae"] for h in sco.history]
    assert sco.history[0]["epoch"] == -1
    assert min(maes[1:]) < maes[0]


def test_finetune_emits_best_and_last(pipeline, tmp_path):
    train, val, _, _, sco = pipeline
    res = training.finetune_all(train, val, cfg("finetune"), sco.checkpoint)
    assert res.checkpoint.stage == "finetune" and res.last.stage == "finetune"
    # best is never worse than the starting point on validation
    start = res.history[0]["val_mae"]
    model = training.build_model(res.checkpoint)
    assert training.scoring_mae(model, val, "ha") <= start + 1e-9
    for ck, name in ((res.checkpoint, "best"), (res.last, "last")):
        training.save_checkpoint(ck, tmp_path / name)
        assert training.load_checkpoint(tmp_path / name).digest() == ck.digest()


def test_plateau_halving_recorded(tiny):
    train, val = tiny
    # a vanishing learning rate cannot improve validation, so patience 1 halves every other epoch
    res = training.train_segmentation(train, val, cfg("segmentation", epochs=4, plateau_patience=1, lr=1e-12))
    lrs = [h["lr"] for h in res.history]
    assert lrs[-1] < lrs[0]
    assert any(h["halved"] for h in res.history)


def test_checkpoint_digest_sensitive():
    m = BSNet(ModelConfig(input_size=SIZE))
    a = training.snapshot(m, "segmentation")
    params = {k: v.copy() for k, v in a.params.items()}
    k = next(iter(params))
    params[k].flat[0] += 1
    assert Checkpoint(params, a.model_config, a.stage).digest() != a.digest()
