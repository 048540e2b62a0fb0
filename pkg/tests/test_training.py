import json
import math
import warnings

import numpy as np
import pytest
import torch

from dmskit.core import Modality
from dmskit.models import ModelSpec, build_model
from dmskit.training import (
    CheckpointError, ConfigHashWarning, TrainConfig, TrainingError, load_checkpoint, read_checkpoint,
    save_checkpoint, train, warm_restart_lr,
)

MODS = ["top_ir", "front_ir"]


def config(small_synth, out, **kw):
    spec = kw.pop("model", ModelSpec.single("feature_fusion", MODS))
    base = dict(epochs=2, batch_size=8, lr=1e-3, augment=False, stride=4, epoch_checkpoints=False)
    base.update(kw)
    return TrainConfig(model=spec, train_manifest=small_synth / "train.csv", out_dir=out, **base)


def states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# --- schedule -------------------------------------------------------------------


@pytest.mark.parametrize("restart", [0, 10, 30, 70, 150])
def test_lr_returns_to_base_at_restarts(restart):
    assert abs(warm_restart_lr(restart, 1e-4) - 1e-4) <= 1e-9


def test_lr_non_increasing_within_cycles():
    for start, end in ((0, 10), (10, 30), (30, 70)):
        xs = np.linspace(start, end, 400, endpoint=False)
        lrs = [warm_restart_lr(x, 1e-3) for x in xs]
        assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] < 1e-5


def test_lr_half_way_through_first_cycle():
    assert warm_restart_lr(5, 2.0) == pytest.approx(1.0)


# --- config ---------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"epochs": -1}, {"batch_size": 0}, {"lr": 0}, {"val_fraction": 1.0},
                                {"contrastive_weight": -1}, {"temperature": 0}])
def test_config_validation(kw, tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(model=ModelSpec.single("unimodal", ["top_ir"]), train_manifest=tmp_path / "t.csv", **kw)


def test_defaults_follow_the_training_protocol(tmp_path):
    c = TrainConfig(model=ModelSpec.single("unimodal", ["top_ir"]), train_manifest=tmp_path / "t.csv")
    assert (c.epochs, c.batch_size, c.lr, c.weight_decay) == (50, 128, 1e-4, 5e-3)
    assert (c.restart_epochs, c.restart_mult, c.val_fraction) == (10, 2, 0.1)


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = build_model(ModelSpec.single("decision_fusion", list(Modality), head="posterior"), seed=3)
    with torch.no_grad():
        for _, buf in model.named_buffers():
            if buf.dtype.is_floating_point:
                buf.add_(0.25)
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"})
    loaded, header = load_checkpoint(path, model.spec)
    assert states_equal(model.state_dict(), loaded.state_dict())
    assert header["meta"] == {"note": "x"} and header["config_hash"] == model.spec.config_hash()


def test_truncated_and_foreign_files_fail(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(ModelSpec.single("unimodal", ["top_ir"])))
    data = path.read_bytes()
    for cut in (5, 30, len(data) - 1):
        (tmp_path / "cut.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "junk.ckpt")
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(tmp_path / "flip.ckpt")


def test_spec_mismatch_warns_but_loads(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(ModelSpec.single("unimodal", ["top_ir"])))
    with pytest.warns(ConfigHashWarning):
        model, _ = load_checkpoint(path, ModelSpec.single("unimodal", ["front_ir"]))
    assert model.order == [Modality.TOP_IR]


def test_loading_ignores_original_weight_files(tmp_path):
    spec = ModelSpec.single("unimodal", ["top_ir"])
    model = build_model(spec, seed=0)
    torch.save(model.encoders["top_ir"].body.state_dict(), tmp_path / "w.pt")
    with_file = ModelSpec.from_dict({**spec.to_dict(), "encoders": {
        "top_ir": {"architecture": "tiny-cnn", "pretrained_weights": str(tmp_path / "w.pt")}}})
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(with_file, seed=0))
    (tmp_path / "w.pt").unlink()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path)


# --- training -------------------------------------------------------------------


def test_zero_epochs_checkpoint_equals_initialisation(small_synth, tmp_path):
    cfg = config(small_synth, tmp_path, epochs=0, seed=11)
    result = train(cfg)
    loaded, _ = load_checkpoint(result.final_checkpoint)
    assert states_equal(loaded.state_dict(), build_model(cfg.model, 11).state_dict())
    assert result.history == []


def test_seeded_runs_are_identical(small_synth, tmp_path):
    a = train(config(small_synth, tmp_path / "a", seed=4))
    b = train(config(small_synth, tmp_path / "b", seed=4))
    assert states_equal(a.model.state_dict(), b.model.state_dict())
    strip = lambda h: [{k: v for k, v in e.items() if k != "seconds"} for e in h]
    assert strip(a.history) == strip(b.history)
    assert a.train_accuracy == pytest.approx(b.train_accuracy, abs=1e-6)


def test_zero_contrastive_weight_freezes_encoders(small_synth, tmp_path):
    cfg = config(small_synth, tmp_path, contrastive_weight=0.0, seed=2)
    init = build_model(cfg.model, 2)
    result = train(cfg)
    for m in MODS:
        assert states_equal(init.encoders[m].state_dict(), result.model.encoders[m].state_dict())
    head_before = torch.cat([p.flatten() for p in init.head_parameters()])
    head_after = torch.cat([p.flatten() for p in result.model.head_parameters()])
    assert not torch.equal(head_before, head_after)


def test_classification_gradient_never_reaches_encoders(small_synth, tmp_path, monkeypatch):
    import dmskit.training as training

    seen = []
    real = training.supervised_contrastive

    def no_contrastive(emb, labels, temperature):
        # a zero loss that still depends on the embeddings leaves encoder weights at their
        # initial values unless another gradient reaches them
        seen.append(1)
        return 0.0 * real(emb, labels, temperature)

    monkeypatch.setattr(training, "supervised_contrastive", no_contrastive)
    cfg = config(small_synth, tmp_path, seed=5, weight_decay=0.0, epochs=1)
    init = build_model(cfg.model, 5)
    result = train(cfg)
    assert seen
    for m in MODS:
        before = dict(init.encoders[m].named_parameters())
        for name, p in result.model.encoders[m].named_parameters():
            assert torch.equal(before[name], p), name


def test_log_checkpoints_and_val_split(small_synth, tmp_path):
    result = train(config(small_synth, tmp_path, epochs=2, epoch_checkpoints=True))
    lines = [json.loads(line) for line in result.log_path.read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [1, 2]
    assert set(lines[0]) >= {"epoch", "contrastive_loss", "ce_loss", "lr", "train_accuracy", "val_accuracy"}
    assert lines[0]["val_accuracy"] is not None
    assert (tmp_path / "epoch_001.ckpt").exists() and (tmp_path / "epoch_002.ckpt").exists()
    _, header = load_checkpoint(result.best_checkpoint)
    assert header["meta"]["epoch"] in (0, 1, 2) and "stats" in header["meta"]


def test_posterior_head_trains(small_synth, tmp_path):
    spec = ModelSpec.single("decision_fusion", MODS, head="posterior")
    result = train(config(small_synth, tmp_path, model=spec, epochs=1))
    assert math.isfinite(result.history[0]["ce_loss"])


def test_non_finite_loss_aborts(small_synth, tmp_path, monkeypatch):
    import dmskit.training as training

    monkeypatch.setattr(training, "flat_cross_entropy", lambda s, y: s.sum() * float("nan"))
    with pytest.raises(TrainingError, match="non-finite cross-entropy"):
        train(config(small_synth, tmp_path, epochs=1, contrastive_weight=0.0))


def test_missing_modality_in_training_data(small_synth, tmp_path):
    spec = ModelSpec.single("unimodal", ["top_depth"])
    with pytest.raises(TrainingError, match="lacks modalities"):
        train(config(small_synth, tmp_path, model=spec))


def test_desk_run_fits_training_data(desk_run):
    assert desk_run["codes"]["train"] == 0
    assert desk_run["train_accuracy"] >= 0.95
