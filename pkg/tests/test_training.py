import numpy as np
import pytest
import torch

from lmmvqa.encoders import encode_video
from lmmvqa.exceptions import ConfigError, DivergenceError, MissingTask
from lmmvqa.prompting import DatasetManifest, ManifestRecord, build_dataset, generate_templates
from lmmvqa.synthetic import textured_video
from lmmvqa.training import (
    Checkpoint,
    TrainConfig,
    build_model,
    encoder_fingerprints,
    mix_tasks,
    module_fingerprint,
    subsample,
    train,
    validation_split,
)


def small_setup(n=4, seed=0, **overrides):
    videos = [textured_video("A", seed=i, n_frames=8, size=16, fps=4, blur=0.5 * i, source_id=f"v{i}") for i in range(n)]
    features = {v.source_id: encode_video(v, "toy-spatial-p8", "toy-motion") for v in videos}
    manifest = DatasetManifest([ManifestRecord(v.source_id, "", 20.0 + 10 * i) for i, v in enumerate(videos)])
    config = TrainConfig(
        batch_size=4, epochs=2, d_model=16, n_temporal_tokens=4, spatial_backend="toy-spatial-p8",
        val_fraction=0.0, n_templates=50, max_images=4, seed=seed,
    )
    for k, v in overrides.items():
        setattr(config, k, v)
    templates = generate_templates(config.n_templates, config.seed)
    prompts = build_dataset(manifest, templates, {k: f.n_chunks for k, f in features.items()}, config.seed)
    return config, prompts, features, manifest


def test_config_defaults_follow_the_recipe():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.epochs, c.n_temporal_tokens) == (32, 1e-3, 6, 64)
    assert c.freeze_decoder is False
    assert TrainConfig(decoder="external").freeze_decoder is True


@pytest.mark.parametrize("field,value", [
    ("batch_size", 0), ("learning_rate", -1.0), ("epochs", -1), ("data_fraction", 0.0),
    ("data_fraction", 1.5), ("n_temporal_tokens", 0), ("spatial_projector", "perceiver"),
    ("decoder", "llama"), ("d_model", 30), ("val_fraction", 1.0),
])
def test_config_rejects_bad_values(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value}).validate()


def test_config_round_trip_and_fingerprint():
    c = TrainConfig(epochs=3, frame_size=(32, 32))
    again = TrainConfig.from_dict(c.to_dict())
    assert again == c and again.fingerprint() == c.fingerprint()
    assert TrainConfig(epochs=4).fingerprint() != c.fingerprint()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


def test_mix_tasks():
    _, prompts, _, _ = small_setup()
    single = mix_tasks(prompts, False, seed=0)
    assert len(single) == 4 and {p.task for p in single.prompts} == {"regression"}
    multi = mix_tasks(prompts, True, seed=0)
    assert len(multi) == 8
    assert multi.epoch(0) == mix_tasks(prompts, True, seed=0).epoch(0)
    assert sorted(map(id, multi.epoch(1))) == sorted(map(id, multi.prompts))
    with pytest.raises(MissingTask):
        mix_tasks([p for p in prompts if p.task == "regression"], True, seed=0)
    with pytest.raises(MissingTask):
        mix_tasks([p for p in prompts if p.task == "classification"], False, seed=0)


def test_subsample():
    m = DatasetManifest([ManifestRecord(f"v{i}", "", float(i)) for i in range(100)])
    quarter = subsample(m, 0.25, seed=3)
    assert len(quarter) == 25
    assert quarter.video_ids == subsample(m, 0.25, seed=3).video_ids
    assert len(set(quarter.video_ids)) == 25
    assert subsample(m, 1.0, seed=3) is m
    assert len(subsample(m, 0.001, seed=0)) == 1
    with pytest.raises(ConfigError):
        subsample(m, 0.0, seed=0)


def test_validation_split_holds_out_a_tenth():
    ids = [f"v{i}" for i in range(25)]
    tr, va = validation_split(ids, 0.1, seed=0)
    assert len(va) == 2 and set(tr) | set(va) == set(ids) and not set(tr) & set(va)
    assert validation_split(ids, 0.1, seed=0) == (tr, va)
    assert validation_split(ids[:5], 0.1, seed=0) == (ids[:5], [])


def test_projectors_only_run_freezes_everything_else():
    config, prompts, features, _ = small_setup(train_projectors_only=True, epochs=1, batch_size=1)
    model = build_model(config, features)
    decoder_before = module_fingerprint(model.decoder)
    encoders_before = encoder_fingerprints(config)
    projector_before = {k: v.clone() for k, v in model.spatial_projector.state_dict().items()}
    ckpt, _ = train(config, prompts, features, model=model)
    assert module_fingerprint(ckpt.model.decoder) == decoder_before
    assert encoder_fingerprints(config) == encoders_before
    assert ckpt.frozen_fingerprints["decoder"] == decoder_before
    after = ckpt.model.spatial_projector.state_dict()
    assert any(not torch.equal(after[k], projector_before[k]) for k in after)


def test_zero_learning_rate_keeps_loss_constant():
    config, prompts, features, _ = small_setup(learning_rate=0.0, epochs=3)
    _, curve = train(config, prompts, features)
    losses = [row["train_loss"] for row in curve]
    assert max(losses) - min(losses) < 1e-5


def test_zero_epochs_returns_the_initialisation():
    config, prompts, features, _ = small_setup(epochs=0)
    ckpt, curve = train(config, prompts, features)
    fresh = build_model(config, features)
    assert curve == []
    assert module_fingerprint(ckpt.model) == module_fingerprint(fresh)


def test_training_is_deterministic():
    config, prompts, features, _ = small_setup(epochs=2)
    a, ca = train(config, prompts, features)
    b, cb = train(config, prompts, features)
    assert module_fingerprint(a.model) == module_fingerprint(b.model)
    assert ca == cb


def test_validation_losses_are_recorded():
    config, prompts, features, _ = small_setup(n=10, val_fraction=0.2, epochs=2)
    ckpt, curve = train(config, prompts, features)
    assert all(row["val_loss"] is not None for row in curve)
    assert len(ckpt.train_video_ids) == 10


def test_divergence_is_reported(monkeypatch):
    config, prompts, features, _ = small_setup(epochs=1)
    from lmmvqa import model as model_module

    monkeypatch.setattr(model_module.VQAModel, "loss", lambda self, *a: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(DivergenceError):
        train(config, prompts, features)


def test_empty_or_unmatched_data_is_rejected():
    config, prompts, features, _ = small_setup()
    with pytest.raises(ConfigError):
        train(config, [], features)
    with pytest.raises(ConfigError):
        train(config, prompts, {k: v for k, v in list(features.items())[:1]})


def test_checkpoint_round_trip(tmp_path):
    config, prompts, features, _ = small_setup(epochs=2)
    ckpt, curve = train(config, prompts, features)
    ckpt.save(tmp_path / "ck")
    assert {p.name for p in (tmp_path / "ck").iterdir()} >= {"model.pt", "vocab.txt", "checkpoint.json", "loss_curve.csv"}
    loaded = Checkpoint.load(tmp_path / "ck")
    assert module_fingerprint(loaded.model) == module_fingerprint(ckpt.model)
    assert loaded.config == config
    assert [r["epoch"] for r in loaded.loss_curve] == [1, 2]
    assert loaded.loss_curve[-1]["train_loss"] == pytest.approx(curve[-1]["train_loss"])
    video = next(iter(features.values()))
    q = prompts[0].question
    assert loaded.model.answer(video, q).token_ids == ckpt.model.answer(video, q).token_ids


def test_tampered_frozen_decoder_is_detected(tmp_path):
    config, prompts, features, _ = small_setup(epochs=1, train_projectors_only=True)
    ckpt, _ = train(config, prompts, features)
    with torch.no_grad():
        ckpt.model.decoder.head.bias.add_(1.0)
    ckpt.save(tmp_path / "ck")
    with pytest.raises(ConfigError):
        Checkpoint.load(tmp_path / "ck")
