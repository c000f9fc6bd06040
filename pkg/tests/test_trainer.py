import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from paravae.errors import (
    ManifestCorruptionError,
    TrainingDivergedError,
    VersionMismatchError,
)
from paravae.model import ModelConfig, ParaphraseVaeParams
from paravae.trainer import (
    SGD,
    Adam,
    Checkpoint,
    TrainConfig,
    Trainer,
    clip_gradients,
    evaluate,
    global_norm,
    kl_anneal_weight,
    load_checkpoint,
    predicted_payload_bytes,
    save_checkpoint,
    train,
)


@pytest.fixture
def small_params(toy_vocab):
    cfg = ModelConfig(vocab_size=len(toy_vocab), embed_dim=6, hidden_dim=8, latent_dim=3)
    return ParaphraseVaeParams.init(cfg, 0)


def test_anneal_schedule():
    assert kl_anneal_weight(0, 10) == 0.0
    assert kl_anneal_weight(5, 10) == 0.5
    assert kl_anneal_weight(10, 10) == 1.0
    assert kl_anneal_weight(50, 10) == 1.0
    assert kl_anneal_weight(0, 0) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(1, 200))
def test_anneal_weight_in_unit_interval(it, warmup):
    w = kl_anneal_weight(it, warmup)
    assert 0.0 <= w <= 1.0
    assert w <= kl_anneal_weight(it + 1, warmup)


def test_default_warmup_is_a_fifth():
    assert TrainConfig(total_iterations=1000).warmup == 200
    assert TrainConfig(total_iterations=1000, kl_warmup_iterations=0).warmup == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, kl_warmup_iterations=20)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"total_iterations": 1, "momentum": 0.9})
    cfg = TrainConfig(total_iterations=7)
    assert (cfg.learning_rate, cfg.batch_size) == (5e-5, 32)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_clip_gradients_rescales_to_max_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0, 4.0]])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 5.0
    assert_allclose(global_norm(clipped), 1.0)
    assert_allclose(clipped["a"], [0.6, 0.0])
    same, _ = clip_gradients(grads, 10.0)
    assert_array_equal(same["b"], grads["b"])


def test_sgd_update():
    w = {"w": np.array([1.0, 2.0])}
    SGD(0.1).update(w, {"w": np.array([1.0, -1.0])})
    assert_allclose(w["w"], [0.9, 2.1])


def test_adam_first_step_is_lr_times_sign():
    w = {"w": np.array([1.0, 1.0])}
    Adam(0.01).update(w, {"w": np.array([0.5, -3.0])})
    assert_allclose(w["w"], [0.99, 1.01], rtol=1e-6)


def test_training_is_deterministic(small_params, toy_pairs):
    cfg = TrainConfig.desk_preset(15, batch_size=4, seed=3)
    a, ra = train(small_params, cfg, toy_pairs)
    b, rb = train(small_params, cfg, toy_pairs)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r["nll"] for r in ra] == [r["nll"] for r in rb]


def test_trainer_does_not_mutate_input(small_params, toy_pairs):
    before = small_params.copy()
    train(small_params, TrainConfig.desk_preset(3, batch_size=4), toy_pairs)
    assert all(np.array_equal(before[k], small_params[k]) for k in before)


def test_log_records(tmp_path, small_params, toy_pairs):
    log = tmp_path / "log.jsonl"
    cfg = TrainConfig.desk_preset(10, batch_size=5, kl_warmup_iterations=4)
    _, records = train(small_params, cfg, toy_pairs, log_file=log)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(lines) == 10
    assert [r["kl_weight"] for r in lines[:5]] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert set(lines[0]) >= {"iteration", "nll", "kl", "kl_weight", "grad_norm"}
    assert lines == json.loads(json.dumps(records))


def test_loss_goes_down(small_params, toy_pairs):
    before, _ = evaluate(small_params, toy_pairs)
    ckpt, _ = train(small_params, TrainConfig.desk_preset(60, batch_size=10), toy_pairs)
    after, _ = evaluate(ckpt.params, toy_pairs)
    assert after < before


def test_divergence_raises_with_checkpoint(small_params, toy_pairs):
    bad = small_params.copy()
    bad["head.b_logvar"] = np.full_like(bad["head.b_logvar"], 1000.0)  # exp overflows in the KL
    with pytest.raises(TrainingDivergedError) as info:
        train(bad, TrainConfig.desk_preset(5, batch_size=4), toy_pairs)
    assert info.value.checkpoint is not None
    assert info.value.checkpoint.iteration == 0


def test_periodic_checkpoints(tmp_path, small_params, toy_pairs):
    path = tmp_path / "m.ckpt"
    cfg = TrainConfig.desk_preset(4, batch_size=4, checkpoint_every=2)
    trainer = Trainer(small_params, cfg, toy_pairs, checkpoint_path=path)
    trainer.step()
    assert not path.exists()
    trainer.step()
    assert load_checkpoint(path).iteration == 2


def test_checkpoint_round_trip(tmp_path, small_params, toy_vocab):
    ckpt = Checkpoint.capture(small_params, toy_vocab, iteration=12,
                              rng=np.random.default_rng(1),
                              train_config=TrainConfig(total_iterations=12))
    path = tmp_path / "a.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.model_config == ckpt.model_config
    assert back.vocab == toy_vocab
    assert back.iteration == 12
    assert back.train_config == ckpt.train_config
    for k in ckpt.params:
        assert_array_equal(back.params[k], ckpt.params[k])
    again = tmp_path / "b.ckpt"
    save_checkpoint(back, again)
    assert path.read_bytes() == again.read_bytes()


def test_checkpoint_layout(tmp_path, small_params):
    path = tmp_path / "a.ckpt"
    save_checkpoint(Checkpoint.capture(small_params), path)
    data = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sII", data)
    assert (magic, version) == (b"PVAE", 1)
    header = json.loads(data[12:12 + hlen])
    assert len(data) - 12 - hlen == predicted_payload_bytes(small_params)
    assert [e["name"] for e in header["tensors"]] == list(small_params.tensors)
    first = header["tensors"][0]
    n = int(np.prod(first["shape"]))
    values = np.frombuffer(data, "<f4", n, 12 + hlen + first["offset"])
    assert_array_equal(values.reshape(first["shape"]),
                       small_params[first["name"]].astype(np.float32))


def _corrupt(path, offset, value):
    data = bytearray(path.read_bytes())
    data[offset] = value
    path.write_bytes(bytes(data))


def test_bad_magic_and_version(tmp_path, small_params):
    path = tmp_path / "a.ckpt"
    save_checkpoint(Checkpoint.capture(small_params), path)
    original = path.read_bytes()
    _corrupt(path, 0, ord("X"))
    with pytest.raises(ManifestCorruptionError):
        load_checkpoint(path)
    path.write_bytes(original)
    _corrupt(path, 4, 9)
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_truncated_and_flipped_payload(tmp_path, small_params):
    path = tmp_path / "a.ckpt"
    save_checkpoint(Checkpoint.capture(small_params), path)
    original = path.read_bytes()
    path.write_bytes(original[:-4])
    with pytest.raises(ManifestCorruptionError):
        load_checkpoint(path)
    path.write_bytes(original)
    _corrupt(path, len(original) - 1, original[-1] ^ 0xFF)
    with pytest.raises(ManifestCorruptionError):
        load_checkpoint(path)


def test_manifest_must_match_config(tmp_path, small_params):
    other = ParaphraseVaeParams.init(
        ModelConfig(vocab_size=small_params.config.vocab_size, embed_dim=6, hidden_dim=8,
                    latent_dim=3, variant="vae-s"))
    ckpt = Checkpoint.capture(other)
    ckpt.model_config = small_params.config
    path = tmp_path / "a.ckpt"
    save_checkpoint(ckpt, path)
    with pytest.raises(ManifestCorruptionError):
        load_checkpoint(path)
