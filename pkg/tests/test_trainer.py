import math
from fractions import Fraction

import numpy as np
import pytest

from sgone import configio
from sgone.episodes import sample_episode
from sgone.net import ModelConfig, init_params
from sgone.tensor import ShapeError, Tensor
from sgone.trainer import (
    MAGIC,
    CheckpointError,
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    initial_checkpoint,
    load_checkpoint,
    save_checkpoint,
    sgd_update,
    train,
    train_step,
)


def scalar_params(*values):
    return {f"p{i}.weight": Tensor(np.array([v], dtype=np.float64)) for i, v in enumerate(values)}


# --- sgd_update --------------------------------------------------------------


def test_plain_gradient_descent():
    params = scalar_params(1.0, -2.0)
    grads = {"p0.weight": np.array([0.5]), "p1.weight": np.array([-4.0])}
    sgd_update(params, grads, OptimizerState({}), lr=0.1, momentum=0.0, wd=0.0)
    assert params["p0.weight"].data[0] == 1.0 - 0.1 * 0.5
    assert params["p1.weight"].data[0] == -2.0 + 0.1 * 4.0


def test_zero_gradient_is_noop():
    params = scalar_params(3.0)
    opt = OptimizerState.zeros_like(params)
    sgd_update(params, {"p0.weight": np.zeros(1)}, opt, lr=0.5, momentum=0.9, wd=0.0)
    assert params["p0.weight"].data[0] == 3.0


def test_two_momentum_steps_unrolled():
    g, lr = 0.25, 0.5
    params = scalar_params(1.0)
    opt = OptimizerState.zeros_like(params)
    for _ in range(2):
        sgd_update(params, {"p0.weight": np.array([g])}, opt, lr=lr, momentum=0.9, wd=0.0)
    assert math.isclose(params["p0.weight"].data[0], 1.0 - lr * (g + 1.9 * g), rel_tol=0, abs_tol=1e-15)


def test_three_steps_match_exact_recurrence():
    """Compare against the recurrence evaluated in exact rational arithmetic."""
    p0, lr, m, wd = Fraction(3, 4), Fraction(1, 8), Fraction(1, 2), Fraction(1, 4)
    gs = [Fraction(1, 2), Fraction(-1, 4), Fraction(1, 16)]
    p, v = p0, Fraction(0)
    for g in gs:
        v = m * v + g + wd * p
        p = p - lr * v
    params = scalar_params(float(p0))
    opt = OptimizerState.zeros_like(params)
    for g in gs:
        sgd_update(params, {"p0.weight": np.array([float(g)])}, opt, float(lr), float(m), float(wd))
    assert params["p0.weight"].data[0] == float(p)
    assert opt.step == 3


def test_weight_decay_shrinks_kernels_not_biases():
    params = {"a.weight": Tensor(np.array([2.0, -3.0])), "a.bias": Tensor(np.array([1.0]))}
    opt = OptimizerState.zeros_like(params)
    prev = np.abs(params["a.weight"].data).copy()
    for _ in range(5):
        sgd_update(params, {}, opt, lr=0.1, momentum=0.9, wd=0.01)
        now = np.abs(params["a.weight"].data)
        assert np.all(now < prev)
        prev = now.copy()
    assert params["a.bias"].data[0] == 1.0


def test_shape_mismatch_rejected():
    params = scalar_params(1.0)
    with pytest.raises(ShapeError):
        sgd_update(params, {"p0.weight": np.zeros(2)}, OptimizerState({}), 0.1, 0.0, 0.0)


def test_config_validation():
    for bad in ({"momentum": 1.0}, {"weight_decay": -1.0}, {"batch_size": 2}, {"learning_rate": -1e-3},
                {"max_steps": -1}, {"dtype": "float16"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- train_step --------------------------------------------------------------


@pytest.fixture
def episode(small_dataset):
    return sample_episode(small_dataset, {1, 2, 3}, 1, np.random.default_rng(8))


def test_initial_loss_finite_positive(episode):
    cfg = TrainConfig()
    params = init_params(cfg.model, 0)
    loss = train_step(params, OptimizerState.zeros_like(params), episode, cfg)
    assert math.isfinite(loss) and loss > 0


def test_zero_learning_rate_leaves_params_bit_exact(episode):
    cfg = TrainConfig(learning_rate=0.0)
    params = init_params(cfg.model, 0)
    before = {k: p.data.tobytes() for k, p in params.items()}
    opt = OptimizerState.zeros_like(params)
    for _ in range(3):
        train_step(params, opt, episode, cfg)
    assert {k: p.data.tobytes() for k, p in params.items()} == before


def test_overfits_one_episode(episode):
    cfg = TrainConfig()
    params = init_params(cfg.model, 0)
    opt = OptimizerState.zeros_like(params)
    losses = [train_step(params, opt, episode, cfg) for _ in range(200)]
    assert losses[-1] < 0.1 * losses[0]


def test_non_finite_loss_aborts(episode):
    cfg = TrainConfig()
    params = init_params(cfg.model, 0)
    params["head.1.bias"].data = np.array([np.inf, 0.0], dtype=np.float32)
    with pytest.raises(TrainingDiverged, match=r"step 0.*episode"):
        train_step(params, OptimizerState.zeros_like(params), episode, cfg)


def test_multi_shot_training_rejected(small_dataset):
    ep = sample_episode(small_dataset, {1}, 2, np.random.default_rng(0))
    cfg = TrainConfig()
    params = init_params(cfg.model, 0)
    with pytest.raises(ValueError):
        train_step(params, OptimizerState.zeros_like(params), ep, cfg)


# --- train / checkpoints -----------------------------------------------------


def short_config(**kw):
    base = dict(max_steps=6, eval_every=3, eval_episodes=2,
                model=ModelConfig(stem_channels=[4, 6, 8], guidance_block_channels=[8, 8, 8], seg_channels=6))
    base.update(kw)
    return TrainConfig(**base)


def test_same_seed_same_trajectory(small_dataset):
    _, a = train(short_config(), small_dataset)
    _, b = train(short_config(), small_dataset)
    assert [x[1] for x in a] == [x[1] for x in b]
    _, c = train(short_config(seed=1), small_dataset)
    assert [x[1] for x in a] != [x[1] for x in c]


def test_zero_steps_equals_initialisation(small_dataset):
    cfg = short_config(max_steps=0)
    ckpt, log = train(cfg, small_dataset)
    init = initial_checkpoint(cfg)
    assert log == []
    assert ckpt.step == 0
    for k in init.params:
        assert ckpt.params[k].data.tobytes() == init.params[k].data.tobytes()


def test_train_writes_outputs(small_dataset, tmp_path):
    ckpt, log = train(short_config(), small_dataset, out_dir=tmp_path)
    metrics = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert metrics[0] == "step\tloss\twall_ms"
    assert len(metrics) == 1 + len(log) == 7
    assert len((tmp_path / "val.tsv").read_text().splitlines()) == 3
    loaded = load_checkpoint(tmp_path / "checkpoint.sgone")
    assert loaded.step == 6


def test_training_never_sees_held_out_categories(small_dataset, monkeypatch):
    import sgone.trainer as tr

    seen = []
    real = tr.sample_episode

    def spy(index, categories, K, rng):
        ep = real(index, categories, K, rng)
        names = {ep.query_name, *ep.support_names}
        seen.extend(c for r in index.records if r.name in names for c in r.categories)
        return ep

    monkeypatch.setattr(tr, "sample_episode", spy)
    train(short_config(max_steps=30, eval_every=0, fold_index=1), small_dataset)
    assert seen and not {3, 4} & set(seen)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    cfg = short_config(dtype="float64")
    ckpt = initial_checkpoint(cfg)
    for p in ckpt.params.values():
        p.data = rng.normal(size=p.shape)
    ckpt.opt_state.velocity = {k: rng.normal(size=p.shape) for k, p in ckpt.params.items()}
    ckpt.step = ckpt.opt_state.step = 17
    path = tmp_path / "c.sgone"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.step == 17 and back.rng_state == ckpt.rng_state
    assert back.config == cfg
    for k, p in ckpt.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()
        assert back.opt_state.velocity[k].tobytes() == ckpt.opt_state.velocity[k].tobytes()
    assert path.read_bytes().startswith(MAGIC)


def test_corrupted_magic_rejected(tmp_path):
    path = tmp_path / "c.sgone"
    save_checkpoint(path, initial_checkpoint(short_config()))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="byte 0"):
        load_checkpoint(path)


def test_truncated_checkpoint_rejected_with_offset(tmp_path):
    path = tmp_path / "c.sgone"
    save_checkpoint(path, initial_checkpoint(short_config()))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match=r"truncated at byte \d+"):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "c.sgone"
    save_checkpoint(path, initial_checkpoint(short_config()))
    raw = bytearray(path.read_bytes())
    raw[len(MAGIC)] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_resume_matches_uninterrupted_run(small_dataset, tmp_path):
    full, full_log = train(short_config(max_steps=8, eval_every=0), small_dataset)
    train(short_config(max_steps=5, eval_every=0), small_dataset, out_dir=tmp_path)
    ckpt = load_checkpoint(tmp_path / "checkpoint.sgone")
    resumed, tail = train(short_config(max_steps=8, eval_every=0), small_dataset, resume=ckpt)
    assert [x[1] for x in tail] == [x[1] for x in full_log[5:]]
    for k, p in full.params.items():
        assert resumed.params[k].data.tobytes() == p.data.tobytes()


def test_config_text_round_trip():
    cfg = short_config(learning_rate=0.05, seed=9)
    assert configio.load_text(TrainConfig(), configio.dump_text(cfg)) == cfg
