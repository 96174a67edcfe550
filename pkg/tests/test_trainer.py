import csv
import math

import numpy as np
import pytest

from clip3d.autodiff import Tensor
from clip3d.checkpoint import Checkpoint, from_bytes, read_checkpoint, to_bytes, write_checkpoint
from clip3d.errors import ContractError, DivergenceError, LoadError
from clip3d.synthdata import generate_cases, split_dataset
from clip3d.trainer import (
    AdamW,
    BatchSampler,
    TrainConfig,
    adamw_step,
    build_model,
    compute_step_gradients,
    load_model,
    lr_schedule,
    make_checkpoint,
    named_parameters,
    train,
)

SMALL = TrainConfig(steps=6, warmup_steps=2, batch_size=4, accum_freq=2, log_every=2)


@pytest.fixture(scope="module")
def small_ds():
    return split_dataset(generate_cases(20, 11), 11)


# -- schedule ----------------------------------------------------------------


def test_schedule_endpoints():
    cfg = TrainConfig()
    for tower, base in (("vision", cfg.lr_vision), ("text", cfg.lr_text)):
        assert lr_schedule(0, cfg, tower) == 0.0
        assert lr_schedule(cfg.warmup_steps, cfg, tower) == base
        assert lr_schedule(cfg.steps, cfg, tower) == pytest.approx(0.0, abs=1e-20)
        assert lr_schedule(cfg.warmup_steps // 2, cfg, tower) == pytest.approx(base / 2)


def test_schedule_ratio_constant():
    cfg = TrainConfig()
    for step in range(1, cfg.steps):
        v, t = lr_schedule(step, cfg, "vision"), lr_schedule(step, cfg, "text")
        assert v == pytest.approx(10 * t, rel=1e-12)


def test_schedule_monotone_after_warmup():
    cfg = TrainConfig()
    lrs = [lr_schedule(s, cfg, "vision") for s in range(cfg.warmup_steps, cfg.steps + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# -- optimizer ---------------------------------------------------------------


def _param(values, grad):
    p = Tensor(np.array(values, np.float64), requires_grad=True)
    p.grad = None if grad is None else np.array(grad, np.float64)
    return p


def test_adamw_zero_grad_no_decay_unchanged():
    p = _param([1.0, -2.0], [0.0, 0.0])
    AdamW().step({"p": p}, {"p": 0.1}, {"p": 0.0})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_oracle():
    g = np.array([0.5, -3.0, 1e-3])
    p = _param([1.0, 1.0, 1.0], g)
    lr = 0.01
    adamw_step({"p": p}, AdamW(), {"p": lr}, {"p": 0.0})
    np.testing.assert_allclose(p.data, 1.0 - lr * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adamw_decoupled_decay():
    p = _param([2.0, -4.0], [0.0, 0.0])
    AdamW().step({"p": p}, {"p": 0.1}, {"p": 0.5})
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_adamw_nonfinite_names_parameter():
    p = _param([1.0], [np.nan])
    with pytest.raises(DivergenceError, match="image.conv0.weight"):
        AdamW().step({"image.conv0.weight": p}, {"image.conv0.weight": 0.1}, {"image.conv0.weight": 0.0})


# -- config ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(steps=10, warmup_steps=10)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=1, accum_freq=1)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"steps": 5, "bogus": 1})
    cfg = TrainConfig.from_dict(SMALL.to_dict())
    assert cfg == SMALL


# -- training ----------------------------------------------------------------


def test_initial_loss_near_log_effective_batch(small_ds):
    for seed in range(5):
        cfg = TrainConfig(batch_size=4, accum_freq=4, seed=seed)
        model = build_model(cfg)
        res = compute_step_gradients(model, BatchSampler(small_ds, cfg, model.vocab), 0)
        assert abs(res.loss - math.log(16)) <= 0.2 * math.log(16)


def test_train_loss_decreases():
    ds = split_dataset(generate_cases(32, 12), 12)
    cfg = TrainConfig(steps=500, warmup_steps=25, batch_size=8, accum_freq=2)
    losses = train(cfg, ds).losses
    assert losses[:100].mean() > losses[-100:].mean()


def test_history_contract(small_ds, tmp_path):
    res = train(SMALL, small_ds, out_dir=tmp_path)
    assert len(res.history) == SMALL.steps
    for h in res.history:
        assert 0.01 <= 1 / h["temperature"] <= 100
        if h["lr_text"] > 0:
            assert h["lr_vision"] / h["lr_text"] == pytest.approx(10.0)
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "temperature", "lr_vision", "lr_text"]
    assert [int(r[0]) for r in rows[1:]] == [0, 2, 4]
    assert (tmp_path / "vocab.txt").exists()


def test_determinism(small_ds, tmp_path):
    train(SMALL, small_ds, out_dir=tmp_path / "a")
    train(SMALL, small_ds, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "checkpoint.cal3").read_bytes()
    b = (tmp_path / "b" / "checkpoint.cal3").read_bytes()
    assert a == b


def test_n1_runs_identical(small_ds):
    cfg = SMALL.replace(accum_freq=1)
    a, b = train(cfg, small_ds).losses, train(cfg, small_ds).losses
    assert a.tobytes() == b.tobytes()


def test_checkpoint_save_load_save(small_ds, tmp_path):
    res = train(SMALL, small_ds, out_dir=tmp_path)
    raw = res.checkpoint.read_bytes()
    assert raw[:4] == b"CAL3"
    assert to_bytes(from_bytes(raw)) == raw
    model, cfg, step, opt = load_model(res.checkpoint)
    assert to_bytes(make_checkpoint(model, cfg, step, opt)) == raw
    header = read_checkpoint(res.checkpoint).header
    assert header["config"] == SMALL.to_dict() and header["step"] == SMALL.steps


def test_resume_reproduces_gradients_and_run(small_ds, tmp_path):
    cfg = SMALL.replace(checkpoint_every=3)
    live = {}

    def grab(step, model, _):
        if step == 2:
            sampler = BatchSampler(small_ds, cfg, model.vocab)
            compute_step_gradients(model, sampler, 3)
            live.update({k: t.grad.copy() for k, t in named_parameters(model).items() if t.grad is not None})

    full = train(cfg, small_ds, out_dir=tmp_path / "full", callback=grab)
    mid = tmp_path / "full" / "checkpoint_000003.cal3"
    model, _, step, _ = load_model(mid)
    assert step == 3
    compute_step_gradients(model, BatchSampler(small_ds, cfg, model.vocab), 3)
    for k, t in named_parameters(model).items():
        assert t.grad.tobytes() == live[k].tobytes(), k

    resumed = train(cfg, small_ds, out_dir=tmp_path / "resumed", resume=mid)
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()


def test_steps_zero_writes_init_checkpoint(small_ds, tmp_path):
    res = train(TrainConfig(steps=0), small_ds, out_dir=tmp_path)
    assert res.history == [] and read_checkpoint(res.checkpoint).header["step"] == 0


def test_divergence_dumps_checkpoint(small_ds, tmp_path):
    bad = split_dataset(generate_cases(20, 11), 11)
    for c in bad.cases:
        c.volume[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(SMALL, bad, out_dir=tmp_path)
    assert (tmp_path / "checkpoint.cal3.diverged").exists()


def test_load_rejects_wrong_kind(tmp_path):
    path = write_checkpoint(Checkpoint({"kind": "pretrain"}, {}), tmp_path / "x.cal3")
    with pytest.raises(LoadError):
        load_model(path)
    (tmp_path / "junk.cal3").write_bytes(b"nope")
    with pytest.raises(LoadError):
        load_model(tmp_path / "junk.cal3")


def test_init_image_encoder_vocab_independent(small_ds, tmp_path):
    src = train(SMALL.replace(steps=0), small_ds, out_dir=tmp_path / "src")
    res = train(SMALL.replace(steps=0, seed=5), small_ds, init_image_encoder=src.checkpoint)
    a = read_checkpoint(src.checkpoint).tensors["image.conv0.weight"]
    np.testing.assert_array_equal(res.model.image["conv0.weight"].data, a)


def test_sampler_shapes_and_determinism(small_ds):
    cfg = TrainConfig(batch_size=4, accum_freq=3)
    model = build_model(cfg)
    s = BatchSampler(small_ds, cfg, model.vocab)
    imgs, txts = s.draw(7)
    assert len(imgs) == 3 and imgs[0].shape == (4, 1, 16, 16, 16) and txts[0].shape == (4, 64)
    imgs2, _ = s.draw(7)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(imgs, imgs2))
