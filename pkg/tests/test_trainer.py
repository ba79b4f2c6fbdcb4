import dataclasses
import filecmp
import math

import numpy as np
import pytest

from invkernel import trainer as T
from invkernel.checkpoint import load_checkpoint, model_from_checkpoint
from invkernel.dataset import load_manifest
from invkernel.kpn_net import two_stage_forward


def test_cosine_schedule():
    cfg = T.TrainConfig(total_steps=1000)
    assert T.cosine_lr(0, cfg) == 2e-4
    assert T.cosine_lr(1000, cfg) == pytest.approx(1e-7, abs=1e-20)
    assert T.cosine_lr(500, cfg) == pytest.approx((2e-4 + 1e-7) / 2, rel=1e-12)
    vals = [T.cosine_lr(s, cfg) for s in range(0, 1001, 50)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        T.cosine_lr(1001, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(lr_start=1e-7, lr_min=1e-7)
    for p in (48, 2, 0):
        with pytest.raises(ValueError):
            T.TrainConfig(patch_size=p)


def test_adam_scalar_recurrence():
    p = {"w": np.array([0.5])}
    st = T.AdamState.zeros_like(p)
    assert T.adam_step(p, {"w": np.array([1.0])}, st, 1e-3)
    assert p["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), rel=1e-15)
    # second step with the same gradient: m_hat = v_hat = 1
    T.adam_step(p, {"w": np.array([1.0])}, st, 1e-3)
    assert p["w"][0] == pytest.approx(0.5 - 2e-3 / (1 + 1e-8), rel=1e-14)
    assert st.t == 2


def test_adam_zero_and_bad_gradients():
    p = {"a": np.ones((2, 3)), "b": np.zeros(4)}
    before = {k: v.copy() for k, v in p.items()}
    st = T.AdamState.zeros_like(p)
    assert T.adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, st, 0.1)
    assert st.t == 1
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])
    g = {"a": np.full((2, 3), np.nan), "b": np.ones(4)}
    assert not T.adam_step(p, g, st, 0.1)
    assert st.t == 1
    with pytest.raises(KeyError):
        T.adam_step(p, {"a": g["a"]}, st, 0.1)
    with pytest.raises(ValueError):
        T.adam_step(p, {"a": np.ones(6), "b": np.ones(4)}, st, 0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert T.clip_global_norm(g, 1.0) == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    T.clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_parse_config(tiny_config, tmp_path):
    cfg = T.parse_config(tiny_config())
    assert cfg.widths == (2, 3, 4) and cfg.patch_size == 16
    assert cfg.task_mix[0].manifest == str(tmp_path / "data" / "manifest.jsonl")
    assert T.parse_config(tiny_config(), seed=4).seed == 4
    text = T.config_to_text(cfg)
    (tmp_path / "copy.cfg").write_text(text)
    assert T.parse_config(tmp_path / "copy.cfg") == cfg
    for extra in ("colour = red\n", "seed = 1\n", "no equals sign\n", "use_tam = maybe\n"):
        with pytest.raises(ValueError):
            T.parse_config(tiny_config(name="bad.cfg", extra=extra))


def test_sample_batch(tiny_config, tmp_path):
    from invkernel.dataset import generate_dataset

    generate_dataset("snow", 4, (20, 20), 0, tmp_path / "snow")
    cfg = T.parse_config(tiny_config(), batch_size=16)
    cfg = dataclasses.replace(cfg, task_mix=cfg.task_mix + (T.TaskSource(1, str(tmp_path / "snow/manifest.jsonl"), 0.0),))
    sources = T.load_sources(cfg)
    b1 = T.sample_batch(cfg, sources, np.random.default_rng(0))
    b2 = T.sample_batch(cfg, sources, np.random.default_rng(0))
    assert (b1.tasks == 0).all()
    np.testing.assert_array_equal(b1.degraded, b2.degraded)
    assert b1.meta == b2.meta
    assert b1.degraded.shape == (16, 16, 16, 3)
    assert len({m[4:] for m in b1.meta}) > 1

    records = [r for r in load_manifest(cfg.task_mix[0].manifest)][:-cfg.probe_count]
    for i, (task, idx, top, left, fh, fv) in enumerate(b1.meta):
        a = records[idx].affine()
        crop = lambda x: x[top:top + 16, left:left + 16]
        I = crop(a.gain) * crop(records[idx].load_clean()) + crop(a.bias)
        if fh:
            I = I[:, ::-1]
        if fv:
            I = I[::-1]
        assert np.max(np.abs(I - b1.degraded[i])) <= 0.5 / 255 + 1e-6


def test_holdout_needs_training_records(tiny_config):
    cfg = T.parse_config(tiny_config(), probe_count=6)
    with pytest.raises(ValueError):
        T.load_sources(cfg)


def test_zero_steps_is_identity(tiny_config):
    res = T.train(T.parse_config(tiny_config(steps=0)))
    model = model_from_checkpoint(res.final_checkpoint)
    img = load_manifest(T.parse_config(tiny_config()).task_mix[0].manifest)[0].load_degraded()
    _, _, J2, _ = two_stage_forward(img, model, 0)
    assert np.max(np.abs(J2 - img)) <= 1e-6
    assert res.rows[0] == T.LOG_HEADER and len(res.rows) == 2


def test_training_run_and_log(tiny_config):
    res = T.train(T.parse_config(tiny_config()))
    assert res.rows[0] == T.LOG_HEADER
    assert [r[0] for r in res.rows[1:]] == ["0", "2", "4", "6"]
    assert res.rows[1][2] == "nan"
    assert all(math.isfinite(float(v)) for v in res.rows[-1][1:7])
    assert res.rows[-1][7:] == ["nan", "nan"]
    ck = load_checkpoint(res.final_checkpoint)
    assert ck.scalars["step"] == 6 and ck.scalars["adam_t"] == 6
    assert res.final_checkpoint.name == "step_000006"


def test_resume_is_bit_identical(tiny_config, tmp_path):
    full = T.train(T.parse_config(tiny_config(out="full")))
    cfg = T.parse_config(tiny_config(out="resumed"))
    part = T.train(dataclasses.replace(cfg, total_steps=6))
    resumed = T.train(cfg, resume=part.final_checkpoint.parent / "step_000003")
    assert full.log_path.read_bytes() == resumed.log_path.read_bytes()
    a, b = full.final_checkpoint, resumed.final_checkpoint
    assert sorted(p.name for p in a.rglob("*")) == sorted(p.name for p in b.rglob("*"))
    for p in a.rglob("*"):
        if p.is_file():
            assert filecmp.cmp(p, b / p.relative_to(a), shallow=False), p


def test_runs_are_deterministic(tiny_config):
    a = T.train(T.parse_config(tiny_config(out="a", steps=2)))
    b = T.train(T.parse_config(tiny_config(out="b", steps=2)))
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    for name, p in load_checkpoint(a.final_checkpoint).params.items():
        np.testing.assert_array_equal(p, load_checkpoint(b.final_checkpoint).params[name])


def test_divergence_aborts_with_dump(tiny_config, monkeypatch, tmp_path):
    real = T.total_loss

    def nan_loss(outputs, target, weights):
        total, grads, parts = real(outputs, target, weights)
        return math.nan, grads, parts

    monkeypatch.setattr(T, "total_loss", nan_loss)
    with pytest.raises(T.TrainingDiverged):
        T.train(T.parse_config(tiny_config()))
    dump = tmp_path / "run" / "diverged"
    assert sorted(p.name for p in dump.iterdir()) == ["kernels_stage1.tensor", "um.tensor"]


def test_one_stage_training(tiny_config):
    cfg = T.parse_config(tiny_config(steps=2), two_stage=False, use_um=False)
    res = T.train(cfg)
    assert load_checkpoint(res.final_checkpoint).config.two_stage is False
