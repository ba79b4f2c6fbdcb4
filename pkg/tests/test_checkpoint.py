import numpy as np
import pytest

from invkernel import kpn_net as kn
from invkernel.checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint

CFG = kn.ModelConfig(image_channels=3, widths=(2, 3, 4), embed_dim=2, tam_hidden=3)


def test_round_trip_is_bit_exact(tmp_path):
    model = kn.init_model(CFG, 5)
    rng = np.random.default_rng(0)
    params = model.parameters()
    for p in params.values():
        p += rng.normal(0, 1e-3, p.shape).astype(p.dtype)
    m = {k: rng.normal(size=p.shape).astype(np.float32) for k, p in params.items()}
    v = {k: rng.random(p.shape).astype(np.float32) for k, p in params.items()}
    scalars = {"step": 7, "flag": True, "lr": 1.2345678901234567e-4, "state": {"a": [1, 2]}}
    path = save_checkpoint(tmp_path / "ck", model, m, v, scalars)
    ck = load_checkpoint(path)
    assert ck.config == CFG
    assert ck.scalars == scalars
    for k, p in params.items():
        assert ck.params[k].dtype == np.float32
        np.testing.assert_array_equal(ck.params[k], p)
        np.testing.assert_array_equal(ck.adam_m[k], m[k])
        np.testing.assert_array_equal(ck.adam_v[k], v[k])
    again = model_from_checkpoint(path)
    for k, p in again.parameters().items():
        np.testing.assert_array_equal(p, params[k])
    assert not (tmp_path / "ck.partial").exists()


def test_overwrite_and_extra_files(tmp_path):
    model = kn.init_model(CFG, 0)
    extra = tmp_path / "log.csv"
    extra.write_text("step\n")
    save_checkpoint(tmp_path / "ck", model)
    save_checkpoint(tmp_path / "ck", model, extra_files=[extra])
    assert (tmp_path / "ck" / "log.csv").read_text() == "step\n"
    assert load_checkpoint(tmp_path / "ck").adam_m == {}


def test_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x", kn.init_model(kn.ModelConfig(dtype="float64", widths=(2, 2, 2)), 0))
    path = save_checkpoint(tmp_path / "ck", kn.init_model(CFG, 0))
    index = path / "index.txt"
    index.write_text(index.read_text().replace("invkernel-checkpoint 1", "other 9"))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
