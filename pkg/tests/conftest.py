import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=8, w=8, c=3, dtype=np.float32):
    return rng.random((h, w, c)).astype(dtype)


TINY_TRAIN = """\
total_steps = {steps}
batch_size = 2
patch_size = 16
task_mix = rain:data/manifest.jsonl:1
checkpoint_every = {ckpt}
log_every = 2
probe_count = 2
widths = 2,3,4
embed_dim = 2
tam_hidden = 3
seed = 11
out_dir = {out}
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Write a small gain-rain dataset once; return a factory for config files."""
    from invkernel.dataset import generate_dataset

    generate_dataset("rain", 6, (20, 20), 3, tmp_path / "data", rain_mode="gain")

    def make(steps=6, ckpt=3, out="run", name="train.cfg", extra=""):
        path = tmp_path / name
        path.write_text(TINY_TRAIN.format(steps=steps, ckpt=ckpt, out=out) + extra)
        return path

    return make


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    seen = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" not in props:
                continue
            n = props["criterion"]
            ok = rep.passed and rep.when == "call"
            if n not in seen or not ok:
                seen[n] = (ok, props.get("detail", ""))
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(seen):
        ok, detail = seen[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
