import csv
import filecmp

import pytest

from invkernel import ablation as A
from invkernel.bench import parse_scale_sets, run_bench
from invkernel.cli import main
from invkernel.trainer import parse_config


def test_parse_scale_sets():
    assert parse_scale_sets("1,2,4;1,2,16") == [(1, 2, 4), (1, 2, 16)]
    for bad in ("", "1,1", "0,2"):
        with pytest.raises(ValueError):
            parse_scale_sets(bad)


def test_bench_rows_agree():
    rows = run_bench([(16, 16)], [(1, 2, 4)], reps=2)
    assert rows[0].max_abs_diff <= 1e-5 and rows[0].naive_ms > 0 and rows[0].speedup > 0


def test_variant_configs(tiny_config):
    cfg = parse_config(tiny_config())
    one = A.variant_config(cfg, "one-stage")
    assert not one.two_stage and one.out_dir.endswith("one-stage")
    assert not A.variant_config(cfg, "no-um").use_um
    assert not A.variant_config(cfg, "no-tam").use_tam
    assert A.variant_config(cfg, "no-multiscale").scales == (1,)
    assert A.variant_config(cfg, "full") == A.dataclasses.replace(cfg, out_dir=cfg.out_dir + "/full")
    with pytest.raises(ValueError):
        A.variant_config(cfg, "best")


def test_ablate_command_is_deterministic(tiny_config, tmp_path):
    cfg = tiny_config(steps=2, ckpt=2)
    for rep in ("a.csv", "b.csv"):
        assert main(["ablate", "--config", str(cfg), "--variants", "one-stage,full,no-multiscale",
                     "--report", str(tmp_path / rep)]) == 0
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows[0] == A.ABLATION_HEADER
    assert [r[:5] for r in rows[1:]] == [["one-stage", "1", "no", "yes", "yes"],
                                         ["full", "2", "yes", "yes", "yes"],
                                         ["no-multiscale", "2", "yes", "yes", "no"]]
    assert rows[1][-1] == "0.0000"


def test_full_only_single_row(tiny_config, tmp_path):
    cfg = parse_config(tiny_config(steps=1, ckpt=1))
    rows = A.run_ablation(cfg, ["full"], report=tmp_path / "r.csv")
    assert len(rows) == 1 and len((tmp_path / "r.csv").read_text().splitlines()) == 2
