import filecmp
import json

import numpy as np
import pytest

from invkernel.dataset import Record, generate_dataset, load_manifest, parse_size
from invkernel.image_core import save_image


def tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_identical(a / d, b / d) for d in cmp.common_dirs)


def test_same_seed_is_byte_identical(tmp_path):
    generate_dataset("all", 6, (16, 16), 3, tmp_path / "a")
    generate_dataset("all", 6, (16, 16), 3, tmp_path / "b")
    assert tree_identical(tmp_path / "a", tmp_path / "b")
    generate_dataset("all", 6, (16, 16), 4, tmp_path / "c")
    assert not tree_identical(tmp_path / "a", tmp_path / "c")


def test_all_splits_evenly(tmp_path):
    recs = load_manifest(generate_dataset("all", 30, (8, 8), 0, tmp_path / "d"))
    assert [sum(r.task_id == t for r in recs) for t in range(3)] == [10, 10, 10]
    recs = load_manifest(generate_dataset("all", 4, (8, 8), 0, tmp_path / "e"))
    assert [sum(r.task_id == t for r in recs) for t in range(3)] == [2, 1, 1]


def test_haze_count(tmp_path):
    recs = load_manifest(generate_dataset("haze", 2, (8, 8), 0, tmp_path / "d"))
    assert len(recs) == 2 and {r.task_id for r in recs} == {2}


@pytest.mark.parametrize("task,mode", [("rain", "additive"), ("rain", "gain"), ("snow", "additive"),
                                       ("haze", "additive")])
def test_stored_pairs_obey_affine_maps(tmp_path, task, mode):
    for fmt, tol in (("png", 0.5 / 255 + 1e-6), ("tensor", 1e-6)):
        man = generate_dataset(task, 3, (12, 10), 1, tmp_path / fmt, rain_mode=mode, degraded_format=fmt)
        for rec in load_manifest(man):
            I = rec.affine().apply(rec.load_clean().astype(np.float64))
            assert np.max(np.abs(I - rec.load_degraded())) <= tol


def test_clean_dir_source(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    save_image(np.random.default_rng(0).random((20, 24, 3)), src / "a.png")
    recs = load_manifest(generate_dataset("snow", 2, (8, 8), 0, tmp_path / "d", clean_dir=src))
    assert recs[0].load_clean().shape == (8, 8, 3)


def test_manifest_records_round_trip(tmp_path):
    man = generate_dataset("rain", 1, (8, 8), 0, tmp_path / "d")
    line = man.read_text().splitlines()[0]
    d = json.loads(line)
    assert set(d) == {"id", "task_id", "clean_path", "degraded_path", "aux_paths", "seed", "params"}
    assert load_manifest(man)[0].to_json() == line


def test_bad_inputs(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset("rain", 0, (8, 8), 0, tmp_path)
    with pytest.raises(ValueError):
        generate_dataset("fog", 1, (8, 8), 0, tmp_path)
    with pytest.raises(ValueError):
        parse_size("8by8")
    with pytest.raises(ValueError):
        parse_size("2x8")
    bad = tmp_path / "m.jsonl"
    bad.write_text('{"id": 1}\n')
    with pytest.raises(ValueError):
        load_manifest(bad)
    bad.write_text(Record("x", 7, "a", "b").to_json() + "\n")
    with pytest.raises(ValueError):
        load_manifest(bad)
