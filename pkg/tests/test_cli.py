import csv
import json
import os

import numpy as np
import pytest

from landmark_srt import experiment as ex
from landmark_srt.cli import main
from landmark_srt.training import write_checkpoint

TINY = (
    "seed: 4\nmode: srt\nscene: {K: 3, T: 6}\ndata: {n_labeled: 16, n_test: 6}\n"
    "train: {n_labeled: 8, n_triplets: 3, n_quadruplets: 2, stage1_epochs: 2, stage2_epochs: 2,"
    " log_images: 4, log_pairs: 1, t_fb_frac: 1.0, t_d_frac: 1.0, t_tri_frac: 1.0}\n"
    "metrics: {n_pairs: 2}\nflowcheck: {n_points: 40}\n"
)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "c.yaml"
    cfg.write_text(TINY)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, str(cfg), str(root / "data")


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_synth_layout(tiny):
    root, _, data = tiny
    for name in ("video", "labeled", "test", "config.yaml", "config_hash"):
        assert os.path.exists(os.path.join(data, name))
    cfg = ex.load_config(os.path.join(data, "config.yaml"))
    assert open(os.path.join(data, "config_hash")).read().strip() == ex.config_hash(cfg)


def test_config_hash_stable_under_key_order():
    a = ex.load_config(None)
    b = ex._merge(ex.DEFAULTS, {"weights": {"w_sbt": 0.5, "w_sbr": 0.5}})
    assert ex.config_hash(a) == ex.config_hash(b)
    assert ex.config_hash(a) != ex.config_hash(ex.set_path(a, "weights.w_sbr", 0.25))
    assert len(ex.config_hash(a)) == 16


def test_mode_sets_weights():
    cfg = ex.load_config(None)
    w = {m: ex.train_config(dict(cfg, mode=m)) for m in ex.EXPERIMENT_MODES}
    assert (w["baseline"].w_sbr, w["baseline"].w_sbt, w["baseline"].unlabeled_terms) == (0, 0, False)
    assert (w["sbr"].w_sbr, w["sbr"].w_sbt, w["sbr"].n_quadruplets) == (0.5, 0, 0)
    assert (w["sbt"].w_sbr, w["sbt"].w_sbt, w["sbt"].n_triplets) == (0, 0.5, 0)
    assert (w["srt"].w_sbr, w["srt"].w_sbt) == (0.5, 0.5)


@pytest.mark.parametrize("text", [
    "mode: fancy\n",
    "seed: -1\n",
    "bogus: 1\n",
    "train: {seed: 3}\n",
    "weights: {w_sbr: -1, w_sbt: 0}\n",
    "data: {data_fraction: 0}\n",
    "scene: {K: 12}\n",
])
def test_bad_config_exit_2(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_infeasible_scene_exit_2(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("scene: {focal: 400.0, T: 4}\n")
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["train", "--out", str(tmp_path), "--data", str(tmp_path / "missing")]) == 2
    assert main(["ablate", "--out", str(tmp_path), "--jobs", "0"]) == 2


def test_eval_k_mismatch_exit_2(tiny, tmp_path):
    root, cfg, data = tiny
    ck = tmp_path / "oracle.txt"
    write_checkpoint(ck, mode="oracle", K=5)
    assert main(["eval", "--config", cfg, "--data", data, "--checkpoint", str(ck), "--out", str(tmp_path / "e")]) == 2


def test_oracle_eval_is_zero_and_repeatable(tiny, tmp_path):
    root, cfg, data = tiny
    ck = tmp_path / "oracle.txt"
    write_checkpoint(ck, mode="oracle", K=3)
    outs = [str(tmp_path / "e1"), str(tmp_path / "e2")]
    for o in outs:
        assert main(["eval", "--config", cfg, "--data", data, "--checkpoint", str(ck), "--out", o]) == 0
    rows = read_csv(os.path.join(outs[0], "report.csv"))
    assert list(rows[0]) == ["metric", "value", "normalizer", "seed", "config_hash"]
    vals = {r["metric"]: float(r["value"]) for r in rows}
    assert vals["nme"] < 1e-12 and vals["p_error"] < 1e-12 and vals["failure@0.1"] == 0
    for name in ("report.csv", "per_sample.csv"):
        a = open(os.path.join(outs[0], name)).read()
        assert a == open(os.path.join(outs[1], name)).read()
    assert len(read_csv(os.path.join(outs[0], "per_sample.csv"))) == 6


@pytest.fixture(scope="module")
def trained(tiny):
    root, cfg, data = tiny
    out = {}
    for mode in ("baseline", "srt"):
        o = str(root / f"train_{mode}")
        assert main(["train", "--config", cfg, "--data", data, "--mode", mode, "--out", o]) == 0
        out[mode] = o
    return out


def test_train_logs(trained):
    base = read_jsonl(os.path.join(trained["baseline"], "metrics.jsonl"))
    srt = read_jsonl(os.path.join(trained["srt"], "metrics.jsonl"))
    assert [r["epoch"] for r in base] == [1, 2, 3, 4]
    assert all(r["l_sbr"] == 0 and r["l_sbt"] == 0 for r in base)
    assert all(r["mode"] == "srt" and r["w_sbr"] == 0.5 and r["w_sbt"] == 0.5 for r in srt)
    assert any(r["l_sbr"] > 0 for r in srt if r["stage"] == 2)
    assert len({r["config_hash"] for r in srt}) == 1
    # stage 1 ignores the mode, so the first two epochs agree
    for a, b in zip(base[:2], srt[:2]):
        assert a["l_det"] == b["l_det"] and a["nme"] == b["nme"]


def test_cli_resume_bit_exact(tiny, trained, tmp_path):
    root, cfg, data = tiny
    half = str(tmp_path / "half")
    full = str(tmp_path / "full")
    assert main(["train", "--config", cfg, "--data", data, "--out", half, "--stop-after", "3"]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", full,
                 "--resume", os.path.join(half, "checkpoint.txt")]) == 0
    a = open(os.path.join(full, "checkpoint.txt")).read()
    assert a == open(os.path.join(trained["srt"], "checkpoint.txt")).read()
    assert read_jsonl(os.path.join(full, "metrics.jsonl")) == read_jsonl(os.path.join(trained["srt"], "metrics.jsonl"))


def test_resume_rejects_other_config(tiny, trained, tmp_path):
    root, cfg, data = tiny
    ck = os.path.join(trained["srt"], "checkpoint.txt")
    assert main(["train", "--config", cfg, "--data", data, "--seed", "5", "--out", str(tmp_path),
                 "--resume", ck]) == 2


def test_ablate_single_cell_matches_train_eval(tiny, trained, tmp_path):
    root, cfg, data = tiny
    p = tmp_path / "a.yaml"
    p.write_text(TINY + "ablate: {seeds: [4]}\n")
    assert main(["ablate", "--config", str(p), "--out", str(tmp_path / "ab")]) == 0
    rows = read_csv(tmp_path / "ab" / "ablate.csv")
    assert [r["seed"] for r in rows] == ["4", "mean"]
    ev = tmp_path / "ev"
    assert main(["eval", "--config", cfg, "--data", data, "--out", str(ev),
                 "--checkpoint", os.path.join(trained["srt"], "checkpoint.txt")]) == 0
    rep = {r["metric"]: r["value"] for r in read_csv(ev / "report.csv")}
    assert rows[0]["nme"] == rep["nme"] and rows[0]["p_error"] == rep["p_error"]
    assert rows[0]["status"] == "ok"


def test_ablate_grid_cells_and_failures(tmp_path):
    cfg = ex.load_config(None)
    cfg["ablate"]["grid"] = {"weights.w_sbr": [0.0, 0.5], "scene.label_noise_std": [0.0, 1.0, 2.0]}
    cells = ex.grid_cells(cfg)
    assert len(cells) == 6
    assert cells[0] == {"weights.w_sbr": 0.0, "scene.label_noise_std": 0.0}
    assert cells[1] == {"weights.w_sbr": 0.0, "scene.label_noise_std": 1.0}
    assert ex.ablate_seeds(dict(cfg, seed=7)) == [7, 8, 9]
    bad = ex.load_config(None)
    r = ex.run_cell((bad, {"scene.K": 99}, 0))
    assert r["status"].startswith("error") and np.isnan(r["nme"])


def test_ablate_parallel_matches_serial(tmp_path):
    p = tmp_path / "a.yaml"
    p.write_text(TINY.replace("stage2_epochs: 2", "stage2_epochs: 0")
                 + "ablate: {seeds: [0], grid: {data.data_fraction: [0.5, 1.0]}}\n")
    assert main(["ablate", "--config", str(p), "--out", str(tmp_path / "s")]) == 0
    assert main(["ablate", "--config", str(p), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    a = (tmp_path / "s" / "ablate.csv").read_text()
    assert a == (tmp_path / "p" / "ablate.csv").read_text()
    assert len(read_csv(tmp_path / "s" / "ablate.csv")) == 4


def test_flowcheck_static_scene_is_zero(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("scene: {K: 3, T: 4, rot_amp_deg: [0, 0, 0], trans_amp: [0, 0, 0]}\n"
                 "data: {n_labeled: 2, n_test: 2}\nflowcheck: {n_points: 30}\n")
    d = str(tmp_path / "d")
    assert main(["synth", "--config", str(p), "--out", d]) == 0
    assert main(["flowcheck", "--config", str(p), "--data", d, "--out", str(tmp_path / "f")]) == 0
    rows = read_csv(tmp_path / "f" / "flowcheck.csv")
    assert rows[-1]["frame"] == "all" and int(rows[-1]["count"]) == 30
    assert float(rows[-1]["max"]) < 1e-6
    assert [r["frame"] for r in rows[:-1]] == ["1", "2", "3"]


def test_data_fraction_nested(tiny):
    root, cfg, data = tiny
    labeled, _, _ = ex.read_data(data)
    small = ex.select_fraction(labeled, 0.25, 11)
    big = ex.select_fraction(labeled, 0.5, 11)
    assert len(small) == 4 and len(big) == 8
    rows = {tuple(r.ravel()) for r in big.landmarks}
    assert all(tuple(r.ravel()) in rows for r in small.landmarks)


def test_label_noise_only_on_labeled():
    clean = ex.load_config(None, seed=1)
    clean["scene"] = {"K": 3, "T": 2}
    clean["data"] = {"n_labeled": 10, "n_test": 5, "data_fraction": 1.0}
    noisy = ex.set_path(clean, "scene.label_noise_std", 2.0)
    l0, _, t0 = ex.make_data(clean)
    l1, _, t1 = ex.make_data(noisy)
    assert np.array_equal(t0.landmarks, t1.landmarks)
    assert np.array_equal(l0.images, l1.images)
    d = (l1.landmarks - l0.landmarks).ravel()
    assert d.size == 60 and 1.0 < d.std() < 3.0
