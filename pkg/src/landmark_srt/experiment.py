"""Experiment configuration, on-disk artifacts and the commands behind the CLI.

A config is a nested YAML mapping (see ``DEFAULTS``). Every artifact echoes a
``config_hash``: the first 16 hex digits of SHA-256 over the canonical JSON of
the resolved config, so outputs can be matched to the settings that made them.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import math
import os

import numpy as np
import yaml

from .lk_flow import track_landmark_interp, track_landmark_lk
from .metrics import format_report
from .rng import child_seed, stream
from .synthworld import (
    ImageSet,
    SceneConfig,
    generate_image_set,
    generate_scene,
    perturb_annotations,
    read_image_set,
    read_scene,
    write_image_set,
    write_scene,
)
from .training import (
    Checkpoint,
    TrainConfig,
    TrainData,
    Trainer,
    evaluate,
    read_checkpoint,
    resume,
    write_checkpoint,
)

EXPERIMENT_MODES = ("baseline", "sbr", "sbt", "srt")

DEFAULTS = {
    "seed": 0,
    "mode": "srt",
    "scene": {},
    "data": {"n_labeled": 200, "n_test": 100, "data_fraction": 1.0},
    "train": {},
    "weights": {"w_sbr": 0.5, "w_sbt": 0.5},
    "metrics": {"auc_threshold": 0.08, "failure_threshold": 0.1, "n_pairs": 4},
    "flowcheck": {"n_points": 500},
    "ablate": {"seeds": None, "grid": {}},
}
ABLATE_COLUMNS = ("cell", "seed", "axes", "nme", "auc", "failure", "p_error", "status", "config_hash")
FLOWCHECK_COLUMNS = ("frame", "count", "mean", "max", "config_hash")


class ConfigError(ValueError):
    """Bad or inconsistent user configuration (exit code 2)."""


# --- configuration ---------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if where == "" and k not in DEFAULTS:
            raise ConfigError(f"unknown config section {k!r}")
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "grid":
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, **overrides) -> dict:
    """Defaults, then the YAML file, then non-``None`` keyword overrides (seed, mode)."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    validate(cfg)
    return cfg


def set_path(cfg: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(cfg)
    keys = dotted.split(".")
    node = out
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r} does not name a config entry")
    node[keys[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    text = json.dumps(_plain(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def scene_config(cfg: dict) -> SceneConfig:
    d = dict(cfg["scene"])
    if "seed" in d:
        raise ConfigError("the scene seed is derived from the top-level seed")
    return SceneConfig.from_dict({**d, "seed": child_seed(int(cfg["seed"]), "scene")})


def train_config(cfg: dict) -> TrainConfig:
    """Training settings; the experiment mode decides which weights are active."""
    d = dict(cfg["train"])
    for key in ("seed", "w_sbr", "w_sbt", "unlabeled_terms"):
        if key in d:
            raise ConfigError(f"train.{key} is set through the top-level seed, mode and weights")
    mode = cfg["mode"]
    w = cfg["weights"]
    w_sbr = float(w["w_sbr"]) if mode in ("sbr", "srt") else 0.0
    w_sbt = float(w["w_sbt"]) if mode in ("sbt", "srt") else 0.0
    if "K" not in d:
        d["K"] = scene_config(cfg).K
    # each mode only draws the unlabelled items its losses use
    if mode == "sbr":
        d["n_quadruplets"] = 0
    elif mode == "sbt":
        d["n_triplets"] = 0
    return TrainConfig.from_dict({**d, "seed": int(cfg["seed"]), "w_sbr": w_sbr, "w_sbt": w_sbt,
                                  "unlabeled_terms": mode != "baseline"})


def validate(cfg: dict) -> None:
    try:
        if cfg["mode"] not in EXPERIMENT_MODES:
            raise ConfigError(f"mode must be one of {EXPERIMENT_MODES}")
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        extra = set(cfg["data"]) - set(DEFAULTS["data"])
        extra |= {"metrics." + k for k in set(cfg["metrics"]) - set(DEFAULTS["metrics"])}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}")
        d = cfg["data"]
        if int(d["n_labeled"]) < 1 or int(d["n_test"]) < 1 or not 0 < float(d["data_fraction"]) <= 1:
            raise ConfigError("need n_labeled, n_test >= 1 and 0 < data_fraction <= 1")
        if min(float(cfg["weights"]["w_sbr"]), float(cfg["weights"]["w_sbt"])) < 0:
            raise ConfigError("weights must be non-negative")
        scene_config(cfg)
        train_config(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(str(e)) from e


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(_plain(cfg), sort_keys=True, default_flow_style=False)


# --- data ------------------------------------------------------------------------

def make_data(cfg: dict):
    """``(labeled, video, test)`` for a resolved config.

    Label noise is applied to the labelled set only; boxes stay the clean ones.
    """
    sc = scene_config(cfg)
    video = generate_scene(sc)
    labeled = generate_image_set(sc, int(cfg["data"]["n_labeled"]), "labeled")
    test = generate_image_set(sc, int(cfg["data"]["n_test"]), "test")
    if sc.label_noise_std > 0:
        noisy = perturb_annotations(labeled.landmarks, sc.label_noise_std, sc.seed, "label_noise")
        labeled = ImageSet(labeled.images, noisy, labeled.bboxes)
    return labeled, video, test


def select_fraction(labeled: ImageSet, fraction: float, seed: int) -> ImageSet:
    """A seeded subset; smaller fractions are prefixes of larger ones."""
    n = len(labeled)
    keep = max(1, int(round(fraction * n)))
    if keep == n:
        return labeled
    order = stream(seed, "data_fraction").permutation(n)
    return labeled.subset(np.sort(order[:keep]))


def write_data(out: str, cfg: dict, labeled, video, test) -> None:
    os.makedirs(out, exist_ok=True)
    write_scene(video, os.path.join(out, "video"))
    write_image_set(labeled, os.path.join(out, "labeled"))
    write_image_set(test, os.path.join(out, "test"))
    _write_text(os.path.join(out, "config.yaml"), dump_config(cfg))
    _write_text(os.path.join(out, "config_hash"), config_hash(cfg) + "\n")


def read_data(path: str):
    if not os.path.isdir(path):
        raise ConfigError(f"no data directory at {path}")
    try:
        return (read_image_set(os.path.join(path, "labeled")), read_scene(os.path.join(path, "video")),
                read_image_set(os.path.join(path, "test")))
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


# --- commands ----------------------------------------------------------------------

def cmd_synth(cfg: dict, out: str) -> None:
    write_data(out, cfg, *make_data(cfg))


def _train_data(cfg: dict, labeled, video) -> TrainData:
    labeled = select_fraction(labeled, float(cfg["data"]["data_fraction"]), child_seed(int(cfg["seed"]), "data"))
    return TrainData(labeled, video)


def run_training(cfg: dict, labeled, video, resume_from: Checkpoint | None = None,
                 stop_after: int | None = None) -> Trainer:
    data = _train_data(cfg, labeled, video)
    if video is not None and video.config.K != train_config(cfg).K:
        raise ConfigError("scene and training config disagree on K")
    if resume_from is not None:
        if resume_from.config_hash != config_hash(cfg):
            raise ConfigError("checkpoint was written with a different config")
        tr = resume(data, resume_from)
    else:
        tr = Trainer(data, train_config(cfg))
    tr.train(stop_after)
    return tr


def log_lines(tr: Trainer, cfg: dict) -> str:
    h = config_hash(cfg)
    rows = []
    for e in tr.log:
        rec = {**e, "mode": cfg["mode"], "w_sbr": tr.cfg.w_sbr, "w_sbt": tr.cfg.w_sbt, "config_hash": h}
        rows.append(json.dumps(rec, sort_keys=True))
    return "".join(r + "\n" for r in rows)


def cmd_train(cfg: dict, data_dir: str, out: str, resume_path: str | None = None,
              stop_after: int | None = None) -> Trainer:
    labeled, video, _ = read_data(data_dir)
    ck = read_checkpoint(resume_path) if resume_path else None
    tr = run_training(cfg, labeled, video, ck, stop_after)
    os.makedirs(out, exist_ok=True)
    write_checkpoint(os.path.join(out, "checkpoint.txt"), tr, config_hash=config_hash(cfg))
    _write_text(os.path.join(out, "metrics.jsonl"), log_lines(tr, cfg))
    _write_text(os.path.join(out, "config.yaml"), dump_config(cfg))
    return tr


def evaluate_rows(model, test: ImageSet, cfg: dict, h: str) -> tuple[list, dict]:
    m = cfg["metrics"]
    ev = evaluate(model, test, int(m["n_pairs"]), child_seed(int(cfg["seed"]), "elt"),
                  float(m["auc_threshold"]), float(m["failure_threshold"]))
    seed = int(cfg["seed"])
    rows = [
        {"metric": "nme", "value": ev["nme"], "normalizer": "sqrt_bbox_area", "seed": seed, "config_hash": h},
        {"metric": f"auc@{m['auc_threshold']}", "value": ev["auc"], "normalizer": "sqrt_bbox_area",
         "seed": seed, "config_hash": h},
        {"metric": f"failure@{m['failure_threshold']}", "value": ev["failure"], "normalizer": "sqrt_bbox_area",
         "seed": seed, "config_hash": h},
    ]
    if "p_error" in ev:
        rows.append({"metric": "p_error", "value": ev["p_error"], "normalizer": "sqrt_bbox_area",
                     "seed": seed, "config_hash": h})
    return rows, ev


def cmd_eval(cfg: dict, checkpoint: str, data_dir: str, out: str) -> dict:
    try:
        ck = read_checkpoint(checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot read checkpoint {checkpoint}: {e}") from e
    _, _, test = read_data(data_dir)
    K = test.landmarks.shape[1]
    if ck.K != K:
        raise ConfigError(f"checkpoint has K={ck.K} but the test set has K={K}")
    rows, ev = evaluate_rows(ck.model(), test, cfg, ck.config_hash or config_hash(cfg))
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "report.csv"), format_report(rows))
    per = io.StringIO()
    w = csv.writer(per, lineterminator="\n")
    w.writerow(("index", "nme"))
    for i, v in enumerate(ev["per_sample"]):
        w.writerow((i, format(float(v), ".17g")))
    _write_text(os.path.join(out, "per_sample.csv"), per.getvalue())
    return ev


# --- ablation --------------------------------------------------------------------

def grid_cells(cfg: dict) -> list[dict]:
    """Cartesian product of the grid axes, first axis slowest, in file order."""
    grid = cfg["ablate"].get("grid") or {}
    axes = list(grid.items())
    for name, vals in axes:
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid axis {name!r} needs a non-empty list")
    return [dict(zip([a for a, _ in axes], combo)) for combo in itertools.product(*[v for _, v in axes])]


def ablate_seeds(cfg: dict) -> list[int]:
    seeds = cfg["ablate"].get("seeds")
    base = int(cfg["seed"])
    return [base, base + 1, base + 2] if seeds is None else [int(s) for s in seeds]


def run_cell(args) -> dict:
    """Data, training and evaluation for one (cell, seed); errors become a status."""
    base, cell, seed = args
    cfg = base
    try:
        for k, v in cell.items():
            cfg = set_path(cfg, k, v)
        cfg = set_path(cfg, "seed", seed)
        validate(cfg)
        labeled, video, test = make_data(cfg)
        tr = run_training(cfg, labeled, video)
        _, ev = evaluate_rows(tr.model(), test, cfg, "")
        return {"nme": ev["nme"], "auc": ev["auc"], "failure": ev["failure"],
                "p_error": ev.get("p_error", math.nan), "status": "ok", "config_hash": config_hash(cfg)}
    except Exception as e:  # a failed cell is recorded and the sweep goes on
        return {"nme": math.nan, "auc": math.nan, "failure": math.nan, "p_error": math.nan,
                "status": f"error: {type(e).__name__}: {e}", "config_hash": ""}


def cmd_ablate(cfg: dict, out: str | None = None, jobs: int = 1) -> list[dict]:
    cells = grid_cells(cfg)
    seeds = ablate_seeds(cfg)
    if not seeds:
        raise ConfigError("ablate needs at least one seed")
    base = copy.deepcopy(cfg)
    base["ablate"] = copy.deepcopy(DEFAULTS["ablate"])
    tasks = [(base, cell, s) for cell in cells for s in seeds]
    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(run_cell, tasks)
    else:
        results = [run_cell(t) for t in tasks]
    rows = []
    for ci, cell in enumerate(cells):
        res = results[ci * len(seeds):(ci + 1) * len(seeds)]
        axes = json.dumps(cell, sort_keys=False)
        for s, r in zip(seeds, res):
            rows.append({"cell": ci, "seed": s, "axes": axes, **r})
        ok = [r for r in res if r["status"] == "ok"]
        mean = {k: float(np.mean([r[k] for r in ok])) if ok else math.nan
                for k in ("nme", "auc", "failure", "p_error")}
        status = "ok" if len(ok) == len(res) else f"{len(res) - len(ok)} of {len(res)} seeds failed"
        rows.append({"cell": ci, "seed": "mean", "axes": axes, **mean, "status": status,
                     "config_hash": config_hash(cfg)})
    if out is not None:
        os.makedirs(out, exist_ok=True)
        _write_text(os.path.join(out, "ablate.csv"), format_ablate(rows))
        _write_text(os.path.join(out, "config.yaml"), dump_config(cfg))
    return rows


def format_ablate(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        r = {k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()}
        w.writerow(r)
    return buf.getvalue()


# --- flow check --------------------------------------------------------------------

def flow_discrepancy(scene, n_points: int, seed: int):
    """Compare interpolating the scene's dense flow with LK tracking at landmarks.

    Samples ``(view, frame, landmark)`` triples (without replacement when
    possible) and tracks the ground-truth landmark of frame t-1 into frame t
    both ways. Returns ``(per-point distances, frame of each point)``.
    """
    M, T = scene.shape
    K = scene.landmarks2d.shape[2]
    if T < 2:
        raise ConfigError("flow check needs at least two frames")
    cand = [(m, t, k) for m in range(M) for t in range(1, T) for k in range(K)]
    rng = stream(seed, "flowcheck")
    pick = rng.choice(len(cand), size=n_points, replace=n_points > len(cand))
    dist = np.zeros(n_points)
    frames = np.zeros(n_points, dtype=np.int64)
    for i, j in enumerate(pick):
        m, t, k = cand[j]
        x = scene.landmarks2d[m, t - 1, k]
        lk = track_landmark_lk(scene.images[m, t - 1], scene.images[m, t], x)
        it = track_landmark_interp(scene.flow[m, t, 0], scene.flow[m, t, 1], x)
        dist[i] = np.linalg.norm(lk.point - it) if lk.valid else np.nan
        frames[i] = t
    return dist, frames


def cmd_flowcheck(cfg: dict, data_dir: str, out: str | None = None) -> dict:
    path = os.path.join(data_dir, "video")
    if not os.path.isdir(path):
        path = data_dir
    try:
        scene = read_scene(path)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e
    dist, frames = flow_discrepancy(scene, int(cfg["flowcheck"]["n_points"]), child_seed(int(cfg["seed"]), "flowcheck"))
    h = config_hash(cfg)
    ok = np.isfinite(dist)
    rows = []
    for t in sorted(set(frames.tolist())):
        d = dist[(frames == t) & ok]
        rows.append({"frame": t, "count": int(d.size), "mean": float(d.mean()) if d.size else math.nan,
                     "max": float(d.max()) if d.size else math.nan, "config_hash": h})
    summary = {"frame": "all", "count": int(ok.sum()), "mean": float(dist[ok].mean()) if ok.any() else math.nan,
               "max": float(dist[ok].max()) if ok.any() else math.nan, "config_hash": h}
    rows.append(summary)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=FLOWCHECK_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
        _write_text(os.path.join(out, "flowcheck.csv"), buf.getvalue())
    return {"rows": rows, "mean": summary["mean"], "max": summary["max"], "invalid": int((~ok).sum())}

