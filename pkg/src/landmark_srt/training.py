"""Batch assembly, the joint detection / SBR / SBT step, and the two-stage loop.

Detections are produced in crop coordinates and mapped to full-image
coordinates with the inverse crop transform; tracking, triangulation and the
reliability checks all work in image pixels, and their gradients are chained
back to the crop (and, for heatmaps, through soft-argmax to the maps).

Every source of randomness has its own named stream (``labeled``, ``augment``,
``triplet``, ``quad``, ``init``, ``elt``), so switching the unlabelled terms
on or off never changes what the supervised part of a step sees.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import detector as det
from .camera_geometry import CheiralityWarning, DegenerateGeometryError, reprojection_jacobian
from .lk_flow import (
    PatchSpec,
    TrackingError,
    lk_dense_flow,
    reliability_rule,
    track_gradient_lk,
    track_landmark_lk,
    warp_field_adjoint,
    warp_field_by_flow,
)
from .metrics import auc_at, failure_rate, pair_discrepancy
from .rng import stream
from .supervision import (
    Thresholds,
    detection_loss_heatmap,
    detection_loss_regression,
    sbr_loss_coords,
    sbr_loss_heatmap,
    sbt_loss_heatmap,
    sbt_loss_multiview,
)
from .synthworld import (
    AugmentConfig,
    EltConfig,
    ImageSet,
    Scene,
    affine_apply,
    affine_invert,
    augment,
    bbox_scale,
    center_crop,
    elt_transform_pair,
)
from .tensor_core import in_bounds, sample

TRACKERS = ("interp", "lk")
FLOW_SOURCES = ("gt", "lk_dense")
HEATMAP_SBT = ("map", "softargmax_l1")


@dataclass
class TrainConfig:
    mode: str = "regression"
    K: int = 5
    crop: int = 32
    c1: int = 8
    c2: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stage1_epochs: int = 40
    stage2_epochs: int = 20
    seed: int = 0
    n_labeled: int = 32
    n_triplets: int = 32
    n_quadruplets: int = 16
    w_sbr: float = 0.0
    w_sbt: float = 0.0
    t_fb_frac: float = 0.01
    t_d_frac: float = 0.01
    t_tri_frac: float = 0.01
    sigma_gt: float = 1.5
    decode_temperature: float = 0.05
    tracker: str = "interp"
    flow_source: str = "gt"
    stop_source_grad: bool = False
    heatmap_sbt: str = "map"
    augment: bool = True
    augment_video: bool = True
    unlabeled_terms: bool = True
    log_images: int = 16
    log_pairs: int = 2

    def __post_init__(self):
        if self.mode not in det.MODES:
            raise ValueError(f"mode must be one of {det.MODES}")
        if self.tracker not in TRACKERS:
            raise ValueError(f"tracker must be one of {TRACKERS}")
        if self.flow_source not in FLOW_SOURCES:
            raise ValueError(f"flow_source must be one of {FLOW_SOURCES}")
        if self.heatmap_sbt not in HEATMAP_SBT:
            raise ValueError(f"heatmap_sbt must be one of {HEATMAP_SBT}")
        if min(self.n_labeled, self.stage1_epochs + self.stage2_epochs) < 1:
            raise ValueError("need a positive labelled batch and at least one epoch")
        if min(self.n_triplets, self.n_quadruplets, self.stage1_epochs, self.stage2_epochs) < 0:
            raise ValueError("counts must be non-negative")
        if not self.lr > 0 or not self.sigma_gt > 0 or not self.decode_temperature > 0:
            raise ValueError("lr, sigma_gt and decode_temperature must be positive")
        if min(self.w_sbr, self.w_sbt) < 0:
            raise ValueError("loss weights must be non-negative")
        Thresholds(self.t_fb_frac, self.t_d_frac, self.t_tri_frac)

    @property
    def arch(self) -> det.ArchConfig:
        return det.ArchConfig(self.mode, self.K, self.crop, self.c1, self.c2)

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds(self.t_fb_frac, self.t_d_frac, self.t_tri_frac)

    @property
    def adam(self) -> det.AdamConfig:
        return det.AdamConfig(self.lr, self.beta1, self.beta2, self.eps)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainData:
    labeled: ImageSet
    video: Scene | None = None


# --- sampling ------------------------------------------------------------------

def _rng_state(rng) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=lambda a: [int(v) for v in a]))


def _set_rng_state(rng, st: dict) -> None:
    st = json.loads(json.dumps(st))
    inner = st["state"]
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    rng.bit_generator.state = st


class EpochSampler:
    """Indices ``0..n-1`` without replacement, reshuffled after every pass."""

    def __init__(self, n: int, rng):
        if n < 1:
            raise ValueError("cannot sample from an empty pool")
        self.n = n
        self.rng = rng
        self.perm = None
        self.pos = 0

    def draw(self, k: int) -> list:
        out = []
        while len(out) < k:
            if self.perm is None or self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            take = min(k - len(out), self.n - self.pos)
            out.extend(int(i) for i in self.perm[self.pos:self.pos + take])
            self.pos += take
        return out

    def state(self) -> dict:
        return {"perm": None if self.perm is None else [int(i) for i in self.perm],
                "pos": self.pos, "rng": _rng_state(self.rng)}

    def load(self, st: dict) -> None:
        self.perm = None if st["perm"] is None else np.array(st["perm"], dtype=np.int64)
        self.pos = st["pos"]
        _set_rng_state(self.rng, st["rng"])


@dataclass
class Batch:
    labeled: list
    triplets: list = field(default_factory=list)   # (view, first frame)
    quads: list = field(default_factory=list)      # (frame, views)


class BatchAssembler:
    """Balanced batches: labelled images, video triplets, multi-view quadruplets."""

    def __init__(self, n_labeled_pool: int, video_shape, cfg: TrainConfig, seed: int):
        self.cfg = cfg
        self.labeled = EpochSampler(n_labeled_pool, stream(seed, "labeled"))
        self.trip = self.quad = None
        self.quad_rng = stream(seed, "quad", "views")
        if video_shape is not None:
            M, T = video_shape
            if T >= 3:
                self.trip_items = [(m, t) for m in range(M) for t in range(T - 2)]
                self.trip = EpochSampler(len(self.trip_items), stream(seed, "triplet"))
            if M >= 2:
                self.M = M
                self.quad = EpochSampler(T, stream(seed, "quad"))

    def draw(self, stage: int) -> Batch:
        b = Batch(self.labeled.draw(self.cfg.n_labeled))
        if stage == 2:
            if self.cfg.n_triplets:
                if self.trip is None:
                    raise ValueError("triplets requested but the video has fewer than 3 frames")
                b.triplets = [self.trip_items[i] for i in self.trip.draw(self.cfg.n_triplets)]
            if self.cfg.n_quadruplets:
                if self.quad is None:
                    raise ValueError("quadruplets requested but the video has fewer than 2 views")
                b.quads = [(t, self.draw_views()) for t in self.quad.draw(self.cfg.n_quadruplets)]
        return b

    def draw_views(self) -> tuple:
        """An anchor view plus up to three other distinct views."""
        anchor = int(self.quad_rng.integers(self.M))
        others = [m for m in range(self.M) if m != anchor]
        n = min(3, len(others))
        pick = self.quad_rng.choice(len(others), size=n, replace=False)
        return (anchor,) + tuple(others[i] for i in pick)

    def state(self) -> dict:
        st = {"labeled": self.labeled.state(), "quad_rng": _rng_state(self.quad_rng)}
        if self.trip is not None:
            st["triplet"] = self.trip.state()
        if self.quad is not None:
            st["quad"] = self.quad.state()
        return st

    def load(self, st: dict) -> None:
        self.labeled.load(st["labeled"])
        _set_rng_state(self.quad_rng, st["quad_rng"])
        if "triplet" in st and self.trip is not None:
            self.trip.load(st["triplet"])
        if "quad" in st and self.quad is not None:
            self.quad.load(st["quad"])


def assemble_batch(labeled_pool, video_pool, multiview_pool, cfg: TrainConfig, seed: int, stage: int = 2) -> Batch:
    """One batch from fresh samplers (see :class:`BatchAssembler` for the stateful form).

    ``labeled_pool`` is a size, ``video_pool`` and ``multiview_pool`` are the
    ``(M, T)`` shape of the video (or ``None``).
    """
    shape = video_pool if video_pool is not None else multiview_pool
    return BatchAssembler(labeled_pool, shape, cfg, seed).draw(stage)


# --- model wrappers ------------------------------------------------------------

class Model:
    """Trained detector: crops in, crop coordinates out."""

    def __init__(self, arch: det.ArchConfig, params, decode_temperature: float = 0.05):
        self.arch = arch
        self.params = np.asarray(params, dtype=np.float64)
        self.tau = decode_temperature

    def predict(self, crops, thetas=None, gt=None) -> np.ndarray:
        out, _ = det.forward(self.params, det.normalize_crops(crops), self.arch)
        if self.arch.mode == "regression":
            return out
        return det.map_to_crop(det.soft_argmax(out, self.tau))


class OracleModel:
    """Test double: returns the ground truth mapped into each crop."""

    def __init__(self, K: int):
        self.K = K

    def predict(self, crops, thetas, gt) -> np.ndarray:
        return np.array([affine_apply(th, g) for th, g in zip(thetas, gt)])


# --- evaluation ----------------------------------------------------------------

def evaluate(model, test: ImageSet, n_pairs: int, seed: int, auc_threshold: float = 0.08,
             failure_threshold: float = 0.1) -> dict:
    """NME / AUC / failure rate on centre crops and P-error on random crop pairs."""
    N = len(test)
    crops, thetas = [], []
    for i in range(N):
        c = center_crop(test.images[i], test.bboxes[i])
        crops.append(c.image)
        thetas.append(c.theta)
    pred = model.predict(np.array(crops), thetas, test.landmarks)
    per = np.array([
        np.mean(np.linalg.norm(affine_apply(affine_invert(thetas[i]), pred[i]) - test.landmarks[i], axis=1))
        / bbox_scale(test.bboxes[i]) for i in range(N)])
    out = {"nme": float(per.mean()), "auc": auc_at(per, auc_threshold),
           "failure": failure_rate(per, failure_threshold), "per_sample": per}
    if n_pairs > 0:
        rng = stream(seed, "elt")
        pa, pb, ta, tb, gts, idx = [], [], [], [], [], []
        for i in range(N):
            for _ in range(n_pairs):
                a, tha, b, thb = elt_transform_pair(test.images[i], test.bboxes[i], rng, EltConfig())
                pa.append(a)
                pb.append(b)
                ta.append(tha)
                tb.append(thb)
                gts.append(test.landmarks[i])
                idx.append(i)
        da = model.predict(np.array(pa), ta, gts)
        db = model.predict(np.array(pb), tb, gts)
        pe = [pair_discrepancy(da[j], ta[j], db[j], tb[j], bbox_scale(test.bboxes[idx[j]])) for j in range(len(idx))]
        out["p_error"] = float(np.mean(pe))
    return out


# --- training step -------------------------------------------------------------

class _Flows:
    """Per-view dense flows used by the interpolation tracker and heatmap warps."""

    def __init__(self, video: Scene, source: str):
        if source == "gt":
            self.fwd, self.bwd = video.flow, video.bflow
        else:
            M, T = video.shape
            self.fwd = np.zeros_like(video.flow)
            self.bwd = np.zeros_like(video.bflow)
            for m in range(M):
                for t in range(1, T):
                    self.fwd[m, t] = lk_dense_flow(video.images[m, t - 1], video.images[m, t])
                    self.bwd[m, t] = -np.stack(lk_dense_flow(video.images[m, t], video.images[m, t - 1]))


class Trainer:
    def __init__(self, data: TrainData, cfg: TrainConfig):
        self.cfg = cfg
        self.data = data
        self.arch = cfg.arch
        self.th = cfg.thresholds
        self.spec = PatchSpec()
        if data.labeled.landmarks.shape[1] != cfg.K:
            raise ValueError(f"labelled data has K={data.labeled.landmarks.shape[1]}, config says {cfg.K}")
        needs_video = cfg.stage2_epochs > 0 and cfg.unlabeled_terms and (cfg.n_triplets or cfg.n_quadruplets)
        self.video = data.video if needs_video else None
        if needs_video:
            if data.video is None:
                raise ValueError("stage 2 needs an unlabelled video")
            M, T = data.video.shape
            if cfg.n_triplets and T < 3:
                raise ValueError("triplets need a video of at least 3 frames")
            if cfg.n_quadruplets and M < 2:
                raise ValueError("quadruplets need at least 2 views")
            if data.video.config.K != cfg.K:
                raise ValueError("video and config disagree on K")
            self._prepare_video()
        shape = self.video.shape if self.video is not None else None
        self.sampler = BatchAssembler(len(data.labeled), shape, cfg, cfg.seed)
        self.aug_rng = stream(cfg.seed, "augment")
        self.vaug_rng = stream(cfg.seed, "augment", "video")
        self.params = det.init_params(self.arch, stream(cfg.seed, "init"))
        self.adam = det.AdamState.zeros(self.params.size)
        self.epoch = 0
        self.log: list[dict] = []

    def _prepare_video(self):
        v = self.video
        M, T = v.shape
        crops = np.zeros((M, T, self.cfg.crop, self.cfg.crop))
        thetas = np.zeros((M, T, 2, 3))
        acfg = AugmentConfig(out_size=self.cfg.crop)
        for m in range(M):
            for t in range(T):
                c = center_crop(v.images[m, t], v.bboxes[m, t], cfg=acfg)
                crops[m, t], thetas[m, t] = c.image, c.theta
        self.vcrops = det.normalize_crops(crops)
        self.vthetas = thetas
        self.vinv = np.array([[affine_invert(th) for th in row] for row in thetas])
        self.vscale = np.array([[bbox_scale(b) for b in row] for row in v.bboxes])
        self.flows = _Flows(v, self.cfg.flow_source)

    def _video_crops(self, idx):
        """Normalised crops, image->crop maps and their inverses for ``(view, frame)`` items.

        With ``augment_video`` every item gets a fresh random crop, so the
        consistency terms compare detections made under different transforms.
        """
        if not self.cfg.augment_video:
            m, t = np.array(idx).T
            return self.vcrops[m, t], self.vthetas[m, t], self.vinv[m, t]
        v = self.video
        acfg = AugmentConfig(out_size=self.cfg.crop)
        crops, thetas = [], []
        for m, t in idx:
            c = augment(v.images[m, t], v.bboxes[m, t], None, self.vaug_rng, acfg)
            crops.append(c.image)
            thetas.append(c.theta)
        thetas = np.array(thetas)
        return det.normalize_crops(np.array(crops)), thetas, np.array([affine_invert(th) for th in thetas])

    # -- detections and their Jacobians -------------------------------------

    def _to_crop_points(self, out):
        """Crop coordinates and, for heatmaps, soft-argmax Jacobians in crop units."""
        if self.arch.mode == "regression":
            return out, None
        pts, J = det.soft_argmax(out, self.cfg.decode_temperature, with_jac=True)
        return det.map_to_crop(pts), 2.0 * J

    def _pts_grad_to_out(self, g_crop, J):
        if J is None:
            return g_crop
        return np.einsum("...a,...ahw->...hw", g_crop, J)

    # -- labelled part ----------------------------------------------------

    def labeled_term(self, idx):
        L = self.data.labeled
        acfg = AugmentConfig(out_size=self.cfg.crop)
        crops, labels = [], []
        for i in idx:
            if self.cfg.augment:
                c = augment(L.images[i], L.bboxes[i], L.landmarks[i], self.aug_rng, acfg)
            else:
                c = center_crop(L.images[i], L.bboxes[i], L.landmarks[i], acfg)
            crops.append(c.image)
            labels.append(c.labels)
        out, cache = det.forward(self.params, det.normalize_crops(np.array(crops)), self.arch)
        n = len(idx)
        loss = 0.0
        g = np.zeros_like(out)
        for j in range(n):
            if self.arch.mode == "regression":
                l, gj = detection_loss_regression(out[j], labels[j])
            else:
                target = det.gaussian_map(det.crop_to_map(labels[j]), self.cfg.sigma_gt, out.shape[-2:])
                l, gj = detection_loss_heatmap(out[j], target)
            loss += l / n
            g[j] = gj / n
        return loss, g, cache

    # -- SBR ----------------------------------------------------------------

    def _track(self, m, t, prev):
        """Track image points ``prev`` from frame t-1 to t of view m.

        Returns ``(tracked, jac (K,2,2), back, ok)``.
        """
        K = prev.shape[0]
        S = self.video.images.shape[-1]
        if self.cfg.tracker == "interp":
            fu, fv = self.flows.fwd[m, t]
            bu, bv = self.flows.bwd[m, t]
            ok = in_bounds((S, S), prev[:, 0], prev[:, 1])
            x = np.clip(prev, 0, S - 1)
            _, ux, uy = sample(fu, x[:, 0], x[:, 1], with_grad=True)
            _, vx, vy = sample(fv, x[:, 0], x[:, 1], with_grad=True)
            tracked = prev + np.stack([sample(fu, x[:, 0], x[:, 1]), sample(fv, x[:, 0], x[:, 1])], 1)
            jac = np.eye(2) + np.stack([np.stack([ux, uy], -1), np.stack([vx, vy], -1)], -2)
            ok &= in_bounds((S, S), tracked[:, 0], tracked[:, 1])
            y = np.clip(tracked, 0, S - 1)
            back = tracked - np.stack([sample(bu, y[:, 0], y[:, 1]), sample(bv, y[:, 0], y[:, 1])], 1)
            return tracked, jac, back, ok
        F0, F1 = self.video.images[m, t - 1], self.video.images[m, t]
        tracked = np.array(prev, dtype=np.float64)
        jac = np.tile(np.eye(2), (K, 1, 1))
        back = np.full_like(tracked, np.nan)
        ok = np.zeros(K, dtype=bool)
        for k in range(K):
            r = track_landmark_lk(F0, F1, prev[k], self.spec)
            if not r.valid:
                continue
            tracked[k] = r.point
            try:
                jac[k] = track_gradient_lk(F0, F1, prev[k], self.spec, r)
            except TrackingError:
                continue
            b = track_landmark_lk(F1, F0, r.point, self.spec)
            if b.valid:
                back[k] = b.point
                ok[k] = True
        return tracked, jac, back, ok

    def _sbr_beta(self, m, t, prev, cur):
        tracked, jac, back, ok = self._track(m, t, prev)
        S = self.video.images.shape[-1]
        s = self.vscale[m, t]
        beta = reliability_rule(prev, tracked, back, cur, self.th.t_fb_frac * s, self.th.t_d_frac * s,
                                (S, S), self.video.bboxes[m, t], ok)
        return tracked, jac, beta

    def _heatmap_flow(self, m, t, theta_prev, inv_cur):
        """Backward flow on the heatmap grid of frame t pointing into frame t-1's heatmap."""
        h = self.arch.map_size
        ys, xs = np.mgrid[0:h, 0:h].astype(np.float64)
        hp = np.stack([xs.ravel(), ys.ravel()], 1)
        p = affine_apply(inv_cur, det.map_to_crop(hp))
        bu, bv = self.flows.bwd[m, t]
        src = p - np.stack([sample(bu, p[:, 0], p[:, 1], padding="border"),
                            sample(bv, p[:, 0], p[:, 1], padding="border")], 1)
        hsrc = det.crop_to_map(affine_apply(theta_prev, src))
        f = (hp - hsrc).reshape(h, h, 2)
        return f[..., 0], f[..., 1]

    def sbr_term(self, clips, length: int = 3):
        """Loss, grad w.r.t. detector outputs, cache and (rejected, total) counts.

        ``clips`` are ``(view, first frame)``; each covers ``length`` consecutive
        frames and contributes the pairs ``(t-1, t)`` inside it.
        """
        if not clips:
            return 0.0, None, None, (0, 0)
        idx = [(m, t0 + j) for m, t0 in clips for j in range(length)]
        crops, thetas, invs = self._video_crops(idx)
        thetas = thetas.reshape(len(clips), length, 2, 3)
        invs = invs.reshape(len(clips), length, 2, 3)
        out, cache = det.forward(self.params, crops, self.arch)
        K = self.cfg.K
        out = out.reshape((len(clips), length) + out.shape[1:])
        pts, J = self._to_crop_points(out)
        n = len(clips)
        g_pts = np.zeros_like(pts)
        g_out = np.zeros_like(out)
        loss, rej, tot = 0.0, 0, 0
        for i, (m, t0) in enumerate(clips):
            inv = invs[i]
            img = np.array([affine_apply(inv[j], pts[i, j]) for j in range(length)])
            for j in range(1, length):
                t = t0 + j
                tracked, jac, beta = self._sbr_beta(m, t, img[j - 1], img[j])
                rej += int(np.sum(beta == 0))
                tot += K
                if self.arch.mode == "regression":
                    l, gd, gt = sbr_loss_coords(img[j], tracked, beta)
                    g_pts[i, j] += gd @ inv[j][:, :2] / n
                    if not self.cfg.stop_source_grad:
                        g_src = np.einsum("ka,kab->kb", gt, jac)
                        g_pts[i, j - 1] += g_src @ inv[j - 1][:, :2] / n
                else:
                    fu, fv = self._heatmap_flow(m, t, thetas[i, j - 1], inv[j])
                    warped = warp_field_by_flow(out[i, j - 1], fu, fv)
                    l, gc, gw = sbr_loss_heatmap(out[i, j], warped, beta)
                    g_out[i, j] += gc / n
                    if not self.cfg.stop_source_grad:
                        g_out[i, j - 1] += warp_field_adjoint(gw, fu, fv) / n
                loss += l / n
        if self.arch.mode == "regression":
            g_out = g_pts
        return loss, g_out.reshape((-1,) + out.shape[2:]), cache, (rej, tot)

    # -- SBT ----------------------------------------------------------------

    def sbt_term(self, quads):
        if not quads:
            return 0.0, None, None, (0, 0)
        V = len(quads[0][1])
        idx = [(m, t) for t, views in quads for m in views]
        crops, thetas, invs = self._video_crops(idx)
        thetas = thetas.reshape(len(quads), V, 2, 3)
        invs = invs.reshape(len(quads), V, 2, 3)
        out, cache = det.forward(self.params, crops, self.arch)
        out = out.reshape((len(quads), V) + out.shape[1:])
        pts, J = self._to_crop_points(out)
        n = len(quads)
        g_pts = np.zeros_like(pts)
        g_out = np.zeros_like(out)
        loss, rej, tot = 0.0, 0, 0
        for i, (t, views) in enumerate(quads):
            views = list(views)
            inv = invs[i]
            cams = self.video.cameras[views]
            scales = self.vscale[views, t]
            img = np.array([affine_apply(inv[v], pts[i, v]) for v in range(V)])
            if self.arch.mode == "regression" or self.cfg.heatmap_sbt == "softargmax_l1":
                l, g_img, beta, _ = sbt_loss_multiview(cams, img, scales, self.th)
                for v in range(V):
                    g_pts[i, v] += g_img[v] @ inv[v][:, :2] / n
            else:
                l, g_o, g_p, beta = self._sbt_heatmap(out[i], pts[i], img, thetas[i], inv, cams, scales)
                g_out[i] += g_o / n
                g_pts[i] += g_p / n
            rej += int(np.sum(beta == 0))
            tot += beta.size
            loss += l / n
        if self.arch.mode == "regression":
            g_out = g_pts
        else:
            g_out = g_out + self._pts_grad_to_out(g_pts, J)
        return loss, g_out.reshape((-1,) + out.shape[2:]), cache, (rej, tot)

    def _sbt_heatmap(self, maps, pts_crop, img, thetas, inv, cams, scales):
        """Shifted-heatmap SBT for one quadruplet.

        Returns ``(loss, grad_maps, grad_crop_points, beta)``.
        """
        V, K = img.shape[:2]
        beta = np.zeros((V, K), dtype=np.int8)
        rp = np.array(img, copy=True)
        jacs = {}
        for k in range(K):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("error", CheiralityWarning)
                    r, jac = reprojection_jacobian(cams, img[:, k])
            except (DegenerateGeometryError, CheiralityWarning, ValueError):
                continue
            rp[:, k] = r
            jacs[k] = jac
            d = np.linalg.norm(r - img[:, k], axis=1)
            beta[:, k] = d <= self.th.t_tri_frac * scales
        g_maps = np.zeros_like(maps)
        g_crop = np.zeros_like(pts_crop)
        g_rp_img = np.zeros_like(img)
        loss = 0.0
        for v in range(V):
            th = thetas[v]
            det_h = det.crop_to_map(pts_crop[v])
            rp_h = det.crop_to_map(affine_apply(th, rp[v]))
            l, gm, gd, gr = sbt_loss_heatmap(maps[v], det_h, rp_h, beta[v])
            loss += l
            g_maps[v] += gm
            g_crop[v] += 0.5 * gd
            g_rp_img[v] = gr @ (0.5 * th[:, :2])
        for k, jac in jacs.items():
            g_det_img = np.einsum("ia,iajb->jb", g_rp_img[:, k], jac)
            for v in range(V):
                g_crop[v, k] += g_det_img[v] @ inv[v][:, :2]
        return loss, g_maps, g_crop, beta

    # -- loop -----------------------------------------------------------------

    def objective(self, batch: Batch, stage: int, clip_len: int = 3):
        """Weighted total loss, its parameter gradient and a log record.

        Terms with zero weight are evaluated for logging only.
        """
        cfg = self.cfg
        l_det, g_det, cache = self.labeled_term(batch.labeled)
        grad = det.backward(self.params, cache, g_det, self.arch)
        rec = {"l_det": l_det, "l_sbr": 0.0, "l_sbt": 0.0, "sbr": (0, 0), "sbt": (0, 0)}
        if stage == 2 and self.video is not None:
            l, g, c, counts = self.sbr_term(batch.triplets, clip_len)
            rec["l_sbr"], rec["sbr"] = l, counts
            if cfg.w_sbr != 0 and c is not None:
                grad = grad + cfg.w_sbr * det.backward(self.params, c, g, self.arch)
            l, g, c, counts = self.sbt_term(batch.quads)
            rec["l_sbt"], rec["sbt"] = l, counts
            if cfg.w_sbt != 0 and c is not None:
                grad = grad + cfg.w_sbt * det.backward(self.params, c, g, self.arch)
        total = l_det + cfg.w_sbr * rec["l_sbr"] + cfg.w_sbt * rec["l_sbt"]
        return total, grad, rec

    def step(self, batch: Batch, stage: int) -> dict:
        _, grad, rec = self.objective(batch, stage)
        self.params, self.adam = det.adam_step(self.params, grad, self.adam, self.cfg.adam)
        return rec

    @property
    def total_epochs(self) -> int:
        return self.cfg.stage1_epochs + self.cfg.stage2_epochs

    def run_epoch(self) -> dict:
        cfg = self.cfg
        stage = 1 if self.epoch < cfg.stage1_epochs else 2
        steps = -(-len(self.data.labeled) // cfg.n_labeled)
        acc = {"l_det": 0.0, "l_sbr": 0.0, "l_sbt": 0.0}
        sbr = np.zeros(2, dtype=np.int64)
        sbt = np.zeros(2, dtype=np.int64)
        for _ in range(steps):
            rec = self.step(self.sampler.draw(stage if self.video is not None else 1), stage)
            for k in acc:
                acc[k] += rec[k] / steps
            sbr += rec["sbr"]
            sbt += rec["sbt"]
        self.epoch += 1
        entry = {"epoch": self.epoch, "stage": stage, **acc,
                 "beta_sbr_zero_frac": float(sbr[0] / sbr[1]) if sbr[1] else 0.0,
                 "beta_sbt_zero_frac": float(sbt[0] / sbt[1]) if sbt[1] else 0.0}
        entry.update(self._log_metrics())
        self.log.append(entry)
        return entry

    def _log_metrics(self) -> dict:
        n = min(self.cfg.log_images, len(self.data.labeled))
        if n == 0:
            return {"nme": float("nan"), "p_error": float("nan")}
        subset = self.data.labeled.subset(np.arange(n))
        ev = evaluate(self.model(), subset, self.cfg.log_pairs, stream(self.cfg.seed, "log", self.epoch).integers(2 ** 62))
        return {"nme": ev["nme"], "p_error": ev.get("p_error", float("nan"))}

    def model(self) -> Model:
        return Model(self.arch, self.params, self.cfg.decode_temperature)

    def train(self, stop_after: int | None = None) -> list[dict]:
        end = self.total_epochs if stop_after is None else min(stop_after, self.total_epochs)
        while self.epoch < end:
            self.run_epoch()
        return self.log

    # -- state ----------------------------------------------------------------

    def state(self) -> dict:
        return {"epoch": self.epoch, "sampler": self.sampler.state(), "augment": _rng_state(self.aug_rng),
                "augment_video": _rng_state(self.vaug_rng),
                "log": self.log}

    def load_state(self, params, adam: det.AdamState, st: dict) -> None:
        self.params = np.array(params, dtype=np.float64)
        self.adam = det.AdamState(np.array(adam.m), np.array(adam.v), int(adam.t))
        self.epoch = int(st["epoch"])
        self.sampler.load(st["sampler"])
        _set_rng_state(self.aug_rng, st["augment"])
        _set_rng_state(self.vaug_rng, st["augment_video"])
        self.log = list(st["log"])


def branch(trainer: Trainer, cfg: TrainConfig, data: TrainData | None = None) -> Trainer:
    """A trainer for ``cfg`` that continues from ``trainer``'s current state.

    Stage 1 never touches the video streams, so branching a finished stage 1
    into several stage-2 settings reproduces training each from scratch.
    """
    tr = Trainer(trainer.data if data is None else data, cfg)
    st = json.loads(json.dumps(trainer.state()))
    tr.load_state(trainer.params, trainer.adam, st)
    return tr


def train(data: TrainData, cfg: TrainConfig):
    """Stage 1 (detection only) then stage 2 (joint). Returns ``(params, log)``."""
    tr = Trainer(data, cfg)
    tr.train()
    return tr.params, tr.log


# --- checkpoints -----------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_checkpoint(path, trainer: Trainer | None = None, *, mode: str | None = None, K: int | None = None,
                     seed: int = 0, config_hash: str = "", extra: dict | None = None) -> None:
    """Text checkpoint: header, flat parameters and optimiser/sampler state.

    With ``trainer=None`` and ``mode='oracle'`` an oracle test double is written.
    """
    lines = ["checkpoint v1"]
    if trainer is None:
        if mode != "oracle":
            raise ValueError("only the oracle checkpoint can be written without a trainer")
        lines += ["mode oracle", f"K {K}", f"seed {seed}", f"config_hash {config_hash}", "end"]
    else:
        cfg = trainer.cfg
        lines += [f"mode {cfg.mode}", f"K {cfg.K}", f"seed {cfg.seed}", f"config_hash {config_hash}",
                  "train " + json.dumps(asdict(cfg), sort_keys=True),
                  "state " + json.dumps(trainer.state(), sort_keys=True),
                  f"adam_t {trainer.adam.t}"]
        if extra:
            lines.append("extra " + json.dumps(extra, sort_keys=True))
        for name, vec in (("params", trainer.params), ("adam_m", trainer.adam.m), ("adam_v", trainer.adam.v)):
            lines.append(f"{name} {vec.size}")
            lines.extend(_fmt(v) for v in vec)
        lines.append("end")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    mode: str
    K: int
    seed: int
    config_hash: str
    train: TrainConfig | None = None
    state: dict | None = None
    params: np.ndarray | None = None
    adam: det.AdamState | None = None
    extra: dict | None = None

    def model(self):
        if self.mode == "oracle":
            return OracleModel(self.K)
        return Model(self.train.arch, self.params, self.train.decode_temperature)


def read_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "checkpoint v1":
        raise ValueError(f"{path} is not a checkpoint")
    head, vecs = {}, {}
    i = 1
    while i < len(lines) and lines[i] != "end":
        key, _, rest = lines[i].partition(" ")
        if key in ("params", "adam_m", "adam_v"):
            n = int(rest)
            vecs[key] = np.array(lines[i + 1:i + 1 + n], dtype=np.float64)
            i += 1 + n
            continue
        head[key] = rest
        i += 1
    ck = Checkpoint(head["mode"], int(head["K"]), int(head["seed"]), head.get("config_hash", ""))
    if ck.mode != "oracle":
        ck.train = TrainConfig(**json.loads(head["train"]))
        ck.state = json.loads(head["state"])
        ck.params = vecs["params"]
        ck.adam = det.AdamState(vecs["adam_m"], vecs["adam_v"], int(head["adam_t"]))
        ck.extra = json.loads(head["extra"]) if "extra" in head else None
    return ck


def resume(data: TrainData, ck: Checkpoint) -> Trainer:
    tr = Trainer(data, ck.train)
    tr.load_state(ck.params, ck.adam, ck.state)
    return tr
