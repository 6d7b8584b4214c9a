"""Instability scoring and gradient masking.

Each training sample is scored by the symmetric KL divergence between the
classifier's prediction on the sample and on a synthesized semantic
neighbor. Samples whose score is not strictly below a threshold get their
loss gradient masked out of the update. The threshold is either fixed or
the mean score of the current mini-batch, and scores are recomputed at
every iteration with the current weights.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autoencoder as A
from . import classifier as C
from . import tensor as T
from .data import Split
from .optim import step_decay

log = logging.getLogger(__name__)

EPS = 1e-12
MODES = ("none", "fixed", "batch")


# ------------------------------------------------------------------ divergences


def kl_divergence(p, q, eps=EPS):
    """``sum_i p_i * ln(max(p_i, eps) / max(q_i, eps))`` over the last axis, in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"probability vectors differ in shape: {p.shape} vs {q.shape}")
    return np.sum(p * (np.log(np.maximum(p, eps)) - np.log(np.maximum(q, eps))), axis=-1)


def sym_divergence(p, q, eps=EPS):
    """``(KL(p||q) + KL(q||p)) / 2``."""
    return 0.5 * (kl_divergence(p, q, eps) + kl_divergence(q, p, eps))


@dataclass
class DivergenceRecord:
    index: int
    div: float
    p_orig: np.ndarray
    p_neighbor: np.ndarray


@dataclass
class MaskVector:
    mask: np.ndarray  # bool, True keeps the sample's gradient
    threshold: float
    survivors: int

    def __len__(self):
        return len(self.mask)


def _divs(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        return records.astype(np.float64)
    return np.asarray([r.div if isinstance(r, DivergenceRecord) else r for r in records], dtype=np.float64)


def fixed_threshold_mask(records, threshold: float) -> MaskVector:
    """Keep sample i iff ``div_i < threshold``; a tie masks the sample out."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    d = _divs(records)
    m = d < threshold
    return MaskVector(m, float(threshold), int(m.sum()))


def batch_threshold(records) -> float:
    """Mean divergence of the batch, from an exactly rounded sum."""
    d = _divs(records)
    if d.size == 0:
        raise ValueError("batch threshold of an empty batch")
    return math.fsum(d.tolist()) / d.size


def batch_mask(records) -> MaskVector:
    d = _divs(records)
    t = batch_threshold(d)
    m = d < t
    return MaskVector(m, t, int(m.sum()))


def instability(
    images,
    cls_params,
    cls_cfg: C.ClsConfig,
    ae_params,
    ae_cfg: A.AEConfig,
    noise: A.NoiseSpec,
    rng=None,
    indices: Optional[Sequence[int]] = None,
    neighbors=None,
    bn_mode="eval",
):
    """Divergence records between predictions on ``images`` and their neighbors.

    Nothing here is recorded for backprop: the score is a control signal.
    ``neighbors`` may be passed precomputed; otherwise they are synthesized
    with ``noise``. ``bn_mode`` picks how batch norm normalizes the two passes
    (``"eval"`` running statistics, ``"batch"`` statistics of the batch).
    """
    images = np.asarray(images, dtype=np.float64)
    if neighbors is None:
        neighbors = A.synthesize_neighbor(images, ae_params, ae_cfg, noise, rng)
    head = cls_cfg.divergence_head
    with T.Graph("eval"):
        po = C.predict(images, cls_params, cls_cfg, bn_mode).head(head).data
        pt = C.predict(neighbors, cls_params, cls_cfg, bn_mode).head(head).data
    d = sym_divergence(po, pt)
    idx = range(len(images)) if indices is None else indices
    return [DivergenceRecord(int(i), float(v), a, b) for i, v, a, b in zip(idx, d, po, pt)]


# ------------------------------------------------------------------ update


def masked_step(params, cls_cfg, images, labels, mask, lr, momentum=0.0, weight_decay=0.0, rng=None):
    """One update ``W <- W - lr * sum_i m_i dL_i/dW`` (plus optional momentum/decay).

    Returns ``(per_sample_losses, stepped)``; an all-masked batch leaves the
    parameters untouched and reports ``stepped=False``.
    """
    m = mask.mask if isinstance(mask, MaskVector) else np.asarray(mask, dtype=bool)
    sched = C.ClsSchedule(momentum=momentum, weight_decay=weight_decay)
    per, _ = C.train_step(params, cls_cfg, images, labels, lr, sched, rng, m.astype(np.float64))
    return per, bool(m.any())


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    threshold_mode: str = "batch"  # none | fixed | batch
    threshold: Optional[float] = None  # fixed mode; None calibrates at calibration_epoch
    calibration_percentile: float = 60.0
    calibration_epoch: int = 0  # fixed mode: epochs up to this one run unmasked, its Divs set T
    noise_scale: float = 0.1
    divergence_bn: str = "eval"
    neighbor_cache: bool = False

    def validate(self):
        if self.threshold_mode not in MODES:
            raise ValueError(f"threshold_mode: must be one of {MODES}")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold: must be positive")
        if not 0 < self.calibration_percentile < 100:
            raise ValueError("calibration_percentile: must be in (0, 100)")
        if self.calibration_epoch < 0:
            raise ValueError("calibration_epoch: must be non-negative")
        if self.noise_scale < 0:
            raise ValueError("noise_scale: must be non-negative")
        if self.divergence_bn not in ("eval", "batch"):
            raise ValueError("divergence_bn: must be 'eval' or 'batch'")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


LOG_COLUMNS = ("iteration", "threshold_mode", "T", "sample_id", "div", "mask", "is_noisy", "loss")


@dataclass
class MaskLog:
    """Per-iteration, per-sample training record (one row per sample visit)."""

    mode: str
    iteration: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    sample_id: list = field(default_factory=list)
    div: list = field(default_factory=list)
    mask: list = field(default_factory=list)
    is_noisy: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    skipped_steps: int = 0

    def add(self, it, epoch, t, ids, divs, mask, noisy, loss):
        n = len(ids)
        self.iteration.append(np.full(n, it))
        self.epoch.append(np.full(n, epoch))
        self.threshold.append(np.full(n, np.nan if t is None else t))
        self.sample_id.append(np.asarray(ids))
        self.div.append(np.asarray(divs, dtype=np.float64))
        self.mask.append(np.asarray(mask, dtype=bool))
        self.is_noisy.append(np.asarray(noisy, dtype=bool))
        self.loss.append(np.asarray(loss, dtype=np.float64))

    def column(self, name):
        parts = getattr(self, name)
        return np.concatenate(parts) if parts else np.zeros(0)

    def transitions(self):
        """Number of times any sample's mask differs from its previous visit."""
        ids, m = self.column("sample_id"), self.column("mask")
        last: dict = {}
        n = 0
        for i, v in zip(ids.tolist(), m.tolist()):
            if i in last and last[i] != v:
                n += 1
            last[i] = v
        return n

    def write_csv(self, path):
        cols = [self.column(k) for k in ("iteration", "threshold", "sample_id", "div", "mask", "is_noisy", "loss")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for it, t, sid, d, m, nz, l in zip(*cols):
                w.writerow([int(it), self.mode, repr(float(t)), int(sid), repr(float(d)), int(m), int(nz), repr(float(l))])


def train_masked(
    split: Split,
    cls_cfg: C.ClsConfig,
    sched: C.ClsSchedule,
    tcfg: TrainConfig,
    ae_params=None,
    ae_cfg: Optional[A.AEConfig] = None,
    noise: Optional[A.NoiseSpec] = None,
    seed=0,
    params=None,
    test=None,
):
    """Masked training; returns ``(params, TrainLog, MaskLog)``.

    Every iteration synthesizes fresh neighbors for the batch (unless
    ``neighbor_cache``), scores the batch with the current weights, builds
    the mask and takes one SGD step on ``sum_i m_i L_i`` of the original
    images. With ``threshold_mode="none"`` no scoring happens and the run is
    identical to :func:`classifier.train_baseline`.

    In fixed mode with ``threshold=None`` every epoch up to and including
    ``calibration_epoch`` runs unmasked; the divergences of that epoch are
    collected and T is set to their ``calibration_percentile``-th percentile.
    """
    cls_cfg.validate()
    tcfg.validate()
    mode = tcfg.threshold_mode
    if mode == "fixed" and tcfg.threshold is None and tcfg.calibration_epoch >= sched.epochs:
        raise ValueError(f"calibration_epoch {tcfg.calibration_epoch} is past the last epoch ({sched.epochs - 1})")
    if mode != "none" and (ae_params is None or ae_cfg is None or noise is None):
        raise ValueError("masked training needs the autoencoder parameters, config and noise spec")
    params = C.init_params(cls_cfg, seed) if params is None else params
    st = C.streams(seed)
    tl = C.TrainLog()
    ml = MaskLog(mode)
    threshold = tcfg.threshold
    codes = cached = None
    if mode != "none":
        codes = A.latent_codes(split.images, ae_params, ae_cfg)
        if tcfg.neighbor_cache:
            cached = A.decode(A.perturb_codes(codes, noise, st["noise"]), ae_params, ae_cfg)[0].data
    it = 0
    for epoch in range(sched.epochs):
        t0 = time.perf_counter()
        lr = step_decay(sched.lr, epoch, sched.decay_every)
        calib_divs = []
        losses, hits, count, kept = [], 0, 0, 0
        for idx in C.epoch_batches(split, sched, cls_cfg, st["batches"], epoch):
            x, y = split.images[idx], split.observed[idx]
            if mode == "none":
                divs = np.zeros(len(idx))
                m, t_used = np.ones(len(idx), bool), None
            else:
                if cached is not None:
                    nb = cached[idx]
                else:
                    nb = A.decode(A.perturb_codes(codes[idx], noise, st["noise"]), ae_params, ae_cfg)[0].data
                recs = instability(x, params, cls_cfg, ae_params, ae_cfg, noise, indices=idx, neighbors=nb, bn_mode=tcfg.divergence_bn)
                divs = _divs(recs)
                if mode == "batch":
                    mv = batch_mask(divs)
                elif threshold is None:
                    if epoch == tcfg.calibration_epoch:
                        calib_divs.append(divs)
                    mv = MaskVector(np.ones(len(idx), bool), math.inf, len(idx))
                else:
                    mv = fixed_threshold_mask(divs, threshold)
                m, t_used = mv.mask, mv.threshold
            per, out = C.train_step(
                params, cls_cfg, x, y, lr, sched, st["dropout"], None if mode == "none" else m.astype(np.float64)
            )
            if not m.any():
                ml.skipped_steps += 1
                log.info("iteration %d: every sample masked, step skipped", it)
            ml.add(it, epoch, t_used, idx, divs, m, split.is_noisy[idx], per)
            losses.append(per.sum())
            hits += int(np.sum(out.fused.data.argmax(1) == y))
            count += len(idx)
            kept += int(m.sum())
            it += 1
        if calib_divs:
            threshold = float(np.percentile(np.concatenate(calib_divs), tcfg.calibration_percentile))
            log.info("fixed threshold calibrated to %.6g", threshold)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.sum(losses) / max(count, 1)),
            "train_acc": hits / max(count, 1),
            "kept_fraction": kept / max(count, 1),
            "seconds": time.perf_counter() - t0,
        }
        if mode == "fixed":
            row["threshold"] = threshold
        if test is not None:
            row["test_acc"] = C.accuracy(test[0], test[1], params, cls_cfg)
        tl.epochs.append(row)
        log.info("%s epoch %d loss %.4f kept %.3f", mode, epoch, row["loss"], row["kept_fraction"])
    return params, tl, ml
