"""Two-branch multi-scale expression classifier with focal loss.

The full branch sees the image at native resolution, the half branch a 2x2
average-pooled copy. Each branch is five conv stages (5x5 first, then 3x3,
each followed by batch norm, ReLU and 2x2 max pooling; the fifth stage is a
1x1 conv with dropout and no pooling), a dense embedding and its own K-way
head. The fused head reads the concatenated embeddings.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .data import Split, selective_batches
from .optim import sgd_step, step_decay
from .params import ParamStore

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
HEADS = ("full", "half", "fused")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class ClsConfig:
    side: int = 32
    num_classes: int = 7
    widths: tuple = (8, 16, 32, 32)  # conv1..conv4, full branch
    half_widths: tuple = (8, 16, 32, 32)
    conv5: int = 16
    embed: tuple = (32, 16)  # full, half
    dropout: float = 0.5
    gamma: float = 2.0
    divergence_head: str = "fused"

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes: need at least 2 classes")
        if len(self.widths) != 4 or len(self.half_widths) != 4:
            raise ValueError("widths: expected four stage widths per branch")
        if self.side % 16 or self.side < 32:
            raise ValueError(f"side: {self.side} must be a multiple of 16 and at least 32 (the half branch pools four times)")
        if self.gamma < 0:
            raise ValueError("gamma: must be non-negative")
        if self.divergence_head not in HEADS:
            raise ValueError(f"divergence_head: must be one of {HEADS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout: must be in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown classifier config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("widths", "half_widths", "embed"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class ClsSchedule:
    epochs: int = 12
    batch_size: int = 63
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 2e-3
    decay_every: int = 10
    selective: bool = True

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)


class BranchOutputs(NamedTuple):
    full: T.Tensor
    half: T.Tensor
    fused: T.Tensor

    def head(self, name):
        return getattr(self, name)


def _branch_specs(prefix, widths, conv5, in_side, embed, k, p):
    specs = []
    c = 1
    for i, w in enumerate(widths):
        kern = 5 if i == 0 else 3
        specs += [
            L.conv(f"{prefix}.conv{i + 1}", c, w, kern),
            L.bnorm(f"{prefix}.bn{i + 1}", w),
            L.act("relu"),
            L.act("maxpool"),
        ]
        c = w
    specs += [
        L.conv(f"{prefix}.conv5", c, conv5, 1),
        L.bnorm(f"{prefix}.bn5", conv5),
        L.act("relu"),
        L.dropout(p),
    ]
    side = in_side
    for _ in widths:
        side //= 2
    specs += [L.act("flatten"), L.dense(f"{prefix}.fc", conv5 * side * side, embed)]
    return specs


# stage boundaries, as indices of the ReLU closing conv3, conv4 and conv5
_TAP_NAMES = ("conv3", "conv4", "conv5")


def build(cfg: ClsConfig):
    """Return (full_specs, half_specs, head_specs)."""
    cfg.validate()
    k = cfg.num_classes
    full = _branch_specs("full", cfg.widths, cfg.conv5, cfg.side, cfg.embed[0], k, cfg.dropout)
    half = _branch_specs("half", cfg.half_widths, cfg.conv5, cfg.side // 2, cfg.embed[1], k, cfg.dropout)
    heads = {
        "full": L.dense("head.full", cfg.embed[0], k),
        "half": L.dense("head.half", cfg.embed[1], k),
        "fused": L.dense("head.fused", cfg.embed[0] + cfg.embed[1], k),
    }
    return full, half, heads


def init_params(cfg: ClsConfig, seed) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    full, half, heads = build(cfg)
    store = ParamStore()
    L.init_seq(full, store, rng)
    L.init_seq(half, store, rng)
    L.init_seq(list(heads.values()), store, rng)
    return store


def _as_batch(images, side):
    x = images if isinstance(images, T.Tensor) else T.Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim == 3:
        x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.shape[1:] != (1, side, side):
        raise L.ShapeError(f"classifier expects images [N, 1, {side}, {side}], got {list(x.shape)}")
    return x


def _run_branch(x, specs, params, mode, rng, taps=None):
    relu_seen = 0
    for spec in specs:
        x = L.forward_layer(x, spec, params, mode, rng)
        if spec.kind == "relu":
            relu_seen += 1
            if taps is not None and relu_seen >= 3:
                taps[_TAP_NAMES[relu_seen - 3]] = x
    return x


def predict(images, params, cfg: ClsConfig, mode="eval", rng=None, taps: Optional[dict] = None) -> BranchOutputs:
    """Class probabilities from the three heads.

    ``taps``, when given a dict, is filled with the full-branch activations
    after conv3, conv4 and conv5 (the perceptual features).
    """
    full, half, heads = build(cfg)
    x = _as_batch(images, cfg.side)
    ef = _run_branch(x, full, params, mode, rng, taps)
    eh = _run_branch(T.avg_pool2d(x), half, params, mode, rng)
    lf = L.forward_layer(ef, heads["full"], params, mode)
    lh = L.forward_layer(eh, heads["half"], params, mode)
    lz = L.forward_layer(T.concat([ef, eh], axis=1), heads["fused"], params, mode)
    return BranchOutputs(T.softmax(lf), T.softmax(lh), T.softmax(lz))


def features(images, params, cfg: ClsConfig):
    """Perceptual taps of the full branch in eval mode: {conv3, conv4, conv5}."""
    taps: dict = {}
    full, _, _ = build(cfg)
    _run_branch(_as_batch(images, cfg.side), full, params, "eval", None, taps)
    return taps


def focal_loss(probs, labels, gamma: float = 2.0):
    """Per-sample ``-(1 - p_y)^gamma * ln(max(p_y, eps))`` as an [N] tensor."""
    probs = probs if isinstance(probs, T.Tensor) else T.Tensor(probs)
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, probs.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes: {labels.tolist()}")
    p = T.floor_at(T.take_label(probs, labels), PROB_FLOOR)
    nll = T.mul(T.log(p), -1.0)
    if gamma == 0:
        return nll
    return T.mul(T.power(T.sub(1.0, p), gamma), nll)


def sample_loss(outputs: BranchOutputs, labels, gamma: float = 2.0):
    """Unweighted sum of the three heads' focal losses, per sample."""
    total = focal_loss(outputs.full, labels, gamma)
    total = T.add(total, focal_loss(outputs.half, labels, gamma))
    return T.add(total, focal_loss(outputs.fused, labels, gamma))


def predict_labels(images, params, cfg: ClsConfig, head="fused", batch=256):
    """Eval-mode argmax predictions, batched to bound memory."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch):
        probs = predict(images[i : i + batch], params, cfg, "eval").head(head)
        out.append(probs.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(images, labels, params, cfg, head="fused"):
    pred = predict_labels(images, params, cfg, head)
    return float(np.mean(pred == np.asarray(labels))) if len(pred) else float("nan")


def streams(seed):
    """Independent generators for init, batch order, dropout and neighbor noise.

    Keeping these apart means a run that also draws neighbor noise consumes
    exactly the same batch and dropout randomness as one that does not.
    """
    seed = int(seed)
    return {
        "batches": seed,
        "dropout": np.random.default_rng(np.random.SeedSequence([seed, 303])),
        "noise": np.random.default_rng(np.random.SeedSequence([seed, 404])),
    }


def epoch_batches(split: Split, sched: ClsSchedule, cfg: ClsConfig, batch_seed, epoch):
    ss = np.random.SeedSequence([int(batch_seed), 202, epoch])
    if sched.selective:
        return list(selective_batches(split, sched.batch_size, ss, cfg.num_classes))
    rng = np.random.default_rng(ss)
    order = rng.permutation(len(split))
    n = len(split) // sched.batch_size
    return [order[i * sched.batch_size : (i + 1) * sched.batch_size] for i in range(n)]


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, lr, loss, train_acc, seconds

    def as_rows(self):
        return list(self.epochs)


def train_step(params, cfg, images, labels, lr, sched, rng, mask=None):
    """One SGD step on ``sum_i m_i L_i``; returns the per-sample losses."""
    with T.Graph() as g:
        out = predict(images, params, cfg, "train", rng)
        per = sample_loss(out, labels, cfg.gamma)
        weighted = per if mask is None else T.mul(per, np.asarray(mask, dtype=np.float64))
        total = T.tsum(weighted)
    if not np.isfinite(total.data):
        raise DivergenceError(f"non-finite training loss {float(total.data)!r}")
    if mask is None or np.any(mask):
        g.backward(total)
        sgd_step(params, lr, sched.momentum, sched.weight_decay)
    return per.data, out


def train_baseline(split: Split, cfg: ClsConfig, sched: ClsSchedule, seed=0, params=None, test=None):
    """Unmasked training: the reference arm.

    Returns ``(params, TrainLog)``. ``test``, a (images, clean labels) pair,
    adds a per-epoch test accuracy to the log.
    """
    cfg.validate()
    params = init_params(cfg, seed) if params is None else params
    st = streams(seed)
    tl = TrainLog()
    for epoch in range(sched.epochs):
        t0 = time.perf_counter()
        lr = step_decay(sched.lr, epoch, sched.decay_every)
        losses, hits, count = [], 0, 0
        for idx in epoch_batches(split, sched, cfg, st["batches"], epoch):
            y = split.observed[idx]
            per, out = train_step(params, cfg, split.images[idx], y, lr, sched, st["dropout"])
            losses.append(per.sum())
            hits += int(np.sum(out.fused.data.argmax(1) == y))
            count += len(idx)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.sum(losses) / max(count, 1)),
            "train_acc": hits / max(count, 1),
            "seconds": time.perf_counter() - t0,
        }
        if test is not None:
            row["test_acc"] = accuracy(test[0], test[1], params, cfg)
        tl.epochs.append(row)
        log.info("baseline epoch %d loss %.4f acc %.3f", epoch, row["loss"], row["train_acc"])
    return params, tl
