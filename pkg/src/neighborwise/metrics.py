"""Confusion matrices, failure-case counts on sequences, and mask audits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SequenceSet


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K], rows true, columns predicted

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def per_class(self):
        """``{class: accuracy}``; classes with no true samples are left out."""
        rows = self.counts.sum(axis=1)
        return {int(c): float(self.counts[c, c] / rows[c]) for c in range(len(rows)) if rows[c] > 0}


def confusion_matrix(predictions, labels, num_classes: int) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"{len(p)} predictions vs {len(t)} labels")
    for name, a in (("prediction", p), ("label", t)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} index out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class SequenceEvalReport:
    fc: int
    cfc: int
    verdicts: list = field(default_factory=list)  # per group: "ok", "fc" or "cfc"


def sequence_verdict(predictions, label):
    """Verdict for one group from the predictions on its four test frames."""
    pred = np.asarray(predictions)
    if pred.shape != (4,):
        raise ValueError(f"a sequence group needs exactly 4 test frames, got {pred.size}")
    wrong = pred != label
    if not wrong.any():
        return "ok"
    if wrong.all() and np.all(pred == pred[0]):
        return "cfc"
    return "fc"


def eval_sequences(predict_fn, seqs: SequenceSet) -> SequenceEvalReport:
    """FC: any of the four near-peak frames misclassified. CFC: all four to one wrong class.

    ``predict_fn(images) -> labels``.
    """
    idx = seqs.test_indices()
    if idx.ndim != 2 or idx.shape[1] != 4:
        raise ValueError(f"sequence groups must have 4 test frames, got shape {idx.shape}")
    frames = seqs.frames
    pred = np.asarray(predict_fn(frames.images[idx.reshape(-1)])).reshape(idx.shape)
    labels = frames.clean[idx[:, 0]]
    verdicts = [sequence_verdict(pr, y) for pr, y in zip(pred, labels)]
    fc = sum(v != "ok" for v in verdicts)
    cfc = sum(v == "cfc" for v in verdicts)
    return SequenceEvalReport(fc, cfc, verdicts)


def _lift(masked, noisy):
    if not noisy.any() or noisy.all():
        return None, None, None
    fn = float(np.mean(masked[noisy]))
    fc = float(np.mean(masked[~noisy]))
    return fn, fc, (fn / fc if fc > 0 else None)


def mask_audit(mask_log, n_shuffles: int = 100, seed: int = 0):
    """Per-epoch masked fractions among noisy and clean visits and their ratio (lift).

    The shuffled control permutes the final epoch's masks across visits,
    which keeps the masking rate but breaks any tie to the noise flags.
    Undefined lifts (no noise, or nothing masked among clean samples) are None.
    """
    if not mask_log.is_noisy:
        raise ValueError("mask log has no noise flags")
    ep = mask_log.column("epoch")
    masked = ~mask_log.column("mask").astype(bool)
    noisy = mask_log.column("is_noisy").astype(bool)
    rows = []
    for e in np.unique(ep):
        sel = ep == e
        fn, fc, lift = _lift(masked[sel], noisy[sel])
        rows.append({"epoch": int(e), "masked_noisy": fn, "masked_clean": fc, "lift": lift})
    out = {"epochs": rows, "final_lift": rows[-1]["lift"] if rows else None, "shuffled_lift": None}
    if rows:
        sel = ep == ep.max()
        m, nz = masked[sel], noisy[sel]
        rng = np.random.default_rng(seed)
        lifts = []
        for _ in range(n_shuffles):
            lift = _lift(rng.permutation(m), nz)[2]
            if lift is not None:
                lifts.append(lift)
        out["shuffled_lift"] = float(np.mean(lifts)) if lifts else None
    return out
