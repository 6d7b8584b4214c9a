"""Procedural "expression manifold" images.

Every image is a schematic face rendered from continuous parameters: an
identity (face shape, feature placement, skin tone), an expression class with
an intensity ``t`` in [0, 1] that scales a class-specific deformation of
brows, eyes and mouth, and nuisance (illumination offset, sub-pixel
translation). At ``t = 0`` every class renders the same neutral face, and
nearby intensities give genuinely neighbouring images.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_VERSION = 1
PAYLOAD_MAGIC = b"NWDS"
PAYLOAD_FILES = ("train.bin", "test.bin", "sequences.bin")

CLASS_NAMES = ("anger", "disgust", "fear", "happiness", "sadness", "surprise", "contempt")

# Expression deformation at full intensity, one row per class. Columns:
# brow_raise, brow_tilt, eye_open, mouth_curve, mouth_open, mouth_width, mouth_skew
_DEFORM = np.array(
    [
        [-0.07, 0.09, -0.35, -0.02, 0.00, -0.06, 0.00],  # anger
        [-0.04, 0.05, -0.50, -0.07, 0.03, 0.02, 0.03],  # disgust
        [0.08, -0.06, 0.55, -0.03, 0.08, 0.06, 0.00],  # fear
        [0.01, 0.00, -0.20, 0.13, 0.03, 0.09, 0.00],  # happiness
        [0.02, -0.08, -0.15, -0.10, 0.00, -0.02, 0.00],  # sadness
        [0.12, 0.00, 0.60, 0.00, 0.20, -0.05, 0.00],  # surprise
        [0.00, 0.03, -0.10, 0.04, 0.00, 0.03, 0.09],  # contempt
    ]
)


_EYE_COLUMN = np.arange(_DEFORM.shape[1]) == 2


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


@dataclass
class DatasetSpec:
    num_classes: int = 7
    side: int = 64
    n_train: int = 2000
    n_test: int = 700
    n_sequences: int = 140
    identities: int = 40
    intensity_range: tuple = (0.3, 1.0)
    illumination: float = 0.08
    jitter: float = 1.5
    stroke: float = 0.06  # Gaussian ink width of brows and lips, in face units ([-1, 1] spans the image)
    expression_gain: float = 2.5  # scales the brow and mouth deformation; eye opening is left as is
    noise_rate: float = 0.25
    class_weights: Optional[list] = None
    sequence_intensities: tuple = (0.1, 0.6, 0.7, 0.8, 0.9, 1.0)
    seed: int = 0

    def validate(self):
        def bad(name, why):
            raise ValueError(f"DatasetSpec.{name}: {why}")

        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            bad("num_classes", f"must be in [2, {len(CLASS_NAMES)}]")
        if self.side < 16 or self.side % 16:
            bad("side", "must be a positive multiple of 16")
        for name in ("n_train", "n_test", "identities"):
            if getattr(self, name) < 1:
                bad(name, "must be positive")
        if self.n_sequences < 0:
            bad("n_sequences", "must be non-negative")
        lo, hi = self.intensity_range
        if not 0.0 <= lo <= hi <= 1.0:
            bad("intensity_range", "must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 <= self.noise_rate < 1.0:
            bad("noise_rate", "must be in [0, 1)")
        if self.stroke <= 0:
            bad("stroke", "must be positive")
        if not 0 < self.expression_gain <= 3.0:
            bad("expression_gain", "must be in (0, 3]")
        if self.illumination < 0 or self.jitter < 0:
            bad("illumination" if self.illumination < 0 else "jitter", "must be non-negative")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (self.num_classes,) or np.any(w < 0) or w.sum() <= 0:
                bad("class_weights", f"need {self.num_classes} non-negative weights with positive sum")
        ts = list(self.sequence_intensities)
        if len(ts) != 6 or any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 0 or ts[-1] > 1:
            bad("sequence_intensities", "need 6 strictly increasing values in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"DatasetSpec: unknown key(s) {sorted(unknown)}")
        d = dict(d)
        for k in ("intensity_range", "sequence_intensities"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["intensity_range"] = list(self.intensity_range)
        d["sequence_intensities"] = list(self.sequence_intensities)
        return d


@dataclass
class Sample:
    image: np.ndarray
    observed_label: int
    clean_label: int
    identity: int
    intensity: float
    is_noisy: bool
    group: int = -1


@dataclass
class Split:
    """Column-oriented sample collection; ``images`` is [N, 1, side, side]."""

    images: np.ndarray
    observed: np.ndarray
    clean: np.ndarray
    identity: np.ndarray
    intensity: np.ndarray
    is_noisy: np.ndarray
    group: np.ndarray

    def __len__(self):
        return len(self.observed)

    def __getitem__(self, i) -> Sample:
        return Sample(
            self.images[i],
            int(self.observed[i]),
            int(self.clean[i]),
            int(self.identity[i]),
            float(self.intensity[i]),
            bool(self.is_noisy[i]),
            int(self.group[i]),
        )

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(*(getattr(self, f.name)[idx] for f in fields(self)))

    def copy(self) -> "Split":
        return Split(*(getattr(self, f.name).copy() for f in fields(self)))

    @classmethod
    def concat(cls, a: "Split", b: "Split") -> "Split":
        return cls(*(np.concatenate([getattr(a, f.name), getattr(b, f.name)]) for f in fields(cls)))

    def equals(self, other: "Split") -> bool:
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self)
        )


@dataclass
class SequenceSet:
    """Ordered frame groups, neutral to peak; ``frames`` is a Split grouped
    contiguously with ``frames_per_group`` frames each."""

    frames: Split
    frames_per_group: int

    def __len__(self):
        return len(self.frames) // self.frames_per_group if self.frames_per_group else 0

    def group(self, g) -> Split:
        f = self.frames_per_group
        return self.frames.subset(np.arange(g * f, (g + 1) * f))

    def test_indices(self):
        """Row indices of each group's four frames nearest the peak, shape [G, 4]."""
        f = self.frames_per_group
        base = np.arange(len(self)) * f
        return base[:, None] + np.arange(f - 5, f - 1)[None, :]

    def peak_indices(self):
        f = self.frames_per_group
        return np.arange(len(self)) * f + (f - 1)


@dataclass
class Manifest:
    format_version: int
    spec: dict
    counts: dict
    histograms: dict
    checksums: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ------------------------------------------------------------------ rendering


def _identity_params(seed, ident):
    r = np.random.default_rng(np.random.SeedSequence([seed, 7919, ident]))
    return {
        "face_w": r.uniform(0.62, 0.76),
        "face_h": r.uniform(0.78, 0.92),
        "skin": r.uniform(0.62, 0.78),
        "eye_dx": r.uniform(0.26, 0.34),
        "eye_y": r.uniform(-0.24, -0.14),
        "eye_rx": r.uniform(0.10, 0.13),
        "eye_ry": r.uniform(0.07, 0.09),
        "brow_gap": r.uniform(0.13, 0.18),
        "brow_len": r.uniform(0.14, 0.19),
        "mouth_y": r.uniform(0.34, 0.46),
        "mouth_w": r.uniform(0.20, 0.27),
    }


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _segment_ink(px, py, x0, y0, x1, y1, width):
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    u = np.clip(((px - x0) * dx + (py - y0) * dy) / L2, 0.0, 1.0)
    d2 = (px - x0 - u * dx) ** 2 + (py - y0 - u * dy) ** 2
    return np.exp(-d2 / (2.0 * width * width))


def render(side, ident, label, t, illum=0.0, shift=(0.0, 0.0), seed=0, stroke=None, gain=1.0):
    """Render one [1, side, side] image with values in [0, 1]."""
    p = _identity_params(seed, ident)
    d = t * _DEFORM[label] * np.where(_EYE_COLUMN, 1.0, gain)
    brow_raise, brow_tilt, eye_open, curve, mopen, mwidth, skew = d
    px1 = np.linspace(-1.0, 1.0, side) - 2.0 * shift[0] / side
    py1 = np.linspace(-1.0, 1.0, side) - 2.0 * shift[1] / side
    px, py = np.meshgrid(px1, py1)
    soft = 2.0 / side  # about one pixel
    ink_w = 1.1 / side if stroke is None else stroke

    face = _sigmoid((1.0 - np.sqrt((px / p["face_w"]) ** 2 + (py / p["face_h"]) ** 2)) / (2 * soft))
    img = 0.12 + (p["skin"] - 0.12) * face

    dark = np.zeros_like(px)
    for sgn in (-1.0, 1.0):
        cx = sgn * p["eye_dx"]
        ry = p["eye_ry"] * (1.0 + eye_open)
        r = np.sqrt(((px - cx) / p["eye_rx"]) ** 2 + ((py - p["eye_y"]) / ry) ** 2)
        dark = np.maximum(dark, 0.85 * _sigmoid((1.0 - r) / (soft / ry)))
        by = p["eye_y"] - p["brow_gap"] - brow_raise
        inner_x = sgn * (p["eye_dx"] - p["brow_len"] / 2)
        outer_x = sgn * (p["eye_dx"] + p["brow_len"] / 2)
        dark = np.maximum(dark, _segment_ink(px, py, inner_x, by + brow_tilt, outer_x, by - 0.3 * brow_tilt, ink_w * 1.6))

    mw = p["mouth_w"] + mwidth
    u = (px - skew * 0.3) / mw
    base = p["mouth_y"] - curve * (u * u - 0.4) - skew * u
    upper = base - mopen * (1.0 - u * u) * 0.5
    lower = base + mopen * (1.0 - u * u) * 0.5
    inside_x = _sigmoid((1.0 - np.abs(u)) * mw / soft)
    lip_up = np.exp(-((py - upper) ** 2) / (2 * ink_w * ink_w))
    lip_lo = np.exp(-((py - lower) ** 2) / (2 * ink_w * ink_w))
    gap = _sigmoid((py - upper) / soft) * _sigmoid((lower - py) / soft)
    mouth = inside_x * np.maximum(np.maximum(lip_up, lip_lo), 0.9 * gap)
    dark = np.maximum(dark, 0.9 * mouth)

    img = img * (1.0 - dark) + 0.05 * dark + illum
    return np.clip(img, 0.0, 1.0)[None, :, :]


# ------------------------------------------------------------------ generation


def class_quotas(n, weights, k):
    """Deterministic largest-remainder allocation of n samples to k classes."""
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=float)
    exact = n * w / w.sum()
    q = np.floor(exact).astype(int)
    rem = n - q.sum()
    order = sorted(range(k), key=lambda i: (-(exact[i] - q[i]), i))
    for i in order[:rem]:
        q[i] += 1
    return q


def _render_split(spec, n, ss, weights):
    rng = np.random.default_rng(ss)
    k = spec.num_classes
    labels = np.repeat(np.arange(k), class_quotas(n, weights, k))
    rng.shuffle(labels)
    lo, hi = spec.intensity_range
    idents = rng.integers(0, spec.identities, size=n)
    ts = rng.uniform(lo, hi, size=n)
    illum = rng.uniform(-spec.illumination, spec.illumination, size=n)
    shifts = rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    imgs = np.empty((n, 1, spec.side, spec.side))
    for i in range(n):
        imgs[i] = render(spec.side, idents[i], labels[i], ts[i], illum[i], shifts[i], spec.seed, spec.stroke, spec.expression_gain)
    return Split(
        imgs,
        labels.astype(np.int64),
        labels.astype(np.int64),
        idents.astype(np.int64),
        ts,
        np.zeros(n, dtype=bool),
        np.full(n, -1, dtype=np.int64),
    )


def _render_sequences(spec, ss):
    rng = np.random.default_rng(ss)
    k, g = spec.num_classes, spec.n_sequences
    labels = np.repeat(np.arange(k), class_quotas(g, None, k))
    rng.shuffle(labels)
    ts = np.asarray(spec.sequence_intensities, dtype=float)
    f = len(ts)
    n = g * f
    imgs = np.empty((n, 1, spec.side, spec.side))
    ident = np.empty(n, dtype=np.int64)
    for j in range(g):
        who = spec.identities + j
        illum = rng.uniform(-spec.illumination, spec.illumination)
        shift = rng.uniform(-spec.jitter, spec.jitter, size=2)
        for m, t in enumerate(ts):
            imgs[j * f + m] = render(spec.side, who, labels[j], t, illum, shift, spec.seed, spec.stroke, spec.expression_gain)
            ident[j * f + m] = who
    lab = np.repeat(labels, f).astype(np.int64)
    frames = Split(imgs, lab, lab.copy(), ident, np.tile(ts, g), np.zeros(n, bool), np.repeat(np.arange(g), f))
    return SequenceSet(frames, f)


def histogram(labels, k):
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=k).tolist()


def make_manifest(spec, train, test, seqs):
    k = spec.num_classes
    return Manifest(
        FORMAT_VERSION,
        spec.to_dict(),
        {"train": len(train), "test": len(test), "sequences": len(seqs), "sequence_frames": len(seqs.frames)},
        {
            "train": {"observed": histogram(train.observed, k), "clean": histogram(train.clean, k)},
            "test": {"observed": histogram(test.observed, k), "clean": histogram(test.clean, k)},
            "sequences": {"clean": histogram(seqs.frames.clean[seqs.peak_indices()], k)},
        },
    )


def generate_dataset(spec: DatasetSpec, noisy: bool = True):
    """Render train/test/sequence splits; returns ``(train, test, seqs, manifest)``.

    The peak frame of every sequence group is appended to the training split
    (its ``group`` field names the sequence), and label noise at
    ``spec.noise_rate`` is injected into the training split when ``noisy``.
    """
    spec.validate()
    root = np.random.SeedSequence([spec.seed, 1])
    s_train, s_test, s_seq, s_noise = root.spawn(4)
    train = _render_split(spec, spec.n_train, s_train, spec.class_weights)
    test = _render_split(spec, spec.n_test, s_test, None)
    seqs = _render_sequences(spec, s_seq)
    if len(seqs):
        train = Split.concat(train, seqs.frames.subset(seqs.peak_indices()))
    if noisy and spec.noise_rate > 0:
        train = inject_label_noise(train, spec.noise_rate, s_noise, spec.num_classes)
    return train, test, seqs, make_manifest(spec, train, test, seqs)


def inject_label_noise(split: Split, rate: float, seed, num_classes: int) -> Split:
    """Flip exactly round(rate * N) labels, uniformly to one of the other classes."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"noise rate must be in [0, 1), got {rate}")
    out = split.copy()
    n = len(out)
    m = int(math.floor(rate * n + 0.5))
    if m == 0:
        return out
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=m, replace=False)
    shift = rng.integers(1, num_classes, size=m)
    out.observed[chosen] = (out.clean[chosen] + shift) % num_classes
    out.is_noisy = out.observed != out.clean
    return out


def selective_batches(split: Split, batch_size: int, seed, num_classes: int, n_batches: Optional[int] = None):
    """Yield index arrays with exactly ``batch_size // K`` samples per observed class.

    Each class cycles through its own reshuffled index list, so minority
    classes repeat within an epoch. ``n_batches`` defaults to ``N // batch_size``.
    """
    if batch_size <= 0 or batch_size % num_classes:
        raise ValueError(f"batch size {batch_size} is not a positive multiple of {num_classes} classes")
    per = batch_size // num_classes
    rng = np.random.default_rng(seed)
    pools = [np.flatnonzero(split.observed == c) for c in range(num_classes)]
    for c, pool in enumerate(pools):
        if len(pool) == 0:
            raise ValueError(f"class {c} has no samples to draw from")
    queues = [np.empty(0, dtype=np.int64) for _ in pools]
    if n_batches is None:
        n_batches = max(1, len(split) // batch_size)
    for _ in range(n_batches):
        parts = []
        for c, pool in enumerate(pools):
            while len(queues[c]) < per:
                queues[c] = np.concatenate([queues[c], rng.permutation(pool)])
            parts.append(queues[c][:per])
            queues[c] = queues[c][per:]
        batch = np.concatenate(parts)
        yield batch[rng.permutation(len(batch))]


# ------------------------------------------------------------------ storage

_HEADER = struct.Struct("<4sIIII")  # magic, version, count, side, frames_per_group


def _record_dtype(side):
    return np.dtype(
        [
            ("observed", "<u4"),
            ("clean", "<u4"),
            ("identity", "<u4"),
            ("group", "<i4"),
            ("intensity", "<f8"),
            ("is_noisy", "u1"),
            ("pixels", "<f8", (side * side,)),
        ]
    )


def _encode(split: Split, side, frames_per_group=0) -> bytes:
    rec = np.zeros(len(split), dtype=_record_dtype(side))
    rec["observed"] = split.observed
    rec["clean"] = split.clean
    rec["identity"] = split.identity
    rec["group"] = split.group
    rec["intensity"] = split.intensity
    rec["is_noisy"] = split.is_noisy
    rec["pixels"] = split.images.reshape(len(split), -1)
    return _HEADER.pack(PAYLOAD_MAGIC, FORMAT_VERSION, len(split), side, frames_per_group) + rec.tobytes()


def _decode(buf: bytes, name: str):
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"{name}: file shorter than its {_HEADER.size}-byte header")
    magic, version, count, side, fpg = _HEADER.unpack_from(buf)
    if magic != PAYLOAD_MAGIC:
        raise DatasetFormatError(f"{name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{name}: payload version {version}, this reader handles {FORMAT_VERSION}")
    dt = _record_dtype(side)
    need = _HEADER.size + count * dt.itemsize
    if len(buf) < need:
        raise TruncatedError(f"{name}: truncated, {len(buf)} bytes present, {need} expected")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    split = Split(
        rec["pixels"].astype(np.float64).reshape(count, 1, side, side),
        rec["observed"].astype(np.int64),
        rec["clean"].astype(np.int64),
        rec["identity"].astype(np.int64),
        rec["intensity"].astype(np.float64),
        rec["is_noisy"].astype(bool),
        rec["group"].astype(np.int64),
    )
    return split, fpg


def save_dataset(train, test, seqs, manifest: Manifest, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    side = train.images.shape[-1]
    blobs = {
        "train.bin": _encode(train, side),
        "test.bin": _encode(test, side),
        "sequences.bin": _encode(seqs.frames, side, seqs.frames_per_group),
    }
    manifest.checksums = {}
    for name, blob in blobs.items():
        (d / name).write_bytes(blob)
        manifest.checksums[name] = hashlib.sha256(blob).hexdigest()
    (d / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest


def load_dataset(directory):
    """Inverse of :func:`save_dataset`; verifies version and checksums."""
    d = Path(directory)
    raw = json.loads((d / "manifest.json").read_text())
    if raw.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"manifest format_version {raw.get('format_version')!r}, this reader handles {FORMAT_VERSION}"
        )
    manifest = Manifest(**raw)
    out = {}
    for name in PAYLOAD_FILES:
        buf = (d / name).read_bytes()
        # structural checks first so truncation gets its own diagnostic
        split, fpg = _decode(buf, name)
        digest = hashlib.sha256(buf).hexdigest()
        if digest != manifest.checksums.get(name):
            raise ChecksumError(f"{name}: checksum mismatch (manifest {manifest.checksums.get(name)}, file {digest})")
        out[name] = (split, fpg)
    seq_split, fpg = out["sequences.bin"]
    return out["train.bin"][0], out["test.bin"][0], SequenceSet(seq_split, fpg), manifest


def export_pgm(image, path):
    """Write an 8-bit binary PGM; pixel v maps to floor(255*v + 0.5)."""
    a = np.asarray(getattr(image, "data", image), dtype=np.float64)
    a = a.reshape(a.shape[-2], a.shape[-1]) if a.ndim > 2 else a
    if a.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {a.shape}")
    if not np.all((a >= 0.0) & (a <= 1.0)):
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = a.shape
    payload = np.floor(255.0 * a + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())
