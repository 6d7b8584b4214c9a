"""Asymmetric denoising autoencoder and semantic-neighbor synthesis.

The encoder is a stack of stride-2 conv stages (BN + LeakyReLU + dropout,
the last one BN + tanh) followed by a dense map to a tanh-bounded latent
code. The decoder mirrors it with transposed convs, but every stage is
thickened with residual blocks, so it carries more parameters than the
encoder. Reconstruction targets are taken at every scale, the input
included, which gives ``len(widths) + 1`` scale levels.

Training runs in two stages: multi-scale reconstruction pretraining with
momentum SGD, then a refinement of the decoder against a WGAN critic plus a
perceptual loss measured through a frozen classifier.

A semantic neighbor is ``decode(encode(x) + n)`` with Gaussian ``n``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import classifier as C
from . import layers as L
from . import tensor as T
from .optim import adam_step, clip_parameters, rmsprop_step, sgd_step, step_decay
from .params import FrozenParams, ParamStore

log = logging.getLogger(__name__)


class TrainingAborted(FloatingPointError):
    pass


def _strict(cls, d):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    d = dict(d)
    for k, f in cls.__dataclass_fields__.items():
        if k in d and isinstance(d[k], list) and f.type in ("tuple", tuple):
            d[k] = tuple(d[k])
    return cls(**d)


@dataclass
class AEConfig:
    side: int = 32
    widths: tuple = (8, 16, 32, 40)
    latent: int = 32
    alpha: tuple = (4.0, 1.0, 1.0, 1.0, 1.0)  # input scale first
    dropout: float = 0.1
    res_blocks: tuple = (2, 2, 2, 2)  # decoder stages, coarse to fine
    out_res: int = 1
    critic_widths: tuple = (8, 16, 32)

    def validate(self):
        n = len(self.widths)
        if n < 1:
            raise ValueError("widths: need at least one encoder stage")
        if len(self.alpha) != n + 1:
            raise ValueError(f"alpha: need {n + 1} weights (input plus one per encoder stage), got {len(self.alpha)}")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("alpha: weights must be positive")
        if len(self.res_blocks) != n:
            raise ValueError(f"res_blocks: need one count per decoder stage ({n})")
        if self.side % (2**n):
            raise ValueError(f"side: {self.side} is not divisible by 2^{n}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout: must be in [0, 1)")
        if self.latent < 1:
            raise ValueError("latent: must be positive")
        return self

    @property
    def levels(self):
        return len(self.widths) + 1

    @classmethod
    def from_dict(cls, d):
        return _strict(cls, d).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class AESchedule:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 4e-4
    decay_every: int = 10
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"

    def validate(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer: expected 'sgd' or 'adam', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        return _strict(cls, d).validate()


@dataclass
class RefineSchedule:
    epochs: int = 3
    batch_size: int = 64
    lr_g: float = 1e-4
    lr_d: float = 2e-5
    critic_every: int = 10  # after the first epoch
    clip: float = 0.01
    lambda_ae: float = 1e-3
    lambda_ae_every: int = 20
    lambda_adv: float = 5.0
    lambda_rec: float = 1.0
    lambda_pixel: float = 1.0
    lambda_perc: float = 1.0
    tap_weights: tuple = (100.0, 0.1, 0.001)

    @classmethod
    def from_dict(cls, d):
        return _strict(cls, d)


@dataclass
class NoiseSpec:
    """Isotropic (or per-coordinate) Gaussian latent noise."""

    sigma: object = 0.0  # float or per-coordinate array
    seed: Optional[int] = None

    def __post_init__(self):
        if np.any(np.asarray(self.sigma, dtype=float) < 0):
            raise ValueError("noise sigma must be non-negative")


# ------------------------------------------------------------------ networks


def _encoder_stages(cfg: AEConfig):
    stages = []
    c = 1
    for i, w in enumerate(cfg.widths):
        last = i == len(cfg.widths) - 1
        stages.append(
            [
                L.conv(f"enc.conv{i + 1}", c, w, 3, 2, 1),
                L.bnorm(f"enc.bn{i + 1}", w),
                L.act("tanh" if last else "leaky_relu"),
            ]
        )
        c = w
    return stages


def _bottom(cfg):
    return cfg.side // 2 ** len(cfg.widths)


def _decoder_stages(cfg: AEConfig):
    """List of (specs, recovers_level) from coarse to fine; the final output stage recovers level 0."""
    w = cfg.widths
    n = len(w)
    stages = []
    for j, l in enumerate(range(n, 0, -1)):
        cin = w[l - 1]
        cout = w[l - 2] if l >= 2 else w[0]
        specs = [L.tconv(f"dec.up{l}", cin, cout), L.act("relu")]
        specs += [L.resblock(f"dec.up{l}.res{r + 1}", cout) for r in range(cfg.res_blocks[j])]
        stages.append((specs, l - 1 if l >= 2 else None))
    out = [L.resblock(f"dec.out.res{r + 1}", w[0], relu_out=False) for r in range(cfg.out_res)]
    out.append(L.conv("dec.out.conv", w[0], 1, 3))
    stages.append((out, 0))
    return stages


def _critic_specs(cfg: AEConfig):
    specs = []
    c = 1
    for i, w in enumerate(cfg.critic_widths):
        specs += [L.conv(f"critic.conv{i + 1}", c, w, 3, 2, 1), L.act("leaky_relu")]
        c = w
    s = cfg.side // 2 ** len(cfg.critic_widths)
    specs += [L.act("flatten"), L.dense("critic.fc", c * s * s, 1)]
    return specs


def init_ae(cfg: AEConfig, seed) -> ParamStore:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 505]))
    store = ParamStore()
    for st in _encoder_stages(cfg):
        L.init_seq(st, store, rng)
    b = _bottom(cfg)
    L.init_layer(L.dense("enc.fc", cfg.widths[-1] * b * b, cfg.latent), store, rng)
    L.init_layer(L.dense("dec.fc", cfg.latent, cfg.widths[-1] * b * b), store, rng)
    for specs, _ in _decoder_stages(cfg):
        L.init_seq(specs, store, rng)
    return store


def init_critic(cfg: AEConfig, seed, clip=0.01) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 606]))
    store = ParamStore()
    L.init_seq(_critic_specs(cfg), store, rng)
    return clip_parameters(store, clip)


def encoder_names(params):
    return [n for n in params.names() if n.startswith("enc.")]


def decoder_names(params):
    return [n for n in params.names() if n.startswith("dec.")]


def _images(x, side):
    x = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 3:
        x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.shape[1:] != (1, side, side):
        raise L.ShapeError(f"autoencoder expects images [N, 1, {side}, {side}], got {list(x.shape)}")
    return x


def encode(images, params, cfg: AEConfig, mode="eval", rng=None):
    """Return ``(code, feats)``.

    ``feats[l]`` is the detached pre-dropout activation at scale ``l``
    (``feats[0]`` is the clean input); these are the reconstruction targets.
    """
    x = _images(images, cfg.side)
    feats = [T.Tensor(x.data)]
    drop = L.dropout(cfg.dropout)
    h = L.forward_layer(x, drop, params, mode, rng)
    stages = _encoder_stages(cfg)
    for i, st in enumerate(stages):
        h = L.forward_seq(h, st, params, mode, rng)
        feats.append(T.Tensor(h.data))
        if i < len(stages) - 1:
            h = L.forward_layer(h, drop, params, mode, rng)
    b = _bottom(cfg)
    fc = L.dense("enc.fc", cfg.widths[-1] * b * b, cfg.latent)
    code = T.tanh(L.forward_layer(T.flatten(h), fc, params, mode))
    return code, feats


def decode(code, params, cfg: AEConfig):
    """Return ``(image, recs)`` with ``recs[l]`` aligned to ``feats[l]`` of :func:`encode`."""
    code = code if isinstance(code, T.Tensor) else T.Tensor(np.asarray(code, dtype=np.float64))
    if code.ndim != 2 or code.shape[1] != cfg.latent:
        raise L.ShapeError(f"decoder expects codes [N, {cfg.latent}], got {list(code.shape)}")
    b = _bottom(cfg)
    recs = [None] * cfg.levels
    h = T.add(T.matmul(code, params["dec.fc.weight"]), params["dec.fc.bias"])
    h = T.reshape(h, (code.shape[0], cfg.widths[-1], b, b))
    recs[-1] = h
    for specs, level in _decoder_stages(cfg):
        h = L.forward_seq(h, specs, params, "eval")
        if level is not None:
            recs[level] = h
    return h, recs


def reconstruct(images, params, cfg: AEConfig):
    """Eval-mode ``decode(encode(x))`` as an array."""
    code, _ = encode(images, params, cfg, "eval")
    return decode(code, params, cfg)[0].data


def critic(images, cparams, cfg: AEConfig):
    """Unbounded critic score, one per image, shape [N]."""
    x = _images(images, cfg.side)
    out = L.forward_seq(x, _critic_specs(cfg), cparams, "eval")
    return T.reshape(out, (x.shape[0],))


# ------------------------------------------------------------------ losses


def loss_ae(feats, recs, alpha):
    """``sum_l alpha_l / |z_l| * ||z_l - zhat_l||^2`` with |z_l| the element count."""
    if not (len(feats) == len(recs) == len(alpha)):
        raise ValueError(f"scale lists misaligned: {len(feats)} targets, {len(recs)} recoveries, {len(alpha)} weights")
    total = None
    for z, zh, a in zip(feats, recs, alpha):
        z = z if isinstance(z, T.Tensor) else T.Tensor(z)
        zh = zh if isinstance(zh, T.Tensor) else T.Tensor(zh)
        if z.shape != zh.shape:
            raise ValueError(f"scale shape mismatch: target {list(z.shape)} vs recovery {list(zh.shape)}")
        term = T.mul(T.tsum(T.square(T.sub(zh, z))), a / z.size)
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class PerceptualExtractor:
    """Frozen classifier whose conv3/conv4/conv5 activations define the perceptual metric."""

    params: object
    cfg: C.ClsConfig
    weights: tuple = (100.0, 0.1, 0.001)

    def __post_init__(self):
        if isinstance(self.params, ParamStore):
            self.params = FrozenParams(self.params)

    def taps(self, images):
        t = C.features(images, self.params, self.cfg)
        return [t[k] for k in ("conv3", "conv4", "conv5")]


def perceptual_distance(image, rec, extractor: PerceptualExtractor):
    """Tap-weighted sum of mean squared feature differences."""
    ref = [T.Tensor(f.data) for f in extractor.taps(T.Tensor(_images(image, extractor.cfg.side).data))]
    out = extractor.taps(rec)
    total = None
    for w, a, b in zip(extractor.weights, out, ref):
        term = T.mul(T.tsum(T.square(T.sub(a, b))), w / a.size)
        total = term if total is None else T.add(total, term)
    return total


def loss_rec(image, rec, extractor: Optional[PerceptualExtractor], lam_pixel=1.0, lam_perc=1.0):
    """``lam_pixel * mse(rec, image) + lam_perc * perceptual(rec, image)``."""
    if extractor is None:
        raise ValueError("loss_rec needs a perceptual extractor (a frozen trained classifier)")
    img = _images(image, extractor.cfg.side)
    pix = T.mul(T.tsum(T.square(T.sub(rec, T.Tensor(img.data)))), lam_pixel / img.size)
    if lam_perc == 0:
        return pix
    return T.add(pix, T.mul(perceptual_distance(img, rec, extractor), lam_perc))


def loss_adv_d(real, fake, cparams, cfg):
    """Critic loss ``mean D(fake) - mean D(real)``."""
    return T.sub(T.mean(critic(fake, cparams, cfg)), T.mean(critic(real, cparams, cfg)))


def loss_adv_g(fake, cparams, cfg):
    """Generator loss ``-mean D(fake)``."""
    return T.mul(T.mean(critic(fake, cparams, cfg)), -1.0)


def loss_generator_total(l_ae, l_adv, l_rec, lambda_ae=1e-3, lambda_adv=5.0, lambda_rec=1.0):
    total = T.mul(l_ae, lambda_ae)
    total = T.add(total, T.mul(l_adv, lambda_adv))
    return T.add(total, T.mul(l_rec, lambda_rec))


# ------------------------------------------------------------------ training


def _batches(n, bs, rng):
    order = rng.permutation(n)
    return [order[i : i + bs] for i in range(0, n - bs + 1, bs)] or [order]


def _finite(value, what, epoch, it):
    if not np.isfinite(value):
        raise TrainingAborted(f"{what} became non-finite ({value!r}) at epoch {epoch}, iteration {it}")


def pretrain_ae(images, cfg: AEConfig, sched: AESchedule, seed=0, params=None):
    """Multi-scale reconstruction pretraining; returns ``(params, log)``.

    ``log`` holds one dict per epoch with the mean batch loss.
    """
    cfg.validate()
    sched.validate()
    images = np.asarray(images, dtype=np.float64)
    params = init_ae(cfg, seed) if params is None else params
    order_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 707]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 808]))
    hist = []
    for epoch in range(sched.epochs):
        t0 = time.perf_counter()
        lr = step_decay(sched.lr, epoch, sched.decay_every)
        losses = []
        for it, idx in enumerate(_batches(len(images), sched.batch_size, order_rng)):
            with T.Graph() as g:
                code, feats = encode(images[idx], params, cfg, "train", drop_rng)
                _, recs = decode(code, params, cfg)
                loss = loss_ae(feats, recs, cfg.alpha)
            _finite(float(loss.data), "autoencoder loss", epoch, it)
            g.backward(loss)
            if sched.optimizer == "adam":
                adam_step(params, lr, weight_decay=sched.weight_decay)
            else:
                sgd_step(params, lr, sched.momentum, sched.weight_decay)
            losses.append(float(loss.data))
        hist.append({"epoch": epoch, "lr": lr, "loss_ae": float(np.mean(losses)), "seconds": time.perf_counter() - t0})
        log.info("ae pretrain epoch %d loss %.5f", epoch, hist[-1]["loss_ae"])
    return params, hist


def lambda_ae_at(sched: RefineSchedule, epoch):
    return step_decay(sched.lambda_ae, epoch, sched.lambda_ae_every)


def refine_ae(images, params, cparams, extractor: PerceptualExtractor, cfg: AEConfig, sched: RefineSchedule, seed=0):
    """Adversarial + perceptual refinement of the decoder; returns ``(params, cparams, log)``.

    The encoder is held fixed, the critic takes a step on every generator
    step during the first epoch and on every ``critic_every``-th step after
    that, and critic weights are clipped after each critic step. ``log``
    has per-epoch rows under ``"epochs"`` and, under ``"critic"``, one row
    per critic step recording the largest absolute critic weight.
    """
    if extractor is None:
        raise ValueError("refinement needs a perceptual extractor")
    images = np.asarray(images, dtype=np.float64)
    enc = FrozenParams(params)
    frozen_critic = FrozenParams(cparams)
    dec_names = decoder_names(params)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 909]))
    hist = {"epochs": [], "critic": []}
    step = 0
    for epoch in range(sched.epochs):
        t0 = time.perf_counter()
        lam_ae = lambda_ae_at(sched, epoch)
        rows = []
        batches = _batches(len(images), sched.batch_size, rng)
        for it, idx in enumerate(batches):
            x = images[idx]
            code, feats = encode(x, enc, cfg, "eval")
            code = T.Tensor(code.data)
            if epoch == 0 or step % sched.critic_every == 0:
                real = images[rng.choice(len(images), size=len(idx), replace=False)]
                fake = decode(code, enc, cfg)[0].data
                with T.Graph() as gd:
                    ld = loss_adv_d(real, fake, cparams, cfg)
                _finite(float(ld.data), "critic loss", epoch, it)
                gd.backward(ld)
                rmsprop_step(cparams, sched.lr_d)
                clip_parameters(cparams, sched.clip)
                wmax = max(float(np.max(np.abs(cparams[n].data))) for n in cparams.names())
                hist["critic"].append({"epoch": epoch, "step": step, "loss_d": float(ld.data), "max_abs_weight": wmax})
            with T.Graph() as gg:
                rec, recs = decode(code, params, cfg)
                l_ae = loss_ae(feats, recs, cfg.alpha)
                l_adv = loss_adv_g(rec, frozen_critic, cfg)
                l_rec = loss_rec(x, rec, extractor, sched.lambda_pixel, sched.lambda_perc)
                total = loss_generator_total(l_ae, l_adv, l_rec, lam_ae, sched.lambda_adv, sched.lambda_rec)
            _finite(float(total.data), "generator loss", epoch, it)
            gg.backward(total)
            rmsprop_step(params, sched.lr_g, names=dec_names)
            rows.append((float(total.data), float(l_ae.data), float(l_adv.data), float(l_rec.data)))
            step += 1
        m = np.mean(rows, axis=0)
        hist["epochs"].append(
            {
                "epoch": epoch,
                "lambda_ae": lam_ae,
                "loss_g": float(m[0]),
                "loss_ae": float(m[1]),
                "loss_adv_g": float(m[2]),
                "loss_rec": float(m[3]),
                "seconds": time.perf_counter() - t0,
            }
        )
        log.info("ae refine epoch %d loss_g %.5f", epoch, m[0])
    return params, cparams, hist


def heldout_perceptual(images, params, cfg: AEConfig, extractor: PerceptualExtractor, batch=128):
    """Mean perceptual distance between held-out images and their reconstructions."""
    images = np.asarray(images, dtype=np.float64)
    vals = []
    for i in range(0, len(images), batch):
        x = images[i : i + batch]
        rec = T.Tensor(reconstruct(x, params, cfg))
        vals.append(float(perceptual_distance(x, rec, extractor).data) * len(x))
    return float(np.sum(vals) / len(images))


# ------------------------------------------------------------------ neighbors


def latent_codes(images, params, cfg: AEConfig, batch=256):
    images = np.asarray(images, dtype=np.float64)
    out = [encode(images[i : i + batch], params, cfg, "eval")[0].data for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, cfg.latent))


def calibrate_noise(images, params, cfg: AEConfig, scale=0.1, seed=None) -> NoiseSpec:
    """``sigma = scale * per-coordinate std`` of latent codes over ``images``."""
    if scale < 0:
        raise ValueError("noise scale must be non-negative")
    codes = latent_codes(images, params, cfg)
    return NoiseSpec(scale * codes.std(axis=0), seed)


def perturb_codes(codes, noise: NoiseSpec, rng=None):
    codes = np.asarray(codes, dtype=np.float64)
    sigma = np.asarray(noise.sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("noise sigma must be non-negative")
    if noise.seed is not None:
        rng = np.random.default_rng(noise.seed)
    elif rng is None:
        raise ValueError("unseeded noise needs an rng")
    return codes + rng.standard_normal(codes.shape) * sigma


def synthesize_neighbor(images, params, cfg: AEConfig, noise: NoiseSpec, rng=None):
    """``decode(encode(x) + n)`` in eval mode; parameters are only read."""
    code, _ = encode(images, params, cfg, "eval")
    return decode(perturb_codes(code.data, noise, rng), params, cfg)[0].data


def param_count(params, prefix):
    return sum(params[n].data.size for n in params.names() if n.startswith(prefix))
