"""Benchmark harness: the three-arm comparison over seeds, plus reporting.

Pipeline for one experiment:

1. render the dataset once (every arm and seed consumes the same splits);
2. train a reference baseline classifier, which doubles as the frozen
   perceptual extractor and as the first seed's "w/o Ours" run;
3. pretrain and refine the autoencoder, then calibrate the latent noise;
4. train every (arm, seed[, batch size]) combination and score it.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autoencoder as A
from . import classifier as C
from . import masked as M
from . import metrics as X
from .data import DatasetSpec, export_pgm, generate_dataset, save_dataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ARM_BASELINE = "w/o Ours"
ARM_T = "with Ours(T)"
ARM_BT = "with Ours(BT)"
ARM_SLUGS = {ARM_BASELINE: "wo_ours", ARM_T: "ours_T", ARM_BT: "ours_BT"}
CSV_COLUMNS = ("arm", "seed", "batch_size", "accuracy", "fc", "cfc", "lift", "runtime_s")


class ConfigError(ValueError):
    pass


def default_arms():
    return {
        ARM_BASELINE: M.TrainConfig(threshold_mode="none"),
        ARM_T: M.TrainConfig(threshold_mode="fixed", calibration_epoch=5),
        ARM_BT: M.TrainConfig(threshold_mode="batch"),
    }


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(side=32, n_train=700, intensity_range=(0.15, 0.8)))
    ae: A.AEConfig = field(
        default_factory=lambda: A.AEConfig(widths=(8, 16, 32), latent=64, alpha=(4.0, 0.01, 0.01, 0.01), res_blocks=(1, 1, 0))
    )
    ae_schedule: A.AESchedule = field(
        default_factory=lambda: A.AESchedule(epochs=16, batch_size=16, lr=1e-3, decay_every=20, optimizer="adam")
    )
    refine: A.RefineSchedule = field(default_factory=A.RefineSchedule)
    classifier: C.ClsConfig = field(default_factory=lambda: C.ClsConfig(dropout=0.0))
    schedule: C.ClsSchedule = field(default_factory=lambda: C.ClsSchedule(epochs=20, lr=3e-3, weight_decay=0.0, decay_every=15))
    arms: dict = field(default_factory=default_arms)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    batch_sweep: list = field(default_factory=list)  # [[batch_size, lr_factor], ...]
    sweep_arms: list = field(default_factory=lambda: [ARM_T, ARM_BT])
    audit_shuffles: int = 100
    grid_inputs: int = 6
    grid_draws: int = 3
    report_runtime: bool = False

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        self.dataset.validate()
        self.ae.validate()
        self.classifier.validate()
        for name, tc in self.arms.items():
            tc.validate()
        if self.dataset.side != self.ae.side or self.dataset.side != self.classifier.side:
            raise ConfigError("dataset.side, ae.side and classifier.side must agree")
        if self.dataset.num_classes != self.classifier.num_classes:
            raise ConfigError("dataset.num_classes and classifier.num_classes must agree")
        k = self.classifier.num_classes
        for bs, _ in self.batch_sweep:
            if bs % k:
                raise ConfigError(f"batch_sweep: batch size {bs} is not a multiple of {k}")
        if self.schedule.batch_size % k and self.schedule.selective:
            raise ConfigError(f"schedule.batch_size must be a multiple of {k}")
        for a in self.sweep_arms:
            if a not in self.arms:
                raise ConfigError(f"sweep_arms: unknown arm {a!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.grid_draws < 1:
            raise ConfigError("grid_draws: need at least one draw")
        return self

    def to_dict(self):
        d = {
            "schema_version": self.schema_version,
            "dataset": self.dataset.to_dict(),
            "ae": _plain(asdict(self.ae)),
            "ae_schedule": _plain(asdict(self.ae_schedule)),
            "refine": _plain(asdict(self.refine)),
            "classifier": _plain(asdict(self.classifier)),
            "schedule": _plain(asdict(self.schedule)),
            "arms": {k: v.to_dict() for k, v in self.arms.items()},
            "seeds": list(self.seeds),
            "batch_sweep": [list(x) for x in self.batch_sweep],
            "sweep_arms": list(self.sweep_arms),
            "audit_shuffles": self.audit_shuffles,
            "grid_inputs": self.grid_inputs,
            "grid_draws": self.grid_draws,
            "report_runtime": self.report_runtime,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "schema_version" not in d:
            raise ConfigError("config is missing schema_version")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        try:
            kw["schema_version"] = d["schema_version"]
            kw["dataset"] = DatasetSpec.from_dict({**base.dataset.to_dict(), **d.get("dataset", {})})
            kw["ae"] = A.AEConfig.from_dict({**asdict(base.ae), **d.get("ae", {})})
            kw["ae_schedule"] = A.AESchedule.from_dict({**asdict(base.ae_schedule), **d.get("ae_schedule", {})})
            kw["refine"] = A.RefineSchedule.from_dict({**asdict(base.refine), **d.get("refine", {})})
            kw["classifier"] = C.ClsConfig.from_dict({**asdict(base.classifier), **d.get("classifier", {})})
            kw["schedule"] = C.ClsSchedule.from_dict({**asdict(base.schedule), **d.get("schedule", {})})
            if "arms" in d:
                kw["arms"] = {k: M.TrainConfig.from_dict(v) for k, v in d["arms"].items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for k in ("seeds", "batch_sweep", "sweep_arms", "audit_shuffles", "grid_inputs", "grid_draws", "report_runtime"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw).validate()

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


# ------------------------------------------------------------------ stages


@dataclass
class Artifacts:
    train: object
    test: object
    seqs: object
    manifest: object
    reference: Optional[object] = None  # baseline classifier params (extractor)
    reference_log: Optional[object] = None
    ae: Optional[object] = None
    critic: Optional[object] = None
    noise: Optional[A.NoiseSpec] = None
    ae_pretrained: Optional[object] = None
    ae_log: dict = field(default_factory=dict)


def prepare(cfg: ExperimentConfig, out_dir=None, need_ae=True) -> Artifacts:
    """Dataset, reference classifier and (optionally) the trained autoencoder."""
    train, test, seqs, manifest = generate_dataset(cfg.dataset)
    if out_dir is not None:
        save_dataset(train, test, seqs, manifest, Path(out_dir) / "data")
    art = Artifacts(train, test, seqs, manifest)
    seed0 = cfg.seeds[0]
    art.reference, art.reference_log = C.train_baseline(train, cfg.classifier, cfg.schedule, seed=seed0)
    if need_ae:
        train_autoencoder(cfg, art)
    return art


def train_autoencoder(cfg: ExperimentConfig, art: Artifacts):
    seed = cfg.dataset.seed
    images = art.train.images
    ae, pre_log = A.pretrain_ae(images, cfg.ae, cfg.ae_schedule, seed=seed)
    extractor = A.PerceptualExtractor(art.reference, cfg.classifier, tuple(cfg.refine.tap_weights))
    held = art.test.images
    before = A.heldout_perceptual(held, ae, cfg.ae, extractor)
    pre_params = ae.copy()
    critic = A.init_critic(cfg.ae, seed, cfg.refine.clip)
    ae, critic, ref_log = A.refine_ae(images, ae, critic, extractor, cfg.ae, cfg.refine, seed=seed)
    after = A.heldout_perceptual(held, ae, cfg.ae, extractor)
    art.ae, art.critic = ae, critic
    art.noise = A.calibrate_noise(images, ae, cfg.ae, cfg_noise_scale(cfg))
    art.ae_log = {
        "pretrain": pre_log,
        "refine": ref_log,
        "heldout_perceptual_pretrain": before,
        "heldout_perceptual_refined": after,
    }
    art.ae_pretrained = pre_params
    return art


def cfg_noise_scale(cfg):
    scales = {tc.noise_scale for tc in cfg.arms.values() if tc.threshold_mode != "none"}
    if len(scales) > 1:
        raise ConfigError("all masked arms must share one noise_scale (one calibrated noise spec)")
    return scales.pop() if scales else 0.1


@dataclass
class RunReport:
    arm: str
    seed: int
    batch_size: int
    lr: float
    accuracy: float
    per_class: dict
    confusion: list
    fc: int
    cfc: int
    sequence_verdicts: list
    lift: Optional[float]
    shuffled_lift: Optional[float]
    audit: Optional[dict]
    kept_fraction: Optional[float]
    transitions: Optional[int]
    skipped_steps: int
    threshold: Optional[float]
    train_log: list
    runtime_s: Optional[float] = None
    failed: bool = False

    def to_dict(self):
        return asdict(self)


def evaluate(params, cfg: ExperimentConfig, art: Artifacts):
    k = cfg.classifier.num_classes
    pred = C.predict_labels(art.test.images, params, cfg.classifier)
    cm = X.confusion_matrix(pred, art.test.clean, k)
    seq = X.eval_sequences(lambda imgs: C.predict_labels(imgs, params, cfg.classifier), art.seqs)
    return cm, seq


def run_arm(cfg: ExperimentConfig, art: Artifacts, arm: str, seed: int, batch_size=None, lr_factor=1.0) -> RunReport:
    tc = cfg.arms[arm]
    sched = C.ClsSchedule(**{**asdict(cfg.schedule)})
    if batch_size is not None:
        sched.batch_size = int(batch_size)
        sched.lr = cfg.schedule.lr * float(lr_factor)
    t0 = time.perf_counter()
    reuse = (
        tc.threshold_mode == "none"
        and seed == cfg.seeds[0]
        and batch_size is None
        and art.reference is not None
    )
    if reuse:
        params, tl, ml = art.reference, art.reference_log, None
    else:
        params, tl, ml = M.train_masked(
            art.train, cfg.classifier, sched, tc, art.ae, cfg.ae, art.noise, seed=seed
        )
    runtime = time.perf_counter() - t0
    cm, seq = evaluate(params, cfg, art)
    audit = None
    lift = shuffled = kept = trans = thr = None
    skipped = 0
    if ml is not None and tc.threshold_mode != "none":
        audit = X.mask_audit(ml, cfg.audit_shuffles, seed)
        lift, shuffled = audit["final_lift"], audit["shuffled_lift"]
        kept = float(np.mean(ml.column("mask")))
        trans = ml.transitions()
        skipped = ml.skipped_steps
        if tc.threshold_mode == "fixed":
            thr = tl.epochs[-1].get("threshold")
    return RunReport(
        arm=arm,
        seed=int(seed),
        batch_size=sched.batch_size,
        lr=sched.lr,
        accuracy=cm.accuracy,
        per_class={str(c): v for c, v in cm.per_class().items()},
        confusion=cm.counts.tolist(),
        fc=seq.fc,
        cfc=seq.cfc,
        sequence_verdicts=seq.verdicts,
        lift=lift,
        shuffled_lift=shuffled,
        audit=audit,
        kept_fraction=kept,
        transitions=trans,
        skipped_steps=skipped,
        threshold=thr,
        train_log=[{k: v for k, v in r.items() if k != "seconds"} for r in tl.epochs],
        runtime_s=runtime,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None, art: Optional[Artifacts] = None):
    """Run every arm for every seed (and the batch-size sweep, if configured).

    Returns ``(reports, artifacts)``. Reports are persisted as they complete
    when ``out_dir`` is given, and an arm that raises is recorded with
    ``failed=True`` before the error propagates.
    """
    cfg.validate()
    need_ae = any(tc.threshold_mode != "none" for tc in cfg.arms.values())
    art = art or prepare(cfg, out_dir, need_ae)
    jobs = [(arm, seed, None, 1.0) for seed in cfg.seeds for arm in cfg.arms]
    for bs, factor in cfg.batch_sweep:
        jobs += [(arm, seed, bs, factor) for seed in cfg.seeds for arm in cfg.sweep_arms]
    reports = []
    for arm, seed, bs, factor in jobs:
        try:
            rep = run_arm(cfg, art, arm, seed, bs, factor)
        except Exception:
            reports.append(_failed(arm, seed, bs or cfg.schedule.batch_size))
            if out_dir is not None:
                emit_report(reports, out_dir, cfg, art)
            raise
        reports.append(rep)
        log.info("%s seed %d bs %d: acc %.4f fc %d", arm, seed, rep.batch_size, rep.accuracy, rep.fc)
    if out_dir is not None:
        emit_report(reports, out_dir, cfg, art)
    return reports, art


def _failed(arm, seed, bs):
    return RunReport(arm, int(seed), int(bs), float("nan"), float("nan"), {}, [], -1, -1, [], None, None, None, None, None, 0, None, [], None, True)


# ------------------------------------------------------------------ reports


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_rows(reports, with_runtime=False):
    rows = []
    for r in reports:
        rows.append(
            [r.arm, r.seed, r.batch_size, r.accuracy, r.fc, r.cfc, r.lift, r.runtime_s if with_runtime else None]
        )
    return rows


def write_csv(reports, path, with_runtime=False):
    lines = [",".join(CSV_COLUMNS)]
    for row in report_rows(reports, with_runtime):
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _slug(r):
    s = f"{ARM_SLUGS.get(r.arm, r.arm.replace(' ', '_'))}_seed{r.seed}"
    return s + f"_bs{r.batch_size}"


def summarize(reports):
    """Per-(arm, batch size) means over seeds."""
    groups: dict = {}
    for r in reports:
        if r.failed:
            continue
        groups.setdefault((r.arm, r.batch_size), []).append(r)
    out = []
    for (arm, bs), rs in groups.items():
        lifts = [r.lift for r in rs if r.lift is not None]
        sh = [r.shuffled_lift for r in rs if r.shuffled_lift is not None]
        out.append(
            {
                "arm": arm,
                "batch_size": bs,
                "seeds": [r.seed for r in rs],
                "accuracy": float(np.mean([r.accuracy for r in rs])),
                "fc": float(np.mean([r.fc for r in rs])),
                "cfc": float(np.mean([r.cfc for r in rs])),
                "lift": float(np.mean(lifts)) if lifts else None,
                "shuffled_lift": float(np.mean(sh)) if sh else None,
            }
        )
    return out


def neighbor_grid(images, ae_params, ae_cfg, noise, draws=3, seed=0):
    """Rows: originals, reconstructions, then ``draws`` neighbor rows; one column per input."""
    images = np.asarray(images, dtype=np.float64)
    rows = [images, A.reconstruct(images, ae_params, ae_cfg)]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1313]))
    for _ in range(draws):
        rows.append(A.synthesize_neighbor(images, ae_params, ae_cfg, A.NoiseSpec(noise.sigma), rng))
    side = images.shape[-1]
    pad = 2
    n = len(images)
    grid = np.ones((len(rows) * (side + pad) - pad, n * (side + pad) - pad))
    for i, row in enumerate(rows):
        for j in range(n):
            y, x = i * (side + pad), j * (side + pad)
            grid[y : y + side, x : x + side] = np.clip(row[j, 0], 0.0, 1.0)
    return grid


def emit_report(reports, directory, cfg: Optional[ExperimentConfig] = None, art: Optional[Artifacts] = None):
    """Write ``reports/*.json``, ``summary.csv``, ``summary.json`` and the neighbor grid.

    Run times go to ``timings.txt`` and only enter the CSV/JSON reports when
    ``cfg.report_runtime`` is set, so that reruns are byte-identical.
    """
    d = Path(directory)
    try:
        (d / "reports").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {d}: {exc}") from None
    with_rt = bool(cfg and cfg.report_runtime)
    for r in reports:
        body = r.to_dict()
        if not with_rt:
            body["runtime_s"] = None
        (d / "reports" / f"{_slug(r)}.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    write_csv(reports, d / "summary.csv", with_rt)
    summary = {"runs": len(reports), "failed": sum(r.failed for r in reports), "arms": summarize(reports)}
    if art is not None and art.ae_log:
        summary["autoencoder"] = {
            "pretrain_loss": [row["loss_ae"] for row in art.ae_log["pretrain"]],
            "heldout_perceptual_pretrain": art.ae_log["heldout_perceptual_pretrain"],
            "heldout_perceptual_refined": art.ae_log["heldout_perceptual_refined"],
            "critic_max_abs_weight": max((c["max_abs_weight"] for c in art.ae_log["refine"]["critic"]), default=None),
        }
    if cfg is not None:
        summary["config"] = cfg.to_dict()
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (d / "timings.txt").write_text(
        "".join(f"{r.arm}\t{r.seed}\t{r.batch_size}\t{_fmt(r.runtime_s)}\n" for r in reports)
    )
    if cfg is not None and art is not None and art.ae is not None:
        k = min(cfg.grid_inputs, len(art.test))
        grid = neighbor_grid(art.test.images[:k], art.ae, cfg.ae, art.noise, cfg.grid_draws, cfg.seeds[0])
        export_pgm(grid, d / "neighbors.pgm")
    return d


def load_report(path) -> RunReport:
    body = json.loads(Path(path).read_text())
    return RunReport(**body)
