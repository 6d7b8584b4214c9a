"""Command-line entry point: ``neighborwise <subcommand> --config cfg.json --seed N --out DIR``.

Subcommands map onto the pipeline stages. Each reads its inputs from the
``--out`` directory (or explicit paths) and writes its products back there,
so the stages can be chained by hand or replaced by a single ``bench``.

    gen-data      render the dataset to <out>/data
    train-ae      pretrain the autoencoder            -> ae_pretrained.nwck
    refine-ae     adversarial/perceptual refinement   -> ae.nwck, critic.nwck, noise.json
    train-cls     unmasked baseline classifier        -> classifier.nwck
    train-masked  masked training (--arm T or BT)     -> classifier_<arm>.nwck, mask_log.csv
    eval          score a classifier checkpoint       -> eval.json
    bench         every arm for every seed            -> summary.csv, summary.json, reports/

Exit status is 0 on success, 2 on bad arguments or configuration and 1 on
any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autoencoder as A
from . import classifier as C
from . import experiment as E
from . import masked as M
from .data import export_pgm, generate_dataset, load_dataset, save_dataset
from .params import ParamStore

log = logging.getLogger("neighborwise")

ARM_CHOICES = {"T": E.ARM_T, "BT": E.ARM_BT}


class UsageError(ValueError):
    pass


def worker_count():
    """``NW_THREADS`` caps worker processes; runs here are sequential, so it only bounds BLAS threads."""
    raw = os.environ.get("NW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"NW_THREADS must be a positive integer, got {raw!r}")
    return n


def _config(args):
    cfg = E.load_config(args.config) if args.config else E.ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise UsageError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    return cfg.validate()


def _out(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _data(cfg, args, out: Path):
    """Load ``--data`` (default ``<out>/data``), rendering it first if absent."""
    d = Path(args.data) if getattr(args, "data", None) else out / "data"
    if not (d / "manifest.json").exists():
        if getattr(args, "data", None):
            raise FileNotFoundError(f"no dataset at {d} (run gen-data first)")
        train, test, seqs, manifest = generate_dataset(cfg.dataset)
        save_dataset(train, test, seqs, manifest, d)
        return train, test, seqs, manifest
    return load_dataset(d)


def _seed(cfg, args):
    return int(args.seed) if args.seed is not None else int(cfg.seeds[0])


def _write_json(path, body):
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _save_noise(path, noise: A.NoiseSpec):
    _write_json(path, {"sigma": np.asarray(noise.sigma, dtype=np.float64).tolist()})


def _load_noise(path):
    body = json.loads(Path(path).read_text())
    return A.NoiseSpec(np.asarray(body["sigma"], dtype=np.float64))


def _ckpt(args, name, out):
    p = getattr(args, name, None)
    return Path(p) if p else None


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    cfg = _config(args)
    spec = cfg.dataset if args.seed is None else replace(cfg.dataset, seed=int(args.seed))
    out = _out(args)
    train, test, seqs, manifest = generate_dataset(spec.validate())
    save_dataset(train, test, seqs, manifest, out / "data")
    if args.pgm:
        pgm = out / "data" / "pgm"
        pgm.mkdir(exist_ok=True)
        for i in range(min(args.pgm, len(train))):
            export_pgm(train.images[i], pgm / f"train_{i:04d}_c{train.clean[i]}_o{train.observed[i]}.pgm")
    print(json.dumps(manifest.counts, sort_keys=True))
    return 0


def cmd_train_ae(args):
    cfg = _config(args)
    out = _out(args)
    train, *_ = _data(cfg, args, out)
    params, hist = A.pretrain_ae(train.images, cfg.ae, cfg.ae_schedule, seed=_seed(cfg, args))
    params.save(out / "ae_pretrained.nwck")
    _write_json(out / "ae_pretrain_log.json", [{k: v for k, v in r.items() if k != "seconds"} for r in hist])
    print(f"pretrain loss {hist[0]['loss_ae']:.6g} -> {hist[-1]['loss_ae']:.6g}")
    return 0


def cmd_refine_ae(args):
    cfg = _config(args)
    out = _out(args)
    train, test, *_ = _data(cfg, args, out)
    ae_path = _ckpt(args, "ae", out) or out / "ae_pretrained.nwck"
    cls_path = _ckpt(args, "classifier", out) or out / "classifier.nwck"
    for p, what in ((ae_path, "train-ae"), (cls_path, "train-cls")):
        if not p.exists():
            raise FileNotFoundError(f"{p} not found (run {what} first)")
    seed = _seed(cfg, args)
    ae = ParamStore.load(ae_path)
    extractor = A.PerceptualExtractor(ParamStore.load(cls_path), cfg.classifier, tuple(cfg.refine.tap_weights))
    before = A.heldout_perceptual(test.images, ae, cfg.ae, extractor)
    critic = A.init_critic(cfg.ae, seed, cfg.refine.clip)
    ae, critic, rlog = A.refine_ae(train.images, ae, critic, extractor, cfg.ae, cfg.refine, seed=seed)
    after = A.heldout_perceptual(test.images, ae, cfg.ae, extractor)
    ae.save(out / "ae.nwck")
    critic.save(out / "critic.nwck")
    _save_noise(out / "noise.json", A.calibrate_noise(train.images, ae, cfg.ae, E.cfg_noise_scale(cfg)))
    _write_json(
        out / "ae_refine_log.json",
        {"heldout_perceptual_pretrain": before, "heldout_perceptual_refined": after, "critic": rlog["critic"]},
    )
    print(f"held-out perceptual loss {before:.6g} -> {after:.6g}")
    return 0


def cmd_train_cls(args):
    cfg = _config(args)
    out = _out(args)
    train, test, *_ = _data(cfg, args, out)
    params, tl = C.train_baseline(train, cfg.classifier, cfg.schedule, seed=_seed(cfg, args))
    params.save(out / "classifier.nwck")
    _write_json(out / "classifier_log.json", [{k: v for k, v in r.items() if k != "seconds"} for r in tl.epochs])
    print(f"test accuracy {C.accuracy(test.images, test.clean, params, cfg.classifier):.4f}")
    return 0


def cmd_train_masked(args):
    cfg = _config(args)
    out = _out(args)
    train, test, *_ = _data(cfg, args, out)
    arm = ARM_CHOICES[args.arm]
    tc = cfg.arms.get(arm)
    if tc is None:
        raise UsageError(f"config has no arm {arm!r}")
    if args.threshold is not None:
        tc = replace(tc, threshold=float(args.threshold)).validate()
    ae_path = _ckpt(args, "ae", out) or out / "ae.nwck"
    noise_path = Path(args.noise) if args.noise else out / "noise.json"
    for p in (ae_path, noise_path):
        if not p.exists():
            raise FileNotFoundError(f"{p} not found (run refine-ae first)")
    ae = ParamStore.load(ae_path)
    noise = _load_noise(noise_path)
    params, tl, ml = M.train_masked(train, cfg.classifier, cfg.schedule, tc, ae, cfg.ae, noise, seed=_seed(cfg, args))
    slug = E.ARM_SLUGS[arm]
    params.save(out / f"classifier_{slug}.nwck")
    ml.write_csv(out / f"mask_log_{slug}.csv")
    _write_json(out / f"classifier_{slug}_log.json", [{k: v for k, v in r.items() if k != "seconds"} for r in tl.epochs])
    print(f"test accuracy {C.accuracy(test.images, test.clean, params, cfg.classifier):.4f}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args)
    _, test, seqs, manifest = _data(cfg, args, out)
    path = _ckpt(args, "classifier", out) or out / "classifier.nwck"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    params = ParamStore.load(path)
    art = E.Artifacts(None, test, seqs, manifest)
    cm, seq = E.evaluate(params, cfg, art)
    body = {
        "checkpoint": path.name,
        "accuracy": cm.accuracy,
        "per_class": {str(k): v for k, v in cm.per_class().items()},
        "confusion": cm.counts.tolist(),
        "fc": seq.fc,
        "cfc": seq.cfc,
    }
    _write_json(out / "eval.json", body)
    print(f"accuracy {cm.accuracy:.4f}  FC {seq.fc}  CFC {seq.cfc}")
    return 0


def cmd_bench(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg.seeds = [int(args.seed)]
    out = _out(args)
    reports, _ = E.run_experiment(cfg, out)
    for row in E.summarize(reports):
        lift = "" if row["lift"] is None else f"  lift {row['lift']:.3f}"
        print(f"{row['arm']:<14} bs {row['batch_size']:<3} acc {row['accuracy']:.4f}  FC {row['fc']:.1f}{lift}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "refine-ae": cmd_refine_ae,
    "train-cls": cmd_train_cls,
    "train-masked": cmd_train_masked,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="neighborwise", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--out", required=True, help="artifact directory")
        if name != "gen-data":
            p.add_argument("--data", help="dataset directory (default <out>/data)")
        if name == "gen-data":
            p.add_argument("--pgm", type=int, default=0, help="also export this many training images as PGM")
        if name in ("refine-ae", "train-masked"):
            p.add_argument("--ae", help="autoencoder checkpoint")
        if name in ("refine-ae", "eval"):
            p.add_argument("--classifier", help="classifier checkpoint")
        if name == "train-masked":
            p.add_argument("--arm", choices=sorted(ARM_CHOICES), default="BT")
            p.add_argument("--noise", help="noise.json from refine-ae")
            p.add_argument("--threshold", type=float, help="fixed T (skips calibration)")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        worker_count()
        return COMMANDS[args.command](args)
    except (UsageError, E.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail with a nonzero status
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
