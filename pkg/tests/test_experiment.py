import json
from pathlib import Path

import numpy as np
import pytest

from neighborwise import experiment as E
from tiny import experiment


def test_config_round_trip():
    cfg = experiment(batch_sweep=[[14, 0.5]])
    again = E.ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()


def test_default_config_validates():
    cfg = E.ExperimentConfig().validate()
    assert set(cfg.arms) == {E.ARM_BASELINE, E.ARM_T, E.ARM_BT}


def test_partial_config_fills_defaults():
    cfg = E.ExperimentConfig.from_dict({"schema_version": 1, "seeds": [3]})
    assert cfg.seeds == [3]
    assert cfg.schedule == E.ExperimentConfig().schedule


@pytest.mark.parametrize(
    "body, match",
    [
        ({"schema_version": 1, "bogus": 1}, "unknown"),
        ({"seeds": [0]}, "schema_version"),
        ({"schema_version": 99}, "schema_version"),
        ({"schema_version": 1, "classifier": {"widht": 3}}, "widht"),
        ({"schema_version": 1, "batch_sweep": [[10, 1.0]]}, "multiple"),
        ({"schema_version": 1, "dataset": {"side": 48}}, "side"),
        ({"schema_version": 1, "seeds": []}, "seed"),
    ],
)
def test_bad_configs(body, match):
    with pytest.raises(E.ConfigError, match=match):
        E.ExperimentConfig.from_dict(body)


def test_load_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(E.ConfigError):
        E.load_config(p)


@pytest.fixture(scope="module")
def tiny_bench(tmp_path_factory):
    cfg = experiment()
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    reps, art = E.run_experiment(cfg, a)
    E.run_experiment(experiment(), b)
    return cfg, reps, art, a, b


def test_bench_outputs(tiny_bench):
    cfg, reps, art, a, _ = tiny_bench
    assert len(reps) == 6 and not any(r.failed for r in reps)
    rows = E.read_csv(a / "summary.csv")
    assert [tuple(rows[0])] == [E.CSV_COLUMNS]
    assert all(r["runtime_s"] == "" for r in rows)
    assert (a / "neighbors.pgm").exists()
    assert (a / "data" / "manifest.json").exists()
    assert len(list((a / "reports").glob("*.json"))) == 6
    for r in reps:
        assert 0 <= r.cfc <= r.fc
        if r.arm == E.ARM_BASELINE:
            assert r.lift is None
        else:
            assert r.kept_fraction is not None


def test_bench_is_reproducible(tiny_bench):
    _, _, _, a, b = tiny_bench
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    for p in (a / "reports").glob("*.json"):
        assert p.read_bytes() == (b / "reports" / p.name).read_bytes()


def test_report_round_trip(tiny_bench):
    _, reps, _, a, _ = tiny_bench
    r = reps[-1]
    back = E.load_report(a / "reports" / f"{E._slug(r)}.json")
    assert back.accuracy == r.accuracy and back.sequence_verdicts == r.sequence_verdicts


def test_baseline_seed0_reuses_reference(tiny_bench):
    cfg, reps, art, _, _ = tiny_bench
    base0 = [r for r in reps if r.arm == E.ARM_BASELINE and r.seed == cfg.seeds[0]][0]
    cm, _ = E.evaluate(art.reference, cfg, art)
    assert base0.accuracy == cm.accuracy


def test_runtime_only_when_asked(tiny_bench, tmp_path):
    cfg, reps, art, _, _ = tiny_bench
    cfg2 = experiment(report_runtime=True)
    E.emit_report(reps, tmp_path, cfg2)
    rows = E.read_csv(tmp_path / "summary.csv")
    assert all(float(r["runtime_s"]) > 0 for r in rows)


def test_summarize_means(tiny_bench):
    _, reps, _, _, _ = tiny_bench
    for row in E.summarize(reps):
        accs = [r.accuracy for r in reps if r.arm == row["arm"]]
        assert row["accuracy"] == pytest.approx(np.mean(accs))


def test_neighbor_grid_shape(tiny_bench):
    cfg, _, art, _, _ = tiny_bench
    g = E.neighbor_grid(art.test.images[:3], art.ae, cfg.ae, art.noise, draws=2)
    side = cfg.dataset.side
    assert g.shape == (4 * (side + 2) - 2, 3 * (side + 2) - 2)
    assert g.min() >= 0 and g.max() <= 1


def test_batch_sweep_scales_lr():
    cfg = experiment(seeds=[0], batch_sweep=[[7, 0.5]], sweep_arms=[E.ARM_BT])
    reps, _ = E.run_experiment(cfg)
    sweep = [r for r in reps if r.batch_size == 7]
    assert len(sweep) == 1 and sweep[0].lr == pytest.approx(cfg.schedule.lr * 0.5)


def test_failed_arm_is_recorded(tmp_path, monkeypatch):
    cfg = experiment(seeds=[0])

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(E.M, "train_masked", boom)
    with pytest.raises(RuntimeError):
        E.run_experiment(cfg, tmp_path)
    body = json.loads((tmp_path / "summary.json").read_text())
    assert body["failed"] == 1


def test_shipped_presets_load():
    presets = sorted((Path(__file__).resolve().parents[1] / "scripts" / "presets").glob("*.json"))
    assert {p.stem for p in presets} >= {"default", "batch_sweep", "full_scale"}
    for p in presets:
        E.load_config(p)
    assert E.load_config(presets[0].parent / "default.json").to_dict() == E.ExperimentConfig().to_dict()
