import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neighborwise import autoencoder as A
from neighborwise import classifier as C
from neighborwise import masked as M
from neighborwise.data import generate_dataset
from oracles import kl_pure, survivors_delta, sym_pure
from tiny import ae_cfg, cls_cfg, dataset_spec

simplex = st.lists(st.floats(1e-3, 1.0), min_size=2, max_size=8).map(lambda v: np.asarray(v) / np.sum(v))


def test_kl_oracles():
    p, q = [0.5, 0.5], [0.9, 0.1]
    assert M.kl_divergence(p, q) == pytest.approx(0.510826, abs=1e-6)
    assert M.kl_divergence(q, p) == pytest.approx(0.368064, abs=1e-6)
    assert M.kl_divergence(p, q) == pytest.approx(kl_pure(p, q), rel=1e-14)
    assert M.sym_divergence(p, q) == pytest.approx(0.439445, abs=1e-6)


@given(simplex, st.data())
def test_sym_divergence_properties(p, data):
    q = data.draw(st.lists(st.floats(1e-3, 1.0), min_size=len(p), max_size=len(p)).map(lambda v: np.asarray(v) / np.sum(v)))
    d = M.sym_divergence(p, q)
    assert d == M.sym_divergence(q, p)
    assert d >= -1e-9
    assert M.sym_divergence(p, p) == 0.0
    assert d == pytest.approx(sym_pure(p, q), rel=1e-9, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        M.kl_divergence([0.5, 0.5], [1.0])


def test_worked_batch():
    divs = [0.1, 0.2, 0.3, 0.6]
    assert M.batch_threshold(divs) == 0.3
    mv = M.batch_mask(divs)
    assert mv.mask.tolist() == [True, True, False, False]
    assert M.fixed_threshold_mask(divs, 0.3).mask.tolist() == [True, True, False, False]


def test_equal_divergences_mask_everything():
    assert not M.batch_mask([0.4] * 5).mask.any()


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        M.fixed_threshold_mask([0.1], 0.0)
    with pytest.raises(ValueError):
        M.batch_threshold([])


@given(st.lists(st.floats(0, 5), min_size=1, max_size=40), st.floats(1e-6, 5))
def test_mask_is_strict_less_than(divs, t):
    mv = M.fixed_threshold_mask(divs, t)
    assert mv.mask.tolist() == [d < t for d in divs]
    assert mv.survivors == sum(d < t for d in divs)


@given(st.lists(st.floats(0, 5), min_size=1, max_size=40), st.floats(1e-6, 5), st.floats(1e-6, 5))
def test_lower_threshold_never_keeps_more(divs, a, b):
    lo, hi = sorted([a, b])
    assert M.fixed_threshold_mask(divs, lo).survivors <= M.fixed_threshold_mask(divs, hi).survivors


@given(st.lists(st.floats(0, 5), min_size=1, max_size=60))
def test_batch_threshold_is_mean(divs):
    assert M.batch_threshold(divs) == pytest.approx(np.mean(divs), rel=1e-12, abs=1e-15)


@pytest.fixture(scope="module")
def setup():
    train, _, _, _ = generate_dataset(dataset_spec())
    cfg = cls_cfg()
    acfg = ae_cfg()
    ae = A.init_ae(acfg, 0)
    return train, cfg, acfg, ae


@pytest.mark.parametrize("seed", range(4))
def test_masked_step_matches_survivor_gradients(setup, seed):
    train, cfg, _, _ = setup
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 9))
    idx = r.choice(len(train), n, replace=False)
    x, y = train.images[idx], train.observed[idx]
    mask = r.random(n) < 0.5
    params = C.init_params(cfg, seed)
    expect = survivors_delta(params, cfg, x, y, mask, 0.01)
    before = params.copy()
    M.masked_step(params, cfg, x, y, mask, 0.01, rng=np.random.default_rng(0))
    for name in params.names():
        np.testing.assert_allclose(params[name].data - before[name].data, expect[name], rtol=0, atol=1e-12)


def test_all_masked_step_is_noop(setup):
    train, cfg, _, _ = setup
    params = C.init_params(cfg, 0)
    before = params.copy()
    _, stepped = M.masked_step(params, cfg, train.images[:7], train.observed[:7], np.zeros(7, bool), 0.1, momentum=0.9)
    assert not stepped
    for n in params.names():
        assert params[n].data.tobytes() == before[n].data.tobytes()


def test_instability_records(setup):
    train, cfg, acfg, ae = setup
    params = C.init_params(cfg, 0)
    x = train.images[:5]
    recs = M.instability(x, params, cfg, ae, acfg, A.NoiseSpec(0.1, seed=3))
    again = M.instability(x, params, cfg, ae, acfg, A.NoiseSpec(0.1, seed=3))
    assert [r.div for r in recs] == [r.div for r in again]
    for r in recs:
        assert r.div == M.sym_divergence(r.p_orig, r.p_neighbor)
    same = M.instability(x, params, cfg, ae, acfg, A.NoiseSpec(0.0), neighbors=x)
    assert all(r.div == 0.0 for r in same)


def test_masked_training_leaves_autoencoder_untouched(setup):
    train, cfg, acfg, ae = setup
    ae = ae.copy()
    before = ae.copy()
    sched = C.ClsSchedule(epochs=1, batch_size=14, lr=1e-3)
    M.train_masked(train, cfg, sched, M.TrainConfig("batch"), ae, acfg, A.NoiseSpec(0.1), seed=0)
    assert ae.equals(before)
    assert all(not np.any(ae[n].grad) for n in ae.names())


def test_huge_threshold_reduces_to_baseline(setup):
    train, cfg, acfg, ae = setup
    sched = C.ClsSchedule(epochs=2, batch_size=14, lr=1e-3)
    base, _ = C.train_baseline(train, cfg, sched, seed=5)
    masked, _, ml = M.train_masked(train, cfg, sched, M.TrainConfig("fixed", threshold=1e9), ae, acfg, A.NoiseSpec(0.1), seed=5)
    assert masked.equals(base)
    assert ml.column("mask").all()


def test_fixed_calibration_and_log(setup, tmp_path):
    train, cfg, acfg, ae = setup
    sched = C.ClsSchedule(epochs=3, batch_size=14, lr=1e-3)
    tc = M.TrainConfig("fixed", calibration_epoch=1)
    _, tl, ml = M.train_masked(train, cfg, sched, tc, ae, acfg, A.NoiseSpec(0.1), seed=0)
    ep = ml.column("epoch")
    assert ml.column("mask")[ep <= 1].all()
    t = tl.epochs[-1]["threshold"]
    assert t == pytest.approx(np.percentile(ml.column("div")[ep == 1], 60))
    np.testing.assert_array_equal(ml.column("mask")[ep == 2], ml.column("div")[ep == 2] < t)
    ml.write_csv(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == ",".join(M.LOG_COLUMNS)


def test_calibration_epoch_past_end(setup):
    train, cfg, acfg, ae = setup
    with pytest.raises(ValueError, match="calibration_epoch"):
        M.train_masked(train, cfg, C.ClsSchedule(epochs=2, batch_size=14), M.TrainConfig("fixed", calibration_epoch=2), ae, acfg, A.NoiseSpec(0.1))


def test_masked_mode_needs_autoencoder(setup):
    train, cfg, _, _ = setup
    with pytest.raises(ValueError):
        M.train_masked(train, cfg, C.ClsSchedule(epochs=1, batch_size=14), M.TrainConfig("batch"))


def test_unknown_train_config_key():
    with pytest.raises(ValueError):
        M.TrainConfig.from_dict({"threshold_mode": "batch", "tau": 1})


def test_log_noise_flags_follow_sample_ids(setup):
    train, cfg, acfg, ae = setup
    sched = C.ClsSchedule(epochs=1, batch_size=14, lr=1e-3)
    _, _, ml = M.train_masked(train, cfg, sched, M.TrainConfig("batch"), ae, acfg, A.NoiseSpec(0.1), seed=2)
    ids = ml.column("sample_id").astype(int)
    np.testing.assert_array_equal(ml.column("is_noisy").astype(bool), train.is_noisy[ids])
    assert train.is_noisy.any()
