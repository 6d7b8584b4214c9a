import numpy as np
import pytest

from neighborwise import autoencoder as A
from neighborwise import classifier as C
from neighborwise import tensor as T
from neighborwise.data import generate_dataset
from tiny import ae_cfg, cls_cfg, dataset_spec


@pytest.fixture(scope="module")
def images():
    return generate_dataset(dataset_spec())[0].images[:48]


@pytest.fixture(scope="module")
def trained(images):
    cfg = ae_cfg()
    params, hist = A.pretrain_ae(images, cfg, A.AESchedule(epochs=3, batch_size=16, lr=1e-3, optimizer="adam"), seed=0)
    return cfg, params, hist


def test_loss_ae_single_scale_oracle():
    assert float(A.loss_ae([np.zeros(4)], [T.Tensor(np.ones(4))], [1.0]).data) == 1.0


def test_loss_ae_alpha_is_linear(rng):
    z = [rng.normal(size=(2, 3)), rng.normal(size=(2, 5))]
    zh = [T.Tensor(rng.normal(size=(2, 3))), T.Tensor(rng.normal(size=(2, 5)))]
    one = float(A.loss_ae(z, zh, [1.0, 1.0]).data)
    two = float(A.loss_ae(z, zh, [2.0, 1.0]).data)
    first = float(A.loss_ae(z[:1], zh[:1], [1.0]).data)
    assert two - one == pytest.approx(first, rel=1e-12)


def test_loss_ae_zero_iff_exact():
    z = [np.ones((1, 2)), np.full((1, 3), 2.0)]
    assert float(A.loss_ae(z, [T.Tensor(a) for a in z], [4.0, 1.0]).data) == 0.0


def test_scales_align_and_decoder_is_heavier(images):
    cfg = ae_cfg()
    p = A.init_ae(cfg, 0)
    code, feats = A.encode(images[:3], p, cfg, "eval")
    out, recs = A.decode(code, p, cfg)
    assert code.shape == (3, cfg.latent)
    assert len(feats) == len(recs) == cfg.levels
    for f, r in zip(feats, recs):
        assert f.shape == r.shape
    assert out.shape == (3, 1, 32, 32)
    assert A.param_count(p, "dec.") > A.param_count(p, "enc.")


def test_alpha_count_validated():
    with pytest.raises(ValueError, match="alpha"):
        ae_cfg(alpha=(4.0, 1.0)).validate()


def test_pretrain_loss_decreases(trained):
    hist = trained[2]
    assert hist[-1]["loss_ae"] < hist[0]["loss_ae"]


def test_zero_noise_neighbor_is_reconstruction(trained, images):
    cfg, p, _ = trained
    rec = A.reconstruct(images[:4], p, cfg)
    nb = A.synthesize_neighbor(images[:4], p, cfg, A.NoiseSpec(0.0), np.random.default_rng(0))
    assert nb.tobytes() == rec.tobytes()


def test_seeded_noise_repeatable_and_seeds_differ(trained, images):
    cfg, p, _ = trained
    a = A.synthesize_neighbor(images[:2], p, cfg, A.NoiseSpec(0.2, seed=1))
    b = A.synthesize_neighbor(images[:2], p, cfg, A.NoiseSpec(0.2, seed=1))
    c = A.synthesize_neighbor(images[:2], p, cfg, A.NoiseSpec(0.2, seed=2))
    assert a.tobytes() == b.tobytes()
    assert np.any(a != c)


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        A.NoiseSpec(-0.1)


def test_eval_pipeline_deterministic(trained, images):
    cfg, p, _ = trained
    assert A.reconstruct(images[:5], p, cfg).tobytes() == A.reconstruct(images[:5], p, cfg).tobytes()


def test_noise_calibration_scales_code_std(trained, images):
    cfg, p, _ = trained
    codes = A.latent_codes(images, p, cfg)
    np.testing.assert_allclose(A.calibrate_noise(images, p, cfg, 0.1).sigma, 0.1 * codes.std(0))


def test_rec_loss_needs_extractor(images):
    with pytest.raises(ValueError):
        A.loss_rec(images[:1], T.Tensor(images[:1]), None)


def test_generator_loss_leaves_critic_gradients_zero(trained, images):
    cfg, p, _ = trained
    critic = A.init_critic(cfg, 0)
    code, _ = A.encode(images[:4], p, cfg, "eval")
    with T.Graph() as g:
        rec, _ = A.decode(T.Tensor(code.data), p, cfg)
        loss = A.loss_adv_g(rec, critic.frozen(), cfg)
    g.backward(loss)
    assert all(not np.any(critic[n].grad) for n in critic.names())
    assert any(np.any(p[n].grad) for n in A.decoder_names(p))
    p.zero_grad()


def test_refinement_contract(trained, images):
    cfg, p, _ = trained
    p = p.copy()
    cls = C.init_params(cls_cfg(), 0)
    cls_before = cls.copy()
    enc_before = {n: p[n].data.copy() for n in A.encoder_names(p)}
    extractor = A.PerceptualExtractor(cls, cls_cfg())
    critic = A.init_critic(cfg, 0, 0.01)
    sched = A.RefineSchedule(epochs=2, batch_size=16, critic_every=2)
    p, critic, log = A.refine_ae(images, p, critic, extractor, cfg, sched, seed=0)
    assert cls.equals(cls_before)
    for n, v in enc_before.items():
        assert p[n].data.tobytes() == v.tobytes()
    assert log["critic"] and all(r["max_abs_weight"] <= 0.01 for r in log["critic"])
    # every step of epoch 0, then every second step
    steps0 = -(-len(images) // 16)
    assert sum(r["epoch"] == 0 for r in log["critic"]) == steps0
