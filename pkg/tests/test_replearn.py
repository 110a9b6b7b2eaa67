import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import fd_grad, rel_err
from comrl_lab import datastore, diffcore as dc, envgen, replearn as rl
from comrl_lab.diffcore import MLP, backward, constant, parameter
from comrl_lab.replearn import ContextEncoder, EncoderConfig, LossWeights, RepresentationModel

W = LossWeights()


def enc(feature_dim=7, seed=0, **kw):
    return ContextEncoder(feature_dim, EncoderConfig(**kw), seed=seed)


# ------------------------------------------------------------------ encoder

def test_repeated_transition_equals_single(rng):
    e = enc()
    x = rng.normal(size=(1, 1, 7))
    assert np.allclose(e.encode(np.repeat(x, 9, axis=1)).data, e.encode(x).data, atol=1e-14)


@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    e = enc(seed=seed % 5)
    x = r.normal(size=(3, 6, 7))
    perm = r.permutation(6)
    assert np.allclose(e.encode(x).data, e.encode(x[:, perm]).data, rtol=0, atol=1e-13)


def test_encode_np_matches_graph(rng):
    for head in ("deterministic", "gaussian"):
        e = enc(head=head, latent_dim=3)
        x = rng.normal(size=(4, 5, 7))
        assert np.allclose(e.encode_np(x), e.encode(x).data, atol=1e-14)


def test_encoder_rejects_wrong_width(rng):
    with pytest.raises(ValueError, match="feature width"):
        enc().encode(rng.normal(size=(2, 3, 6)))
    with pytest.raises(ValueError):
        enc().encode(np.zeros((2, 0, 7)))


def test_encoder_norm_gradient(rng):
    e = enc(latent_dim=3, embed_widths=(6,))
    x = rng.normal(size=(2, 4, 7))
    f = lambda: dc.sum_(dc.square(e.encode(x)))
    backward(f())
    for p in e.parameters():
        assert rel_err(p.grad, fd_grad(f, p)) < 1e-4


def test_latent_dim_validation():
    with pytest.raises(ValueError):
        EncoderConfig(latent_dim=0)


# ------------------------------------------------------------------ FOCAL

def test_focal_hand_values():
    z = constant([[0.0, 0.0], [1.0, 0.0]])
    w = LossWeights(focal_beta=1.0, focal_exponent=2.0, focal_eps=0.1)
    assert abs(rl.focal_loss(z, [0, 1], w).item() - 1 / 1.1) < 1e-10
    assert abs(rl.focal_loss(z, [0, 0], w).item() - 1.0) < 1e-10
    assert rl.focal_loss(constant([[0.3, 0.2], [0.3, 0.2]]), [4, 4], w).item() == 0.0


def test_focal_exponent_three():
    z = constant([[0.0, 0.0], [2.0, 0.0]])
    w = LossWeights(focal_exponent=3.0, focal_eps=0.1, focal_beta=2.0)
    assert abs(rl.focal_loss(z, [0, 1], w).item() - 2.0 / (8.0 + 0.1)) < 1e-10


def test_focal_ordered_pairs_mean():
    # three latents: one same-task pair and two cross pairs, each counted in both orders
    z = constant([[0.0], [1.0], [3.0]])
    got = rl.focal_loss(z, [0, 0, 1], W).item()
    expect = (2 * 1.0 + 2 / (9 + 0.1) + 2 / (4 + 0.1)) / 6
    assert abs(got - expect) < 1e-12


def test_focal_rejects_single():
    with pytest.raises(ValueError):
        rl.focal_loss(constant([[0.0, 1.0]]), [0], W)


# ------------------------------------------------------------------ InfoNCE / CORRO

@pytest.mark.parametrize("k", [1, 3, 7])
def test_infonce_uniform_scores(k):
    assert abs(rl.infonce_from_logits(constant(np.full((5, k + 1), 0.7))).item() - math.log(k + 1)) < 1e-10


def test_infonce_hand_value():
    assert abs(rl.infonce_from_logits(constant([[1.0, 0.0]])).item() - math.log(1 + math.exp(-1))) < 1e-10
    assert abs(math.log(1 + math.exp(-1)) - 0.3133) < 1e-4


def test_infonce_limit():
    assert rl.infonce_from_logits(constant([[60.0, 0.0, 0.0]])).item() < 1e-20


def test_corro_negatives_are_exact_relabels(rng):
    tasks = envgen.make_tasks("PointVel", 5, 2)
    params = envgen.param_matrix(tasks)
    s, a = rng.uniform(-1, 1, (6, 2)), envgen.clip_actions("PointVel", rng.uniform(-1, 1, (6, 2)), None)
    anchors = np.array([0, 1, 2, 3, 4, 0])
    r, s2 = rl.corro_negatives(s, a, anchors, params, "PointVel", 4, rng)
    assert r.shape == (6, 4) and s2.shape == (6, 4, 2)
    for i in range(6):
        others = [envgen.step_batch("PointVel", params[t][None], s[i][None], a[i][None])[1][0]
                  for t in range(5) if t != anchors[i]]
        # k = n_tasks - 1 uses every other task exactly once
        assert sorted(r[i]) == pytest.approx(sorted(others), abs=1e-15)
        assert np.allclose(s2[i], s[i] + 0.1 * a[i])


def test_corro_rejects_too_many_negatives(rng):
    with pytest.raises(ValueError, match="negatives"):
        rl.corro_negatives(np.zeros((1, 2)), np.zeros((1, 2)), [0], np.zeros((3, 1)), "PointDir", 3, rng)


def test_corro_loss_equal_scores(rng):
    e = enc(latent_dim=2)
    z = constant(np.zeros((2, 2)))
    loss = rl.corro_loss(e, z, rng.normal(size=(4, 7)), np.array([0, 0, 1, 1]), rng.normal(size=(4, 3, 7)), W)
    assert abs(loss.item() - math.log(4)) < 1e-10


# ------------------------------------------------------------------ CLUB / CSRO

def _club_diffs(aux, z, xb):
    mu, logvar = aux.gaussian(xb)
    b = len(z)
    lp = np.array([[rl._gauss_logpdf(constant(z[j][None]), dc.gather_rows(mu, [i]),
                                     dc.gather_rows(logvar, [i])).item() for j in range(b)] for i in range(b)])
    return np.diag(lp) - lp.mean(axis=1)


def test_club_matches_direct_evaluation(rng):
    aux = rl.ClubEstimator(4, 3, hidden=8, seed=1)
    z, xb = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    got = rl.club_loss(aux, constant(z), xb).item()
    assert abs(got - _club_diffs(aux, z, xb).mean()) < 1e-12


def test_club_identical_inputs_zero(rng):
    aux = rl.ClubEstimator(4, 3, seed=0)
    xb = np.tile(rng.normal(size=(1, 4)), (6, 1))
    # zero up to summation order of identical terms
    assert abs(rl.club_loss(aux, constant(rng.normal(size=(6, 3))), xb).item()) < 1e-12


def test_club_independent_near_zero(rng):
    aux = rl.ClubEstimator(4, 2, hidden=16, seed=3)
    z, xb = rng.normal(size=(300, 2)), rng.normal(size=(300, 4))
    d = _club_diffs(aux, z, xb)
    assert abs(rl.club_loss(aux, constant(z), xb).item()) <= 3 * d.std() / math.sqrt(len(d))


def _fit_club_dependent(rng, steps=600):
    xb = rng.uniform(-1, 1, size=(64, 4))
    z = np.stack([xb[:, 0] + xb[:, 1], xb[:, 2] - xb[:, 3]], axis=1)
    aux = rl.ClubEstimator(4, 2, hidden=32, seed=0)
    opt = dc.Adam(aux.parameters(), lr=1e-2)
    for _ in range(steps):
        opt.step(backward(rl.club_fit_loss(aux, z, xb)))
    return aux, z, xb


def test_club_positive_when_z_depends_on_xb(rng):
    aux, z, xb = _fit_club_dependent(rng)
    assert rl.club_loss(aux, constant(z), xb).item() > 0.5


def test_club_logvar_bounded(rng):
    aux = rl.ClubEstimator(2, 2, hidden=4, seed=0)
    for p in aux.parameters():
        p.data *= 1e4
    _, logvar = aux.gaussian(rng.normal(size=(3, 2)) * 1e3)
    assert np.all(np.abs(logvar.data) <= 5.0)


def test_club_fit_gradient_leaves_z_alone(rng):
    aux = rl.ClubEstimator(2, 2, hidden=4, seed=0)
    grads = backward(rl.club_fit_loss(aux, rng.normal(size=(5, 2)), rng.normal(size=(5, 2))))
    assert set(grads) == set(aux.parameters())


def test_csro_lambda_zero_equals_focal(rng):
    aux = rl.ClubEstimator(4, 2, seed=0)
    z, xb, y = constant(rng.normal(size=(6, 2))), rng.normal(size=(6, 4)), [0, 0, 1, 1, 2, 2]
    w0 = LossWeights(csro_lambda=0.0)
    assert rl.csro_loss(z, y, aux, xb, w0).item() == rl.focal_loss(z, y, w0).item()


def test_csro_affine_in_lambda(rng):
    aux = rl.ClubEstimator(4, 2, seed=0)
    z, xb, y = constant(rng.normal(size=(6, 2))), rng.normal(size=(6, 4)), [0, 0, 1, 1, 2, 2]
    club = rl.club_loss(aux, z, xb).item()
    focal = rl.focal_loss(z, y, W).item()
    for lam in (0.5, 1.0, 4.0):
        assert abs(rl.csro_loss(z, y, aux, xb, LossWeights(csro_lambda=lam)).item() - (focal + lam * club)) < 1e-12


def test_csro_large_lambda_dominated_by_club(rng):
    aux, z, xb = _fit_club_dependent(rng)
    y = np.arange(len(z)) % 4
    zt = constant(z)
    focal = rl.focal_loss(zt, y, W).item()
    total = rl.csro_loss(zt, y, aux, xb, LossWeights(csro_lambda=100.0)).item()
    assert abs(total - focal) > 10 * abs(focal)


# ------------------------------------------------------------------ classification

def test_cross_entropy_uniform():
    assert abs(rl.cross_entropy(constant(np.zeros((3, 4))), [0, 1, 3]).item() - math.log(4)) < 1e-10


def test_cross_entropy_hand_value():
    v = rl.cross_entropy(constant([[2.0, 0.0, 0.0, 0.0]]), [0]).item()
    assert abs(v - math.log(1 + 3 * math.exp(-2))) < 1e-10


def test_cross_entropy_limit_and_labels():
    assert rl.cross_entropy(constant([[80.0, 0.0, 0.0]]), [0]).item() < 1e-30
    with pytest.raises(ValueError, match="label"):
        rl.cross_entropy(constant(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError, match="label"):
        rl.cross_entropy(constant(np.zeros((1, 3))), [-1])


# ------------------------------------------------------------------ reconstruction

def _identity_decoder(out_dim, in_dim):
    """Linear decoder that copies the first ``out_dim`` inputs."""
    dec = MLP([in_dim, out_dim], seed=0)
    dec.layers[0][0].data[...] = np.eye(in_dim, out_dim)
    return dec


def test_recon_exact_and_offset(rng):
    z = rng.normal(size=(5, 3))
    s, a = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    dec = _identity_decoder(3, 7)
    assert rl.recon_loss(dec, constant(z), s, a, z).item() == 0.0
    assert abs(rl.recon_loss(dec, constant(z), s, a, z - 1.0).item() - 1.0) < 1e-12


def test_recon_gradient(rng):
    dec = MLP([7, 5, 3], seed=2)
    z = parameter(rng.normal(size=(4, 3)), "z")
    s, a, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    f = lambda: rl.recon_loss(dec, z, s, a, t)
    assert dc.grad_check(f, dec.parameters() + [z])["passed"]


def test_recon_shape_mismatch(rng):
    with pytest.raises(ValueError, match="targets"):
        rl.recon_loss(MLP([7, 3]), constant(np.zeros((2, 3))), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))


def test_unicorn_ss_mix(rng):
    rec, foc = constant(0.7), constant(0.3)
    assert rl.unicorn_ss_loss(rec, None, LossWeights(alpha=0.0)).item() == 0.7
    w = LossWeights(alpha=LossWeights.alpha_from_ratio(0.15))
    assert abs(w.alpha - 0.13043478260869565) < 1e-15
    assert abs(rl.unicorn_ss_loss(rec, foc, w).item() - (0.7 + 0.15 * 0.3)) < 1e-12
    assert abs(rl.unicorn_ss_loss(rec, foc, LossWeights(alpha=0.5)).item() - 1.0) < 1e-12
    with pytest.raises(ValueError, match="alpha"):
        LossWeights(alpha=1.0)


@given(st.floats(0.0, 50.0))
def test_unicorn_ss_affine_in_ratio(ratio):
    rec, foc = constant(1.25), constant(0.4)
    w = LossWeights(alpha=LossWeights.alpha_from_ratio(ratio))
    got = rl.unicorn_ss_loss(rec, foc, w).item()
    assert abs(got - (1.25 + ratio * 0.4)) <= 1e-9 * (1 + ratio)


# ------------------------------------------------------------------ KL

def test_kl_hand_values():
    assert rl.kl_penalty(constant(np.zeros((2, 3))), constant(np.zeros((2, 3)))).item() == 0.0
    assert abs(rl.kl_penalty(constant([[1.0, 0.0, 0.0]]), constant(np.zeros((1, 3)))).item() - 0.5) < 1e-10
    v = rl.kl_penalty(constant([[0.0]]), constant([[math.log(2.0)]])).item()
    assert abs(v - 0.5 * (2 - 1 - math.log(2))) < 1e-10 and abs(v - 0.1534) < 1e-4


def test_kl_requires_gaussian_head():
    with pytest.raises(ValueError, match="Gaussian"):
        RepresentationModel("FOCAL", 7, 2, 2, 4, EncoderConfig(), LossWeights(kl_weight=0.1))


# ------------------------------------------------------------------ composite model

@pytest.fixture(scope="module")
def small_ds():
    return envgen.collect_dataset(envgen.make_tasks("PointDir", 6, 1), envgen.TIERS, 1, seed=1)


@pytest.mark.parametrize("sel", rl.SELECTORS)
def test_model_loss_all_selectors(sel, small_ds):
    rng = np.random.default_rng(0)
    ids = small_ds.task_ids * 2
    ctx = datastore.sample_contexts(small_ds, ids, 10, rng)
    labels = np.array([small_ds.task_ids.index(t) for t in ids])
    m = RepresentationModel(sel, small_ds.feature_dim, 2, 2, 6, EncoderConfig(embed_widths=(8,), latent_dim=3),
                            hidden=8, seed=0)
    loss, z, parts = m.loss(ctx.features, labels, envgen.param_matrix(small_ds.tasks), "PointDir", rng,
                            anchors_per_context=3, negatives=2, recon_rows=50)
    assert z.shape == (12, 3) and np.isfinite(loss.item()) and parts["rep_loss"] == loss.item()
    grads = backward(loss)
    assert all(p in grads for p in m.encoder.parameters())
    if sel == "UNICORN-SS-0":
        assert "focal" not in parts and m.weights.alpha == 0
    if sel == "UNICORN-SS":
        assert parts["rep_loss"] == pytest.approx(parts["recon"] + m.weights.ss_coefficient * parts["focal"])


def test_model_gaussian_head_kl(small_ds):
    rng = np.random.default_rng(0)
    ctx = datastore.sample_contexts(small_ds, small_ds.task_ids * 2, 10, rng)
    m = RepresentationModel("FOCAL", small_ds.feature_dim, 2, 2, 6,
                            EncoderConfig(embed_widths=(8,), latent_dim=3, head="gaussian"),
                            LossWeights(kl_weight=0.5), hidden=8)
    loss, _, parts = m.loss(ctx.features, np.arange(12) % 6, None, "PointDir", rng)
    assert parts["kl"] > 0 and loss.item() > parts["kl"] * 0.5


def test_unknown_selector():
    with pytest.raises(ValueError, match="selector"):
        RepresentationModel("VARIBAD", 7, 2, 2, 3)
