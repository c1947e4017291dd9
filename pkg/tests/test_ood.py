import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doserlab.diffusion import DenoiserModel, recon_error_action, train_denoiser
from doserlab.dynamics import DynamicsModel, Regressor
from doserlab.errors import RejectedInput, StateError
from doserlab.metrics import auroc
from doserlab.ood import (
    CvaeModel,
    EnsembleDetector,
    Gate,
    OodThresholds,
    calibrate_ensemble,
    cvae_loss_grad,
    cvae_score,
    ensemble_gate,
    ensemble_score,
    fit_thresholds,
    is_ood_action,
    is_ood_state,
    mc_dropout_score,
    nearest_rank,
    train_cvae,
    train_dropout_q,
    train_ensemble,
    uncertain_mask,
)
from doserlab.toyworld import gen_dataset, perturb_ood


def test_nearest_rank_integers():
    vals = np.arange(1, 101)
    assert nearest_rank(vals, 99) == 99
    assert nearest_rank(vals, 100) == 100
    assert nearest_rank(vals[::-1], 1) == 1
    assert nearest_rank([7.0], 0.001) == 7.0
    with pytest.raises(RejectedInput):
        nearest_rank(vals, 0)
    with pytest.raises(RejectedInput):
        nearest_rank([], 50)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=200), st.floats(0.5, 100))
def test_calibration_consistency(errs, p):
    th = OodThresholds.from_errors(errs, errs, p, p)
    flagged = np.mean(is_ood_action(th, np.asarray(errs)))
    assert flagged <= (100 - p) / 100 + 1e-12
    assert np.all(np.diff(th.calibration_errors_a) >= 0)


def test_indicator_is_strict():
    th = OodThresholds.from_errors([1.0, 2.0, 3.0], [0.5], 100, 100)
    assert th.tau_a == 3.0
    assert not is_ood_action(th, 3.0)
    assert not is_ood_action(th, 0.0)
    assert is_ood_action(th, np.nextafter(3.0, 4.0))
    assert not is_ood_state(th, 0.5) and is_ood_state(th, 0.51)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_indicator_monotone(e1, e2):
    th = OodThresholds.from_errors([1.0, 5.0], [1.0], 50, 50)
    lo, hi = sorted((e1, e2))
    assert int(is_ood_action(th, lo)) <= int(is_ood_action(th, hi))


@pytest.fixture(scope="module")
def medium():
    return gen_dataset("medium", 10000, seed=41)


@pytest.fixture(scope="module")
def calibrated(medium):
    rng = np.random.default_rng(41)
    beh = DenoiserModel.create(1, 1, rng)
    train_denoiser(beh, medium.a, medium.s, steps=2000, batch_size=256, rng=rng, lr=1e-3)
    stm = DenoiserModel.create(1, 0, rng)
    train_denoiser(stm, medium.s, steps=2000, batch_size=256, rng=rng, lr=1e-3)
    th = fit_thresholds(beh, stm, medium, 99, 99, 10, np.random.default_rng(42), subsample=3000)
    return beh, stm, th


def test_fit_thresholds_recount(calibrated):
    _, _, th = calibrated
    assert len(th.calibration_errors_a) == 3000
    assert th.tau_a == th.calibration_errors_a[int(np.ceil(0.99 * 3000)) - 1]
    assert np.mean(th.calibration_errors_a > th.tau_a) <= 0.01
    assert np.mean(th.calibration_errors_s > th.tau_s) <= 0.01


def test_fit_thresholds_rejects_empty(calibrated, medium):
    beh, stm, _ = calibrated

    class Empty:
        def __len__(self):
            return 0

    with pytest.raises(RejectedInput):
        fit_thresholds(beh, stm, Empty())


def const_member(value):
    m = DynamicsModel.create(1, 1, np.random.default_rng(0), hidden=(4,))
    m.reg.net.params[:] = 0.0
    m.reg.net.layers()[-1][1][:] = [value, 0.0]
    m.training_steps_done = 1
    return m


def test_ensemble_hand_values():
    s, a = np.zeros((3, 1)), np.zeros((3, 1))
    same = EnsembleDetector([const_member(0.3), const_member(0.3)])
    assert np.all(ensemble_score(same, s, a) == 0)
    split = EnsembleDetector([const_member(1.0), const_member(-1.0)])
    np.testing.assert_allclose(ensemble_score(split, s, a), 1.0)


def test_ensemble_gate_threshold_and_errors():
    det = EnsembleDetector([const_member(1.0), const_member(-1.0)])
    with pytest.raises(StateError):
        ensemble_gate(det, [0.0], [0.0])
    det.variance_threshold = 1.0
    assert ensemble_gate(det, [0.0], [0.0]) == Gate.CONFIDENT
    det.variance_threshold = np.nextafter(1.0, 0.0)
    assert ensemble_gate(det, [0.0], [0.0]) == Gate.UNCERTAIN
    untrained = EnsembleDetector([const_member(0.0), const_member(0.0)])
    untrained.members[0].training_steps_done = 0
    with pytest.raises(StateError):
        ensemble_score(untrained, np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(RejectedInput):
        EnsembleDetector([const_member(0.0)])


def test_trained_ensemble_gate_fraction(medium):
    det = train_ensemble(medium, n_members=3, steps=800, seed=3)
    calibrate_ensemble(det, medium.s, medium.a, 99)
    frac = uncertain_mask(det, medium.s, medium.a).mean()
    assert frac <= 0.01
    assert frac > 0.005


def test_mc_dropout_contract():
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (200, 1))
    a = rng.uniform(-1, 1, (200, 1))
    net = train_dropout_q(s, a, (s - a).ravel(), rng, steps=200)
    v1 = mc_dropout_score(net, s[:5], a[:5], 20, np.random.default_rng(9))
    v2 = mc_dropout_score(net, s[:5], a[:5], 20, np.random.default_rng(9))
    assert np.array_equal(v1, v2) and np.all(v1 >= 0) and np.all(v1 > 0)
    # zeroing the output weights makes every pass identical
    net.net.layers()[-1][0][:] = 0.0
    np.testing.assert_allclose(mc_dropout_score(net, s[:5], a[:5], 20, rng), 0.0, atol=1e-30)
    with pytest.raises(RejectedInput):
        mc_dropout_score(net, s, a, 1, rng)
    with pytest.raises(RejectedInput):
        mc_dropout_score(Regressor.create(2, 1, rng), s, a, 20, rng)
    with pytest.raises(RejectedInput):
        train_dropout_q(s, a, s.ravel(), rng, dropout_prob=0.0)


def test_cvae_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    cvae = CvaeModel.create(2, 1, rng, latent_dim=2, hidden=(6,))
    sn, a = rng.standard_normal((5, 2)), rng.standard_normal((5, 1))
    eps = rng.standard_normal((5, 2))
    _, g_enc, g_dec = cvae_loss_grad(cvae, sn, a, eps)
    for net, grad in ((cvae.encoder, g_enc), (cvae.decoder, g_dec)):
        for i in range(0, net.params.size, 3):
            old = net.params[i]
            net.params[i] = old + 1e-6
            up = cvae_loss_grad(cvae, sn, a, eps)[0]
            net.params[i] = old - 1e-6
            dn = cvae_loss_grad(cvae, sn, a, eps)[0]
            net.params[i] = old
            assert (up - dn) / 2e-6 == pytest.approx(grad[i], rel=1e-5, abs=1e-8)


def test_cvae_memorized_pair():
    rng = np.random.default_rng(4)
    cvae = CvaeModel.create(1, 1, rng, hidden=(32, 32))
    s, a = np.array([[2.0]]), np.array([[0.4]])
    with pytest.raises(StateError):
        cvae_score(cvae, s, a)
    train_cvae(cvae, s, a, steps=1500, batch_size=32, rng=rng, lr=3e-3)
    err = cvae_score(cvae, s, a)
    assert 0 <= err[0] < 0.02
    assert cvae.encoder.n_out == 2 * cvae.latent_dim


def test_cvae_vs_diffusion_head_to_head(medium, calibrated):
    beh, _, _ = calibrated
    rng = np.random.default_rng(5)
    cvae = CvaeModel.create(1, 1, rng)
    train_cvae(cvae, medium.s, medium.a, steps=2000, batch_size=256, rng=rng)
    split = perturb_ood(medium, 1.0, seed=6, n=2000)
    ss = split.s.astype(float)
    diff = auroc(recon_error_action(beh, ss, split.a_id, 10, np.random.default_rng(7)),
                 recon_error_action(beh, ss, split.a_ood, 10, np.random.default_rng(8)))
    cv = auroc(cvae_score(cvae, ss, split.a_id), cvae_score(cvae, ss, split.a_ood))
    assert diff >= cv - 0.02
