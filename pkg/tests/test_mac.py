import numpy as np
import pytest

from xattn_ptq import mac
from xattn_ptq.errors import ContractError, DegenerateError, ShapeError

from .helpers import qk_grad, toy_qk, toy_v, v_grad
from .oracles import regularized_lstsq


def test_lambda_hand_spectra():
    assert mac.lambda_from_spectrum([8.0, 1.0, 1.0]) == 8.0
    assert mac.energy_rank([8.0, 1.0, 1.0]) == 1
    flat = np.full(20, 0.05)
    assert mac.energy_rank(flat) == 2
    assert mac.lambda_from_spectrum(flat) == 0.05
    assert mac.lambda_from_spectrum([3.5]) == 3.5


def test_select_lambda_on_diagonal_gram():
    assert mac.select_lambda(np.diag([1.0, 8.0, 1.0])) == 8.0
    assert mac.select_lambda(np.diag(np.full(20, 0.05)), t=0.1) == pytest.approx(0.05, rel=1e-15)


def test_select_lambda_zero_gram():
    with pytest.raises(DegenerateError):
        mac.select_lambda(np.zeros((3, 3)))


def test_select_lambda_bad_threshold():
    with pytest.raises(ContractError):
        mac.energy_rank([1.0, 2.0], t=0.0)


def test_zero_partner_error_gives_zero_delta():
    rng = np.random.default_rng(0)
    cap = toy_qk(rng)
    cap.partner_hat = cap.partner_fp.copy()
    res = mac.compensate_q(cap)
    assert np.max(np.abs(res.delta_w)) <= 1e-10
    a, _, xv, wv, b = toy_v(rng)
    assert np.max(np.abs(mac.compensate_v(a, a, xv, wv, b, n_heads=2).delta_w)) <= 1e-10


@pytest.mark.parametrize("fn", [mac.compensate_q, mac.compensate_k])
def test_qk_non_increase_and_stationarity(fn):
    rng = np.random.default_rng(1)
    for _ in range(10):
        cap = toy_qk(rng)
        res = fn(cap)
        assert res.loss_after <= res.loss_before + 1e-9
        g0 = np.linalg.norm(qk_grad(cap, np.zeros_like(res.delta_w), res.lam))
        g1 = np.linalg.norm(qk_grad(cap, res.delta_w, res.lam))
        assert g1 <= 1e-6 * g0
        assert res.sylvester_residual <= 1e-9 * max(1.0, res.rhs_norm)


def test_q_matches_kronecker_normal_equations():
    rng = np.random.default_rng(2)
    for heads in (1, 2):
        cap = toy_qk(rng, n=5, m=4, d_in=3, d_out=4, heads=heads)
        res = mac.compensate_q(cap)
        x, w = cap.augmented()
        hd = 4 // heads
        k, kh = cap.partner_fp, cap.partner_hat
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            target = (x @ w[:, sl]) @ k[:, sl].T - (x @ w[:, sl]) @ kh[:, sl].T
            ref = regularized_lstsq(lambda d: x @ d @ kh[:, sl].T, (4, hd), target, res.lam)
            np.testing.assert_allclose(res.delta_w[:, sl], ref, rtol=1e-7, atol=1e-7 * np.max(np.abs(ref)))


def test_inverse_route_agrees_when_gram_is_invertible():
    rng = np.random.default_rng(3)
    cap = toy_qk(rng, n=40)
    a = mac.compensate_q(cap)
    b = mac.compensate_q(cap, route="inverse")
    np.testing.assert_allclose(b.delta_w, a.delta_w, rtol=1e-8, atol=1e-10)


def test_rank_deficient_gram_is_fine():
    rng = np.random.default_rng(4)
    cap = toy_qk(rng, n=4, d_in=8)
    res = mac.compensate_q(cap)
    assert np.all(np.isfinite(res.delta_w))
    assert res.loss_after <= res.loss_before + 1e-9


def test_swap_symmetry():
    rng = np.random.default_rng(5)
    cap = toy_qk(rng)
    a = mac.compensate_k(cap)
    b = mac.compensate_q(cap)
    np.testing.assert_array_equal(a.delta_w, b.delta_w)
    assert a.branch == "k" and b.branch == "q"


def test_v_non_increase_and_stationarity():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a, ah, xv, wv, b = toy_v(rng)
        res = mac.compensate_v(a, ah, xv, wv, b, n_heads=2)
        assert res.loss_after <= res.loss_before + 1e-9
        g0 = np.linalg.norm(v_grad(a, ah, xv, wv, b, np.zeros_like(res.delta_w), res.lam, 2))
        g1 = np.linalg.norm(v_grad(a, ah, xv, wv, b, res.delta_w, res.lam, 2))
        assert g1 <= 1e-6 * g0


def test_v_scalar_hand_formula():
    # one query, one key: the softmax row is [1]; use a 2-key row to keep it stochastic
    a = np.array([[1.0, 0.0]])
    ah = np.array([[0.75, 0.25]])
    xv = np.array([[2.0], [0.0]])
    wv = np.array([[1.5]])
    lam = 0.3
    res = mac.compensate_v(a, ah, xv, wv, None, lam=lam)
    ahx, v = 0.75 * 2.0, 2.0 * 1.5
    expected = ahx * (1.0 - 0.75) * v / (ahx**2 + lam)
    assert res.delta_w[0, 0] == pytest.approx(expected, rel=1e-14)


def test_v_rejects_non_stochastic():
    rng = np.random.default_rng(7)
    a, ah, xv, wv, b = toy_v(rng)
    with pytest.raises(ContractError):
        mac.compensate_v(2 * a, ah, xv, wv, b, n_heads=2)


def test_merge_round_trip_and_reevaluation():
    rng = np.random.default_rng(8)
    cap = toy_qk(rng)
    res = mac.compensate_q(cap)
    w1, b1 = mac.merge(cap.w, res, cap.bias)
    neg = mac.CompensationResult(-res.delta_w, res.lam, 0, 0, 0, has_bias=True)
    w0, b0 = mac.merge(w1, neg, b1)
    np.testing.assert_allclose(w0, cap.w, atol=1e-15)
    np.testing.assert_allclose(b0, cap.bias, atol=1e-15)
    # the merged projection reproduces loss_after (delta penalty included by hand)
    x, w = cap.augmented()
    merged = np.vstack([w1, b1[None]])
    loss = res.lam * np.sum(res.delta_w**2)
    for sl in (slice(0, 4), slice(4, 8)):
        r = (x @ w[:, sl]) @ cap.partner_fp[:, sl].T - (x @ merged[:, sl]) @ cap.partner_hat[:, sl].T
        loss += np.sum(r * r)
    assert loss == pytest.approx(res.loss_after, rel=1e-10)


def test_merge_shape_errors():
    rng = np.random.default_rng(9)
    cap = toy_qk(rng, bias=False)
    res = mac.compensate_q(cap)
    assert np.array_equal(mac.merge(cap.w, mac.CompensationResult(np.zeros_like(cap.w), 1.0, 0, 0, 0))[0], cap.w)
    with pytest.raises(ShapeError):
        mac.merge(np.ones((3, 3)), res)
    biased = mac.CompensationResult(np.zeros((9, 8)), 1.0, 0, 0, 0, has_bias=True)
    with pytest.raises(ContractError):
        mac.merge(cap.w, biased)


def test_capture_shape_checks():
    rng = np.random.default_rng(10)
    with pytest.raises(ShapeError):
        mac.ProjectionCapture(rng.standard_normal((4, 3)), np.ones((2, 2)), None, np.ones((3, 2)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        mac.ProjectionCapture(rng.standard_normal((4, 2)), np.ones((2, 2)), None, np.ones((3, 2)), np.ones((2, 2)))
