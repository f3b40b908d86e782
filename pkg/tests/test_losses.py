import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import (
    asymmetric_double_sum,
    layer_infonce,
    layer_literal,
    location_infonce,
    margin_quadruple,
    unit_rows,
)
from anlcl.data import PatchStack
from anlcl.errors import NumericError, ParameterError
from anlcl.losses import (
    ContrastiveConfig,
    LossWeights,
    adversarial_losses,
    adversarial_losses_from_logits,
    asymmetric_contrastive,
    eta_from_entropy,
    layer_contrastive,
    location_contrastive,
    margin_loss,
    overall_loss,
    rain_sparsity,
    self_consistency,
    similarity_ratio,
)

LITERAL = ContrastiveConfig(use_log_form=False)


def test_self_consistency_cases():
    rng = np.random.default_rng(0)
    B, R = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert float(self_consistency(B + R, B, R)) == 0.0
    z = np.zeros((4, 4, 1))
    assert float(self_consistency(np.ones((4, 4, 1)), z, z)) == 1.0
    O, B, R = rng.random((5, 6, 3)), rng.random((5, 6, 3)), rng.random((5, 6, 3))
    naive = 0.0
    for idx in np.ndindex(O.shape):
        naive += (B[idx] + R[idx] - O[idx]) ** 2
    assert float(self_consistency(O, B, R)) == pytest.approx(naive / O.size, rel=1e-12)


def test_rain_sparsity_cases():
    assert float(rain_sparsity(np.zeros((4, 4, 1)))) == 0.0
    assert float(rain_sparsity(np.full((4, 4, 3), 0.5))) == 0.5
    R = np.random.default_rng(1).random((7, 5, 3))
    naive = sum(abs(v) for v in R.ravel()) / R.size
    assert float(rain_sparsity(R)) == pytest.approx(naive, rel=1e-12)


def test_adversarial_closed_forms():
    half = np.full((3, 3), 0.5)
    loss_d, loss_g = adversarial_losses(half, half)
    assert float(loss_d) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(loss_g) == pytest.approx(math.log(2), abs=1e-12)


def test_adversarial_random_and_logits():
    rng = np.random.default_rng(2)
    real, fake = rng.uniform(0.05, 0.95, (4, 4)), rng.uniform(0.05, 0.95, (4, 4))
    loss_d, loss_g = adversarial_losses(real, fake)
    expect_d = -np.mean(np.log(real)) - np.mean(np.log(1 - fake))
    expect_g = -np.mean(np.log(fake))
    assert float(loss_d) == pytest.approx(expect_d, rel=1e-12)
    assert float(loss_g) == pytest.approx(expect_g, rel=1e-12)
    logit = lambda p: torch.as_tensor(np.log(p / (1 - p)))
    ld, lg = adversarial_losses_from_logits(logit(real), logit(fake))
    assert float(ld) == pytest.approx(expect_d, rel=1e-9)
    assert float(lg) == pytest.approx(expect_g, rel=1e-9)


def test_adversarial_clamps_saturation():
    loss_d, loss_g = adversarial_losses(np.zeros(4), np.ones(4))
    assert math.isfinite(float(loss_d)) and math.isfinite(float(loss_g))


def test_layer_literal_identical_embeddings():
    e = np.ones((4, 8)) / math.sqrt(8)
    val = layer_contrastive(e, e, e, e, e, e, LITERAL)
    assert float(val) == pytest.approx(-2.0, abs=1e-9)


def test_layer_literal_matches_double_sum():
    rng = np.random.default_rng(3)
    B, R = unit_rows(rng, 3, 6), unit_rows(rng, 5, 6)
    val = layer_contrastive(B, B, R, R, B, R, LITERAL)
    assert float(val) == pytest.approx(layer_literal(B, R, 0.77), rel=1e-10)


def test_layer_swap_symmetry():
    rng = np.random.default_rng(4)
    qB, pB, nB = unit_rows(rng, 2, 5), unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)
    qR, pR, nR = unit_rows(rng, 2, 5), unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    for cfg in (LITERAL, ContrastiveConfig()):
        a = layer_contrastive(qB, pB, qR, pR, nB, nR, cfg)
        b = layer_contrastive(qR, pR, qB, pB, nR, nB, cfg)
        assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_layer_infonce_matches_loop():
    rng = np.random.default_rng(5)
    qB, pB, nB = unit_rows(rng, 2, 4), unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    qR, pR, nR = unit_rows(rng, 2, 4), unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    val = layer_contrastive(qB, pB, qR, pR, nB, nR, ContrastiveConfig(temperature=0.5))
    assert float(val) == pytest.approx(layer_infonce(qB, pB, qR, pR, nB, nR, 0.5), rel=1e-10)


def test_layer_bad_temperature():
    e = np.ones((2, 3))
    bad = ContrastiveConfig()
    bad.temperature = 0.0
    with pytest.raises(ParameterError):
        layer_contrastive(e, e, e, e, e, e, bad)
    with pytest.raises(ParameterError):
        ContrastiveConfig(temperature=-1)


def test_location_equal_similarities():
    v = np.ones((5, 4)) / 2.0
    neg = np.ones((5, 3, 4)) / 2.0
    assert float(location_contrastive(v, v, neg)) == pytest.approx(math.log(4), abs=1e-12)


def test_location_closed_form():
    vO = np.array([[1.0, 0.0]])
    vB = np.array([[1.0, 0.0]])
    neg = np.array([[[0.0, 1.0], [0.0, -1.0]]])
    val = location_contrastive(vO, vB, neg, ContrastiveConfig(temperature=1.0))
    assert float(val) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert float(val) == pytest.approx(0.5514, abs=1e-4)


def test_location_matches_loop_and_literal():
    rng = np.random.default_rng(6)
    vO, vB = unit_rows(rng, 4, 5), unit_rows(rng, 4, 5)
    neg = np.stack([unit_rows(rng, 7, 5) for _ in range(4)])
    val = location_contrastive(vO, vB, neg)
    assert float(val) == pytest.approx(location_infonce(vO, vB, neg, 0.77), rel=1e-10)
    lit = location_contrastive(vO, vB, neg, LITERAL)
    expect = sum(math.exp(-location_infonce(vO[i:i + 1], vB[i:i + 1], neg[i:i + 1], 0.77)) for i in range(4))
    assert float(lit) == pytest.approx(expect, rel=1e-10)


def test_location_decreases_with_positive_similarity():
    neg = np.array([[[0.0, 1.0], [0.6, -0.8]]])
    vB = np.array([[1.0, 0.0]])
    values = []
    for angle in np.linspace(1.5, 0.0, 8):
        vO = np.array([[math.cos(angle), math.sin(angle)]])
        values.append(float(location_contrastive(vO, vB, neg)))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_margin_identical_features():
    e = np.ones((3, 4)) / 2.0
    assert float(margin_loss(e, e, 1.0, 1)) == pytest.approx(1.0)
    assert float(margin_loss(e, e, 1.0, -1)) == pytest.approx(1.0)


def test_margin_zero_when_pairs_separated():
    fR = np.tile([[0.0, 1.0]], (3, 1))                 # rain pairs at distance 0
    fB = np.array([[1.0, 0.0], [-1.0, 0.0]])           # image pairs at squared distance 4
    assert float(margin_loss(fR, fB, 1.0, 1)) == 0.0


def test_margin_matches_quadruple_loop():
    rng = np.random.default_rng(7)
    fR, fB = unit_rows(rng, 4, 3), unit_rows(rng, 3, 3)
    for eta in (1, -1):
        assert float(margin_loss(fR, fB, 1.0, eta)) == pytest.approx(margin_quadruple(fR, fB, 1.0, eta), rel=1e-12)
        assert float(margin_loss(fR, fB, 1.0, eta, normalize_pairs=False)) == pytest.approx(
            margin_quadruple(fR, fB, 1.0, eta, mean=False), rel=1e-12)


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, -1]))
@settings(max_examples=30, deadline=None)
def test_margin_nonnegative(seed, eta):
    rng = np.random.default_rng(seed)
    assert float(margin_loss(unit_rows(rng, 3, 4), unit_rows(rng, 4, 4), 1.0, eta)) >= 0


def test_margin_bad_eta():
    with pytest.raises(ParameterError):
        margin_loss(np.ones((2, 2)), np.ones((2, 2)), 1.0, 0)


def test_asymmetric_identical():
    e = np.ones((4, 3)) / math.sqrt(3)
    assert float(asymmetric_contrastive(e, e, ContrastiveConfig(), 1)) == pytest.approx(-0.0625, abs=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_asymmetric_reciprocal_identity(seed):
    rng = np.random.default_rng(seed)
    fR, fB = unit_rows(rng, 5, 4), unit_rows(rng, 3, 4)
    r_pos = float(similarity_ratio(fR, fB, 0.77, 1))
    r_neg = float(similarity_ratio(fR, fB, 0.77, -1))
    assert r_pos * r_neg == pytest.approx(1.0, abs=1e-9)


def test_asymmetric_matches_double_sum():
    rng = np.random.default_rng(8)
    fR, fB = unit_rows(rng, 5, 4), unit_rows(rng, 3, 4)
    for eta in (1, -1):
        val = asymmetric_contrastive(fR, fB, ContrastiveConfig(), eta)
        assert float(val) == pytest.approx(asymmetric_double_sum(fR, fB, 0.77, eta), rel=1e-10)


def test_eta_cases():
    const = np.full((3, 16, 16, 1), 0.5)
    two = np.zeros((3, 16, 16, 1))
    two[:, ::2] = 0.8
    assert eta_from_entropy(const, two) == -1
    assert eta_from_entropy(two, two) == 1
    with pytest.raises(ParameterError):
        eta_from_entropy(np.zeros((0, 4, 4, 1)), two)
    stack = PatchStack(two, [None] * 3)
    assert eta_from_entropy(stack, stack) == 1


def test_overall_loss():
    names = ("l_mse", "l_sparse", "l_adv", "l_loc", "l_layer", "l_asy")
    assert overall_loss({n: 0.0 for n in names}) == 0
    zero = LossWeights(0, 0, 0, 0, 0, 0)
    assert overall_loss({n: 1.0 for n in names}, zero) == 0
    assert overall_loss({n: 1.0 for n in names}) == pytest.approx(4.11, abs=1e-12)
    with pytest.raises(NumericError):
        overall_loss({"l_mse": float("nan")})
    with pytest.raises(ParameterError):
        LossWeights(w_adv=-1)


@pytest.mark.parametrize("tau", [0.07, 0.77, 2.0])
def test_losses_finite_on_unit_inputs(tau):
    rng = np.random.default_rng(9)
    cfg = ContrastiveConfig(temperature=tau)
    A, B = unit_rows(rng, 8, 16), unit_rows(rng, 32, 16)
    vals = [
        layer_contrastive(A[:1], A, B[:1], B, A, B, cfg),
        layer_contrastive(A, A, B, B, A, B, ContrastiveConfig(temperature=tau, use_log_form=False)),
        location_contrastive(A, A, np.stack([B] * 8), cfg),
        asymmetric_contrastive(B, A, cfg, 1),
        asymmetric_contrastive(B, A, cfg, -1),
        margin_loss(B, A, 1.0, 1),
    ]
    assert all(math.isfinite(float(v)) for v in vals)


GRAD_CASES = {
    "layer_log": lambda a, b, c, d: layer_contrastive(a[:1], a, c[:1], c, b, d),
    "layer_literal": lambda a, b, c, d: layer_contrastive(a, a, c, c, a, c, LITERAL),
    "location": lambda a, b, c, d: location_contrastive(a, b, torch.stack([c, d, c.flip(0)], 1)),
    "margin": lambda a, b, c, d: margin_loss(a, b, 1.0, 1),
    "asym_pos": lambda a, b, c, d: asymmetric_contrastive(a, c, eta=1),
    "asym_neg": lambda a, b, c, d: asymmetric_contrastive(b, d, eta=-1),
    "self_consistency": lambda a, b, c, d: self_consistency(a, b, c),
    "sparsity": lambda a, b, c, d: rain_sparsity(a + 0.5),
    "adversarial": lambda a, b, c, d: sum(adversarial_losses_from_logits(a, b)),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    from _oracles import analytic_gradient, central_difference, relative_error
    fn = GRAD_CASES[name]
    for point in range(10):
        rng = np.random.default_rng(100 + point)
        inputs = [torch.as_tensor(unit_rows(rng, 3, 4)) for _ in range(4)]
        ana = [g if g is not None else torch.zeros_like(x) for g, x in zip(analytic_gradient(fn, inputs), inputs)]
        num = central_difference(fn, inputs, 1e-5)
        assert relative_error(ana, num) < 1e-3, (name, point)
