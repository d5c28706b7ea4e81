import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmada import losses as L
from dmada.networks import LatentCode
from dmada.tensor import Tensor

from loss_cases import PARTICIPANTS, check_term, make_terms

mp.mp.dps = 40


def code(mu, sigma):
    return LatentCode(Tensor(np.atleast_2d(mu)), Tensor(np.atleast_2d(sigma)))


# -- closed forms ----------------------------------------------------------------

def test_kl_examples():
    assert L.kl_loss(code(np.zeros((3, 4)), np.ones((3, 4)))).item() == 0.0
    # frozen from numerical integration of the KL integral (scipy.integrate.quad)
    assert L.kl_loss(code([1.0], [1.0])).item() == pytest.approx(0.5, abs=1e-12)
    assert L.kl_loss(code([0.0], [2.0])).item() == pytest.approx(0.8068528194400548, abs=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-3, 3)), arrays(np.float64, (3, 5), elements=st.floats(0.05, 3)),
       st.permutations(range(5)))
def test_kl_nonnegative_and_permutation_invariant(mu, sigma, perm):
    v = L.kl_loss(code(mu, sigma)).item()
    assert v >= 0
    perm = list(perm)
    assert L.kl_loss(code(mu[:, perm], sigma[:, perm])).item() == pytest.approx(v, rel=1e-13, abs=1e-15)


def test_classifier_loss_examples():
    assert L.classifier_loss(np.zeros((4, 10)), [0, 3, 9, 1]).item() == pytest.approx(math.log(10), abs=1e-14)
    assert L.classifier_loss([[60.0, 0.0, 0.0]], [0]).item() < 1e-20
    # frozen from mpmath: log(1 + 2 e^-2)
    assert L.classifier_loss([[2.0, 0.0, 0.0]], [0]).item() == pytest.approx(0.2395447662218845, abs=1e-15)


def test_adversarial_examples():
    half = Tensor(np.full((4, 1), 0.5))
    adv_s, adv_t, adv_m = L.adversarial_losses(half, half, half, half)
    assert adv_s.item() == pytest.approx(2 * math.log(0.5), abs=1e-15)
    assert adv_t.item() == pytest.approx(math.log(0.5), abs=1e-15)
    assert adv_m.item() == pytest.approx(math.log(0.5), abs=1e-15)
    adv_s, adv_t, adv_m = L.adversarial_losses(Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1))))
    assert abs(adv_s.item()) < 1e-6
    assert adv_t.item() == 0.0 and adv_m.item() == 0.0


@given(arrays(np.float64, (5, 1), elements=st.floats(0, 1)), arrays(np.float64, (5, 1), elements=st.floats(0, 1)))
def test_adversarial_terms_bounded_above(real, fake):
    for term in L.adversarial_losses(Tensor(real), Tensor(fake), Tensor(fake), Tensor(fake)):
        assert np.isfinite(term.item()) and term.item() <= 0


def test_scores_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        L.adversarial_losses(Tensor([[1.5]]), Tensor([[0.5]]))


def test_generator_forms():
    s = Tensor(np.full((3, 1), 0.25))
    assert L.generator_adversarial(s).item() == pytest.approx(-math.log(0.25))
    assert L.generator_adversarial(s, saturating=True).item() == pytest.approx(math.log(0.75))


def test_soft_domain_examples():
    assert L.soft_domain_loss(Tensor([[0.5]]), 0.5).item() == pytest.approx(math.log(2), abs=1e-15)
    assert L.soft_domain_loss(Tensor([[1.0 - 1e-12]]), 1.0).item() < 1e-6
    # binary entropy H(0.3), frozen from a bounded numerical minimization over the score
    assert L.soft_domain_loss(Tensor([[0.3]]), 0.3).item() == pytest.approx(0.6108643020548935, abs=1e-12)


@given(st.floats(0.01, 0.99), st.floats(0.0, 1.0))
def test_soft_domain_bounded_by_entropy(score, lam):
    v = L.soft_domain_loss(Tensor([[score]]), lam).item()
    h = -sum(p * math.log(p) for p in (lam, 1 - lam) if p > 0)
    assert v >= h - 1e-12
    assert L.soft_domain_loss(Tensor([[score]]), score).item() == pytest.approx(
        -(score * math.log(score) + (1 - score) * math.log(1 - score)), rel=1e-12)


def test_triplet_examples():
    fa = np.zeros((1, 2))
    assert L.triplet_loss(fa, fa, [[1.0, 0.0]], 1.0).item() == 0.0
    fp = [[math.sqrt(0.2), 0.0]]
    fn = [[0.0, math.sqrt(0.4)]]
    assert L.triplet_loss(fa, fp, fn, 0.5).item() == pytest.approx(0.3, abs=1e-15)
    assert L.triplet_loss(fa, fp, fp, 0.0).item() == 0.0


@given(arrays(np.float64, (4, 3), elements=st.floats(-2, 2)), arrays(np.float64, (4, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (4, 3), elements=st.floats(-2, 2)), st.floats(0, 1))
@example(np.zeros((4, 3)), np.ones((4, 3)), np.ones((4, 3)), 1.8278549188973906e-22)
def test_triplet_zero_when_satisfied(fa, fp, fn, margin):
    d_ap = ((fa - fp) ** 2).sum(1)
    d_an = ((fa - fn) ** 2).sum(1)
    v = L.triplet_loss(fa, fp, fn, margin).item()
    assert v >= 0
    # compare as a gap: d_ap + margin can round a tiny margin away
    if np.all(d_ap - d_an + margin <= 0):
        assert v == 0.0


def test_pseudo_filter_examples():
    keep, _ = L.pseudo_filter(np.zeros((5, 10)), 0.5)
    assert len(keep) == 0
    logits = np.full((2, 10), 0.0)
    logits[1, 4] = math.log(0.95 * 9 / 0.05)
    keep, labels = L.pseudo_filter(logits, 0.9)
    assert list(keep) == [1] and list(labels) == [4]
    keep, _ = L.pseudo_filter(np.random.default_rng(0).normal(size=(7, 10)), 0.1 - 1e-9)
    assert len(keep) == 7


def test_class_consistency_examples():
    y = np.array([0, 1, 2])
    s, t = L.class_consistency_losses(np.zeros((3, 3)), y, np.zeros((3, 3)), (np.zeros(0, int), np.zeros(0, int)))
    assert s.item() == pytest.approx(math.log(3)) and t.item() == 0.0
    s, _ = L.class_consistency_losses(80 * np.eye(3), y)
    assert s.item() < 1e-30
    _, t = L.class_consistency_losses(np.zeros((3, 3)), y, np.zeros((3, 3)), (np.array([0, 2]), np.array([1, 1])))
    assert t.item() == pytest.approx(math.log(3))


def test_tau_schedule():
    assert L.tau_schedule(0, 10) == 0.9
    assert L.tau_schedule(10, 10) == pytest.approx(0.6)
    assert L.tau_schedule(5, 10) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        L.tau_schedule(11, 10)
    with pytest.raises(ValueError):
        L.tau_schedule(0, 10, 0.5, 0.7)


# -- high-precision oracles ------------------------------------------------------

def kl_mp(mu, sigma):
    total = mp.mpf(0)
    for m, s in zip(mu.ravel(), sigma.ravel()):
        m, s = mp.mpf(float(m)), mp.mpf(float(s))
        total += m * m + s * s - 2 * mp.log(s) - 1
    return total / (2 * mu.shape[0])


def ce_mp(logits, y):
    total = mp.mpf(0)
    for row, k in zip(logits, y):
        row = [mp.mpf(float(v)) for v in row]
        total += mp.log(mp.fsum(mp.exp(v) for v in row)) - row[k]
    return total / len(y)


def test_closed_forms_against_mpmath():
    rng = np.random.default_rng(7)
    for _ in range(100):
        mu = rng.normal(size=(3, 4))
        sigma = rng.uniform(0.1, 3, size=(3, 4))
        assert abs(L.kl_loss(code(mu, sigma)).item() - float(kl_mp(mu, sigma))) < 1e-10
        logits = rng.normal(size=(4, 5)) * 4
        y = rng.integers(0, 5, 4)
        assert abs(L.classifier_loss(logits, y).item() - float(ce_mp(logits, y))) < 1e-10


def test_gradient_check_single_seed():
    models, terms = make_terms(seed=3)
    for name in PARTICIPANTS:
        assert check_term(models, terms[name], name) < 1e-4, name
