"""Loss terms of the domain-mixup adversarial objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import LatentCode
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clamp,
    log,
    mean,
    mul,
    relu,
    rowwise_sq_distance,
    softmax_cross_entropy,
    square,
    sub,
    take_rows,
    tsum,
)

SCORE_EPS = 1e-7


@dataclass
class LossBundle:
    kl: Tensor
    cls_c: Tensor
    adv_s: Tensor
    adv_t: Tensor
    adv_m: Tensor
    soft_m: Tensor
    tri_m: Tensor
    cls_s_g: Tensor
    cls_t_g: Tensor
    pseudo_kept: int = 0

    SCALARS = ("kl", "cls_c", "adv_s", "adv_t", "adv_m", "soft_m", "tri_m", "cls_s_g", "cls_t_g")

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in self.SCALARS}

    def check_finite(self) -> None:
        for name, v in self.values().items():
            if not np.isfinite(v):
                raise NumericError(f"loss term {name} is not finite ({v})")


def zero() -> Tensor:
    return Tensor(0.0)


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels outside [0, {K})")
    out = np.zeros((len(labels), K))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def kl_loss(code: LatentCode) -> Tensor:
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I)), summed over latent dims, batch mean."""
    mu, sigma = code.mu, code.sigma
    if np.any(sigma.data <= 0):
        raise ValueError("kl_loss: sigma must be strictly positive")
    per_entry = sub(add(square(mu), square(sigma)), add(mul(log(sigma), 2.0), 1.0))
    return mul(tsum(per_entry), 0.5 / mu.shape[0])


def classifier_loss(logits, y_s) -> Tensor:
    logits = as_tensor(logits)
    return softmax_cross_entropy(logits, Tensor(one_hot(y_s, logits.shape[1])))


def _check_scores(*scores) -> None:
    for s in scores:
        if s is not None and (np.any(s.data < 0) or np.any(s.data > 1) or np.any(np.isnan(s.data))):
            raise ValueError("discriminator scores must lie in (0, 1)")


def _log_score(s: Tensor) -> Tensor:
    return log(clamp(s, SCORE_EPS, 1.0 - SCORE_EPS))


def _log_one_minus(s: Tensor) -> Tensor:
    return log(clamp(sub(1.0, s), SCORE_EPS, 1.0 - SCORE_EPS))


def adversarial_losses(d_real_s, d_fake_s, d_fake_t=None, d_fake_m=None):
    """Discriminator log-likelihoods ``(adv_s, adv_t, adv_m)``.

    ``adv_s = E log D(x_s) + E log(1 - D(x_s_g))``, ``adv_t = E log(1 - D(x_t_g))``
    and ``adv_m = E log(1 - D(x_m_g))``.  All are <= 0; the discriminator
    maximizes them.  A missing score yields a zero term.
    """
    _check_scores(d_real_s, d_fake_s, d_fake_t, d_fake_m)
    adv_s = add(mean(_log_score(d_real_s)), mean(_log_one_minus(d_fake_s)))
    adv_t = mean(_log_one_minus(d_fake_t)) if d_fake_t is not None else zero()
    adv_m = mean(_log_one_minus(d_fake_m)) if d_fake_m is not None else zero()
    return adv_s, adv_t, adv_m


def generator_adversarial(d_fake, saturating: bool = False) -> Tensor:
    """Generator-side term to *descend* for one batch of decoded images.

    The literal form ``E log(1 - D(x_g))``; the default non-saturating form
    ``-E log D(x_g)`` has the same fixed point and stronger early gradients.
    """
    _check_scores(d_fake)
    if saturating:
        return mean(_log_one_minus(d_fake))
    return mul(mean(_log_score(d_fake)), -1.0)


def soft_domain_loss(dom_score_m, l_dom_m) -> Tensor:
    """Binary cross-entropy of the domain head against the soft label ``lam``."""
    s = as_tensor(dom_score_m)
    _check_scores(s)
    lam = np.asarray(l_dom_m, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("soft domain label must lie in [0, 1]")
    s = clamp(s, SCORE_EPS, 1.0 - SCORE_EPS)
    if lam.ndim:
        lam_t = Tensor(np.broadcast_to(lam.reshape(-1, 1), s.shape))
        ll = add(mul(log(s), lam_t), mul(log(sub(1.0, s)), sub(1.0, lam_t)))
    else:
        lam = float(lam)
        ll = add(mul(log(s), lam), mul(log(sub(1.0, s)), 1.0 - lam))
    return mul(mean(ll), -1.0)


def triplet_loss(f_a, f_p, f_n, margin) -> Tensor:
    """Batch mean of ``max(0, |f_a - f_p|^2 - |f_a - f_n|^2 + margin)``.

    ``margin`` is a scalar or one value per row.
    """
    f_a, f_p, f_n = as_tensor(f_a), as_tensor(f_p), as_tensor(f_n)
    if not (f_a.shape == f_p.shape == f_n.shape) or f_a.ndim != 2:
        raise ShapeError(f"triplet_loss: shapes {f_a.shape}, {f_p.shape}, {f_n.shape}")
    margin = np.asarray(margin, dtype=np.float64)
    if margin.ndim:
        margin = Tensor(margin.reshape(-1, 1))
    else:
        margin = float(margin)
    gap = add(sub(rowwise_sq_distance(f_a, f_p), rowwise_sq_distance(f_a, f_n)), margin)
    return mean(relu(gap))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_filter(target_logits, tau: float):
    """Indices of target rows whose top softmax probability reaches ``tau``, and their argmax labels."""
    logits = target_logits.data if isinstance(target_logits, Tensor) else np.asarray(target_logits, dtype=np.float64)
    probs = softmax_np(logits)
    keep = np.flatnonzero(probs.max(axis=1) >= tau)
    return keep, probs[keep].argmax(axis=1)


def class_consistency_losses(d_cls_logits_s_g, y_s, d_cls_logits_t_g=None, pseudo=None):
    """Cross-entropy of the class head on decoded source rows and on kept target rows."""
    cls_s_g = classifier_loss(d_cls_logits_s_g, y_s)
    if d_cls_logits_t_g is None or pseudo is None or len(pseudo[0]) == 0:
        return cls_s_g, zero()
    kept, labels = pseudo
    logits_t = take_rows(as_tensor(d_cls_logits_t_g), kept)
    return cls_s_g, classifier_loss(logits_t, labels)


def tau_schedule(epoch: int, total_epochs: int, tau_start: float = 0.9, tau_end: float = 0.6) -> float:
    """Confidence threshold ramping linearly from ``tau_start`` down to ``tau_end``."""
    if total_epochs <= 0 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if not 0 < tau_end <= tau_start < 1:
        raise ValueError(f"need 0 < tau_end <= tau_start < 1, got {tau_start}, {tau_end}")
    return tau_start - (tau_start - tau_end) * epoch / total_epochs

