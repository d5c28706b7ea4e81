"""Domain mixup on pixel and latent level, plus the label bookkeeping around it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _make, add, as_tensor, mul

SOURCE, TARGET, MIXED = "s", "t", "m"


@dataclass(frozen=True)
class MixupBatch:
    x_s: Tensor
    x_t: Tensor
    x_m: Tensor
    lam: float | np.ndarray
    l_dom_m: float | np.ndarray
    y_s: np.ndarray


@dataclass(frozen=True)
class ClassLabelBlock:
    """Class-label vector ``l_cls`` and its uncertainty compensation ``l_comp``."""

    l_cls: np.ndarray
    l_comp: float

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.l_cls, [self.l_comp]])


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Draw the mixup ratio from Beta(alpha, alpha) via two Gamma(alpha, 1) draws."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    g1 = rng.gamma(alpha, 1.0, size)
    g2 = rng.gamma(alpha, 1.0, size)
    lam = g1 / (g1 + g2)
    return float(lam) if size is None else lam


def _check_lambda(lam) -> None:
    arr = np.asarray(lam)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise ValueError(f"mixup ratio must lie in [0, 1], got {lam}")


def _convex(a: Tensor, b: Tensor, lam) -> Tensor:
    if np.ndim(lam) == 0:
        lam = float(lam)
        return add(mul(a, lam), mul(b, 1.0 - lam))
    # per-row ratios, broadcast explicitly to the operand shape
    w = np.broadcast_to(np.asarray(lam, dtype=np.float64).reshape(-1, 1), a.shape)
    return add(mul(a, Tensor(w)), mul(b, Tensor(1.0 - w)))


def _pair_weights(lam):
    """Weights ``(w_s, w_t)`` summing to exactly one.

    The heavier weight is computed first and the lighter one as its exact
    complement (``1 - w`` is exact for ``w`` in ``[0.5, 1]``).  This makes
    swapping the operands together with ``lam -> 1 - lam`` bit-identical.
    """
    lam = np.asarray(lam, dtype=np.float64)
    w_t_heavy = 1.0 - lam
    w_s = np.where(lam >= 0.5, lam, 1.0 - w_t_heavy)
    w_t = np.where(lam >= 0.5, 1.0 - lam, w_t_heavy)
    return w_s, w_t


def pixel_mixup(x_s, x_t, lam):
    """Return ``(x_m, l_dom_m)`` with ``x_m = lam*x_s + (1-lam)*x_t`` and ``l_dom_m = lam``.

    ``lam`` is a scalar or one ratio per row.  The result is clipped to the
    elementwise hull of the two inputs so rounding can never leave it.
    """
    x_s, x_t = as_tensor(x_s), as_tensor(x_t)
    if x_s.shape != x_t.shape:
        raise ShapeError(f"pixel_mixup: source {x_s.shape} vs target {x_t.shape}")
    _check_lambda(lam)
    w_s, w_t = _pair_weights(lam)
    if w_s.ndim:
        w_s = np.broadcast_to(w_s.reshape(-1, *([1] * (x_s.ndim - 1))), x_s.shape)
        w_t = np.broadcast_to(w_t.reshape(-1, *([1] * (x_s.ndim - 1))), x_s.shape)
    raw = w_s * x_s.data + w_t * x_t.data
    x_m = _make(
        np.clip(raw, np.minimum(x_s.data, x_t.data), np.maximum(x_s.data, x_t.data)),
        (x_s, x_t),
        lambda g: (g * w_s, g * w_t),
        "pixel_mixup",
    )
    return x_m, (float(lam) if np.ndim(lam) == 0 else np.asarray(lam, dtype=np.float64))


def feature_mixup(mu_s, sigma_s, mu_t, sigma_t, lam):
    """Mix two latent codes with the same ratio used at pixel level."""
    mu_s, sigma_s, mu_t, sigma_t = map(as_tensor, (mu_s, sigma_s, mu_t, sigma_t))
    if not (mu_s.shape == sigma_s.shape == mu_t.shape == sigma_t.shape):
        raise ShapeError(
            f"feature_mixup: shapes {mu_s.shape}, {sigma_s.shape}, {mu_t.shape}, {sigma_t.shape} differ"
        )
    _check_lambda(lam)
    return _convex(mu_s, mu_t, lam), _convex(sigma_s, sigma_t, lam)


def build_class_block(kind: str, K: int, y_s: int | None = None, lam: float | None = None) -> ClassLabelBlock:
    if kind not in ("source", "target", "mixup"):
        raise ValueError(f"unknown block kind {kind!r}")
    l_cls = np.zeros(K)
    if kind == "target":
        return ClassLabelBlock(l_cls, 1.0)
    if y_s is None:
        raise ValueError(f"{kind} block needs a source class index")
    if not 0 <= int(y_s) < K:
        raise ValueError(f"class index {y_s} outside [0, {K})")
    if kind == "source":
        l_cls[int(y_s)] = 1.0
        return ClassLabelBlock(l_cls, 0.0)
    if lam is None:
        raise ValueError("mixup block needs a mixup ratio")
    _check_lambda(lam)
    l_cls[int(y_s)] = lam
    return ClassLabelBlock(l_cls, 1.0 - lam)


def class_block_matrix(kind: str, K: int, y_s=None, lam=None, batch: int | None = None) -> np.ndarray:
    """Stack per-row ``[l_cls, l_comp]`` into a ``(B, K+1)`` array."""
    if kind == "target":
        if batch is None:
            raise ValueError("target blocks need an explicit batch size")
        out = np.zeros((batch, K + 1))
        out[:, K] = 1.0
        return out
    y_s = np.asarray(y_s, dtype=np.int64)
    if y_s.ndim != 1:
        raise ValueError("y_s must be a vector of class indices")
    if np.any(y_s < 0) or np.any(y_s >= K):
        raise ValueError(f"class indices outside [0, {K})")
    n = len(y_s)
    out = np.zeros((n, K + 1))
    rows = np.arange(n)
    if kind == "source":
        out[rows, y_s] = 1.0
        return out
    if kind != "mixup":
        raise ValueError(f"unknown block kind {kind!r}")
    if lam is None:
        raise ValueError("mixup block needs a mixup ratio")
    _check_lambda(lam)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    out[rows, y_s] = lam
    out[:, K] = 1.0 - lam
    return out


def triplet_roles(lam: float) -> tuple[str, str, str, float]:
    """Anchor/positive/negative tags and the flexible margin ``|2*lam - 1|``.

    The mixed sample is always the anchor; it is pulled toward the domain it
    contains more of.  ``lam == 0.5`` binds to the source side.
    """
    margin = abs(2.0 * lam - 1.0)
    if lam >= 0.5:
        return MIXED, SOURCE, TARGET, margin
    return MIXED, TARGET, SOURCE, margin
