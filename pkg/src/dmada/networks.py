"""The four jointly trained subnetworks, built from fully connected layers.

* :class:`Encoder` maps an image to a latent code ``(mu, sigma)``.
* :class:`Decoder` maps ``[mu, sigma, z, l_cls, l_comp]`` back to image space.
* :class:`Classifier` predicts class logits from ``[mu, sigma]``.
* :class:`Discriminator` has a shared trunk with a domain head and a class head.
"""

from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .mixup import ClassLabelBlock
from .tensor import (
    Adam,
    NumericError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    linear,
    relu,
    sigmoid,
    softplus,
)

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class LatentCode:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"latent code: mu {self.mu.shape} vs sigma {self.sigma.shape}")

    def features(self) -> Tensor:
        """Concatenated ``[mu, sigma]``, the representation the classifier sees."""
        return concat([self.mu, self.sigma], axis=1)


@dataclass(frozen=True)
class DiscriminatorOutput:
    dom_score: Tensor
    cls_logits: Tensor
    features: Tensor


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, n_out)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class MLP:
    """Stack of linear layers with ReLU after each one (optionally not the last)."""

    def __init__(self, widths, rng, final_activation: bool = True):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = relu(x)
        return x

    def named_parameters(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.{i}")


class Module:
    name = "module"

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if n not in state:
                raise KeyError(f"missing parameter {n!r}")
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: stored shape {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _check_finite(x: Tensor, who: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{who}: non-finite input")


def _check_width(x: Tensor, width: int, who: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{who}: expected input of width {width}, got shape {x.shape}")


class Encoder(Module):
    name = "encoder"

    def __init__(self, d_in: int, d_z: int, hidden=(128, 128), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_z = d_in, d_z
        self.trunk = MLP([d_in, *hidden], rng)
        self.mu_head = Linear(hidden[-1], d_z, rng)
        self.sigma_head = Linear(hidden[-1], d_z, rng)

    def __call__(self, x) -> LatentCode:
        x = as_tensor(x)
        _check_width(x, self.d_in, "encode")
        _check_finite(x, "encode")
        h = self.trunk(x)
        mu = self.mu_head(h)
        sigma = add(softplus(self.sigma_head(h)), SIGMA_FLOOR)
        return LatentCode(mu, sigma)

    def named_parameters(self):
        yield from self.trunk.named_parameters("encoder.trunk")
        yield from self.mu_head.named_parameters("encoder.mu")
        yield from self.sigma_head.named_parameters("encoder.sigma")


class Decoder(Module):
    name = "decoder"

    def __init__(self, d_z: int, d_noise: int, n_classes: int, d_out: int, hidden=(128, 128), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_z, self.d_noise, self.n_classes, self.d_out = d_z, d_noise, n_classes, d_out
        self.d_in = 2 * d_z + d_noise + n_classes + 1
        self.body = MLP([self.d_in, *hidden, d_out], rng, final_activation=False)

    def __call__(self, code: LatentCode, z, block) -> Tensor:
        """``block`` is one :class:`ClassLabelBlock` for every row or a ``(B, K+1)`` array."""
        z = as_tensor(z)
        if isinstance(block, ClassLabelBlock):
            block = np.broadcast_to(block.as_row(), (code.mu.shape[0], self.n_classes + 1))
        block = as_tensor(block)
        x = concat([code.mu, code.sigma, z, block], axis=1)
        _check_width(x, self.d_in, "decode")
        return sigmoid(self.body(x))

    def named_parameters(self):
        yield from self.body.named_parameters("decoder.body")


class Classifier(Module):
    name = "classifier"

    def __init__(self, d_z: int, n_classes: int, hidden=(64,), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_z, self.n_classes = d_z, n_classes
        self.body = MLP([2 * d_z, *hidden, n_classes], rng, final_activation=False)

    def __call__(self, code: LatentCode) -> Tensor:
        x = code.features()
        _check_width(x, 2 * self.d_z, "classify")
        return self.body(x)

    def named_parameters(self):
        yield from self.body.named_parameters("classifier.body")


class Discriminator(Module):
    name = "discriminator"

    def __init__(self, d_in: int, n_classes: int, hidden=(128, 128), d_f: int = 64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.n_classes, self.d_f = d_in, n_classes, d_f
        self.trunk = MLP([d_in, *hidden, d_f], rng)
        self.dom_head = Linear(d_f, 1, rng)
        self.cls_head = Linear(d_f, n_classes, rng)

    def __call__(self, x) -> DiscriminatorOutput:
        x = as_tensor(x)
        _check_width(x, self.d_in, "discriminate")
        _check_finite(x, "discriminate")
        f = self.trunk(x)
        return DiscriminatorOutput(sigmoid(self.dom_head(f)), self.cls_head(f), f)

    def features(self, x) -> Tensor:
        x = as_tensor(x)
        _check_width(x, self.d_in, "discriminate")
        return self.trunk(x)

    def named_parameters(self):
        yield from self.trunk.named_parameters("discriminator.trunk")
        yield from self.dom_head.named_parameters("discriminator.dom")
        yield from self.cls_head.named_parameters("discriminator.cls")


@dataclass(frozen=True)
class Architecture:
    d_in: int
    n_classes: int
    d_z: int = 16
    d_noise: int = 16
    encoder_hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] = (128, 128)
    classifier_hidden: tuple[int, ...] = (64,)
    disc_hidden: tuple[int, ...] = (128, 128)
    d_f: int = 64


class ModelSet:
    """Encoder, decoder, classifier and discriminator with one Adam each."""

    ORDER = ("encoder", "decoder", "classifier", "discriminator")

    def __init__(self, arch: Architecture, rng: np.random.Generator, learning_rate: float = 4e-4):
        self.arch = arch
        self.encoder = Encoder(arch.d_in, arch.d_z, arch.encoder_hidden, rng)
        self.decoder = Decoder(arch.d_z, arch.d_noise, arch.n_classes, arch.d_in, arch.decoder_hidden, rng)
        self.classifier = Classifier(arch.d_z, arch.n_classes, arch.classifier_hidden, rng)
        self.discriminator = Discriminator(arch.d_in, arch.n_classes, arch.disc_hidden, arch.d_f, rng)
        self.optimizers = {name: Adam(self[name].parameters(), learning_rate) for name in self.ORDER}

    def __getitem__(self, name: str) -> Module:
        if name not in self.ORDER:
            raise KeyError(name)
        return getattr(self, name)

    def modules(self):
        return [self[n] for n in self.ORDER]

    def named_parameters(self):
        for m in self.modules():
            yield from m.named_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state) -> None:
        for m in self.modules():
            m.load_state_dict(state)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    @contextmanager
    def training(self, name: str | None):
        """Only the named subnetwork records gradients inside the block."""
        try:
            for n in self.ORDER:
                self[n].set_trainable(n == name)
            yield self[name] if name else None
        finally:
            for n in self.ORDER:
                self[n].set_trainable(True)

    def parameter_hash(self, name: str) -> str:
        return parameter_hash(self[name])


def parameter_hash(module) -> str:
    h = hashlib.sha256()
    for n, p in module.named_parameters():
        h.update(n.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoint format ---------------------------------------------------
#   magic b"DMADACKP", uint32 version, uint64 count, then per parameter:
#   uint64 name length, name bytes (utf-8), uint64 rank, rank x uint64 dims,
#   float64 payload; all little-endian.

CHECKPOINT_MAGIC = b"DMADACKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed."""


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    # a crash mid-write never clobbers the previous checkpoint
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<IQ", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")
    return state
