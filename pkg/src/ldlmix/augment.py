"""Uncertainty-aware feature augmentation.

A small perceptron (the learner) predicts a standard deviation for every
feature of a sample. Each feature value is then expanded into a column of
``n`` Gaussian draws centred on it, using the reparameterisation
``g = v + sigma * eps`` so gradients reach both the features and the learner.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import Tensor

LEARNER_HIDDEN = 64


def uniform_init(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    """Kaiming-style uniform draw: bound = gain * sqrt(3 / fan_in)."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LearnerParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, hidden: int = LEARNER_HIDDEN) -> "LearnerParams":
        relu_gain = np.sqrt(2.0)
        return cls(
            Tensor(uniform_init(rng, n, (n, hidden), relu_gain), True, "learner.w1"),
            Tensor(np.zeros(hidden), True, "learner.b1"),
            Tensor(uniform_init(rng, hidden, (hidden, hidden), relu_gain), True, "learner.w2"),
            Tensor(np.zeros(hidden), True, "learner.b2"),
            Tensor(uniform_init(rng, hidden, (hidden, n)), True, "learner.w3"),
            Tensor(np.zeros(n), True, "learner.b3"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    @property
    def n(self) -> int:
        return self.w1.shape[0]


@dataclass
class GateParams:
    """Shared row-wise linear map n -> n of the horizontal attention."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, n: int, rng: np.random.Generator) -> "GateParams":
        return cls(Tensor(uniform_init(rng, n, (n, n)), True, "gate.weight"),
                   Tensor(np.zeros(n), True, "gate.bias"))

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


class NoiseSource:
    """Seeded standard-normal stream addressed by (seed, position).

    Every call to :meth:`normal` consumes one position; the draws for a given
    position depend only on ``(seed, position)`` and the requested shape.
    ``draws`` counts the individual numbers handed out since construction.
    Not thread-safe: give each worker its own source via :meth:`spawn`.
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed)
        self.position = position
        self.draws = 0

    def normal(self, shape) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.position])
        self.position += 1
        out = rng.standard_normal(shape)
        self.draws += out.size
        return out

    def reset(self) -> None:
        self.position = 0

    def spawn(self, *key: int) -> "NoiseSource":
        seed = int(np.random.SeedSequence([self.seed, *key]).generate_state(1, np.uint64)[0] >> 1)
        return NoiseSource(seed)


class FrozenNoise(NoiseSource):
    """Hands out a fixed epsilon array on every call (for gradient checks)."""

    def __init__(self, eps: np.ndarray):
        super().__init__(0)
        self.eps = np.asarray(eps, dtype=np.float64)

    def normal(self, shape) -> np.ndarray:
        if tuple(shape) != self.eps.shape:
            raise DimensionError(f"frozen noise has shape {self.eps.shape}, requested {tuple(shape)}")
        self.draws += self.eps.size
        return self.eps


def learner_forward(v, params: LearnerParams) -> Tensor:
    """Per-feature standard deviations in (0, 1); ``v`` is [n] or [B, n]."""
    v = nx.as_tensor(v)
    if v.shape[-1] != params.n or params.w3.shape[1] != params.n:
        raise DimensionError(f"learner expects {params.n} features, got {v.shape}")
    h = nx.relu(nx.linear(v, params.w1, params.b1))
    h = nx.relu(nx.linear(h, params.w2, params.b2))
    return nx.sigmoid(nx.linear(h, params.w3, params.b3))


def gaussian_augment(v, sigma, noise: NoiseSource) -> Tensor:
    """Expand each sample into an [n, n] matrix whose column i ~ N(v_i, sigma_i^2).

    ``G[j, i] = v[i] + sigma[i] * eps[j, i]``; batched inputs give [B, n, n].
    """
    v, sigma = nx.as_tensor(v), nx.as_tensor(sigma)
    if v.shape != sigma.shape:
        raise DimensionError(f"feature shape {v.shape} != sigma shape {sigma.shape}")
    n = v.shape[-1]
    lead = v.shape[:-1]
    eps = noise.normal(lead + (n, n))
    row = lead + (1, n)
    return nx.add(nx.reshape(v, row), nx.mul(nx.reshape(sigma, row), Tensor(eps)))


def tile_sample(v) -> Tensor:
    """Stack ``n`` copies of the sample as rows: M[j, i] = v[i]."""
    v = nx.as_tensor(v)
    n = v.shape[-1]
    lead = v.shape[:-1]
    return nx.broadcast_to(nx.reshape(v, lead + (1, n)), lead + (n, n))


def horizontal_attention(g, gate: GateParams) -> Tensor:
    """``(sigmoid(g) @ W + b) * g`` with one n -> n map shared by all rows."""
    g = nx.as_tensor(g)
    n = g.shape[-1]
    if g.shape[-2] != n or gate.weight.shape != (n, n):
        raise DimensionError(f"attention gate {gate.weight.shape} cannot act on {g.shape}")
    a = nx.linear(nx.sigmoid(g), gate.weight, gate.bias)
    return nx.mul(a, g)
