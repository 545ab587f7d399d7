"""Online alignment of normalisation-layer feature statistics.

Each normalised layer keeps one scalar mean and one scalar variance computed
over its whole ``C x H x W`` feature tensor. During source training the layers
behave as plain layer normalisation; online, the statistics used for
normalisation are an exponential blend of the previous statistics and the ones
observed on the newest window.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import DomainError

DEFAULT_EPS = 1e-5


@dataclass
class LayerStats:
    mu: float
    sigma2: float

    def __post_init__(self):
        self.mu = float(self.mu)
        self.sigma2 = float(self.sigma2)
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma2)) or self.sigma2 < 0:
            raise DomainError(f"invalid statistics mu={self.mu}, sigma2={self.sigma2}")


class FeatureStats(dict):
    """Mapping ``layer name -> LayerStats``; insertion order follows the network."""

    def copy(self) -> "FeatureStats":
        return FeatureStats({k: LayerStats(v.mu, v.sigma2) for k, v in self.items()})

    def to_state(self) -> Dict[str, Tuple[float, float]]:
        return {k: (v.mu, v.sigma2) for k, v in self.items()}

    @classmethod
    def from_state(cls, state: Dict[str, Tuple[float, float]]) -> "FeatureStats":
        return cls({k: LayerStats(*v) for k, v in state.items()})


@dataclass(frozen=True)
class AlignConfig:
    beta: float = 0.5
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError("beta must lie in [0, 1]")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")


def collect_stats(features) -> Tuple[float, float]:
    """Mean and population variance over every element of ``features``."""
    f = torch.as_tensor(features, dtype=torch.float64) if not isinstance(features, torch.Tensor) else features.double()
    if f.numel() == 0:
        raise DomainError("cannot collect statistics of an empty tensor")
    mu = f.mean()
    return float(mu), float(((f - mu) ** 2).mean())


def init_target_stats(source: FeatureStats) -> FeatureStats:
    """Statistics at the first online iteration: an independent copy of the source ones."""
    return source.copy()


def align_stats(prev: FeatureStats, current_hat: FeatureStats, beta: float) -> FeatureStats:
    """Per-layer convex blend ``(1 - beta) * prev + beta * current``."""
    if not 0.0 <= beta <= 1.0:
        raise DomainError("beta must lie in [0, 1]")
    out = FeatureStats()
    for name, p in prev.items():
        c = current_hat.get(name)
        if c is None:
            out[name] = LayerStats(p.mu, p.sigma2)
            continue
        out[name] = LayerStats((1 - beta) * p.mu + beta * c.mu, (1 - beta) * p.sigma2 + beta * c.sigma2)
    for name, c in current_hat.items():
        if name not in out:
            out[name] = LayerStats(c.mu, c.sigma2)
    return out


def normalize(features: torch.Tensor, mu, sigma2, gamma, delta, epsilon: float = DEFAULT_EPS) -> torch.Tensor:
    """``gamma * (f - mu) / sqrt(sigma2 + eps) + delta``.

    ``gamma`` and ``delta`` are scalars or per-channel vectors broadcast over
    dimension 1 of a ``(B, C, ...)`` tensor. ``mu`` and ``sigma2`` may be
    floats (fixed statistics) or tensors broadcastable against ``features``.
    """
    if isinstance(gamma, torch.Tensor) and gamma.dim() == 1 and features.dim() > 2:
        shape = (1, -1) + (1,) * (features.dim() - 2)
        gamma = gamma.view(shape)
        delta = delta.view(shape)
    if isinstance(sigma2, torch.Tensor):
        inv = torch.rsqrt(sigma2 + epsilon)
    else:
        inv = 1.0 / float(np.sqrt(sigma2 + epsilon))
    return gamma * (features - mu) * inv + delta


class FeatureAligner:
    """Normalisation controller shared by every :class:`AlignedNorm` of a model.

    Modes:
      ``instant``  per-sample statistics of the current tensor (layer norm)
      ``aligned``  fixed per-layer statistics ``self.stats`` treated as constants
    While ``collecting`` is on, per-sample statistics of every layer are
    averaged into an estimate of the current window's statistics.
    """

    def __init__(self, epsilon: float = DEFAULT_EPS):
        self.epsilon = epsilon
        self.mode = "instant"
        self.stats: Optional[FeatureStats] = None
        self.collecting = False
        self._acc: Dict[str, list] = {}

    def begin_collect(self) -> None:
        self.collecting = True
        self._acc = {}

    def end_collect(self) -> FeatureStats:
        self.collecting = False
        out = FeatureStats()
        for name, (s_mu, s_var, n) in self._acc.items():
            out[name] = LayerStats(s_mu / n, s_var / n)
        self._acc = {}
        return out

    def apply(self, name: str, x: torch.Tensor, gamma, delta) -> torch.Tensor:
        dims = tuple(range(1, x.dim()))
        if self.collecting or self.mode == "instant":
            var, mu = torch.var_mean(x, dim=dims, unbiased=False, keepdim=True)
            if self.collecting:
                acc = self._acc.setdefault(name, [0.0, 0.0, 0])
                acc[0] += float(mu.detach().sum())
                acc[1] += float(var.detach().sum())
                acc[2] += x.shape[0]
        if self.mode == "instant":
            return normalize(x, mu, var, gamma, delta, self.epsilon)
        if self.mode != "aligned":
            raise DomainError(f"unknown normalisation mode {self.mode!r}")
        if self.stats is None or name not in self.stats:
            raise DomainError(f"no aligned statistics for layer {name!r}")
        s = self.stats[name]
        return normalize(x, s.mu, s.sigma2, gamma, delta, self.epsilon)


class AlignedNorm(nn.Module):
    """Layer normalisation whose statistics come from a :class:`FeatureAligner`."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.delta = nn.Parameter(torch.zeros(channels))
        self.layer_name = ""
        self.aligner: Optional[FeatureAligner] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.aligner is None:
            dims = tuple(range(1, x.dim()))
            var, mu = torch.var_mean(x, dim=dims, unbiased=False, keepdim=True)
            return normalize(x, mu, var, self.gamma, self.delta)
        return self.aligner.apply(self.layer_name, x, self.gamma, self.delta)


class SourceStatsEMA:
    """Exponential moving average of per-batch statistics (the source statistics)."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.value: Optional[FeatureStats] = None

    def update(self, batch_stats: FeatureStats) -> None:
        if self.value is None:
            self.value = batch_stats.copy()
            return
        self.value = align_stats(self.value, batch_stats, 1.0 - self.decay)


def write_stats_csv(path, rows: Iterable[Tuple[int, FeatureStats]]) -> None:
    """Log aligned statistics as ``window,layer,mu,sigma2`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "layer", "mu", "sigma2"])
        for i, stats in rows:
            for name, s in stats.items():
                w.writerow([i, name, repr(s.mu), repr(s.sigma2)])

