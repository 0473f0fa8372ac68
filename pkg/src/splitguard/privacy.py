"""Clipping + Laplace mechanism and an empirical check of its epsilon-DP bound.

The mechanism releases ``clip(x) + Lap(0, 2T/eps)`` where ``clip`` rescales the
whole sample so its largest absolute entry is at most ``T``.  Any two clipped
entries differ by at most ``2T``, so per entry the density ratio of the two
outputs is bounded by ``exp(eps)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError

# Smallest uniform draw fed to the inverse CDF; keeps log() finite.
_U_FLOOR = 1e-300


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float = 1.0
    threshold: float = 20.0

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (self.threshold > 0 and math.isfinite(self.threshold)):
            raise ConfigError(f"threshold must be positive and finite, got {self.threshold}")

    @property
    def scale(self) -> float:
        """Laplace scale b = 2T/eps."""
        return 2.0 * self.threshold / self.epsilon

    def to_dict(self):
        return {"epsilon": self.epsilon, "threshold": self.threshold}


def clip_global_max(x, T: float) -> np.ndarray:
    """Return ``x / max(1, max|x| / T)``.

    The whole array is rescaled by one positive factor, so signs and ratios
    between entries are preserved and the output's max-norm is ``min(max|x|, T)``.
    """
    if T <= 0:
        raise ConfigError(f"threshold must be positive, got {T}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("clip_global_max received non-finite input")
    if x.size == 0:
        return x.copy()
    return x / max(1.0, float(np.max(np.abs(x))) / T)


def clip_per_sample(x: torch.Tensor, T: float) -> torch.Tensor:
    """Batched torch version of :func:`clip_global_max`; dim 0 indexes samples."""
    flat = x.reshape(x.shape[0], -1)
    norm = flat.abs().amax(dim=1)
    divisor = torch.clamp(norm / T, min=1.0)
    return x / divisor.reshape((-1,) + (1,) * (x.dim() - 1))


def _laplace_from_uniform(u, b):
    # u in [0, 1) -> centred in [-0.5, 0.5); inverse CDF of Laplace(0, b)
    c = u - 0.5
    return -b * np.sign(c) * np.log(np.maximum(1.0 - 2.0 * np.abs(c), _U_FLOOR))


def laplace_noise(shape, b: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Laplace(0, b) samples by inverse CDF of ``rng.random``."""
    if b <= 0:
        raise ConfigError(f"Laplace scale must be positive, got {b}")
    return _laplace_from_uniform(rng.random(shape), b)


def laplace_like(x: torch.Tensor, b: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Laplace(0, b) noise with the shape, dtype and device of ``x``."""
    u = torch.rand(x.shape, generator=generator, dtype=torch.float64, device=x.device)
    c = u - 0.5
    noise = -b * torch.sign(c) * torch.log(torch.clamp(1.0 - 2.0 * c.abs(), min=_U_FLOOR))
    return noise.to(x.dtype)


def scalar_mechanism(x: float, T: float, epsilon: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent releases of a single scalar through clip + noise."""
    clipped = float(clip_global_max(np.array([x]), T)[0])
    return clipped + laplace_noise(n, 2.0 * T / epsilon, rng)


@dataclass
class DpTestReport:
    epsilon_claimed: float
    epsilon_empirical: float
    num_samples: int
    num_bins: int
    bins_used: int
    slack: float
    status: str  # "pass" | "fail" | "inconclusive"
    threshold: float = 0.0
    x: float = 0.0
    x_hat: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self):
        d = asdict(self)
        d["pass"] = self.passed
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def dp_ratio_test(
    T: float,
    epsilon: float,
    x: float,
    x_hat: float,
    n_samples: int = 1_000_000,
    n_bins: int = 50,
    *,
    min_count: int = 100,
    slack: float = 0.15,
    seed: int = 0,
) -> DpTestReport:
    """Histogram both output distributions and report the worst log density ratio.

    Bin edges are quantiles of the pooled sample so every bin carries roughly
    the same mass.  Only bins where both histograms reach ``min_count`` are
    scored.
    """
    PrivacyConfig(epsilon=epsilon, threshold=T)
    if n_samples < 1 or n_bins < 2:
        raise ConfigError("need n_samples >= 1 and n_bins >= 2")
    rng = np.random.default_rng(seed)
    a = scalar_mechanism(x, T, epsilon, n_samples, rng)
    b = scalar_mechanism(x_hat, T, epsilon, n_samples, rng)

    pooled = np.concatenate([a, b])
    edges = np.unique(np.quantile(pooled, np.linspace(0.0, 1.0, n_bins + 1)))
    edges[0], edges[-1] = -np.inf, np.inf
    ca, _ = np.histogram(a, edges)
    cb, _ = np.histogram(b, edges)
    ok = (ca >= min_count) & (cb >= min_count)
    if not ok.any():
        return DpTestReport(epsilon, float("nan"), n_samples, n_bins, 0, slack, "inconclusive", T, x, x_hat)
    # equal sample sizes, so count ratio == density ratio within a bin
    ratios = np.abs(np.log(ca[ok] / cb[ok]))
    eps_emp = float(ratios.max())
    status = "pass" if eps_emp <= epsilon * (1.0 + slack) else "fail"
    return DpTestReport(epsilon, eps_emp, n_samples, n_bins, int(ok.sum()), slack, status, T, x, x_hat)


def analytic_log_ratio(y, x, x_hat, T, epsilon):
    """Exact log density ratio of the scalar mechanism at outputs ``y``."""
    cx = float(clip_global_max(np.array([x]), T)[0])
    ch = float(clip_global_max(np.array([x_hat]), T)[0])
    y = np.asarray(y, dtype=np.float64)
    return (np.abs(y - ch) - np.abs(y - cx)) * epsilon / (2.0 * T)
