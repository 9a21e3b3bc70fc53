"""Diagonal-Gaussian latent machinery.

The prior and posterior are isotropic Gaussians N(mu, sigma^2 I) whose
mean and log-sigma come from separate linear heads over the shared
pooled encoder vector.  KL between two diagonal Gaussians is analytic
and stays on the tape, so it can be trained directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0


class LatentSource(str, Enum):
    PRIOR_SAMPLE = "prior-sample"
    POSTERIOR_SAMPLE = "posterior-sample"
    PRIOR_MEAN = "prior-mean"
    POSTERIOR_MEAN = "posterior-mean"
    EXTERNAL = "external"


@dataclass
class DiagonalGaussian:
    """Mean and log-sigma vectors, both of width d', both on the tape."""

    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape or self.mu.data.ndim != 1:
            raise ag.ShapeError(
                f"gaussian needs matching vectors, got {self.mu.shape} and {self.log_sigma.shape}"
            )

    @property
    def width(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def standard(cls, width: int, dtype=np.float32) -> "DiagonalGaussian":
        return cls(Tensor(np.zeros(width, dtype=dtype)), Tensor(np.zeros(width, dtype=dtype)))


@dataclass
class LatentCode:
    """A single latent vector plus where it came from."""

    z: Tensor
    source: LatentSource

    def __post_init__(self):
        if not np.isfinite(self.z.data).all():
            raise ag.NumericsError("latent code has non-finite entries")

    @property
    def width(self) -> int:
        return self.z.shape[0]

    @classmethod
    def external(cls, values, dtype=np.float32) -> "LatentCode":
        return cls(Tensor(np.asarray(values, dtype=dtype)), LatentSource.EXTERNAL)


def gaussian_head(pooled: Tensor, mu_w: Tensor, mu_b: Tensor, ls_w: Tensor, ls_b: Tensor) -> DiagonalGaussian:
    """Project a pooled encoder vector to a clamped diagonal Gaussian.

    log-sigma is clamped to [-20, 2] after the head so an unlucky init or a
    large pooled activation cannot blow up the KL term early in training.
    """
    mu = ag.add(ag.matmul(pooled, mu_w), mu_b)
    log_sigma = ag.clamp(ag.add(ag.matmul(pooled, ls_w), ls_b), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return DiagonalGaussian(mu, log_sigma)


def reparameterize(g: DiagonalGaussian, noise: np.ndarray, source: LatentSource) -> LatentCode:
    """z = mu + exp(log_sigma) * noise, keeping gradients to both head outputs."""
    noise = np.asarray(noise, dtype=g.mu.data.dtype)
    if noise.shape != g.mu.shape:
        raise ag.ShapeError(f"noise shape {noise.shape} does not match latent width {g.mu.shape}")
    z = ag.add(g.mu, ag.mul(ag.exp(g.log_sigma), Tensor(noise)))
    return LatentCode(z, source)


def mean_code(g: DiagonalGaussian, source: LatentSource) -> LatentCode:
    return LatentCode(g.mu, source)


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) in nats for diagonal Gaussians; scalar on the tape.

    Per coordinate: (2(log sp - log sq) + (sq^2 + (mq - mp)^2) / sp^2 - 1) / 2.
    """
    if q.width != p.width:
        raise ag.ShapeError(f"KL widths differ: {q.width} vs {p.width}")
    log_ratio = ag.sub(p.log_sigma, q.log_sigma)
    var_q = ag.exp(ag.mul_scalar(q.log_sigma, 2.0))
    inv_var_p = ag.exp(ag.mul_scalar(p.log_sigma, -2.0))
    diff = ag.sub(q.mu, p.mu)
    quad = ag.mul(ag.add(var_q, ag.mul(diff, diff)), inv_var_p)
    per_coord = ag.add_scalar(ag.add(ag.mul_scalar(log_ratio, 2.0), quad), -1.0)
    return ag.mul_scalar(ag.sum_all(per_coord), 0.5)


def kl_monte_carlo(q_mu, q_log_sigma, p_mu, p_log_sigma, n_samples: int, rng: np.random.Generator):
    """Monte Carlo estimate of KL(q || p) with its standard error.

    Independent of the analytic path: draws z ~ q and averages
    log q(z) - log p(z) directly from the Gaussian densities.
    """
    q_mu = np.asarray(q_mu, dtype=np.float64)
    q_ls = np.asarray(q_log_sigma, dtype=np.float64)
    p_mu = np.asarray(p_mu, dtype=np.float64)
    p_ls = np.asarray(p_log_sigma, dtype=np.float64)
    eps = rng.standard_normal((n_samples, q_mu.shape[0]))
    z = q_mu + np.exp(q_ls) * eps
    log_q = -0.5 * (((z - q_mu) * np.exp(-q_ls)) ** 2).sum(axis=1) - q_ls.sum()
    log_p = -0.5 * (((z - p_mu) * np.exp(-p_ls)) ** 2).sum(axis=1) - p_ls.sum()
    diffs = log_q - log_p
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(n_samples))
