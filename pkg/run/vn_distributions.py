"""
Diagonal Gaussians parametrized by mean and log-variance. All densities are in nats.
"""
import math
from dataclasses import dataclass

import numpy as np

from vn_autodiff import Tensor
from vn_errors import ShapeError


LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    """Per-element mean and log-variance; variance = exp(log_var) is positive by construction."""
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ in shape")

    @property
    def shape(self):
        return self.mu.shape


def _per_sample(t):
    return t.reshape(t.shape[0], -1).sum(axis=1)


def diag_gaussian_log_prob(y, p):
    """
    log N(y; mu, diag(exp(log_var))) summed over every non-batch axis -> [N].

    -1/2 sum(log_var) - 1/2 sum((y - mu)^2 / var) - D/2 log(2 pi)
    """
    if y.shape != p.mu.shape:
        raise ShapeError(f"y {y.shape} does not match Gaussian shape {p.mu.shape}")
    d = int(np.prod(y.shape[1:]))
    diff = y - p.mu
    quad = diff.square() * (-p.log_var).exp()
    return _per_sample(p.log_var + quad) * -0.5 - 0.5 * d * LOG_2PI


def standard_normal_log_prob(y):
    d = int(np.prod(y.shape[1:]))
    return _per_sample(y.square()) * -0.5 - 0.5 * d * LOG_2PI


def kl_to_standard_normal(q):
    """KL(N(mu, var) || N(0, I)) = 1/2 sum(mu^2 + var - 1 - log var), per sample."""
    inner = q.mu.square() + q.log_var.exp() - 1.0 - q.log_var
    return _per_sample(inner) * 0.5


def reparam_sample(p, rng):
    """mu + exp(log_var / 2) * eps, eps ~ N(0, I). eps is a constant, so gradients reach mu and log_var only."""
    eps = Tensor(rng.standard_normal(p.mu.shape), dtype=p.mu.dtype)
    return p.mu + (p.log_var * 0.5).exp() * eps


def sample(p, rng):
    """Plain (non-differentiable) draw as an ndarray."""
    eps = rng.standard_normal(p.mu.shape)
    return p.mu.data + np.exp(0.5 * p.log_var.data) * eps
