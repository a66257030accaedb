"""Latent priors: fixed Gaussian, Gaussian mixture and additive Gaussian.

KL terms are built from ``numcore`` ops so they can sit inside the training
graph; call ``float()`` on the result for a plain number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import numcore as nc

PRIOR_KINDS = ("fixed", "gmm", "additive")


class ClusterVector:
    """Nonnegative weights over K content categories, normalized to sum 1."""

    __slots__ = ("weights",)

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("cluster weights must be finite and nonnegative")
        s = w.sum()
        if s <= 0:
            raise ValueError("cluster vector with all-zero weights cannot be normalized")
        w = w / s
        w.setflags(write=False)
        self.weights = w

    @classmethod
    def one_hot(cls, k, K):
        w = np.zeros(K)
        w[k] = 1.0
        return cls(w)

    def __len__(self):
        return len(self.weights)

    def __eq__(self, other):
        return isinstance(other, ClusterVector) and np.array_equal(self.weights, other.weights)

    def __repr__(self):
        return f"ClusterVector({np.round(self.weights, 4).tolist()})"


@dataclass(frozen=True)
class PriorSpec:
    kind: str
    means: np.ndarray  # K x d, unit-norm rows; zeros for the fixed prior
    stds: np.ndarray  # K
    latent_dim: int

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if np.any(self.stds <= 0):
            raise ValueError("prior standard deviations must be positive")
        self.means.setflags(write=False)
        self.stds.setflags(write=False)

    @property
    def K(self):
        return self.means.shape[0]

    def __eq__(self, other):
        return (isinstance(other, PriorSpec) and self.kind == other.kind
                and self.latent_dim == other.latent_dim
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.stds, other.stds))

    def to_dict(self):
        return {"kind": self.kind, "latent_dim": self.latent_dim,
                "means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.array(d["means"], dtype=np.float64),
                   np.array(d["stds"], dtype=np.float64), int(d["latent_dim"]))


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian; fields are graph nodes (constants when built from arrays)."""
    mu: nc.Node
    log_var: nc.Node

    @classmethod
    def from_arrays(cls, mu, log_var):
        return cls(nc.constant(np.asarray(mu, dtype=np.float64).reshape(1, -1)),
                   nc.constant(np.asarray(log_var, dtype=np.float64).reshape(1, -1)))

    @property
    def dim(self):
        return self.mu.value.size

    def mean(self):
        return self.mu.value.reshape(-1)

    def std(self):
        return np.exp(0.5 * self.log_var.value.reshape(-1))


@dataclass
class LatentSample:
    z: np.ndarray
    component: Optional[int] = field(default=None)


def init_prior(kind, K, d, sigma, seed):
    """Means drawn on the unit sphere (fixed prior: zero mean), all stds = sigma."""
    if K < 1 or d < 1 or not sigma > 0:
        raise ValueError("init_prior needs K >= 1, d >= 1, sigma > 0")
    if kind not in PRIOR_KINDS:
        raise ValueError(f"unknown prior kind {kind!r}")
    if kind == "fixed":
        return PriorSpec(kind, np.zeros((1, d)), np.array([float(sigma)]), d)
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((K, d))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return PriorSpec(kind, m, np.full(K, float(sigma)), d)


def _check_c(spec, c):
    if len(c) != spec.K:
        raise ValueError(f"cluster vector has length {len(c)}, prior has K={spec.K}")


def additive_prior_params(spec, c):
    """Mean sum_k c_k mu_k and spherical variance sum_k c_k^2 sigma_k^2."""
    if spec.kind != "additive":
        raise ValueError("additive_prior_params needs an additive prior")
    _check_c(spec, c)
    w = c.weights
    return w @ spec.means, float(np.sum(w * w * spec.stds ** 2))


def gaussian_kl(q, prior_mu, prior_var):
    """KL(q || N(prior_mu, diag(prior_var))) summed over dimensions, as a graph node.

    ``prior_var`` is a scalar (isotropic prior) or one variance per dimension.
    """
    prior_mu = np.asarray(prior_mu, dtype=np.float64).reshape(q.mu.shape)
    if not np.all(np.isfinite(q.mu.value)) or not np.all(np.isfinite(q.log_var.value)):
        raise nc.NumericError("non-finite posterior parameters")
    var = np.broadcast_to(np.asarray(prior_var, dtype=np.float64), q.mu.shape)
    if np.any(var <= 0):
        raise nc.DomainError("prior variance must be positive")
    diff = nc.sub(q.mu, prior_mu)
    quad = nc.add(nc.exp(q.log_var), nc.square(diff))
    per_dim = nc.sub(nc.mul(quad, nc.constant(0.5 / var)), nc.mul(q.log_var, 0.5))
    return nc.add(nc.total(per_dim), 0.5 * float(np.sum(np.log(var) - 1.0)))


def kl_ag(q, spec, c):
    mu, var = additive_prior_params(spec, c)
    return gaussian_kl(q, mu, var)


def kl_gmm_component(q, spec, k):
    if spec.kind != "gmm":
        raise ValueError("kl_gmm_component needs a gmm prior")
    if not 0 <= k < spec.K:
        raise IndexError(f"component {k} out of range for K={spec.K}")
    return gaussian_kl(q, spec.means[k], float(spec.stds[k]) ** 2)


def kl_fixed(q, spec):
    if spec.kind != "fixed":
        raise ValueError("kl_fixed needs a fixed prior")
    return gaussian_kl(q, np.zeros(spec.latent_dim), float(spec.stds[0]) ** 2)


def sample_gmm_component(c, rng):
    return int(rng.choice(len(c), p=c.weights))


def sample_prior(spec, c, test_std, rng):
    if not test_std > 0:
        raise ValueError("test_std must be positive")
    eps = rng.standard_normal(spec.latent_dim) * test_std
    if spec.kind == "fixed":
        return LatentSample(eps)
    _check_c(spec, c)
    if spec.kind == "gmm":
        k = sample_gmm_component(c, rng)
        return LatentSample(spec.means[k] + eps, k)
    return LatentSample(c.weights @ spec.means + eps)


# ---------------------------------------------------------------------------
# density evaluators and the Monte-Carlo KL check


def diag_gaussian_logpdf(z, mu, var):
    """Row-wise log N(z | mu, diag(var)); ``var`` scalar or per-dimension."""
    z = np.atleast_2d(z)
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), z.shape[-1:])
    return -0.5 * (np.sum((z - mu) ** 2 / var, axis=1) + np.sum(np.log(2 * np.pi * var)))


def gaussian_log_density(mu, var) -> Callable[[np.ndarray], np.ndarray]:
    return lambda z: diag_gaussian_logpdf(z, mu, var)


def mixture_log_density(spec, c) -> Callable[[np.ndarray], np.ndarray]:
    """log sum_k c_k N(z | mu_k, sigma_k^2 I), the full mixture density."""
    active = np.flatnonzero(c.weights > 0)

    def logp(z):
        terms = np.stack([math.log(c.weights[k]) + diag_gaussian_logpdf(z, spec.means[k], spec.stds[k] ** 2)
                          for k in active])
        m = terms.max(axis=0)
        return m + np.log(np.exp(terms - m).sum(axis=0))

    return logp


def prior_log_density(spec, c):
    if spec.kind == "fixed":
        return gaussian_log_density(np.zeros(spec.latent_dim), spec.stds[0] ** 2)
    if spec.kind == "gmm":
        return mixture_log_density(spec, c)
    mu, var = additive_prior_params(spec, c)
    return gaussian_log_density(mu, var)


def mc_kl_oracle(q, log_p, n, rng, chunk=200_000):
    """Average of log q(z) - log p(z) over ``n`` draws z ~ q."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mu, var = q.mean(), np.exp(q.log_var.value.reshape(-1))
    sd = np.sqrt(var)
    acc = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        z = mu + sd * rng.standard_normal((m, mu.size))
        diff = diag_gaussian_logpdf(z, mu, var) - log_p(z)
        if not np.all(np.isfinite(diff)):
            raise nc.NumericError("non-finite density value in Monte-Carlo KL")
        acc += diff.sum()
        done += m
    return acc / n
