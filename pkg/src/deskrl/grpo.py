"""Group-relative advantages, decoupled-clip surrogate and the k3 KL estimator.

All functions are pure. Per-token derivatives are taken with respect to the
log-probability of the sampled token under the current policy; the policy
module turns them into parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGroup, ShapeMismatch


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.eps_low < 1.0:
            raise ValueError(f"eps_low must lie in (0, 1), got {self.eps_low}")
        if self.eps_high <= 0.0:
            raise ValueError(f"eps_high must be positive, got {self.eps_high}")


@dataclass(frozen=True)
class KlConfig:
    beta: float = 1e-3

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")


@dataclass(frozen=True)
class AdvantageSet:
    advantages: np.ndarray
    mean: float
    std: float


def compute_advantages(rewards):
    """Standardise a group's rewards with the population standard deviation."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("a group needs at least two rewards")
    mean = r.mean()
    centred = r - mean
    std = np.sqrt(np.mean(centred * centred))
    # relative threshold so float noise on a constant group still counts as degenerate
    if std <= 1e-12 * max(1.0, np.abs(r).max()):
        raise DegenerateGroup(f"zero reward variance in group (mean {mean})")
    return AdvantageSet(centred / std, float(mean), float(std))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def importance_ratio(logp_new, logp_old):
    new, old = _pair(logp_new, logp_old)
    return np.exp(new - old)


def clipped_surrogate(ratios, advantage, clip):
    """Per-token ``min(r*A, clip(r, 1-eps_low, 1+eps_high)*A)`` and its derivative.

    The derivative with respect to ``log pi`` is ``r*A`` where the unclipped
    branch is selected (ties included) and 0 elsewhere.
    """
    r = np.asarray(ratios, dtype=np.float64)
    adv = np.broadcast_to(np.asarray(advantage, dtype=np.float64), r.shape)
    unclipped = r * adv
    clipped = np.clip(r, 1.0 - clip.eps_low, 1.0 + clip.eps_high) * adv
    take_unclipped = unclipped <= clipped
    value = np.where(take_unclipped, unclipped, clipped)
    deriv = np.where(take_unclipped, unclipped, 0.0)
    return value, deriv


def kl_k3(logp_theta, logp_ref):
    """k3 estimator ``rho - log rho - 1`` with ``rho = pi_ref / pi_theta``."""
    theta, ref = _pair(logp_theta, logp_ref)
    log_rho = ref - theta
    rho = np.exp(log_rho)
    value = rho - log_rho - 1.0
    return value, 1.0 - rho


def assemble_loss(surrogate, kl, klcfg, token_count=None):
    """Token-mean loss ``-mean(surrogate) + beta * mean(kl)`` and per-token derivatives.

    ``surrogate`` and ``kl`` are ``(values, derivs)`` pairs over the same
    tokens. ``token_count`` defaults to the number of tokens supplied.
    """
    s_val, s_der = (np.asarray(x, dtype=np.float64) for x in surrogate)
    k_val, k_der = (np.asarray(x, dtype=np.float64) for x in kl)
    if not (s_val.shape == s_der.shape == k_val.shape == k_der.shape):
        raise ShapeMismatch("surrogate and KL token counts differ")
    n = s_val.size if token_count is None else token_count
    if n <= 0:
        raise ValueError("token count must be positive")
    beta = klcfg.beta
    loss = -s_val.sum() / n + beta * k_val.sum() / n
    derivs = (-s_der + beta * k_der) / n
    return float(loss), derivs
