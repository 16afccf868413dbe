"""Training objective: cross-entropy distortion, KL rate, penalties, and the
binned mutual-information diagnostic.

All information quantities are in nats.  The total loss is composed exactly
as  J = D + beta * R + lambda * penalty + omega1 * l1 + omega2 * l2,  with
every component reported separately so rate-distortion points can be logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .model import FingerprintNet, constraint_penalty

log = logging.getLogger(__name__)

CE_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the loss terms: IB beta, constraint lambda, L1/L2 omegas."""

    beta: float = 1e-3
    lam: float = 1.0
    omega1: float = 1e-4
    omega2: float = 1e-4

    def __post_init__(self):
        if min(self.beta, self.lam, self.omega1, self.omega2) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    """All loss components plus their exact composition."""

    distortion: torch.Tensor
    rate: torch.Tensor
    penalty: torch.Tensor
    l1: torch.Tensor
    l2: torch.Tensor
    total: torch.Tensor

    def scalars(self) -> dict[str, float]:
        return {"D": float(self.distortion), "R": float(self.rate),
                "penalty": float(self.penalty), "l1": float(self.l1),
                "l2": float(self.l2), "J": float(self.total)}

    def log_record(self, step: int, beta: float) -> dict:
        """One JSON-lines record per logging step."""
        rec = {"step": step, "beta": beta}
        rec.update(self.scalars())
        return rec


def rate_kl(mean: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """KL[N(mu, diag(sigma^2)) || N(0, I)] in nats, summed over the last axis.

    Closed form 0.5 * sum(mu^2 + sigma^2 - ln sigma^2 - 1); zero exactly at
    the prior (mu=0, sigma=1).
    """
    if not bool((scale > 0).all()):
        raise ValueError("scale must be strictly positive")
    var = scale.square()
    return 0.5 * (mean.square() + var - torch.log(var) - 1.0).sum(dim=-1)


def distortion_ce(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class, in nats.

    Probabilities below 1e-12 are floored (and flagged in the log) so a
    confidently wrong decoder cannot produce an infinite loss.
    """
    if probabilities.dim() == 1:
        probabilities = probabilities.unsqueeze(0)
    labels = torch.as_tensor(labels, device=probabilities.device).reshape(-1)
    if int(labels.max()) >= probabilities.shape[-1]:
        raise ValueError("label out of range for the probability vector")
    picked = probabilities.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if bool((picked < CE_PROB_FLOOR).any()):
        log.warning("distortion_ce: %d probabilities clamped to the 1e-12 floor",
                    int((picked < CE_PROB_FLOOR).sum()))
        picked = picked.clamp_min(CE_PROB_FLOOR)
    return -torch.log(picked).mean()


def total_loss(net: FingerprintNet, patches: torch.Tensor, labels: torch.Tensor,
               weights: LossWeights, generator: torch.Generator | None = None,
               noise: torch.Tensor | None = None, z_samples: int = 1) -> LossBreakdown:
    """Full training loss on one batch.

    `noise`, when given, fixes the reparameterization draw (used by gradient
    checks); otherwise `z_samples` standard-normal draws come from `generator`.
    """
    if patches.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if z_samples < 1:
        raise ValueError("z_samples must be >= 1")
    mu, sigma = net(patches)

    if noise is not None:
        draws = [noise]
    else:
        draws = [torch.randn(mu.shape, generator=generator, dtype=mu.dtype,
                             device=mu.device) for _ in range(z_samples)]
    ce_terms = []
    for eps in draws:
        z = mu + sigma * eps
        ce_terms.append(distortion_ce(net.decode(z), labels))
    distortion = torch.stack(ce_terms).mean()

    rate = rate_kl(mu, sigma).mean()
    penalty = constraint_penalty(net.constrained.weight)
    params = [p for p in net.parameters() if p.requires_grad]
    l1 = torch.stack([p.abs().sum() for p in params]).sum()
    l2 = torch.stack([p.square().sum() for p in params]).sum()

    total = (distortion + weights.beta * rate + weights.lam * penalty
             + weights.omega1 * l1 + weights.omega2 * l2)
    return LossBreakdown(distortion=distortion, rate=rate, penalty=penalty,
                         l1=l1, l2=l2, total=total)


# ---------------------------------------------------------------------------
# Binned (plug-in) mutual information: the numerically expensive baseline,
# kept as an offline diagnostic.

@dataclass(frozen=True)
class BinningConfig:
    """Histogram layout: bins per dimension and optional value ranges."""

    num_bins: int = 16
    x_range: tuple[float, float] | None = None
    z_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")


def _digitize(values: np.ndarray, num_bins: int, rng: tuple[float, float] | None) -> np.ndarray:
    """Map (N,) or (N, D) values onto a single discrete label per sample."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    lo, hi = rng if rng is not None else (v.min(), v.max())
    if not (np.all(v >= lo) and np.all(v <= hi)):
        raise ValueError("samples fall outside the configured value range")
    if hi <= lo:
        return np.zeros(v.shape[0], dtype=np.int64)
    idx = np.minimum((num_bins * (v - lo) / (hi - lo)).astype(np.int64), num_bins - 1)
    flat = np.zeros(v.shape[0], dtype=np.int64)
    for d in range(v.shape[1]):
        flat = flat * num_bins + idx[:, d]
    return flat


def binned_mi(samples_x: np.ndarray, samples_z: np.ndarray,
              config: BinningConfig = BinningConfig()) -> float:
    """Plug-in MI estimate (nats) from the joint histogram of quantized samples.

    Nonnegative by construction and invariant under any relabeling of the
    bins of either variable.
    """
    x = np.asarray(samples_x)
    z = np.asarray(samples_z)
    if x.shape[0] == 0 or z.shape[0] == 0:
        raise ValueError("empty sample set")
    if x.shape[0] != z.shape[0]:
        raise ValueError("samples_x and samples_z must have equal counts")

    xi = _digitize(x, config.num_bins, config.x_range)
    zi = _digitize(z, config.num_bins, config.z_range)
    # Compact the label sets before building the contingency table.
    _, xi = np.unique(xi, return_inverse=True)
    _, zi = np.unique(zi, return_inverse=True)
    nx, nz = int(xi.max()) + 1, int(zi.max()) + 1
    joint = np.bincount(xi * nz + zi, minlength=nx * nz).reshape(nx, nz).astype(np.float64)
    joint /= joint.sum()
    px = joint.sum(axis=1)
    pz = joint.sum(axis=0)
    nzmask = joint > 0
    ratio = joint[nzmask] / (px[:, None] * pz[None, :])[nzmask]
    mi = float(np.sum(joint[nzmask] * np.log(ratio)))
    return max(mi, 0.0)
