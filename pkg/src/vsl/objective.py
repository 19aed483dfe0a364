"""Training objective: reconstruction, KL regularization, latent regression.

The optimized scalar is the negative evidence bound plus the image-latent
penalty: total = -rec + delta * reg + gamma * lat, minimized. rec is the
Bernoulli log-likelihood summed over voxels, reg the closed-form KL of the
latent chain, lat the squared error between regressed and inferred latents.
"""

from dataclasses import dataclass

import torch

from .errors import ShapeError
from .latent_hierarchy import GaussianParams

PROB_EPS = 1e-7  # predicted probabilities clamped away from {0, 1}


@dataclass
class ObjectiveConfig:
    delta: float = 1e-3
    gamma: float = 0.0

    def __post_init__(self):
        if self.delta < 0 or self.gamma < 0:
            raise ValueError(
                f"weights must be >= 0, got delta={self.delta}, gamma={self.gamma}"
            )


@dataclass
class ObjectiveBreakdown:
    """Scalar terms of one objective evaluation; total is what is minimized."""

    rec: torch.Tensor
    reg: torch.Tensor
    lat: torch.Tensor
    total: torch.Tensor


def reconstruction_term(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Bernoulli log-likelihood sum_voxels [x log p + (1-x) log(1-p)].

    Summed per sample, averaged over the batch; higher is better. x_hat is
    clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(
            f"target shape {tuple(x.shape)} != prediction shape {tuple(x_hat.shape)}"
        )
    p = torch.clamp(x_hat, PROB_EPS, 1.0 - PROB_EPS)
    ll = x * torch.log(p) + (1.0 - x) * torch.log(1.0 - p)
    per_sample = ll.reshape(ll.shape[0], -1).sum(dim=1)
    return per_sample.mean()


def kl_to_standard_normal(q: GaussianParams) -> torch.Tensor:
    """KL(q || N(0, I)) for diagonal q, summed over dims, batch-averaged."""
    var = torch.exp(q.log_var)
    per_dim = 0.5 * (q.mu * q.mu + var - 1.0 - q.log_var)
    return per_dim.reshape(per_dim.shape[0], -1).sum(dim=1).mean()


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over dims, batch-averaged."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError(
            f"q shape {tuple(q.mu.shape)} != p shape {tuple(p.mu.shape)}"
        )
    var_q = torch.exp(q.log_var)
    var_p = torch.exp(p.log_var)
    diff = q.mu - p.mu
    per_dim = 0.5 * (p.log_var - q.log_var + (var_q + diff * diff) / var_p - 1.0)
    return per_dim.reshape(per_dim.shape[0], -1).sum(dim=1).mean()


def regularization_term(posterior_params, prior_params) -> torch.Tensor:
    """KL(q(z0)||N(0,I)) plus the KLs of each local posterior to its
    conditional prior. posterior_params lists z0 first, so it has one more
    entry than prior_params."""
    if len(posterior_params) != len(prior_params) + 1:
        raise ShapeError(
            f"{len(posterior_params)} posteriors need {len(posterior_params) - 1} "
            f"priors, got {len(prior_params)}"
        )
    total = kl_to_standard_normal(posterior_params[0])
    for q, p in zip(posterior_params[1:], prior_params):
        total = total + kl_diag_gaussians(q, p)
    return total


def latent_term(z_pred: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per sample between regressed and inferred latents,
    batch-averaged. The target side carries no gradient."""
    if z_pred.shape != z_target.shape:
        raise ShapeError(
            f"predicted latent {tuple(z_pred.shape)} != target {tuple(z_target.shape)}"
        )
    diff = z_pred - z_target.detach()
    return (diff * diff).reshape(diff.shape[0], -1).sum(dim=1).mean()


def warmup_gamma(epoch: int) -> float:
    """Image-branch weight schedule over epochs: 1e-8 rising one decade per
    10 epochs through epoch 50, then 1e-3 stepping up to the final 5e-3 at
    epoch 100."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch <= 50:
        return 10.0 ** (epoch // 10 - 8)
    if epoch < 100:
        return ((epoch - 40) // 10) * 1e-3
    return 5e-3


def total_objective(x, x_hat, posterior_params, prior_params,
                    config: ObjectiveConfig, z_pred=None, z_target=None
                    ) -> ObjectiveBreakdown:
    """Assemble total = -rec + delta * reg + gamma * lat.

    The latent term is included only when both z_pred and z_target are given;
    otherwise lat is reported as zero and gamma has no effect.
    """
    rec = reconstruction_term(x, x_hat)
    reg = regularization_term(posterior_params, prior_params)
    if z_pred is not None and z_target is not None:
        lat = latent_term(z_pred, z_target)
    else:
        lat = torch.zeros((), dtype=rec.dtype, device=rec.device)
    total = -rec + config.delta * reg + config.gamma * lat
    return ObjectiveBreakdown(rec=rec, reg=reg, lat=lat, total=total)
