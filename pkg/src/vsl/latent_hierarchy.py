"""Skip-connected chain of latent codes.

A global code z0 commands n local codes z1..zn. Inference conditions every
local code on the shared encoder features, z0, and the previous local code;
the generative priors condition on z0 and the previous code only. Codes are
concatenated as [z0, z1, ..., zn] into the flat latent vector.
"""

from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ShapeError
from .nn_primitives import Linear, relu

HIDDEN_WIDTH = 100  # local inference/prior networks: two hidden layers this wide
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class HierarchyConfig:
    """n_local local codes of d_local dims each, commanded by a d_global code."""

    n_local: int = 5
    d_local: int = 10
    d_global: int = 20

    def __post_init__(self):
        if self.n_local < 1 or self.d_local < 1 or self.d_global < 1:
            raise ShapeError(
                f"hierarchy sizes must be >= 1, got n={self.n_local}, "
                f"d_local={self.d_local}, d_global={self.d_global}"
            )

    @property
    def total_dim(self) -> int:
        return self.d_global + self.n_local * self.d_local


@dataclass
class GaussianParams:
    """Diagonal Gaussian as mean and log-variance tensors of equal shape."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ShapeError(
                f"mu shape {tuple(self.mu.shape)} != log_var shape "
                f"{tuple(self.log_var.shape)}"
            )

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


def clamp_log_var(log_var: torch.Tensor) -> torch.Tensor:
    return torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


def reparameterize(params: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """sample = mu + exp(0.5 * log_var) * noise; differentiable in mu, log_var."""
    if noise.shape != params.mu.shape:
        raise ShapeError(
            f"noise shape {tuple(noise.shape)} != mu shape {tuple(params.mu.shape)}"
        )
    return params.mu + params.std * noise


@dataclass
class LatentState:
    """One sampled pass through the hierarchy.

    z is always the concatenation [z0, z1, ..., zn]; posterior_params lists
    the inference Gaussians (z0 first), prior_params the conditional prior
    Gaussians for the local codes (filled in by PriorChain).
    """

    z0: torch.Tensor
    local_codes: list = field(default_factory=list)
    z: torch.Tensor | None = None
    posterior_params: list = field(default_factory=list)
    prior_params: list | None = None


def concat_codes(z0: torch.Tensor, local_codes) -> torch.Tensor:
    return torch.cat([z0, *local_codes], dim=-1)


def split_latent(z: torch.Tensor, config: HierarchyConfig):
    """Inverse of concat_codes; returns (z0, [z1..zn])."""
    if z.shape[-1] != config.total_dim:
        raise ShapeError(f"latent length {z.shape[-1]} != total_dim {config.total_dim}")
    z0 = z[..., : config.d_global]
    locals_ = [
        z[..., config.d_global + i * config.d_local : config.d_global + (i + 1) * config.d_local]
        for i in range(config.n_local)
    ]
    return z0, locals_


class GaussianHead(nn.Module):
    """MLP trunk (optional) plus an affine head emitting clamped (mu, log_var)."""

    def __init__(self, in_dim, out_dim, generator=None, hidden_layers=2):
        super().__init__()
        trunk = []
        width = in_dim
        for _ in range(hidden_layers):
            trunk.append(Linear(width, HIDDEN_WIDTH, generator))
            width = HIDDEN_WIDTH
        self.trunk = nn.ModuleList(trunk)
        self.head = Linear(width, 2 * out_dim, generator)
        self.out_dim = out_dim

    def forward(self, x) -> GaussianParams:
        for layer in self.trunk:
            x = relu(layer(x))
        out = self.head(x)
        mu, log_var = out[..., : self.out_dim], out[..., self.out_dim :]
        return GaussianParams(mu=mu, log_var=clamp_log_var(log_var))


class PosteriorChain(nn.Module):
    """Inference networks q(z0|x), q(z1|z0,x), q(zi|z_{i-1},z0,x).

    The voxel enters through the shared flat encoder features. The z0 head
    is a single affine layer; each local head is a two-hidden-layer MLP over
    concat(features, z0, z_{i-1}), with z1 omitting the previous code.
    """

    def __init__(self, config: HierarchyConfig, feature_dim: int, generator=None):
        super().__init__()
        self.config = config
        self.feature_dim = feature_dim
        self.global_head = GaussianHead(
            feature_dim, config.d_global, generator, hidden_layers=0
        )
        blocks = []
        for i in range(config.n_local):
            in_dim = feature_dim + config.d_global
            if i > 0:
                in_dim += config.d_local
            blocks.append(GaussianHead(in_dim, config.d_local, generator))
        self.local_heads = nn.ModuleList(blocks)

    def _noise(self, spec, index, shape, generator, deterministic, ref):
        if spec is not None:
            eps = spec[index]
            if eps.shape != shape:
                raise ShapeError(
                    f"noise[{index}] shape {tuple(eps.shape)} != {tuple(shape)}"
                )
            return eps.to(dtype=ref.dtype, device=ref.device)
        if deterministic:
            return torch.zeros(shape, dtype=ref.dtype, device=ref.device)
        return torch.randn(
            shape, generator=generator, dtype=ref.dtype, device=ref.device
        )

    def forward(self, features, *, noise=None, generator=None, deterministic=False):
        """Run the full inference chain and sample every code.

        noise, when given, is a sequence of n_local+1 standard-normal tensors
        (z0 first); deterministic=True uses zero noise so every sample equals
        its posterior mean.
        """
        if features.dim() != 2 or features.shape[1] != self.feature_dim:
            raise ShapeError(
                f"expected features (B, {self.feature_dim}), got {tuple(features.shape)}"
            )
        if noise is not None and len(noise) != self.config.n_local + 1:
            raise ShapeError(
                f"need {self.config.n_local + 1} noise tensors, got {len(noise)}"
            )
        batch = features.shape[0]

        q0 = self.global_head(features)
        eps = self._noise(noise, 0, q0.mu.shape, generator, deterministic, features)
        z0 = reparameterize(q0, eps)

        posterior_params = [q0]
        local_codes = []
        prev = None
        for i, head in enumerate(self.local_heads):
            parts = [features, z0] if i == 0 else [features, z0, prev]
            qi = head(torch.cat(parts, dim=-1))
            eps = self._noise(
                noise, i + 1, qi.mu.shape, generator, deterministic, features
            )
            zi = reparameterize(qi, eps)
            posterior_params.append(qi)
            local_codes.append(zi)
            prev = zi

        return LatentState(
            z0=z0,
            local_codes=local_codes,
            z=concat_codes(z0, local_codes),
            posterior_params=posterior_params,
        )


class PriorChain(nn.Module):
    """Conditional priors p(z1|z0) and p(zi|z_{i-1},z0), i >= 2.

    z0 itself keeps the fixed N(0, I) prior and has no network. Each local
    prior mirrors the inference geometry: two 100-unit hidden layers over
    concat(z_{i-1}, z0) (z1 sees z0 alone).
    """

    def __init__(self, config: HierarchyConfig, generator=None):
        super().__init__()
        self.config = config
        blocks = []
        for i in range(config.n_local):
            in_dim = config.d_global if i == 0 else config.d_local + config.d_global
            blocks.append(GaussianHead(in_dim, config.d_local, generator))
        self.local_priors = nn.ModuleList(blocks)

    def conditional_params(self, index: int, z0, prev) -> GaussianParams:
        if index == 0:
            return self.local_priors[0](z0)
        return self.local_priors[index](torch.cat([prev, z0], dim=-1))

    def forward(self, state: LatentState):
        """Prior parameters for each local code, conditioned on the sampled
        codes of the given state. Returns a list of n_local GaussianParams."""
        if len(state.local_codes) != self.config.n_local:
            raise ShapeError(
                f"state has {len(state.local_codes)} local codes, "
                f"config wants {self.config.n_local}"
            )
        out = []
        prev = None
        for i in range(self.config.n_local):
            out.append(self.conditional_params(i, state.z0, prev))
            prev = state.local_codes[i]
        return out


def sample_generative(config: HierarchyConfig, priors: PriorChain, decode,
                      generator=None, batch: int = 1):
    """Ancestral sampling: z0 ~ N(0,I), zi ~ p(zi|z_{i-1},z0), then decode.

    decode maps the flat latent (B, total_dim) to occupancy probabilities.
    Returns (probabilities, LatentState with prior_params filled).
    """
    z0 = torch.randn((batch, config.d_global), generator=generator)
    local_codes = []
    prior_params = []
    prev = None
    for i in range(config.n_local):
        params = priors.conditional_params(i, z0, prev)
        eps = torch.randn(params.mu.shape, generator=generator, dtype=z0.dtype)
        zi = reparameterize(params, eps)
        prior_params.append(params)
        local_codes.append(zi)
        prev = zi
    state = LatentState(
        z0=z0,
        local_codes=local_codes,
        z=concat_codes(z0, local_codes),
        prior_params=prior_params,
    )
    return decode(state.z), state
