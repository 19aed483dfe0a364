"""Latent-space manipulation: noisy generation, interpolation, arithmetic.

All tools work on zero-noise latent codes (the chained posterior means), so
given fixed parameters they are deterministic up to the explicit noise draw
in generate_noisy.
"""

import math

import torch

from .errors import ShapeError


def posterior_mean_latent(model, grid) -> torch.Tensor:
    """Flat zero-noise latent (B, total_dim) for one grid or a batch."""
    with torch.no_grad():
        state = model.encode(grid, deterministic=True)
    return state.z


def reconstruct(model, grid) -> torch.Tensor:
    """The model's deterministic reconstruction: decode of the zero-noise code."""
    with torch.no_grad():
        return model.decode(posterior_mean_latent(model, grid))


def generate_noisy(model, seed_shape, noise_scale: float = 0.5, generator=None
                   ) -> torch.Tensor:
    """Decode the seed shape's code plus scaled Gaussian noise.

    noise_scale 0 reproduces the model's reconstruction of seed_shape exactly.
    """
    if noise_scale < 0:
        raise ShapeError(f"noise_scale must be >= 0, got {noise_scale}")
    z = posterior_mean_latent(model, seed_shape)
    if noise_scale != 0.0:
        eps = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        z = z + noise_scale * eps
    with torch.no_grad():
        return model.decode(z)


def interpolate(model, a, b, steps: int, slerp: bool = False):
    """steps probability grids along the path from a's code to b's code.

    The path is linear by default, spherical with slerp=True; both endpoints
    decode the respective single-shape codes exactly.
    """
    if steps < 2:
        raise ShapeError(f"need at least 2 steps, got {steps}")
    za = posterior_mean_latent(model, a)
    zb = posterior_mean_latent(model, b)
    if za.shape != zb.shape:
        raise ShapeError(f"latent shapes differ: {tuple(za.shape)} vs {tuple(zb.shape)}")

    if slerp:
        na = torch.linalg.vector_norm(za)
        nb = torch.linalg.vector_norm(zb)
        cos = float(torch.clamp((za * zb).sum() / (na * nb + 1e-12), -1.0, 1.0))
        omega = math.acos(cos)

    out = []
    with torch.no_grad():
        for i in range(steps):
            alpha = i / (steps - 1)
            if i == 0:
                z = za
            elif i == steps - 1:
                z = zb
            elif slerp and math.sin(omega) > 1e-6:
                w_a = math.sin((1.0 - alpha) * omega) / math.sin(omega)
                w_b = math.sin(alpha * omega) / math.sin(omega)
                z = w_a * za + w_b * zb
            else:
                z = (1.0 - alpha) * za + alpha * zb
            out.append(model.decode(z))
    return out


def arithmetic(model, a, b, c) -> torch.Tensor:
    """Decode z_a - z_b + z_c on zero-noise codes.

    The sum is grouped in float64 before casting back, so the cancellation
    identities (b == c gives a's reconstruction, a == b gives c's) hold to
    the bit.
    """
    za = posterior_mean_latent(model, a)
    zb = posterior_mean_latent(model, b)
    zc = posterior_mean_latent(model, c)
    if not (za.shape == zb.shape == zc.shape):
        raise ShapeError("latent shapes differ between a, b, c")
    z = (za.double() - zb.double() + zc.double()).to(za.dtype)
    with torch.no_grad():
        return model.decode(z)
