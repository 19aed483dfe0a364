"""Differentiable layer primitives with a uniform forward/gradient contract.

All convolutions use valid (no) padding. Forward passes are pure functions
of (parameters, input, seed); gradients come from autograd and are held to
a central finite-difference check in the test suite. Storage is float32;
gradient verification runs the same ops in float64.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    if kernel > n:
        raise ShapeError(f"kernel {kernel} larger than input extent {n}")
    return (n - kernel) // stride + 1


def deconv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - 1) * stride + kernel


def _batched(x, spatial_ndim):
    """Normalize to a batched tensor; returns (batched, had_batch)."""
    if x.dim() == spatial_ndim + 1:
        return x.unsqueeze(0), False
    if x.dim() == spatial_ndim + 2:
        return x, True
    raise ShapeError(
        f"expected {spatial_ndim + 1}D or {spatial_ndim + 2}D input, got {x.dim()}D"
    )


def _check_conv(x, weight, spatial_ndim, transposed=False):
    c_axis = 0 if transposed else 1
    if x.shape[1] != weight.shape[c_axis]:
        raise ShapeError(
            f"input channels {x.shape[1]} != weight channels {weight.shape[c_axis]}"
        )
    if not transposed:
        for n, k in zip(x.shape[2:], weight.shape[2:]):
            if k > n:
                raise ShapeError(f"kernel {k} larger than input extent {n}")


def conv3d(x, weight, bias, stride: int):
    """Valid 3D convolution. x: (B,C,D,H,W) or (C,D,H,W); weight: (O,C,k,k,k)."""
    x, had_batch = _batched(x, 3)
    _check_conv(x, weight, 3)
    out = F.conv3d(x, weight, bias, stride=stride)
    return out if had_batch else out.squeeze(0)


def deconv3d(x, weight, bias, stride: int):
    """Valid transposed 3D convolution. weight: (C_in, C_out, k, k, k)."""
    x, had_batch = _batched(x, 3)
    _check_conv(x, weight, 3, transposed=True)
    out = F.conv_transpose3d(x, weight, bias, stride=stride)
    return out if had_batch else out.squeeze(0)


def conv2d(x, weight, bias, stride: int):
    """Valid 2D convolution. x: (B,C,H,W) or (C,H,W); weight: (O,C,k,k)."""
    x, had_batch = _batched(x, 2)
    _check_conv(x, weight, 2)
    out = F.conv2d(x, weight, bias, stride=stride)
    return out if had_batch else out.squeeze(0)


def fully_connected(x, weight, bias):
    """Affine map x @ W.T + b. weight: (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fan-in mismatch: input {x.shape[-1]}, weight {weight.shape[1]}")
    return F.linear(x, weight, bias)


def dropout(x, p_drop: float, training: bool, generator=None):
    """Inverted dropout: train mode zeroes units w.p. p_drop and rescales
    survivors by 1/(1-p_drop); eval mode is the identity. The mask is
    treated as a constant under differentiation."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
    if not training:
        return x
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    mask = (noise >= p_drop).to(x.dtype)
    return x * mask / (1.0 - p_drop)


def relu(x):
    return F.relu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def grad(forward, inputs, upstream=None):
    """Gradients of forward(*inputs) with respect to each input tensor.

    upstream is the gradient of a downstream scalar wrt forward's output
    (defaults to all-ones). Returns a tuple matching inputs.
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = forward(*leaves)
    if upstream is None:
        upstream = torch.ones_like(out)
    return torch.autograd.grad(out, leaves, grad_outputs=upstream)


# ---------------------------------------------------------------------------
# parameter initialization: fan-in-scaled uniform, zero biases


def _uniform(shape, bound, generator, dtype):
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound


def init_weight(shape, fan_in: int, generator=None, dtype=torch.float32):
    return _uniform(shape, math.sqrt(1.0 / fan_in), generator, dtype)


class Linear(nn.Module):
    def __init__(self, fan_in, fan_out, generator=None):
        super().__init__()
        self.weight = nn.Parameter(init_weight((fan_out, fan_in), fan_in, generator))
        self.bias = nn.Parameter(torch.zeros(fan_out))

    def forward(self, x):
        return fully_connected(x, self.weight, self.bias)


class Conv3dValid(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride, generator=None):
        super().__init__()
        self.stride = stride
        fan_in = c_in * kernel**3
        self.weight = nn.Parameter(
            init_weight((c_out, c_in, kernel, kernel, kernel), fan_in, generator)
        )
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride)


class Deconv3dValid(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride, generator=None):
        super().__init__()
        self.stride = stride
        fan_in = c_in * kernel**3
        self.weight = nn.Parameter(
            init_weight((c_in, c_out, kernel, kernel, kernel), fan_in, generator)
        )
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return deconv3d(x, self.weight, self.bias, self.stride)


class Conv2dValid(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride, generator=None):
        super().__init__()
        self.stride = stride
        fan_in = c_in * kernel**2
        self.weight = nn.Parameter(
            init_weight((c_out, c_in, kernel, kernel), fan_in, generator)
        )
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride)
