"""Voxel encoder, voxel decoder, and image regressor around the latent chain.

The encoder maps a 30^3 occupancy grid through three valid-padding 3D convs
to a flat feature vector that feeds every inference head. The decoder mirrors
it with transposed convs and a final sigmoid. The regressor maps a 100x100
RGB image to a point estimate of the flat latent vector.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .latent_hierarchy import (HierarchyConfig, LatentState, PosteriorChain,
                               PriorChain, sample_generative)
from .nn_primitives import (Conv2dValid, Conv3dValid, Deconv3dValid, Linear,
                            conv_output_size, dropout, relu, sigmoid)
from .voxel_io import IMAGE_SIZE, ImageSample, VoxelGrid


def _chain_sides(side, kernels, strides, what):
    """Spatial extents after each valid conv; rejects non-exact strides."""
    sides = [side]
    for k, s in zip(kernels, strides):
        if (sides[-1] - k) % s != 0:
            raise ShapeError(
                f"{what}: side {sides[-1]} with kernel {k} stride {s} "
                f"does not divide evenly"
            )
        sides.append(conv_output_size(sides[-1], k, s))
    return sides


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults reproduce the full-size model;
    the channel/kernel/stride tuples may be shrunk together for small grids
    as long as the conv arithmetic stays exact."""

    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    grid_side: int = 30
    encoder_channels: tuple = (32, 64, 128)
    encoder_kernels: tuple = (6, 5, 4)
    encoder_strides: tuple = (2, 2, 1)
    image_side: int = IMAGE_SIZE
    regressor_channels: tuple = (16, 32, 64, 128)
    regressor_kernels: tuple = (32, 15, 5, 3)
    regressor_strides: tuple = (2, 2, 2, 1)
    regressor_hidden: tuple = (200, 100)
    p_drop: float = 0.2

    def __post_init__(self):
        if not (len(self.encoder_channels) == len(self.encoder_kernels)
                == len(self.encoder_strides)):
            raise ShapeError("encoder channels/kernels/strides lengths differ")
        if not (len(self.regressor_channels) == len(self.regressor_kernels)
                == len(self.regressor_strides)):
            raise ShapeError("regressor channels/kernels/strides lengths differ")
        if not 0.0 <= self.p_drop < 1.0:
            raise ShapeError(f"p_drop must be in [0, 1), got {self.p_drop}")
        self.encoder_sides = _chain_sides(
            self.grid_side, self.encoder_kernels, self.encoder_strides, "encoder")
        self.regressor_sides = _chain_sides(
            self.image_side, self.regressor_kernels, self.regressor_strides,
            "regressor")

    @property
    def feature_side(self) -> int:
        return self.encoder_sides[-1]

    @property
    def feature_dim(self) -> int:
        return self.encoder_channels[-1] * self.feature_side ** 3

    @property
    def regressor_flat_dim(self) -> int:
        return self.regressor_channels[-1] * self.regressor_sides[-1] ** 2


class VoxelEncoder(nn.Module):
    """Three valid 3D convs with ReLU, flattened to the shared feature vector."""

    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        self.config = config
        convs = []
        in_ch = 1
        for out_ch, k, s in zip(config.encoder_channels, config.encoder_kernels,
                                config.encoder_strides):
            convs.append(Conv3dValid(in_ch, out_ch, k, s, generator))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)

    def forward(self, x):
        for conv in self.convs:
            x = relu(conv(x))
        return x.reshape(x.shape[0], -1)


class VoxelDecoder(nn.Module):
    """Affine lift to the encoder's flat width, then mirrored transposed
    convs; sigmoid turns the last layer into occupancy probabilities."""

    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        self.config = config
        self.lift = Linear(config.hierarchy.total_dim, config.feature_dim, generator)
        deconvs = []
        channels = (1,) + tuple(config.encoder_channels)
        for i in reversed(range(len(config.encoder_channels))):
            deconvs.append(Deconv3dValid(
                channels[i + 1], channels[i],
                config.encoder_kernels[i], config.encoder_strides[i], generator))
        self.deconvs = nn.ModuleList(deconvs)

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.config.hierarchy.total_dim:
            raise ShapeError(
                f"expected latent (B, {self.config.hierarchy.total_dim}), "
                f"got {tuple(z.shape)}"
            )
        c = self.config.encoder_channels[-1]
        s = self.config.feature_side
        h = relu(self.lift(z)).reshape(z.shape[0], c, s, s, s)
        for deconv in self.deconvs[:-1]:
            h = relu(deconv(h))
        return sigmoid(self.deconvs[-1](h))


class ImageRegressor(nn.Module):
    """2D conv stack over the RGB image, two FC layers (dropout after the
    first), and an affine head of hierarchy total_dim."""

    def __init__(self, config: ModelConfig, generator=None):
        super().__init__()
        self.config = config
        convs = []
        in_ch = 3
        for out_ch, k, s in zip(config.regressor_channels, config.regressor_kernels,
                                config.regressor_strides):
            convs.append(Conv2dValid(in_ch, out_ch, k, s, generator))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        widths = (config.regressor_flat_dim,) + tuple(config.regressor_hidden)
        self.fcs = nn.ModuleList(
            [Linear(widths[i], widths[i + 1], generator) for i in range(len(widths) - 1)]
        )
        self.head = Linear(widths[-1], config.hierarchy.total_dim, generator)

    def forward(self, img, training=False, generator=None):
        x = img
        for conv in self.convs:
            x = relu(conv(x))
        x = x.reshape(x.shape[0], -1)
        for i, fc in enumerate(self.fcs):
            x = relu(fc(x))
            if i == 0:
                x = dropout(x, self.config.p_drop, training=training,
                            generator=generator)
        return self.head(x)


class VSLModel(nn.Module):
    """The full model: encoder + posterior chain (phi), prior chain + decoder
    (theta), and the image regressor."""

    def __init__(self, config: ModelConfig, generator=None, with_regressor=True):
        super().__init__()
        self.config = config
        self.encoder = VoxelEncoder(config, generator)
        self.posteriors = PosteriorChain(config.hierarchy, config.feature_dim,
                                         generator)
        self.priors = PriorChain(config.hierarchy, generator)
        self.decoder = VoxelDecoder(config, generator)
        self.regressor = ImageRegressor(config, generator) if with_regressor else None

    @property
    def dtype(self):
        return self.decoder.lift.weight.dtype

    def _as_voxel_batch(self, x):
        if isinstance(x, VoxelGrid):
            x = torch.from_numpy(x.occupancy)
        elif isinstance(x, np.ndarray):
            x = torch.from_numpy(x)
        s = self.config.grid_side
        x = x.to(self.dtype)
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() == 4:
            x = x[:, None]
        elif x.dim() != 5:
            raise ShapeError(f"cannot interpret voxel input of shape {tuple(x.shape)}")
        if x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise ShapeError(
                f"expected {s}^3 occupancy grids, got {tuple(x.shape)}"
            )
        return x

    def _as_image_batch(self, img):
        if isinstance(img, ImageSample):
            img = img.pixels
        if isinstance(img, np.ndarray):
            img = torch.from_numpy(np.ascontiguousarray(img))
        img = img.to(self.dtype)
        s = self.config.image_side
        if img.dim() == 3:
            img = img[None]
        if img.dim() != 4:
            raise ShapeError(f"cannot interpret image input of shape {tuple(img.shape)}")
        if img.shape[1:] == (s, s, 3):
            img = img.permute(0, 3, 1, 2).contiguous()
        if img.shape[1:] != (3, s, s):
            raise ShapeError(
                f"expected {s}x{s} RGB images, got {tuple(img.shape)}"
            )
        return img

    def encode(self, x, *, noise=None, generator=None, deterministic=False
               ) -> LatentState:
        """Voxels to a sampled LatentState (posterior params included)."""
        feats = self.encoder(self._as_voxel_batch(x))
        return self.posteriors(feats, noise=noise, generator=generator,
                               deterministic=deterministic)

    def decode(self, z):
        """Flat latent (B, total_dim) to occupancy probabilities (B, side^3)."""
        if z.dim() == 1:
            z = z[None]
        return self.decoder(z.to(self.dtype)).squeeze(1)

    def forward(self, x, *, noise=None, generator=None, deterministic=False):
        """encode -> conditional priors -> decode; the training-time pass.

        Returns (probabilities, LatentState with prior_params filled).
        """
        state = self.encode(x, noise=noise, generator=generator,
                            deterministic=deterministic)
        state.prior_params = self.priors(state)
        return self.decode(state.z), state

    def regress_image(self, img, *, training=False, generator=None):
        """Image to a latent point estimate z' of length total_dim."""
        if self.regressor is None:
            raise ShapeError("model was built without an image regressor")
        return self.regressor(self._as_image_batch(img), training=training,
                              generator=generator)

    def reconstruct_from_image(self, img):
        """decode(regress_image(img)) in eval mode; deterministic given params."""
        return self.decode(self.regress_image(img, training=False))

    def sample(self, generator=None, batch=1):
        """Ancestral sample from the learned priors, decoded to probabilities."""
        return sample_generative(self.config.hierarchy, self.priors, self.decode,
                                 generator=generator, batch=batch)
