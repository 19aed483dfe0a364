"""Shared fixtures: small model configs, procedural shape corpora, and
independent numerical oracles (finite differences, quadrature)."""

import sys

import numpy as np
import pytest
import torch

from vsl.latent_hierarchy import HierarchyConfig
from vsl.model import ModelConfig, VSLModel
from vsl.seeding import derive_seed, make_generator
from vsl.voxel_io import VoxelGrid

CUBE_OFF = """OFF
8 6 0
0 0 0
8 0 0
8 8 0
0 8 0
0 0 8
8 0 8
8 8 8
0 8 8
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 3 7 6 2
4 0 4 7 3
4 1 2 6 5
"""


def small_model_config(n_local=2, d_local=3, d_global=4):
    """Full 30^3 geometry at reduced channel widths; fast on CPU."""
    return ModelConfig(
        hierarchy=HierarchyConfig(n_local=n_local, d_local=d_local,
                                  d_global=d_global),
        encoder_channels=(4, 8, 16),
        regressor_channels=(4, 8, 8, 16),
        regressor_hidden=(20, 10),
    )


def tiny_fd_config():
    """6^3 voxels and 12^2 images so float64 finite differences stay cheap."""
    return ModelConfig(
        hierarchy=HierarchyConfig(n_local=2, d_local=2, d_global=3),
        grid_side=6,
        encoder_channels=(2, 3, 4),
        encoder_kernels=(3, 3, 2),
        encoder_strides=(1, 1, 1),
        image_side=12,
        regressor_channels=(2, 3, 3, 4),
        regressor_kernels=(4, 3, 2, 2),
        regressor_strides=(2, 1, 1, 1),
        regressor_hidden=(8, 6),
        p_drop=0.0,
    )


def build_model(config, seed=0, with_regressor=True):
    gen = make_generator(derive_seed(seed, "init"))
    return VSLModel(config, generator=gen, with_regressor=with_regressor)


@pytest.fixture
def small_model():
    return build_model(small_model_config(), seed=11, with_regressor=False)


# ---------------------------------------------------------------------------
# procedural shape corpus (analytic occupancy, no meshes)


def _coords(side):
    ax = np.arange(side, dtype=np.float64) + 0.5
    return np.meshgrid(ax, ax, ax, indexing="ij")


def make_shape(kind: str, rng: np.random.Generator, side: int = 30) -> np.ndarray:
    """One random occupancy grid from a named family; returns uint8 (side,)*3."""
    x, y, z = _coords(side)
    c = side / 2.0 + rng.uniform(-2, 2, size=3)
    cx, cy, cz = c
    if kind == "box":
        h = rng.uniform(5, 10, size=3)
        occ = ((np.abs(x - cx) < h[0]) & (np.abs(y - cy) < h[1])
               & (np.abs(z - cz) < h[2]))
    elif kind == "sphere":
        r = rng.uniform(7, 11)
        occ = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 < r ** 2
    elif kind == "cylinder":
        r = rng.uniform(5, 9)
        h = rng.uniform(9, 13)
        occ = ((x - cx) ** 2 + (y - cy) ** 2 < r ** 2) & (np.abs(z - cz) < h)
    elif kind == "torus":
        big = rng.uniform(8, 10)
        small = rng.uniform(2.0, 3.5)
        ring = np.sqrt((x - cx) ** 2 + (y - cy) ** 2) - big
        occ = ring ** 2 + (z - cz) ** 2 < small ** 2
    elif kind == "pyramid":
        base = rng.uniform(8, 11)
        height = rng.uniform(16, 24)
        frac = np.clip((z - (cz - height / 2)) / height, 0, 1)
        half = base * (1 - frac)
        occ = ((np.abs(x - cx) < half) & (np.abs(y - cy) < half)
               & (frac > 0) & (frac < 1))
    elif kind == "cross":
        w = rng.uniform(2, 4)
        L = rng.uniform(10, 13)
        bar = lambda u, v: (np.abs(u) < w) & (np.abs(v) < w)
        u, v, s = x - cx, y - cy, z - cz
        occ = ((bar(u, v) & (np.abs(s) < L)) | (bar(v, s) & (np.abs(u) < L))
               | (bar(u, s) & (np.abs(v) < L)))
    elif kind == "shell":
        outer = rng.uniform(9, 12)
        wall = rng.uniform(1.5, 3)
        box = lambda h: ((np.abs(x - cx) < h) & (np.abs(y - cy) < h)
                         & (np.abs(z - cz) < h))
        occ = box(outer) & ~box(outer - wall)
    elif kind == "plates":
        n = rng.integers(2, 5)
        gap = rng.uniform(4, 7)
        thick = rng.uniform(1.2, 2.5)
        half = rng.uniform(8, 11)
        occ = np.zeros_like(x, dtype=bool)
        for k in range(n):
            zk = cz + (k - (n - 1) / 2) * gap
            occ |= ((np.abs(z - zk) < thick) & (np.abs(x - cx) < half)
                    & (np.abs(y - cy) < half))
    elif kind == "lshape":
        a = rng.uniform(4, 6)
        L = rng.uniform(9, 12)
        occ = (((np.abs(x - cx) < a) & (np.abs(y - cy) < a)
                & (z - cz > -L) & (z - cz < L))
               | ((np.abs(z - (cz - L)) < a) & (np.abs(y - cy) < a)
                  & (x - cx > -L) & (x - cx < L)))
    elif kind == "ellipsoid":
        ax3 = rng.uniform((9, 5, 3), (12, 8, 5))
        occ = (((x - cx) / ax3[0]) ** 2 + ((y - cy) / ax3[1]) ** 2
               + ((z - cz) / ax3[2]) ** 2) < 1.0
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return occ.astype(np.uint8)


SHAPE_KINDS = ("box", "sphere", "cylinder", "torus", "pyramid", "cross",
               "shell", "plates", "lshape", "ellipsoid")


def shape_corpus(n_per_class, kinds=SHAPE_KINDS, side=30, seed=0):
    """(grids float32 (N,side^3...), labels list) with per-sample jitter."""
    rng = np.random.default_rng(seed)
    grids, labels = [], []
    for kind in kinds:
        for _ in range(n_per_class):
            grids.append(make_shape(kind, rng, side))
            labels.append(kind)
    return np.stack(grids).astype(np.float32), labels


def eight_shapes(seed=123):
    """A memorizable 8-shape training set for overfit runs."""
    rng = np.random.default_rng(seed)
    kinds = ("box", "sphere", "cylinder", "torus", "pyramid", "cross",
             "shell", "ellipsoid")
    return np.stack([make_shape(k, rng) for k in kinds]).astype(np.float32)


def grids_from_array(arr):
    return [VoxelGrid.from_array(a) for a in arr]


# ---------------------------------------------------------------------------
# oracles


def fd_gradient(f, tensors, h=1e-5, max_coords=4, seed=0):
    """Central-difference gradients of scalar f(*tensors) on sampled coords.

    tensors must be float64. Returns a list of (flat_index, fd_value,
    analytic_slot) per tensor where analytic_slot is None (caller compares).
    """
    rng = np.random.default_rng(seed)
    picks = []
    for t in tensors:
        n = t.numel()
        k = min(max_coords, n)
        idx = rng.choice(n, size=k, replace=False)
        grads = []
        flat = t.reshape(-1)
        assert flat.data_ptr() == t.data_ptr(), "tensor must be contiguous"
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(f(*tensors))
            flat[i] = orig - h
            down = float(f(*tensors))
            flat[i] = orig
            grads.append((int(i), (up - down) / (2 * h)))
        picks.append(grads)
    return picks


def assert_fd_matches(f, tensors, analytic_grads, rtol, h=1e-5, seed=0,
                      max_coords=4):
    """Compare autograd gradients to central differences coordinate-wise."""
    picks = fd_gradient(f, tensors, h=h, max_coords=max_coords, seed=seed)
    for t, grads, ana in zip(tensors, picks, analytic_grads):
        flat = ana.reshape(-1)
        for i, fd in grads:
            got = float(flat[i])
            scale = max(abs(fd), abs(got), 1e-8)
            assert abs(got - fd) / scale < rtol, (
                f"gradient mismatch at flat index {i}: analytic {got}, "
                f"finite-difference {fd}"
            )


def kl_quadrature(mu_q, var_q, mu_p, var_p):
    """Numerical KL(q||p) between 1-D Gaussians via adaptive quadrature."""
    from scipy.integrate import quad

    sd_q = np.sqrt(var_q)

    def integrand(t):
        log_q = -0.5 * np.log(2 * np.pi * var_q) - (t - mu_q) ** 2 / (2 * var_q)
        log_p = -0.5 * np.log(2 * np.pi * var_p) - (t - mu_p) ** 2 / (2 * var_p)
        return np.exp(log_q) * (log_q - log_p)

    lo, hi = mu_q - 12 * sd_q, mu_q + 12 * sd_q
    val, _ = quad(integrand, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def train_state_dict(model):
    """Bitwise snapshot of all parameters for trajectory comparisons."""
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def states_equal(a, b):
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion lines past pytest's output capture."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
