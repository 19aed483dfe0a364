"""Mini-batch training with a hand-stepped Adam rule.

Every source of randomness is derived from the run seed: epoch e shuffles
and samples with a generator seeded by derive_seed(seed, "epoch", e), so two
runs with the same seed produce bit-identical trajectories and a resume from
an epoch-boundary checkpoint continues exactly where the original run was.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, apply_parameters, save_checkpoint
from .errors import DataError, NumericalAbort
from .model import VSLModel
from .objective import ObjectiveConfig, total_objective, warmup_gamma
from .seeding import derive_seed, make_generator
from .voxel_io import Sample, VoxelGrid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 200
    max_epochs: int = 2500
    max_steps: int | None = None
    seed: int = 0
    delta: float = 1e-3
    gamma_mode: str = "off"  # off | constant | warmup
    gamma: float = 5e-3
    early_stop_patience: int | None = None
    val_fraction: float = 0.1
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.gamma_mode not in ("off", "constant", "warmup"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")


@dataclass
class OptimizerState:
    """Adam first/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model):
        m = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        v = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        return cls(m=m, v=v, step=0)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """One bias-corrected Adam update, in place on params.

    Raises NumericalAbort naming the parameter if its gradient is non-finite.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m[name]
            v = state.v[name]
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            p.add_((m / c1) / ((v / c2).sqrt() + ADAM_EPS), alpha=-lr)


def _clip_gradients(grads: dict, max_norm: float):
    total = torch.sqrt(sum((g * g).sum() for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)


def stack_dataset(dataset):
    """Normalize a training set to (voxels float32 (N,S,S,S), images or None).

    Accepts a sequence of Samples or VoxelGrids, or prestacked arrays.
    """
    if isinstance(dataset, tuple) and len(dataset) == 2:
        vox, img = dataset
        vox = torch.as_tensor(np.asarray(vox), dtype=torch.float32)
        return vox, (None if img is None else np.asarray(img, dtype=np.float32))
    items = list(dataset)
    if not items:
        raise DataError("training set is empty")
    grids = []
    images = []
    for it in items:
        if isinstance(it, Sample):
            if it.voxel is None:
                raise DataError(f"sample {it.path} has no voxel grid")
            grids.append(it.voxel.occupancy)
            images.append(it.image)
        elif isinstance(it, VoxelGrid):
            grids.append(it.occupancy)
            images.append(None)
        else:
            grids.append(np.asarray(it))
            images.append(None)
    vox = torch.from_numpy(np.stack(grids).astype(np.float32))
    if any(im is not None for im in images):
        if any(im is None for im in images):
            raise DataError("mixed dataset: some samples have images, some do not")
        return vox, np.stack(images).astype(np.float32)
    return vox, None


@dataclass
class TrainResult:
    history: list
    epochs_run: int
    best_val: float | None = None
    stopped_early: bool = False
    checkpoint_path: str | None = None
    best_path: str | None = None


def _epoch_gamma(config: TrainConfig, epoch: int, has_images: bool) -> float:
    if not has_images:
        return 0.0
    if config.gamma_mode == "warmup":
        return warmup_gamma(epoch)
    if config.gamma_mode == "constant":
        return config.gamma
    return 0.0


def _run_batch(model, vox, img, obj_config, generator, training):
    probs, state = model(vox, generator=generator,
                         deterministic=not training)
    z_pred = None
    if img is not None and model.regressor is not None:
        z_pred = model.regress_image(img, training=training, generator=generator)
    return total_objective(vox, probs, state.posterior_params, state.prior_params,
                           obj_config, z_pred=z_pred,
                           z_target=state.z if z_pred is not None else None)


def _validation_total(model, vox, img, obj_config):
    with torch.no_grad():
        breakdown = _run_batch(model, vox, img, obj_config, None, training=False)
    return float(breakdown.total)


def train(model: VSLModel, dataset, config: TrainConfig, out_dir=None,
          resume_from=None) -> TrainResult:
    """Run the training loop; returns the metric history and checkpoint paths.

    out_dir, when given, receives train_log.jsonl plus latest/best checkpoint
    archives. resume_from restarts from an epoch-boundary checkpoint written
    by this function and reproduces the uninterrupted trajectory.
    """
    vox_all, img_all = stack_dataset(dataset)
    n_total = vox_all.shape[0]
    has_images = img_all is not None and model.regressor is not None

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl" if out_dir is not None else None

    # deterministic validation carve-out, only when early stopping is active
    val_idx = np.empty(0, dtype=np.int64)
    train_idx = np.arange(n_total)
    if config.early_stop_patience is not None:
        if n_total < 2:
            raise DataError("early stopping needs at least 2 samples")
        rng = np.random.default_rng(derive_seed(config.seed, "valsplit"))
        perm = rng.permutation(n_total)
        n_val = max(1, int(round(n_total * config.val_fraction)))
        val_idx, train_idx = perm[:n_val], np.sort(perm[n_val:])
    if len(train_idx) == 0:
        raise DataError("training set is empty after the validation carve-out")

    optimizer = OptimizerState.for_model(model)
    params = dict(model.named_parameters())
    start_epoch = 0
    best_val = math.inf
    bad_epochs = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        apply_parameters(model, ckpt.tensors)
        if ckpt.optimizer_m is not None:
            optimizer = OptimizerState(m=ckpt.optimizer_m, v=ckpt.optimizer_v,
                                       step=ckpt.optimizer_step)
        start_epoch = int(ckpt.metadata.get("epochs_done", 0))
        best_val = float(ckpt.metadata.get("best_val", math.inf))
        bad_epochs = int(ckpt.metadata.get("bad_epochs", 0))

    def write_checkpoint(name, epochs_done):
        if out_dir is None:
            return None
        path = out_dir / name
        meta = {"epochs_done": epochs_done, "seed": config.seed}
        if best_val < math.inf:
            meta["best_val"] = best_val
            meta["bad_epochs"] = bad_epochs
        save_checkpoint(path, model, optimizer, meta)
        return str(path)

    history = []
    stopped_early = False
    best_path = None
    latest_path = None
    epoch = start_epoch
    n_train = len(train_idx)
    train_idx_t = torch.from_numpy(np.asarray(train_idx))

    for epoch in range(start_epoch, config.max_epochs):
        gen = make_generator(derive_seed(config.seed, "epoch", epoch))
        gamma = _epoch_gamma(config, epoch, has_images)
        obj_config = ObjectiveConfig(delta=config.delta, gamma=gamma)
        order = train_idx_t[torch.randperm(n_train, generator=gen)]

        t0 = time.monotonic()
        sums = {"rec": 0.0, "reg": 0.0, "lat": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            vox = vox_all[idx]
            img = img_all[idx.numpy()] if has_images else None
            breakdown = _run_batch(model, vox, img, obj_config, gen, training=True)
            if not torch.isfinite(breakdown.total):
                raise NumericalAbort(
                    f"non-finite objective at epoch {epoch}: "
                    f"rec={float(breakdown.rec)} reg={float(breakdown.reg)} "
                    f"lat={float(breakdown.lat)}"
                )
            model.zero_grad(set_to_none=True)
            breakdown.total.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            if config.clip_norm is not None:
                _clip_gradients(grads, config.clip_norm)
            adam_step(params, grads, optimizer, config.learning_rate)
            for key in sums:
                sums[key] += float(getattr(breakdown, key).detach())
            n_batches += 1
            if config.max_steps is not None and optimizer.step >= config.max_steps:
                break

        record = {
            "epoch": epoch,
            "rec": sums["rec"] / n_batches,
            "reg": sums["reg"] / n_batches,
            "lat": sums["lat"] / n_batches,
            "gamma": gamma,
            "total": sums["total"] / n_batches,
            "wall_time": time.monotonic() - t0,
        }

        if len(val_idx) > 0:
            val_vox = vox_all[torch.from_numpy(val_idx)]
            val_img = img_all[val_idx] if has_images else None
            val_total = _validation_total(model, val_vox, val_img, obj_config)
            record["val_total"] = val_total
            if val_total < best_val:
                best_val = val_total
                bad_epochs = 0
                best_path = write_checkpoint("best.ckpt", epoch + 1) or best_path
            else:
                bad_epochs += 1

        history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

        done = epoch + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0:
            latest_path = write_checkpoint("latest.ckpt", done) or latest_path
        if (config.early_stop_patience is not None
                and bad_epochs >= config.early_stop_patience):
            stopped_early = True
            epoch += 1
            break
        if config.max_steps is not None and optimizer.step >= config.max_steps:
            epoch += 1
            break
    else:
        epoch = config.max_epochs

    latest_path = write_checkpoint("latest.ckpt", epoch) or latest_path
    return TrainResult(
        history=history,
        epochs_run=epoch - start_epoch,
        best_val=None if best_val == math.inf else best_val,
        stopped_early=stopped_early,
        checkpoint_path=latest_path,
        best_path=best_path,
    )
