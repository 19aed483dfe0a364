"""Command-line entry points.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
The environment variable VSL_SEED overrides any configured or flagged seed.
"""

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_model
from .errors import (ConfigError, DataError, MeshParseError, NumericalAbort,
                     ShapeError, VoxelFormatError)
from .evaluation import classify_features, evaluate_retrieval, extract_features
from .latent_hierarchy import HierarchyConfig
from .latent_tools import arithmetic, generate_noisy, interpolate
from .model import ModelConfig, VSLModel
from .obj_export import export_obj
from .seeding import derive_seed, make_generator
from .trainer import TrainConfig, train
from .voxel_io import (DatasetManifest, VoxelGrid, load_dataset,
                       load_voxel_file, save_voxel_file)

_MODEL_KEYS = {
    "n_local", "d_local", "d_global", "grid_side", "encoder_channels",
    "encoder_kernels", "encoder_strides", "image_side", "regressor_channels",
    "regressor_kernels", "regressor_strides", "regressor_hidden", "p_drop",
    "with_regressor",
}
_TRAIN_KEYS = {
    "learning_rate", "batch_size", "max_epochs", "max_steps", "seed", "delta",
    "gamma_mode", "gamma", "early_stop_patience", "val_fraction",
    "checkpoint_every", "clip_norm",
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _bundled_config(name: str):
    ref = resources.files("vsl") / "configs" / f"{name}.json"
    return ref if ref.is_file() else None


def load_config(spec: str) -> dict:
    """Read a JSON config from a path or a bundled name (mn40, mn10, ...).

    Key sets are fixed; unknown keys raise ConfigError before any work runs.
    """
    path = Path(spec)
    if path.exists():
        text = path.read_text()
    else:
        ref = _bundled_config(spec)
        if ref is None:
            raise ConfigError(f"config not found: {spec}")
        text = ref.read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{spec}: config must be a JSON object")
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{spec}: unknown top-level keys {sorted(unknown)}")
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
        body = cfg.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{spec}: {section!r} must be an object")
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"{spec}: unknown {section} keys {sorted(bad)}")
    return cfg


def build_model_config(model_cfg: dict):
    """(ModelConfig, with_regressor) from the validated 'model' section."""
    body = dict(model_cfg)
    with_regressor = bool(body.pop("with_regressor", False))
    hierarchy = HierarchyConfig(
        n_local=int(body.pop("n_local", 5)),
        d_local=int(body.pop("d_local", 10)),
        d_global=int(body.pop("d_global", 20)),
    )
    for key in ("encoder_channels", "encoder_kernels", "encoder_strides",
                "regressor_channels", "regressor_kernels", "regressor_strides",
                "regressor_hidden"):
        if key in body:
            body[key] = tuple(body[key])
    try:
        config = ModelConfig(hierarchy=hierarchy, **body)
    except (TypeError, ShapeError) as exc:
        raise ConfigError(f"bad model config: {exc}") from None
    return config, with_regressor


def resolve_seed(config_seed, flag_seed=None) -> int:
    env = os.environ.get("VSL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VSL_SEED must be an integer, got {env!r}") from None
    if flag_seed is not None:
        return int(flag_seed)
    return int(config_seed)


def build_train_config(train_cfg: dict, flag_seed=None, max_epochs=None
                       ) -> TrainConfig:
    body = dict(train_cfg)
    body["seed"] = resolve_seed(body.get("seed", 0), flag_seed)
    if max_epochs is not None:
        body["max_epochs"] = int(max_epochs)
    try:
        return TrainConfig(**body)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def _binarize(probs, threshold: float) -> VoxelGrid:
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    arr = np.asarray(probs)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    return VoxelGrid.from_array(arr > threshold)


def _emit_grid(probs, out_path: Path, threshold: float, want_obj: bool):
    grid = _binarize(probs, threshold)
    save_voxel_file(grid, out_path)
    if want_obj:
        export_obj(grid, out_path.with_suffix(".obj"))


def _restore(path):
    model = restore_model(load_checkpoint(path))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_voxelize(args):
    inputs = []
    for spec in args.input:
        p = Path(spec)
        if p.is_dir():
            inputs.extend(sorted(q for q in p.rglob("*") if q.suffix.lower()
                                 in (".off", ".binvox")))
        else:
            inputs.append(p)
    if not inputs:
        raise DataError("no mesh or voxel inputs found")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = (args.dims,) * 3
    done = skipped = 0
    for path in inputs:
        try:
            grid = load_voxel_file(path, dims=dims)
        except (MeshParseError, VoxelFormatError, DataError, OSError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        save_voxel_file(grid, out_dir / (path.stem + ".vslv"))
        done += 1
    print(json.dumps({"voxelized": done, "skipped": skipped,
                      "dims": list(dims), "out": str(out_dir)}))
    if done == 0:
        raise DataError("all inputs failed to voxelize")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    model_config, with_regressor = build_model_config(cfg.get("model", {}))
    train_config = build_train_config(cfg.get("train", {}), args.seed,
                                      args.max_epochs)

    manifest = DatasetManifest.read_jsonl(args.data)
    root = args.root if args.root is not None else Path(args.data).parent
    samples = load_dataset(manifest, "train", root=root,
                           dims=(model_config.grid_side,) * 3)

    gen = make_generator(derive_seed(train_config.seed, "init"))
    model = VSLModel(model_config, generator=gen, with_regressor=with_regressor)
    result = train(model, samples, train_config, out_dir=args.out,
                   resume_from=args.resume)
    summary = {
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "checkpoint": result.checkpoint_path,
        "best_checkpoint": result.best_path,
        "final": result.history[-1] if result.history else None,
    }
    print(json.dumps(summary))
    return 0


def _classify(args, model):
    manifest = DatasetManifest.read_jsonl(args.data)
    root = args.root if args.root is not None else Path(args.data).parent
    dims = (model.config.grid_side,) * 3
    out = {}
    for split in ("train", "test"):
        samples = load_dataset(manifest, split, root=root, dims=dims)
        grids = [s.voxel for s in samples if s.voxel is not None]
        labels = [s.label for s in samples if s.voxel is not None]
        if not grids:
            raise DataError(f"split {split!r} has no voxel samples")
        out[split] = extract_features(model, grids, labels)
    accuracy = classify_features(out["train"], out["test"])
    return {
        "mode": "classify",
        "accuracy": accuracy,
        "n_train": len(out["train"].labels),
        "n_test": len(out["test"].labels),
    }


def _iou_eval(args, model):
    manifest = DatasetManifest.read_jsonl(args.data)
    root = args.root if args.root is not None else Path(args.data).parent
    samples = load_dataset(manifest, "test", root=root,
                           dims=(model.config.grid_side,) * 3)
    pairs = {}
    for s in samples:
        if s.image is None or s.voxel is None:
            continue
        pairs.setdefault(s.label, []).append((s.image, s.voxel))
    if not pairs:
        raise DataError("no image+voxel pairs in the test split")
    report = evaluate_retrieval(model, pairs, threshold=args.threshold)
    return {"mode": "iou", **report.to_dict()}


def cmd_eval(args):
    model = _restore(args.checkpoint)
    report = _classify(args, model) if args.mode == "classify" else _iou_eval(args, model)
    print(json.dumps(report))
    return 0


def cmd_generate(args):
    model = _restore(args.checkpoint)
    seed_shape = load_voxel_file(args.seed_shape,
                                 dims=(model.config.grid_side,) * 3)
    seed = resolve_seed(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        gen = make_generator(derive_seed(seed, "generate", i))
        probs = generate_noisy(model, seed_shape, args.noise, generator=gen)
        path = out_dir / f"gen_{i:02d}.vslv"
        _emit_grid(probs[0], path, args.threshold, args.obj)
        written.append(str(path))
    print(json.dumps({"generated": written, "noise": args.noise, "seed": seed}))
    return 0


def cmd_interpolate(args):
    model = _restore(args.checkpoint)
    dims = (model.config.grid_side,) * 3
    a = load_voxel_file(args.a, dims=dims)
    b = load_voxel_file(args.b, dims=dims)
    steps = interpolate(model, a, b, args.steps, slerp=args.slerp)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, probs in enumerate(steps):
        path = out_dir / f"step_{i:02d}.vslv"
        _emit_grid(probs[0], path, args.threshold, args.obj)
        written.append(str(path))
    print(json.dumps({"steps": written, "slerp": bool(args.slerp)}))
    return 0


def cmd_arith(args):
    model = _restore(args.checkpoint)
    dims = (model.config.grid_side,) * 3
    grids = [load_voxel_file(p, dims=dims) for p in (args.a, args.b, args.c)]
    probs = arithmetic(model, *grids)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "arith.vslv"
    _emit_grid(probs[0], path, args.threshold, args.obj)
    print(json.dumps({"output": str(path)}))
    return 0


def cmd_export_obj(args):
    grid = load_voxel_file(args.input)
    n_vertices, n_triangles = export_obj(grid, args.out, threshold=args.threshold)
    print(json.dumps({"out": str(args.out), "vertices": n_vertices,
                      "triangles": n_triangles}))
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="vsl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="convert meshes to VSLV occupancy grids")
    p.add_argument("--input", nargs="+", required=True,
                   help="mesh/voxel files or directories")
    p.add_argument("--dims", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train a model from a dataset manifest")
    p.add_argument("--config", required=True,
                   help="JSON config path or bundled name (mn40, mn10, "
                        "retrieval-joint, retrieval-separate)")
    p.add_argument("--data", required=True, help="dataset manifest (JSONL)")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--root", default=None, help="root for manifest paths")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--mode", choices=("classify", "iou"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--root", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode noisy variants of a seed shape")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed-shape", required=True)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--obj", action="store_true", help="also write OBJ meshes")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="decode a latent path between two shapes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--slerp", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--obj", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("arith", help="decode a - b + c in latent space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--c", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--obj", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_arith)

    p = sub.add_parser("export-obj", help="write a grid as a Wavefront OBJ mesh")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_export_obj)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, MeshParseError, VoxelFormatError, ShapeError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
