"""Command-line entry points: data generation, training, sampling, evaluation.

Every subcommand resolves its settings the same way: start from a preset
(default "nano"), overlay an optional ``--config`` file, then apply ``--set
key=value`` overrides; the fully resolved config is echoed into the run
directory so results stay reproducible from disk alone.

Setting ``HYPERDIT_DETERMINISTIC=1`` pins torch to a single thread for
bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfg
from . import evaluation, trainer as trainer_mod
from .config import CfgPolicy, ConfigError, RunConfig
from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .patching import patchify
from .rope import compute_base_patch, unified_index
from .sampler import sample
from .vfm import FeatureFileError, load_features


def apply_determinism_env() -> None:
    if os.environ.get("HYPERDIT_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        try:
            torch.set_num_interop_threads(1)
        except RuntimeError:
            pass  # interop pool already spun up; intra-op pinning still holds


def resolve_config(args: argparse.Namespace) -> RunConfig:
    preset = getattr(args, "preset", "nano")
    if preset not in cfg.PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(cfg.PRESETS)}")
    run = cfg.PRESETS[preset]()
    if getattr(args, "config", None):
        run = cfg.load_config(args.config, base=run)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    cfg.apply_overrides(run, overrides)
    run.validate()
    return run


def _prepare_run_dir(run: RunConfig) -> Path:
    run_dir = Path(run.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save_config(run, str(run_dir / "config.txt"))
    return run_dir


def to_png(images: torch.Tensor, directory: Path, prefix: str, labels=None) -> list[Path]:
    """Write [-1, 1] image tensors as 8-bit PNGs."""
    from PIL import Image

    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    arr = ((images.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    for i in range(arr.shape[0]):
        tag = f"_c{int(labels[i])}" if labels is not None else ""
        path = directory / f"{prefix}{i:04d}{tag}.png"
        Image.fromarray(np.transpose(arr[i], (1, 2, 0))).save(path)
        paths.append(path)
    return paths


def _feature_provider(run: RunConfig, args):
    """Pick the alignment-feature source for training: file if given, else mock."""
    model = run.model
    if model.vfm_dim is None or run.train.lambda_repa == 0:
        return None
    path = getattr(args, "vfm_features", None) or run.paths.features
    if path:
        features = load_features(path)
        return trainer_mod.FileFeatureProvider(features)
    return trainer_mod.MockFeatureProvider(
        token_count=model.num_registers, dim=model.vfm_dim, seed=run.seed
    )


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    run = resolve_config(args)
    dataset = generate_synthetic_dataset(
        per_class=args.per_class,
        height=run.model.img_size,
        width=run.model.img_size,
        seed=run.seed,
    )
    out = Path(args.out or run.paths.dataset)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, str(out))
    print(f"wrote {len(dataset)} images ({dataset.num_classes} classes) to {out}")
    print(f"content sha256: {dataset.content_hash()}")
    return 0


def cmd_train(args) -> int:
    run = resolve_config(args)
    run_dir = _prepare_run_dir(run)
    dataset = load_dataset(args.dataset or run.paths.dataset)
    if dataset.num_classes != run.model.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, model.num_classes is "
            f"{run.model.num_classes}"
        )
    provider = _feature_provider(run, args)

    resume_from = getattr(args, "resume", None)
    if resume_from:
        state = trainer_mod.load_checkpoint(resume_from, run)
        loop = trainer_mod.Trainer(run, dataset, provider, state=state)
        print(f"resumed from {resume_from} at step {state.step}")
    else:
        loop = trainer_mod.Trainer(run, dataset, provider)

    final_path = run_dir / "checkpoint.ckpt"
    if loop.total_steps == 0:
        trainer_mod.save_checkpoint(str(final_path), loop.state)
        print(f"no training steps requested; wrote initial checkpoint to {final_path}")
        return 0

    every = run.train.checkpoint_every
    log_path = run_dir / "losses.tsv"
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step\tloss\tloss_fm\tloss_freq\tloss_repa\tlr\tgrad_norm\n")
        n = len(dataset)
        while loop.state.step < loop.total_steps:
            indices = torch.randint(0, n, (run.train.batch,), generator=loop.state.rng)
            metrics = trainer_mod.train_step(
                loop.state,
                dataset.images[indices],
                dataset.labels[indices],
                run.train,
                provider,
                indices,
            )
            loop.history.append(metrics)
            log.write(
                f"{metrics['step']}\t{metrics['loss']:.6f}\t{metrics['loss_fm']:.6f}"
                f"\t{metrics['loss_freq']:.6f}\t{metrics['loss_repa']:.6f}"
                f"\t{metrics['lr']:.8f}\t{metrics['grad_norm']:.6f}\n"
            )
            if args.log_every and metrics["step"] % args.log_every == 0:
                print(
                    f"step {metrics['step']:>6}/{loop.total_steps}  "
                    f"loss {metrics['loss']:.4f}  lr {metrics['lr']:.2e}",
                    flush=True,
                )
            if every and metrics["step"] % every == 0:
                trainer_mod.save_checkpoint(
                    str(run_dir / f"checkpoint_step{metrics['step']}.ckpt"), loop.state
                )
    trainer_mod.save_checkpoint(str(final_path), loop.state)
    print(f"finished {loop.state.step} steps; checkpoint at {final_path}")
    return 0


def _load_model_for_inference(path: str, run: RunConfig, which: str):
    state = trainer_mod.load_checkpoint(path, run)
    if which == "ema":
        trainer_mod.load_ema_weights(state.model, state.ema)
    state.model.eval()
    return state.model


def cmd_sample(args) -> int:
    run = resolve_config(args)
    run_dir = _prepare_run_dir(run)
    path = args.checkpoint or run.paths.checkpoint
    if not path:
        raise ConfigError("sample needs --checkpoint or paths.checkpoint")
    model = _load_model_for_inference(path, run, args.weights)
    if args.labels:
        labels = torch.tensor([int(v) for v in args.labels.split(",")], dtype=torch.int64)
        if args.num != labels.numel():
            labels = labels.repeat((args.num + labels.numel() - 1) // labels.numel())[: args.num]
    else:
        labels = torch.arange(args.num) % run.model.num_classes
    rng = torch.Generator().manual_seed(run.seed)
    result = sample(model, labels, run.cfg, run.sampler, rng=rng)
    out_dir = run_dir / "samples"
    paths = to_png(result.images, out_dir, "sample_", labels)
    print(f"wrote {len(paths)} samples to {out_dir} (NFE = {result.nfe})")
    return 0


def cmd_eval(args) -> int:
    run = resolve_config(args)
    run_dir = _prepare_run_dir(run)
    path = args.checkpoint or run.paths.checkpoint
    if not path:
        raise ConfigError("eval needs --checkpoint or paths.checkpoint")
    dataset = load_dataset(args.dataset or run.paths.dataset)
    model = _load_model_for_inference(path, run, args.weights)

    rng = torch.Generator().manual_seed(run.seed)
    labels = torch.arange(args.num) % run.model.num_classes
    chunks = []
    done = 0
    while done < args.num:
        take = min(args.batch, args.num - done)
        result = sample(model, labels[done : done + take], run.cfg, run.sampler, rng=rng)
        chunks.append(result.images)
        done += take
    generated = torch.cat(chunks)

    fid = evaluation.toy_fid(generated, dataset.images, seed=run.seed)
    centroids = evaluation.class_centroids(dataset.images, dataset.labels, dataset.num_classes)
    accuracy = evaluation.nearest_centroid_accuracy(generated, labels, centroids)
    print(f"toy_fid: {fid:.6f}")
    print(f"nearest_centroid_accuracy: {accuracy:.4f}")

    if args.pca_out:
        with torch.no_grad():
            t = torch.full((1,), 0.5)
            lbl = torch.zeros(1, dtype=torch.int64)
            image = dataset.images[:1]
            _, anchors = model.forward_full(image, t, lbl)
            tokens = anchors.anchors[-1][0, anchors.n_register :]
        viz = evaluation.pca_feature_viz(tokens, anchors.grid)
        from PIL import Image

        arr = (viz.numpy() * 255).round().astype("uint8")
        Image.fromarray(arr).save(args.pca_out)
        print(f"wrote anchor PCA rendering to {args.pca_out}")
    return 0


def cmd_sweep(args) -> int:
    run = resolve_config(args)
    run_dir = _prepare_run_dir(run)
    path = args.checkpoint or run.paths.checkpoint
    if not path:
        raise ConfigError("sweep needs --checkpoint or paths.checkpoint")
    dataset = load_dataset(args.dataset or run.paths.dataset)
    model = _load_model_for_inference(path, run, args.weights)
    scales = [float(v) for v in args.scales.split(",") if v.strip()]
    reference = evaluation.feature_stats(
        evaluation.image_features(dataset.images, seed=run.seed)
    )
    rows = evaluation.cfg_sweep(
        model,
        scales,
        reference,
        run.sampler,
        num_samples=args.num,
        seed=run.seed,
        t_min=run.cfg.t_min,
        t_max=run.cfg.t_max,
        batch=args.batch,
        feature_fn=lambda imgs: evaluation.image_features(imgs, seed=run.seed),
    )
    table = evaluation.sweep_table(rows)
    out = run_dir / "sweep.tsv"
    out.write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"wrote {out}")
    return 0


def cmd_inspect_rope(args) -> int:
    run = resolve_config(args)
    model = run.model
    size = args.size or model.img_size
    p_large = args.patch_large or model.patch_large
    p_small = args.patch_small or model.patch_small
    base = model.base_patch
    if base is None:
        base = compute_base_patch(size, size, p_small, p_large)
    print(f"image {size}x{size}, patches large={p_large} small={p_small}")
    print(f"p_base = {base}")
    for patch in (p_large, p_small):
        cols = size // patch
        heads = []
        for n in range(4):
            i, j = divmod(n, cols)
            pos = unified_index(i, j, patch, base)
            heads.append(f"({pos.i:g}, {pos.j:g})")
        print(f"stream patch={patch}: " + " ".join(heads))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperdit",
        description="Train and sample a desk-scale dual-stream pixel diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", default="nano", help="config preset (nano, b, xl, h)")
        p.add_argument("--config", help="run-config text file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("gen-data", help="render the synthetic labeled dataset")
    common(p)
    p.add_argument("--per-class", type=int, default=256)
    p.add_argument("--out", help="output .npz path (default: paths.dataset)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train from a dataset")
    common(p)
    p.add_argument("--dataset", help="dataset .npz (default: paths.dataset)")
    p.add_argument("--vfm-features", help="feature file for register alignment")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: paths.checkpoint)")
    p.add_argument("--num", type=int, default=16)
    p.add_argument("--labels", help="comma-separated class labels to cycle")
    p.add_argument("--weights", choices=("ema", "raw"), default="ema")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="toy-FID and oracle accuracy for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: paths.checkpoint)")
    p.add_argument("--dataset", help="reference dataset .npz")
    p.add_argument("--num", type=int, default=256)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--weights", choices=("ema", "raw"), default="ema")
    p.add_argument("--pca-out", help="write an anchor-feature PCA PNG here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="toy-FID across guidance scales")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: paths.checkpoint)")
    p.add_argument("--dataset", help="reference dataset .npz")
    p.add_argument("--scales", default="1.0,1.5,2.0,3.0,4.0")
    p.add_argument("--num", type=int, default=128)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--weights", choices=("ema", "raw"), default="ema")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("inspect-rope", help="print the shared positional grid")
    common(p)
    p.add_argument("--size", type=int, help="image side (default: model.img_size)")
    p.add_argument("--patch-large", type=int)
    p.add_argument("--patch-small", type=int)
    p.set_defaults(fn=cmd_inspect_rope)

    return parser


def main(argv=None) -> int:
    apply_determinism_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FeatureFileError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
