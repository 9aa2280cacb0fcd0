"""Command-line entry point.

Exit codes: 0 success, 1 validation/contract failure, 2 IO/config error.
DDESEG_THREADS caps torch's worker parallelism.
"""

from __future__ import annotations

import os
import sys

import click
import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    PALETTE,
    _unpack_record,
    gen_class_bank,
    gen_dataset,
    load_dataset,
    save_dataset,
)
from .errors import ContractError, DataFormatError, GradCheckError
from .gradsuite import run_suite
from .losses import write_metric_csv
from .memory import build_memory, kmeans, load_memory, save_memory
from .model import DDESegModel
from .train import (
    build_memory_for_model,
    build_model,
    effective_beta_sq,
    evaluate,
    predict,
    train,
)


def _load_config(config_path, seed, ablations) -> RunConfig:
    if config_path:
        try:
            with open(config_path) as fh:
                cfg = RunConfig.from_json(fh.read())
        except OSError as exc:
            raise DataFormatError(f"cannot read config: {exc}") from exc
    else:
        cfg = RunConfig()
    if seed is not None:
        cfg.seed = seed
    pairs = dict(item.split("=", 1) for item in ablations)
    return cfg.apply_ablations(pairs).validate()


def _fail(exc: BaseException, code: int) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        fn()
    except (ContractError, GradCheckError) as exc:
        _fail(exc, 1)
    except (DataFormatError, OSError, ValueError) as exc:
        _fail(exc, 2)


def _common(fn):
    fn = click.option(
        "--ablation",
        multiple=True,
        metavar="KEY=VAL",
        help="Config override, repeatable.",
    )(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--config", "config_path", type=click.Path(), default=None)(fn)
    return fn


@click.group()
def main():
    """Audio-visual segmentation: synthesis, memory, training, evaluation."""
    threads = os.environ.get("DDESEG_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


@main.command()
@_common
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth(config_path, seed, ablation, out_dir):
    """Generate the synthetic train/val/test datasets."""

    def run():
        cfg = _load_config(config_path, seed, ablation)
        parent = os.path.dirname(os.path.abspath(out_dir))
        if not os.path.isdir(parent):
            raise DataFormatError(f"parent directory {parent} does not exist")
        bank = gen_class_bank(cfg.num_classes, cfg.memory_subclusters, cfg.seed)
        total = 0
        for split, count, offset in (
            ("train", cfg.train_pairs, 0),
            ("val", cfg.val_pairs, 1_000_000),
            ("test", cfg.test_pairs, 2_000_000),
        ):
            pairs, seeds = gen_dataset(
                bank,
                count,
                cfg.seed + offset,
                image_size=cfg.image_size,
                offscreen_prob=cfg.offscreen_prob,
                noise_sigma=cfg.noise_sigma,
            )
            save_dataset(pairs, os.path.join(out_dir, split), seeds)
            total += count
            click.echo(f"{split}: {count} records")
        click.echo(f"wrote {total} records to {out_dir}")

    _guard(run)


@main.command()
@_common
@click.option("--out", "out_path", required=True, type=click.Path())
def memory(config_path, seed, ablation, out_path):
    """Build the audio semantic memory and write the DDEM1 file."""

    def run():
        cfg = _load_config(config_path, seed, ablation)
        model = build_model(cfg)
        bank = gen_class_bank(cfg.num_classes, cfg.memory_subclusters, cfg.seed)
        mem = build_memory_for_model(model, bank, cfg)
        from .data import gen_singlesource_bank

        ss = gen_singlesource_bank(
            bank, cfg.singlesource_per_class, cfg.seed,
            encoder=model.audio_encoder, noise_sigma=cfg.noise_sigma,
        )
        for cid, feats in ss.features.items():
            _, _, inertia = kmeans(
                feats, cfg.memory_subclusters, restarts=cfg.kmeans_restarts,
                seed=cfg.seed + cid,
            )
            click.echo(f"class {cid}: n={len(feats)} inertia={inertia:.4f}")
        save_memory(mem, out_path)
        click.echo(f"wrote memory (d={mem.dim}, C={mem.num_classes}) to {out_path}")

    _guard(run)


@main.command(name="train")
@_common
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--memory", "memory_path", required=True, type=click.Path(exists=True))
@click.option("--out", "ckpt_path", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path(), default=None)
def train_cmd(config_path, seed, ablation, data_dir, memory_path, ckpt_path, log_path):
    """Train on a generated dataset; saves the best-validation checkpoint."""

    def run():
        cfg = _load_config(config_path, seed, ablation)
        mem = load_memory(memory_path, expect_dim=cfg.dim)
        train_pairs = load_dataset(os.path.join(data_dir, "train"))
        val_dir = os.path.join(data_dir, "val")
        val_pairs = load_dataset(val_dir) if os.path.isdir(val_dir) else None
        model = build_model(cfg)
        result = train(cfg, model, mem, train_pairs, val_pairs, log_path=log_path)
        save_checkpoint(model, ckpt_path)
        last = result.history[-1]
        click.echo(
            f"trained {cfg.steps} steps; final loss {last['total']:.4f}; "
            f"best val J&F {result.best_val_jf:.4f}"
        )

    _guard(run)


@main.command(name="eval")
@_common
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--memory", "memory_path", required=True, type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["csv"]), default="csv")
def eval_cmd(config_path, seed, ablation, data_dir, ckpt_path, memory_path, split, out_path, fmt):
    """Deterministic metrics over a dataset split."""

    def run():
        model = load_checkpoint(ckpt_path)
        cfg = _load_config(config_path, seed, ablation) if config_path else model.config
        mem = load_memory(memory_path, expect_dim=model.config.dim)
        pairs = load_dataset(os.path.join(data_dir, split))
        report = evaluate(model, mem, pairs, beta_sq=effective_beta_sq(cfg))
        click.echo(
            f"{split}: J={report.jaccard:.4f} F={report.fbeta:.4f} "
            f"J&F={report.jf_mean:.4f}"
        )
        for c in sorted(report.per_class):
            j, f = report.per_class[c]
            click.echo(f"  class {c}: J={j:.4f} F={f:.4f}")
        if out_path:
            header = ["dataset", "split", "seed", "J", "F", "JF"]
            write_metric_csv(
                out_path, [report.csv_row(data_dir, split, cfg.seed)], header
            )

    _guard(run)


@main.command(name="predict")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--memory", "memory_path", required=True, type=click.Path(exists=True))
@click.option("--record", "record_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--overlay", "overlay_path", type=click.Path(), default=None)
def predict_cmd(ckpt_path, memory_path, record_path, out_path, overlay_path):
    """Predict one record; writes the label map as an 8-bit image."""

    def run():
        from PIL import Image

        model = load_checkpoint(ckpt_path)
        mem = load_memory(memory_path, expect_dim=model.config.dim)
        with open(record_path, "rb") as fh:
            pair = _unpack_record(fh.read(), record_path)
        out = predict(model, mem, pair)
        labels = out.assembled.numpy().astype(np.uint8)
        Image.fromarray(labels, mode="L").save(out_path)
        click.echo(f"wrote label map to {out_path}")
        if overlay_path:
            overlay = pair.image.copy()
            for lab in np.unique(labels):
                if lab == 0:
                    continue
                color = np.array(PALETTE[(lab - 1) % len(PALETTE)], dtype=np.float32)
                sel = labels == lab
                overlay[sel] = (0.5 * overlay[sel] + 0.5 * color).astype(np.uint8)
            Image.fromarray(overlay, mode="RGB").save(overlay_path)
            click.echo(f"wrote overlay to {overlay_path}")

    _guard(run)


@main.command(name="gradcheck")
@_common
def gradcheck_cmd(config_path, seed, ablation):
    """Run the finite-difference gradient suite on the micro-model."""

    def run():
        seeds = (0, 1, 2) if seed is None else (seed,)
        results = run_suite(seeds=seeds)
        failed = [r for r in results if not r.passed]
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            click.echo(
                f"{status} {r.name}: max rel err {r.report.max_rel_error:.3e}"
            )
        if failed:
            raise GradCheckError(f"{len(failed)} gradient checks failed")
        click.echo(f"all {len(results)} gradient checks passed")

    _guard(run)


if __name__ == "__main__":
    main()
