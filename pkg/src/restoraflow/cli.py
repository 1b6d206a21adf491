"""Command-line surface: train toy priors, restore degraded images, sweep the
step-count x correction ablation grid, and draw unconditional samples.

Configuration comes from an optional flat-key JSON file plus flags; flags win.
Results land as CSV (always) and a Markdown table (with --md).  Exit codes:
0 success, 1 usage/config error, 2 numerical abort.  The RESTORA_THREADS
environment variable caps the worker pool used for independent jobs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import degradation, gmm, metrics, mlp, restoration, tensors
from .flow import TimeGrid, sample_unconditional_batch
from .tensors import ImageTensor, SeededRng, clamp

__all__ = ["main", "entrypoint", "RunConfig", "ResultRow", "RESULTS_SCHEMA_VERSION"]

RESULTS_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

ABLATION_STEPS = (4, 8, 16, 32, 64, 128, 256)
ABLATION_CORRECTIONS = (0, 1, 2, 3)
ABLATION_CELL_STRIDE = 10**6

# ODE-step defaults per task (factor > 2 super-resolution runs longer)
DEFAULT_STEPS = {"denoise": 64, "box": 64, "random": 128, "sr": 128}
DEFAULT_STEPS_SR_LARGE = 256


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


@dataclass
class RunConfig:
    """Resolved settings for one subcommand invocation."""

    prior: str | None = None
    task: str | None = None
    sigma: float | None = None
    box: tuple[int, int] | None = None
    fraction: float = 0.70
    factor: int = 2
    sigma_meas: float = degradation.DEFAULT_MEASUREMENT_NOISE
    ode_steps: int | None = None
    corrections: int = 1
    seed: int = 0
    in_dir: str | None = None
    out_dir: str | None = None
    md: bool = False
    synthetic: int = 0
    num_seeds: int = 3
    samples: int = 16
    shape: tuple[int, int, int] | None = None
    hidden: tuple[int, ...] = (64, 64)
    train_steps: int = 5000
    batch_size: int = 128
    learning_rate: float = 0.02
    momentum: float = 0.9


@dataclass
class ResultRow:
    task: str
    prior: str
    n_steps: int
    corrections: int
    seed: int
    psnr_db: float
    ssim: float | None
    consistency_rmse: float
    wall_time_s: float
    field_evals: int


RESULT_COLUMNS = [f.name for f in fields(ResultRow)]


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restoraflow",
        description="Mask-guided image restoration with flow-matching priors",
        exit_on_error=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, help="flat-key JSON config; flags override")
        p.add_argument("--prior", type=str, help="GMM spec (.json) or net checkpoint (.rfnn)")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--out", dest="out_dir", type=str, help="output directory")

    p_train = sub.add_parser("train", help="fit a velocity net to a GMM target")
    add_common(p_train)
    p_train.add_argument("--hidden", type=str, help="hidden widths, e.g. 64,64")
    p_train.add_argument("--train-steps", type=int, help="SGD step count")
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--learning-rate", type=float)
    p_train.add_argument("--momentum", type=float)

    def add_task(p):
        p.add_argument("--task", choices=["denoise", "box", "random", "sr"])
        p.add_argument("--sigma", type=float, help="denoise noise level (default 0.2)")
        p.add_argument("--box", type=int, nargs=2, metavar=("H", "W"), help="box size (default 40 40)")
        p.add_argument("--fraction", type=float, help="random-inpaint masked fraction (default 0.70)")
        p.add_argument("--factor", type=int, help="super-resolution factor (default 2)")
        p.add_argument("--sigma-meas", type=float, help="measurement noise (default 0.01)")
        p.add_argument("--ode-steps", type=int, help="ODE step count (default per task)")
        p.add_argument("--corrections", type=int, help="correction passes per step (default 1)")
        p.add_argument("--md", action="store_true", default=None, help="also write a Markdown table")

    p_restore = sub.add_parser("restore", help="restore degraded inputs")
    add_common(p_restore)
    add_task(p_restore)
    p_restore.add_argument("--in", dest="in_dir", type=str, help="directory of PGM/PPM inputs")
    p_restore.add_argument("--synthetic", type=int, help="draw this many ground truths from the prior")

    p_ablate = sub.add_parser("ablate", help="sweep ODE steps x corrections")
    add_common(p_ablate)
    add_task(p_ablate)
    p_ablate.add_argument("--num-seeds", type=int, help="seeds per grid cell (default 3)")

    p_sample = sub.add_parser("sample", help="draw unconditional samples")
    add_common(p_sample)
    p_sample.add_argument("--samples", type=int, help="number of samples (default 16)")
    p_sample.add_argument("--ode-steps", type=int, help="ODE step count (default 128)")

    return parser


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object with flat keys")
        for key, value in file_cfg.items():
            if key not in _CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if cfg.box is not None:
        cfg.box = tuple(cfg.box)
    if cfg.shape is not None:
        cfg.shape = tuple(cfg.shape)
    cfg.hidden = tuple(int(h) for h in (
        cfg.hidden.split(",") if isinstance(cfg.hidden, str) else cfg.hidden
    ))
    return cfg


def _load_prior_field(cfg: RunConfig):
    """Returns (field factory, sample shape, prior object or net).

    Each worker job builds its own field instance from the factory so the
    per-run evaluation counters never race; the underlying parameter arrays
    are shared read-only.
    """
    if not cfg.prior:
        raise UsageError("--prior is required")
    path = Path(cfg.prior)
    if not path.exists():
        raise UsageError(f"prior file {path} does not exist")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == mlp.CHECKPOINT_MAGIC:
        net = mlp.checkpoint_load(path)
        shape = tuple(cfg.shape or (1, 1, net.d_in))
        return (lambda: mlp.MlpVelocityField(net, shape)), shape, net
    try:
        prior = gmm.load_gmm_spec(path)
    except ValueError as exc:
        raise UsageError(f"cannot load prior {path}: {exc}") from None
    return (lambda: gmm.GmmVelocityField(prior)), prior.shape, prior


def _build_task(cfg: RunConfig) -> degradation.DegradationTask:
    if cfg.task == "denoise":
        return degradation.Denoise(0.2 if cfg.sigma is None else cfg.sigma)
    if cfg.task == "box":
        box = cfg.box or (40, 40)
        return degradation.BoxInpaint(box[0], box[1], sigma_meas=cfg.sigma_meas)
    if cfg.task == "random":
        return degradation.RandomInpaint(cfg.fraction, sigma_meas=cfg.sigma_meas)
    if cfg.task == "sr":
        return degradation.SuperResolution(cfg.factor, sigma_meas=cfg.sigma_meas)
    raise UsageError(f"--task is required (denoise|box|random|sr), got {cfg.task!r}")


def default_ode_steps(task: degradation.DegradationTask) -> int:
    if isinstance(task, degradation.Denoise):
        return DEFAULT_STEPS["denoise"]
    if isinstance(task, degradation.BoxInpaint):
        return DEFAULT_STEPS["box"]
    if isinstance(task, degradation.RandomInpaint):
        return DEFAULT_STEPS["random"]
    return DEFAULT_STEPS["sr"] if task.factor <= 2 else DEFAULT_STEPS_SR_LARGE


def _task_name(task: degradation.DegradationTask) -> str:
    return {
        degradation.Denoise: "denoise",
        degradation.BoxInpaint: "box",
        degradation.RandomInpaint: "random",
        degradation.SuperResolution: "sr",
    }[type(task)]


def _worker_count() -> int:
    env = os.environ.get("RESTORA_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise UsageError(f"RESTORA_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise UsageError("RESTORA_THREADS must be >= 1")
        return cap
    return min(8, os.cpu_count() or 1)


def _write_csv(path: Path, rows: list[ResultRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            ssim_cell = "" if row.ssim is None else f"{row.ssim:.6f}"
            writer.writerow(
                [
                    row.task,
                    row.prior,
                    row.n_steps,
                    row.corrections,
                    row.seed,
                    f"{row.psnr_db:.4f}",
                    ssim_cell,
                    f"{row.consistency_rmse:.6f}",
                    f"{row.wall_time_s:.4f}",
                    row.field_evals,
                ]
            )


def _write_md(path: Path, rows: list[ResultRow]) -> None:
    headers = ["task", "prior", "N", "C", "seed", "LPIPS", "SSIM", "PSNR", "consistency", "time (s)", "evals"]
    lines = ["| " + " | ".join(headers) + " |", "| " + " | ".join(["---"] * len(headers)) + " |"]
    for r in rows:
        ssim_cell = "N/A" if r.ssim is None else f"{r.ssim:.4f}"
        lines.append(
            f"| {r.task} | {r.prior} | {r.n_steps} | {r.corrections} | {r.seed} | N/A | "
            f"{ssim_cell} | {r.psnr_db:.2f} | {r.consistency_rmse:.4f} | "
            f"{r.wall_time_s:.3f} | {r.field_evals} |"
        )
    path.write_text("\n".join(lines) + "\n")


def _restore_one(
    make_field,
    original: ImageTensor,
    task: degradation.DegradationTask,
    n_steps: int,
    corrections: int,
    seed: int,
    prior_name: str,
) -> tuple[ResultRow, ImageTensor]:
    obs = degradation.degrade(original, task, SeededRng(seed))
    cfg = restoration.RestorationConfig(n_steps, corrections, seed=seed)
    report = restoration.restore(make_field(), obs, cfg)
    out = clamp(report.output)
    can_ssim = original.height >= metrics.SSIM_WINDOW and original.width >= metrics.SSIM_WINDOW
    row = ResultRow(
        task=_task_name(task),
        prior=prior_name,
        n_steps=n_steps,
        corrections=corrections,
        seed=seed,
        psnr_db=metrics.psnr(out, original),
        ssim=metrics.ssim(out, original) if can_ssim else None,
        consistency_rmse=metrics.consistency_rmse(out, obs.z, obs.mask),
        wall_time_s=report.wall_time_s,
        field_evals=report.field_evals,
    )
    return row, out


def _load_inputs(cfg: RunConfig, shape, prior, make_field) -> list[tuple[str, ImageTensor]]:
    if cfg.in_dir:
        root = Path(cfg.in_dir)
        if not root.is_dir():
            raise UsageError(f"input directory {root} does not exist")
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
        if not paths:
            raise UsageError(f"no .pgm/.ppm files in {root}")
        images = []
        for p in paths:
            img = tensors.load_pnm(p)
            if img.shape != tuple(shape):
                raise UsageError(f"{p} has shape {img.shape}, prior expects {tuple(shape)}")
            images.append((p.stem, img))
        return images
    if cfg.synthetic > 0:
        images = []
        for i in range(cfg.synthetic):
            rng = SeededRng(cfg.seed).derive(i)
            if isinstance(prior, gmm.GmmPrior):
                img = gmm.gmm_sample(prior, rng)
            else:
                grid = TimeGrid(cfg.ode_steps or 128)
                img = ImageTensor(sample_unconditional_batch(make_field(), grid, shape, 1, rng)[0])
            images.append((f"synthetic_{i:04d}", img))
        return images
    raise UsageError("provide --in DIR or --synthetic K")


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.out_dir:
        raise UsageError("--out is required")
    if not cfg.prior:
        raise UsageError("--prior (GMM spec used as training target) is required")
    try:
        prior = gmm.load_gmm_spec(cfg.prior)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load GMM spec {cfg.prior}: {exc}") from None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = prior.dim

    def sampler(rng: SeededRng, n: int) -> np.ndarray:
        return gmm.gmm_sample_batch(prior, n, rng).reshape(n, d)

    net = mlp.MlpVelocityNet.initialize([d + 1, *cfg.hidden, d], SeededRng(cfg.seed))
    train_cfg = mlp.TrainConfig(
        batch_size=cfg.batch_size,
        step_count=cfg.train_steps,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        seed=cfg.seed,
    )
    try:
        net, trace = mlp.train(net, sampler, train_cfg)
    except mlp.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpt = out / "checkpoint.rfnn"
    mlp.checkpoint_save(net, ckpt)
    with open(out / "loss_trace.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows((i, f"{v:.8f}") for i, v in enumerate(trace))
    final = mlp.smoothed_final_loss(trace)
    print(f"trained {len(trace)} steps; smoothed final loss {final:.5f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_restore(cfg: RunConfig) -> int:
    if not cfg.out_dir:
        raise UsageError("--out is required")
    make_field, shape, prior = _load_prior_field(cfg)
    task = _build_task(cfg)
    n_steps = cfg.ode_steps or default_ode_steps(task)
    images = _load_inputs(cfg, shape, prior, make_field)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prior_name = Path(cfg.prior).stem

    def job(item):
        index, (name, original) = item
        row, restored = _restore_one(
            make_field, original, task, n_steps, cfg.corrections, cfg.seed + index, prior_name
        )
        return index, name, row, restored

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        done = sorted(pool.map(job, enumerate(images)), key=lambda r: r[0])

    rows = []
    for _, name, row, restored in done:
        rows.append(row)
        tensors.save_raw(restored, out / f"{name}_restored.rft")
        if restored.channels in (1, 3):
            ext = "pgm" if restored.channels == 1 else "ppm"
            tensors.save_pnm(restored, out / f"{name}_restored.{ext}")
    _write_csv(out / "results.csv", rows)
    if cfg.md:
        _write_md(out / "results.md", rows)
    mean_psnr = np.mean([r.psnr_db for r in rows])
    print(f"restored {len(rows)} image(s); mean PSNR {mean_psnr:.2f} dB; results in {out}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    if not cfg.out_dir:
        raise UsageError("--out is required")
    make_field, shape, prior = _load_prior_field(cfg)
    task = _build_task(cfg)
    if not isinstance(prior, gmm.GmmPrior):
        raise UsageError("ablate draws synthetic ground truths and needs a GMM prior")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prior_name = Path(cfg.prior).stem

    cells = [(n, c) for n in ABLATION_STEPS for c in ABLATION_CORRECTIONS]

    def job(spec):
        cell_index, seed_index = spec
        n_steps, corrections = cells[cell_index]
        seed = cfg.seed + cell_index * ABLATION_CELL_STRIDE + seed_index
        original = gmm.gmm_sample(prior, SeededRng(seed))
        row, _ = _restore_one(make_field, original, task, n_steps, corrections, seed, prior_name)
        return cell_index, seed_index, row

    jobs = [(ci, si) for ci in range(len(cells)) for si in range(cfg.num_seeds)]
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        done = sorted(pool.map(job, jobs), key=lambda r: (r[0], r[1]))
    rows = [r[2] for r in done]
    _write_csv(out / "ablate.csv", rows)

    summary_path = out / "ablate_summary.csv"
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["n_steps", "corrections", "mean_psnr_db", "mean_ssim", "mean_consistency_rmse",
             "mean_wall_time_s", "field_evals"]
        )
        for ci, (n_steps, corrections) in enumerate(cells):
            cell_rows = [r[2] for r in done if r[0] == ci]
            ssims = [r.ssim for r in cell_rows if r.ssim is not None]
            writer.writerow(
                [
                    n_steps,
                    corrections,
                    f"{np.mean([r.psnr_db for r in cell_rows]):.4f}",
                    f"{np.mean(ssims):.6f}" if ssims else "",
                    f"{np.mean([r.consistency_rmse for r in cell_rows]):.6f}",
                    f"{np.mean([r.wall_time_s for r in cell_rows]):.4f}",
                    cell_rows[0].field_evals,
                ]
            )
    if cfg.md:
        _write_md(out / "ablate.md", rows)
    print(f"swept {len(cells)} cells x {cfg.num_seeds} seeds; results in {out}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig) -> int:
    if not cfg.out_dir:
        raise UsageError("--out is required")
    make_field, shape, _ = _load_prior_field(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.samples
    if n < 0:
        raise UsageError(f"--samples must be >= 0, got {n}")
    if n == 0:
        print("0 samples requested; nothing written")
        return EXIT_OK
    grid = TimeGrid(cfg.ode_steps or 128)
    xs = sample_unconditional_batch(make_field(), grid, shape, n, SeededRng(cfg.seed))
    tensors.write_array_raw(xs, out / "samples.rft")
    for i in range(n):
        sample = ImageTensor(xs[i])
        tensors.save_raw(sample, out / f"sample_{i:05d}.rft")
        if sample.channels in (1, 3):
            ext = "pgm" if sample.channels == 1 else "ppm"
            tensors.save_pnm(clamp(sample), out / f"sample_{i:05d}.{ext}")
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except argparse.ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse --help or hard usage failure
        code = exc.code or 0
        return EXIT_OK if code == 0 else EXIT_USAGE
    try:
        cfg = _resolve_config(args)
        handler = {
            "train": cmd_train,
            "restore": cmd_restore,
            "ablate": cmd_ablate,
            "sample": cmd_sample,
        }[args.command]
        return handler(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
