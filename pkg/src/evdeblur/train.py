"""Toy-scale trainer: Adam with a halving schedule, logging, and ablations.

Training is single-threaded and fully deterministic given the seed; epoch
shuffles are derived from (seed, epoch) so a resumed run continues exactly
where an uninterrupted one would be.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NonFiniteLossError
from .events import read_events
from .imageio import read_image
from .metrics import MetricReport, psnr, ssim
from .model import (
    ModelConfig,
    ablation_rows,
    forward_arrays,
    init_weights,
    loss_multiscale,
    perceptual_extractor,
    prepare_inputs,
    trainable_names,
    weight_shapes,
)
from .simulate import read_manifest
from .tensorkit import Tape, Tensor, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule hyperparameters."""

    epochs: int = 6
    batch_size: int = 4
    lr: float = 1e-3
    lr_halve_every: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def lr_at(self, epoch: int) -> float:
        return self.lr * (0.5 ** (epoch // self.lr_halve_every))


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], names: list[str], hyper: TrainConfig):
        self.params = params
        self.names = list(names)
        self.hyper = hyper
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def step(self, lr: float) -> None:
        h = self.hyper
        self.t += 1
        bc1 = 1.0 - h.beta1**self.t
        bc2 = 1.0 - h.beta2**self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + h.adam_eps)

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].grad = None


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    blur: np.ndarray           # (C, H, W)
    voxel: np.ndarray          # (B, H, W), normalized
    chunks: list[np.ndarray]   # N x (B, H, W), normalized
    gt: np.ndarray             # (C, H, W)
    blur_image: np.ndarray     # (H, W) or (H, W, C) as loaded
    gt_image: np.ndarray


def load_scenes(manifest_path, cfg: ModelConfig) -> list[Scene]:
    scenes = []
    for blur_p, events_p, gt_p in read_manifest(manifest_path):
        blur = read_image(blur_p)
        gt = read_image(gt_p)
        stream = read_events(events_p)
        img, voxel, chunks = prepare_inputs(blur, stream, cfg)
        gt_chw = gt[None] if gt.ndim == 2 else np.moveaxis(gt, 2, 0)
        scenes.append(Scene(img, voxel, chunks, gt_chw, blur, gt))
    if not scenes:
        raise ConfigError(f"manifest {manifest_path} lists no scenes")
    return scenes


def _batch(scenes: list[Scene], idx: np.ndarray, cfg: ModelConfig):
    blur = np.stack([scenes[i].blur for i in idx])
    voxel = np.stack([scenes[i].voxel for i in idx])
    chunks = [
        np.stack([scenes[i].chunks[k] for i in idx]) for k in range(cfg.n_chunks)
    ]
    gt = np.stack([scenes[i].gt for i in idx])
    return blur, voxel, chunks, gt


# ---------------------------------------------------------------------------
# Checkpoint packing (weights + config, optionally optimizer state)
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = (
    "n_scales", "base_channels", "n_chunks", "kernel", "use_events",
    "use_deblur_module", "use_lstm", "use_c2f", "image_channels",
    "voxel_bins", "lambda_p", "seed",
)


def pack_model(weights: dict[str, Tensor], cfg: ModelConfig) -> dict[str, np.ndarray]:
    out = {f"config.{f}": np.asarray(float(getattr(cfg, f))) for f in _CONFIG_FIELDS}
    out.update({f"param.{n}": t.data for n, t in weights.items()})
    return out


def unpack_model(tensors: dict[str, np.ndarray]) -> tuple[dict[str, Tensor], ModelConfig]:
    kwargs = {}
    for f in _CONFIG_FIELDS:
        raw = float(tensors[f"config.{f}"])
        if f == "lambda_p":
            kwargs[f] = raw
        elif f.startswith("use_"):
            kwargs[f] = bool(raw)
        else:
            kwargs[f] = int(raw)
    cfg = ModelConfig(**kwargs)
    expected = weight_shapes(cfg)
    weights = {}
    for name, shape in expected.items():
        arr = tensors[f"param.{name}"]
        if arr.shape != shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, want {shape}")
        weights[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    return weights, cfg


def save_model(path, weights: dict[str, Tensor], cfg: ModelConfig) -> None:
    save_checkpoint(pack_model(weights, cfg), path)


def load_model(path) -> tuple[dict[str, Tensor], ModelConfig]:
    return unpack_model(load_checkpoint(path))


def _pack_train_state(adam: Adam, epoch_done: int) -> dict[str, np.ndarray]:
    state = {"train.epoch_done": np.asarray(float(epoch_done)),
             "train.step": np.asarray(float(adam.t))}
    for n in adam.names:
        state[f"adam.m.{n}"] = adam.m[n]
        state[f"adam.v.{n}"] = adam.v[n]
    return state


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_scenes(
    weights: dict[str, Tensor], cfg: ModelConfig, scenes: list[Scene]
) -> MetricReport:
    """Finest-scale predictions scored against ground truth."""
    psnrs, ssims = [], []
    for sc in scenes:
        preds = forward_arrays(
            sc.blur[None], sc.voxel[None], [c[None] for c in sc.chunks], weights, cfg
        )
        est = preds[0].estimate.data[0]
        img = est[0] if cfg.image_channels == 1 else np.moveaxis(est, 0, 2)
        img = np.clip(img, 0.0, 1.0)
        psnrs.append(psnr(img, sc.gt_image))
        ssims.append(ssim(img, sc.gt_image))
    return MetricReport(psnrs, ssims)


def blur_baseline(scenes: list[Scene]) -> MetricReport:
    return MetricReport(
        [psnr(sc.blur_image, sc.gt_image) for sc in scenes],
        [ssim(sc.blur_image, sc.gt_image) for sc in scenes],
    )


def _eval_worker(args):
    checkpoint_path, manifest_path, lo, hi = args
    weights, cfg = load_model(checkpoint_path)
    entries = read_manifest(manifest_path)[lo:hi]
    psnrs, ssims, base = [], [], []
    for blur_p, events_p, gt_p in entries:
        blur = read_image(blur_p)
        gt = read_image(gt_p)
        stream = read_events(events_p)
        img, voxel, chunks = prepare_inputs(blur, stream, cfg)
        preds = forward_arrays(img[None], voxel[None], [c[None] for c in chunks],
                               weights, cfg)
        est = preds[0].estimate.data[0]
        out = est[0] if cfg.image_channels == 1 else np.moveaxis(est, 0, 2)
        out = np.clip(out, 0.0, 1.0)
        psnrs.append(psnr(out, gt))
        ssims.append(ssim(out, gt))
        base.append(psnr(blur, gt))
    return psnrs, ssims, base


def evaluate_manifest(
    checkpoint_path, manifest_path, threads: int = 1
) -> tuple[MetricReport, list[float]]:
    """Score a checkpoint over a manifest; per-image work may parallelize.

    Images are independent, so results are identical for any thread count.
    Returns the report plus the blurry-input PSNR baseline per image.
    """
    entries = read_manifest(manifest_path)
    n = len(entries)
    if threads <= 1 or n <= 1:
        parts = [_eval_worker((checkpoint_path, manifest_path, 0, n))]
    else:
        import multiprocessing as mp

        workers = min(threads, n)
        bounds = np.linspace(0, n, workers + 1).astype(int)
        jobs = [
            (os.fspath(checkpoint_path), os.fspath(manifest_path), int(lo), int(hi))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]
        with mp.get_context("fork").Pool(workers) as pool:
            parts = pool.map(_eval_worker, jobs)
    psnrs = [v for p in parts for v in p[0]]
    ssims = [v for p in parts for v in p[1]]
    base = [v for p in parts for v in p[2]]
    return MetricReport(psnrs, ssims), base


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_toy(
    train_manifest,
    cfg: ModelConfig,
    hyper: TrainConfig | None = None,
    out_dir=None,
    val_manifest=None,
    resume=None,
    log_fn=None,
) -> tuple[dict[str, Tensor], list[dict]]:
    """Train on a manifest; returns final weights and the per-epoch log.

    Writes state.edkp (resumable) and best.edkp (best validation PSNR, or
    final weights when no validation set is given) into out_dir.
    """
    hyper = hyper or TrainConfig()
    scenes = load_scenes(train_manifest, cfg)
    val_scenes = load_scenes(val_manifest, cfg) if val_manifest else None
    extractor = perceptual_extractor(cfg)

    start_epoch = 0
    if resume:
        tensors = load_checkpoint(resume)
        weights, loaded_cfg = unpack_model(tensors)
        if loaded_cfg != cfg:
            raise ConfigError("resume checkpoint was trained with a different config")
        adam = Adam(weights, trainable_names(cfg), hyper)
        adam.t = int(float(tensors["train.step"]))
        start_epoch = int(float(tensors["train.epoch_done"]))
        for n in adam.names:
            adam.m[n] = tensors[f"adam.m.{n}"].copy()
            adam.v[n] = tensors[f"adam.v.{n}"].copy()
    else:
        weights = init_weights(cfg)
        adam = Adam(weights, trainable_names(cfg), hyper)

    log: list[dict] = []
    best_psnr = -math.inf
    for epoch in range(start_epoch, hyper.epochs):
        t_start = time.time()
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(101, epoch)))
        order = rng.permutation(len(scenes))
        lr = hyper.lr_at(epoch)
        losses = []
        for lo in range(0, len(order), hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            blur, voxel, chunks, gt = _batch(scenes, idx, cfg)
            adam.zero_grad()
            preds = forward_arrays(blur, voxel, chunks, weights, cfg)
            loss = loss_multiscale(preds, Tensor(gt), cfg, extractor)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"epoch {epoch}, batch at {lo}: loss={value} (lr={lr})"
                )
            Tape(loss).backward()
            adam.step(lr)
            losses.append(value)
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "seconds": round(time.time() - t_start, 3),
        }
        if val_scenes is not None:
            report = evaluate_scenes(weights, cfg, val_scenes)
            entry["psnr"] = report.mean_psnr
            entry["ssim"] = report.mean_ssim
        log.append(entry)
        if log_fn:
            log_fn(entry)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            state = pack_model(weights, cfg)
            state.update(_pack_train_state(adam, epoch + 1))
            save_checkpoint(state, os.path.join(out_dir, "state.edkp"))
            current = entry.get("psnr", -math.inf)
            if val_scenes is None or current > best_psnr:
                best_psnr = current
                save_model(os.path.join(out_dir, "best.edkp"), weights, cfg)
            # persisted log omits wall time so replayed runs are byte-identical
            keep = ("epoch", "loss", "lr", "psnr", "ssim")
            with open(os.path.join(out_dir, "train_log.jsonl"), "w") as f:
                f.write(
                    "\n".join(
                        json.dumps({k: e[k] for k in keep if k in e}) for e in log
                    )
                    + "\n"
                )
    return weights, log


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def _train_row(args):
    name, cfg, train_manifest, val_manifest, hyper, out_dir = args
    row_dir = os.path.join(out_dir, name) if out_dir else None
    weights, log = train_toy(
        train_manifest, cfg, hyper, out_dir=row_dir, val_manifest=val_manifest
    )
    report = evaluate_scenes(weights, cfg, load_scenes(val_manifest, cfg))
    return {
        "row": name,
        "use_events": cfg.use_events,
        "use_deblur_module": cfg.use_deblur_module,
        "use_lstm": cfg.use_lstm,
        "use_c2f": cfg.use_c2f,
        "psnr": report.mean_psnr,
        "ssim": report.mean_ssim,
        "losses": [e["loss"] for e in log],
        "train_seconds": float(sum(e["seconds"] for e in log)),
    }


def ablate(
    train_manifest,
    val_manifest,
    base_cfg: ModelConfig,
    hyper: TrainConfig | None = None,
    rows: list[str] | None = None,
    out_dir=None,
    workers: int = 1,
) -> list[dict]:
    """Train and evaluate each toggle row with shared seeds and schedule.

    Rows run in separate processes when workers > 1; each row is internally
    single-threaded and deterministic, so the table is reproducible either
    way.
    """
    grid = ablation_rows(replace(base_cfg, use_events=True, use_deblur_module=True,
                                 use_lstm=True, use_c2f=True))
    chosen = rows or list(grid)
    unknown = set(chosen) - set(grid)
    if unknown:
        raise ConfigError(f"unknown ablation rows: {sorted(unknown)}")
    jobs = [(name, grid[name], train_manifest, val_manifest, hyper, out_dir)
            for name in chosen]
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(workers, len(jobs))) as pool:
            results = pool.map(_train_row, jobs)
    else:
        results = [_train_row(j) for j in jobs]
    return results


def ablation_table(results: list[dict]) -> str:
    header = f"{'row':<16} {'events':<7} {'dm':<4} {'lstm':<5} {'c2f':<4} {'psnr':>7} {'ssim':>7}"
    lines = [header, "-" * len(header)]
    for r in results:
        lines.append(
            f"{r['row']:<16} {str(r['use_events']):<7} {str(r['use_deblur_module']):<4} "
            f"{str(r['use_lstm']):<5} {str(r['use_c2f']):<4} "
            f"{r['psnr']:>7.2f} {r['ssim']:>7.4f}"
        )
    return "\n".join(lines)
