"""Command-line entry point binding all the pieces into reproducible runs.

Every subcommand resolves its arguments, runs single-seeded, and drops a
JSON run manifest next to its outputs with enough detail to replay the run
byte for byte.
"""

from __future__ import annotations

import os

# Pin BLAS pools before numpy comes in, so runs are reproducible.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import logging
import sys
import time

import numpy as np

from . import __version__
from .edi import DEFAULT_C_GRID, EdiParams, edi_deblur, estimate_c, reconstruct_at
from .errors import ConfigError, ToolkitError
from .events import read_events, voxelize
from .imageio import read_image, write_image
from .metrics import MetricReport, psnr, ssim
from .model import ModelConfig
from .simulate import DatasetConfig, make_dataset, read_manifest, standard_toy_config
from .tensorkit import save_checkpoint
from .train import (
    TrainConfig,
    ablate,
    ablation_table,
    evaluate_manifest,
    load_model,
    train_toy,
)

log = logging.getLogger("evdeblur")


# ---------------------------------------------------------------------------
# Config file parsing (plain key=value lines)
# ---------------------------------------------------------------------------

def parse_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _coerce(raw: str, target_type):
    if target_type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    # tuples: comma-separated items, element type from the raw content
    items = [s.strip() for s in raw.split(",") if s.strip()]
    try:
        return tuple(float(s) if "." in s or "e" in s.lower() else int(s) for s in items)
    except ValueError:
        return tuple(items)


def dataclass_from_kv(cls, values: dict[str, str], defaults=None):
    """Fill a dataclass from string values; unknown keys are errors."""
    base = defaults or cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} key: {key}")
        current = getattr(base, key)
        kwargs[key] = _coerce(raw, type(current))
    return dataclasses.replace(base, **kwargs)


def split_model_train_config(values: dict[str, str]) -> tuple[dict, dict]:
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    model_kv, train_kv = {}, {}
    for key, raw in values.items():
        if key in model_keys:
            model_kv[key] = raw
        elif key in train_keys:
            train_kv[key] = raw
        else:
            raise ConfigError(f"unknown config key: {key}")
    return model_kv, train_kv


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

def _atomic_write(path, text: str) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def write_run_manifest(
    subcommand: str,
    args: dict,
    seed: int,
    threads: int,
    inputs: list[str],
    outputs: list[str],
    wall_time_s: float,
    manifest_path,
) -> None:
    record = {
        "subcommand": subcommand,
        "args": {k: (os.fspath(v) if hasattr(v, "__fspath__") else v) for k, v in args.items()},
        "seed": seed,
        "threads": threads,
        "inputs": [os.fspath(p) for p in inputs],
        "outputs": [os.fspath(p) for p in outputs],
        "version": __version__,
        "wall_time_s": round(wall_time_s, 3),
    }
    _atomic_write(manifest_path, json.dumps(record, indent=2, sort_keys=True) + "\n")


def manifest_path_for(out) -> str:
    out = os.fspath(out)
    if os.path.isdir(out) or out.endswith(os.sep):
        return os.path.join(out, "run_manifest.json")
    return out + ".run.json"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(ns) -> dict:
    if ns.preset == "standard-toy":
        cfg = standard_toy_config(seed=ns.seed)
    else:
        cfg = DatasetConfig(seed=ns.seed)
    if ns.config:
        cfg = dataclass_from_kv(DatasetConfig, parse_kv_file(ns.config), defaults=cfg)
        if ns.seed_given:
            cfg = dataclasses.replace(cfg, seed=ns.seed)
    os.makedirs(ns.out, exist_ok=True)
    manifests = make_dataset(cfg, ns.out)
    log.info("wrote %s scenes under %s", cfg.n_scenes, ns.out)
    return {
        "args": {"config": ns.config, "preset": ns.preset, "out": ns.out},
        "seed": cfg.seed,
        "inputs": [ns.config] if ns.config else [],
        "outputs": [manifests["train"], manifests["test"]],
    }


def cmd_voxelize(ns) -> dict:
    stream = read_events(ns.events)
    grid = voxelize(stream, ns.bins)
    save_checkpoint({"voxel": grid.bins}, ns.out)
    log.info("voxelized %d events into %s bins", len(stream), ns.bins)
    return {
        "args": {"events": ns.events, "bins": ns.bins, "out": ns.out},
        "inputs": [ns.events],
        "outputs": [ns.out],
    }


def _resolve_c(ns, blur, stream) -> float:
    if ns.estimate_c:
        value = estimate_c(blur, stream, grid=DEFAULT_C_GRID)
        log.info("estimated contrast threshold c=%s", value)
        return value
    if ns.c is None:
        raise ConfigError("provide --c or --estimate-c")
    return ns.c


def cmd_edi(ns) -> dict:
    blur = read_image(ns.blur)
    stream = read_events(ns.events)
    c = _resolve_c(ns, blur, stream)
    params = EdiParams(c=c, n_samples=ns.n_samples)
    if ns.mid:
        t = 0.5 * (stream.t0 + stream.t1)
    elif ns.t is not None:
        t = ns.t
    else:
        t = stream.t0
    out = reconstruct_at(blur, stream, params, t) if t != stream.t0 else edi_deblur(
        blur, stream, params
    )
    write_image(np.clip(out, 0.0, 1.0), ns.out)
    return {
        "args": {"blur": ns.blur, "events": ns.events, "c": c,
                 "estimate_c": False, "t": t, "mid": False,
                 "n_samples": ns.n_samples, "out": ns.out},
        "inputs": [ns.blur, ns.events],
        "outputs": [ns.out],
    }


def cmd_train(ns) -> dict:
    model_cfg = ModelConfig(seed=ns.seed)
    hyper = TrainConfig()
    if ns.config:
        model_kv, train_kv = split_model_train_config(parse_kv_file(ns.config))
        model_cfg = dataclass_from_kv(ModelConfig, model_kv, defaults=model_cfg)
        hyper = dataclass_from_kv(TrainConfig, train_kv, defaults=hyper)
        if ns.seed_given:
            model_cfg = dataclasses.replace(model_cfg, seed=ns.seed)
    os.makedirs(ns.out, exist_ok=True)
    _, train_log = train_toy(
        ns.manifest,
        model_cfg,
        hyper,
        out_dir=ns.out,
        val_manifest=ns.val_manifest,
        resume=ns.resume,
        log_fn=lambda e: log.info("epoch %s: loss=%.5f psnr=%s", e["epoch"], e["loss"],
                                  round(e.get("psnr", float("nan")), 3)),
    )
    outputs = [os.path.join(ns.out, "state.edkp"), os.path.join(ns.out, "best.edkp"),
               os.path.join(ns.out, "train_log.jsonl")]
    return {
        "args": {"manifest": ns.manifest, "val_manifest": ns.val_manifest,
                 "config": ns.config, "resume": ns.resume, "out": ns.out},
        "seed": model_cfg.seed,
        "inputs": [p for p in (ns.manifest, ns.val_manifest, ns.config, ns.resume) if p],
        "outputs": outputs,
        "final_loss": train_log[-1]["loss"] if train_log else None,
    }


def cmd_infer(ns) -> dict:
    weights, cfg = load_model(ns.checkpoint)
    blur = read_image(ns.blur)
    stream = read_events(ns.events)
    from .model import predict_image

    out = predict_image(blur, stream, cfg, weights)
    write_image(out, ns.out)
    return {
        "args": {"checkpoint": ns.checkpoint, "blur": ns.blur,
                 "events": ns.events, "out": ns.out},
        "inputs": [ns.checkpoint, ns.blur, ns.events],
        "outputs": [ns.out],
    }


def _eval_edi_entry(entry, c, n_samples):
    blur_p, events_p, gt_p = entry
    blur = read_image(blur_p)
    stream = read_events(events_p)
    gt = read_image(gt_p)
    recon = np.clip(
        reconstruct_at(blur, stream, EdiParams(c=c, n_samples=n_samples),
                       0.5 * (stream.t0 + stream.t1)),
        0.0,
        1.0,
    )
    return psnr(recon, gt), ssim(recon, gt), psnr(blur, gt)


def cmd_eval(ns) -> dict:
    entries = read_manifest(ns.manifest)
    names = [os.path.basename(b) for b, _, _ in entries]
    if ns.edi:
        if ns.c is None and not ns.estimate_c:
            raise ConfigError("--edi needs --c or --estimate-c")
        psnrs, ssims, base = [], [], []
        for entry in entries:
            c = ns.c
            if ns.estimate_c:
                c = estimate_c(read_image(entry[0]), read_events(entry[1]), DEFAULT_C_GRID)
            p, s, b = _eval_edi_entry(entry, c, ns.n_samples)
            psnrs.append(p)
            ssims.append(s)
            base.append(b)
        report = MetricReport(psnrs, ssims, names)
        inputs = [ns.manifest]
    else:
        if not ns.checkpoint:
            raise ConfigError("provide --checkpoint or --edi")
        report, base = evaluate_manifest(ns.checkpoint, ns.manifest, threads=ns.threads)
        report.names = names
        inputs = [ns.manifest, ns.checkpoint]
    lines = report.to_json_lines().rstrip("\n").splitlines()
    payload = [json.loads(l) for l in lines]
    for rec, b in zip(payload, base):
        rec["psnr_blur"] = b
    payload[-1]["psnr_blur"] = float(np.mean(base))
    _atomic_write(ns.out, "\n".join(json.dumps(r) for r in payload) + "\n")
    print(report.summary())
    return {
        "args": {"manifest": ns.manifest, "checkpoint": ns.checkpoint,
                 "edi": ns.edi, "c": ns.c, "estimate_c": ns.estimate_c,
                 "n_samples": ns.n_samples, "out": ns.out},
        "inputs": inputs,
        "outputs": [ns.out],
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
    }


def cmd_ablate(ns) -> dict:
    model_cfg = ModelConfig(seed=ns.seed)
    hyper = TrainConfig()
    if ns.config:
        model_kv, train_kv = split_model_train_config(parse_kv_file(ns.config))
        model_cfg = dataclass_from_kv(ModelConfig, model_kv, defaults=model_cfg)
        hyper = dataclass_from_kv(TrainConfig, train_kv, defaults=hyper)
    rows = ns.rows.split(",") if ns.rows else None
    results = ablate(
        ns.manifest, ns.val_manifest, model_cfg, hyper,
        rows=rows, out_dir=ns.work_dir, workers=ns.threads,
    )
    # wall times stay out of the persisted table so reruns are byte-identical
    persisted = [{k: v for k, v in r.items() if k != "train_seconds"} for r in results]
    _atomic_write(ns.out, "\n".join(json.dumps(r) for r in persisted) + "\n")
    print(ablation_table(results))
    return {
        "args": {"manifest": ns.manifest, "val_manifest": ns.val_manifest,
                 "config": ns.config, "rows": ns.rows, "work_dir": ns.work_dir,
                 "out": ns.out},
        "seed": model_cfg.seed,
        "inputs": [p for p in (ns.manifest, ns.val_manifest, ns.config) if p],
        "outputs": [ns.out],
    }


GRADCHECK_TOLERANCE = 1e-4


def _gradcheck_cases(rng):
    from . import tensorkit as tk
    from .tensorkit import Tensor

    def offsets(shape):
        return Tensor(
            rng.integers(-2, 2, size=shape).astype(np.float64)
            + rng.uniform(0.1, 0.9, size=shape)
        )

    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = Tensor(rng.standard_normal(3) * 0.1)
    cases = {
        "conv2d": (lambda ts: tk.conv2d(ts[0], ts[1], ts[2], padding=1), [x, w, b]),
        "modulated_deform_conv2d": (
            lambda ts: tk.modulated_deform_conv2d(ts[0], ts[1], ts[2], ts[3]),
            [
                Tensor(rng.standard_normal((1, 2, 5, 5))),
                Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5),
                offsets((1, 18, 5, 5)),
                Tensor(rng.uniform(0.2, 0.8, size=(1, 9, 5, 5))),
            ],
        ),
        "convlstm_cell": (
            lambda ts: tk.concat_channels(list(tk.convlstm_cell(ts[0], ts[1], ts[2], ts[3], ts[4]))),
            [
                Tensor(rng.standard_normal((1, 2, 4, 4)) * 0.5),
                Tensor(rng.standard_normal((1, 2, 4, 4)) * 0.5),
                Tensor(rng.standard_normal((1, 2, 4, 4)) * 0.5),
                Tensor(rng.standard_normal((8, 4, 3, 3)) * 0.3),
                Tensor(rng.standard_normal(8) * 0.1),
            ],
        ),
        "bilinear_sample": (
            lambda ts: tk.bilinear_sample(ts[0], ts[1], ts[2]),
            [
                Tensor(rng.standard_normal((1, 2, 6, 6))),
                Tensor(rng.integers(0, 4, size=5) + rng.uniform(0.1, 0.9, size=5)),
                Tensor(rng.integers(0, 4, size=5) + rng.uniform(0.1, 0.9, size=5)),
            ],
        ),
        "upsample_bilinear2": (
            lambda ts: tk.upsample_bilinear2(ts[0]),
            [Tensor(rng.standard_normal((1, 2, 4, 4)))],
        ),
        "avgpool2": (
            lambda ts: tk.avgpool2(ts[0]),
            [Tensor(rng.standard_normal((1, 2, 4, 4)))],
        ),
        "loss_multiscale": (None, None),  # assembled below
    }

    from .model import ModelConfig as MC
    from .model import ScalePrediction, loss_multiscale, perceptual_extractor

    cfg = MC(n_scales=1, base_channels=8, use_c2f=False, use_deblur_module=False,
             use_lstm=False, seed=0)
    gt = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 8, 8)))
    est = Tensor(gt.data + rng.uniform(0.1, 0.3, size=(1, 1, 8, 8)))
    extractor = perceptual_extractor(cfg)

    def loss_fn(ts):
        return loss_multiscale(
            [ScalePrediction(0, ts[0], ts[0])], gt, cfg, extractor
        )

    cases["loss_multiscale"] = (loss_fn, [est])
    return cases


def cmd_gradcheck(ns) -> dict:
    from .tensorkit import grad_check

    rng = np.random.default_rng(ns.seed)
    cases = _gradcheck_cases(rng)
    chosen = list(cases) if ns.op == "all" else [ns.op]
    unknown = [o for o in chosen if o not in cases]
    if unknown:
        raise ConfigError(f"unknown ops: {unknown}; known: {sorted(cases)}")
    results = {}
    failed = False
    for name in chosen:
        fn, inputs = cases[name]
        err = grad_check(fn, inputs, eps=1e-5, rng=np.random.default_rng(ns.seed + 1))
        ok = err < GRADCHECK_TOLERANCE
        failed |= not ok
        results[name] = err
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e}")
    if ns.out:
        _atomic_write(ns.out, json.dumps(results, indent=2, sort_keys=True) + "\n")
    if failed:
        raise ToolkitError(f"gradient check failed: {results}")
    return {
        "args": {"op": ns.op, "out": ns.out},
        "inputs": [],
        "outputs": [ns.out] if ns.out else [],
    }


def cmd_replay(ns) -> dict:
    with open(ns.manifest, "r", encoding="utf-8") as f:
        record = json.load(f)
    sub = record["subcommand"]
    if sub == "replay":
        raise ConfigError("cannot replay a replay manifest")
    argv = [sub]
    args = record["args"]
    handler_flags = {
        "simulate": [("config", "--config"), ("preset", "--preset"), ("out", "--out")],
        "voxelize": [("events", "--events"), ("bins", "--bins"), ("out", "--out")],
        "edi": [("blur", "--blur"), ("events", "--events"), ("c", "--c"),
                ("t", "--t"), ("n_samples", "--n-samples"), ("out", "--out")],
        "train": [("manifest", "--manifest"), ("val_manifest", "--val-manifest"),
                  ("config", "--config"), ("resume", "--resume"), ("out", "--out")],
        "infer": [("checkpoint", "--checkpoint"), ("blur", "--blur"),
                  ("events", "--events"), ("out", "--out")],
        "eval": [("manifest", "--manifest"), ("checkpoint", "--checkpoint"),
                 ("c", "--c"), ("estimate_c", "--estimate-c"),
                 ("n_samples", "--n-samples"), ("out", "--out")],
        "ablate": [("manifest", "--manifest"), ("val_manifest", "--val-manifest"),
                   ("config", "--config"), ("rows", "--rows"),
                   ("work_dir", "--work-dir"), ("out", "--out")],
        "gradcheck": [("op", "--op"), ("out", "--out")],
    }
    if sub not in handler_flags:
        raise ConfigError(f"unknown subcommand in manifest: {sub}")
    for key, flag in handler_flags[sub]:
        value = args.get(key)
        if value is None or value is False:
            continue
        if value is True:
            argv.append(flag)
        else:
            argv.extend([flag, str(value)])
    if sub == "eval" and args.get("edi"):
        argv.append("--edi")
    argv.extend(["--seed", str(record["seed"]), "--threads", str(record["threads"])])
    log.info("replaying: %s", " ".join(argv))
    code = main(argv, _in_replay=True)
    if code != 0:
        raise ToolkitError(f"replayed command exited with {code}")
    return {"args": {"manifest": ns.manifest}, "inputs": [ns.manifest], "outputs": []}


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdeblur",
        description="Event-based image deblurring: simulation, analytic "
        "baseline, and a trainable motion-aware network.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0,
                       help="single source of randomness (default 0)")
        p.add_argument("--threads", type=int, default=1,
                       help="evaluation parallelism; training ignores it")

    p = sub.add_parser("simulate", help="generate a synthetic blur+events dataset")
    p.add_argument("--config", help="dataset config file (key=value)")
    p.add_argument("--preset", choices=["standard-toy", "none"], default="none")
    p.add_argument("--out", required=True, help="output dataset directory")
    common(p)

    p = sub.add_parser("voxelize", help="events file -> voxel grid tensor file")
    p.add_argument("--events", required=True)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("edi", help="analytic double-integral deblurring")
    p.add_argument("--blur", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--c", type=float)
    p.add_argument("--estimate-c", action="store_true")
    p.add_argument("--t", type=float, help="reconstruction timestamp (default t0)")
    p.add_argument("--mid", action="store_true", help="reconstruct at mid-exposure")
    p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("train", help="train the deblurring network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--config", help="model+training config file (key=value)")
    p.add_argument("--resume", help="state.edkp to continue from")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("infer", help="run a checkpoint on one blur+events pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--blur", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("eval", help="score a checkpoint or the analytic baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--edi", action="store_true")
    p.add_argument("--c", type=float)
    p.add_argument("--estimate-c", action="store_true")
    p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("ablate", help="train/evaluate the toggle grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--rows", help="comma-separated row names (default: all)")
    p.add_argument("--work-dir", help="where per-row checkpoints go")
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of kernels")
    p.add_argument("--op", default="all", help="op name or 'all'")
    p.add_argument("--all", action="store_const", const="all", dest="op",
                   help="check every op (same as --op all)")
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("replay", help="re-run a previous run from its manifest")
    p.add_argument("manifest")
    common(p)
    return parser


HANDLERS = {
    "simulate": cmd_simulate,
    "voxelize": cmd_voxelize,
    "edi": cmd_edi,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "replay": cmd_replay,
}


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("EVDEBLUR_LOG", "info"), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None, _in_replay: bool = False) -> int:
    if not _in_replay:
        _setup_logging()
    raw_argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(raw_argv)
    ns.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in raw_argv)
    started = time.time()
    try:
        result = HANDLERS[ns.subcommand](ns)
    except ToolkitError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing-file: {exc}", file=sys.stderr)
        return 2
    if not _in_replay and ns.subcommand != "replay":
        out = result["args"].get("out") or result["args"].get("work_dir")
        if out:
            write_run_manifest(
                ns.subcommand,
                result["args"],
                result.get("seed", ns.seed),
                ns.threads,
                result.get("inputs", []),
                result.get("outputs", []),
                time.time() - started,
                manifest_path_for(out),
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
