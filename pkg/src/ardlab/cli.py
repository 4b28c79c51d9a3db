"""Command-line interface.

Subcommands map one-to-one onto the library modules: gen (teacher
trajectories), train, sample, manipulate, eval, attn, exposure, flops.
Every command that writes artifacts also writes a run.json provenance
record (flags, config snapshot, seed, version, wall time) and refuses
to overwrite existing outputs unless --force is given.

Exit codes: 0 ok, 2 configuration or input error, 3 refusal to
overwrite, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (DIT_XL2, arch_from_config, attention_report,
                       exposure_harness, flops_model, metric_report)
from .config import (ExperimentConfig, build_schedule, build_teacher,
                     load_experiment, validate_experiment, with_overrides)
from .dataset import load_dataset, save_dataset
from .errors import ArdError, ConfigError, NumericError, RefusalError
from .sampling import SamplerConfig, manipulate, sample, samples_to_dataset, write_pgm
from .student import (MaskOption, PredictionTarget, StudentConfig, load_student)
from .svgplot import bar_chart, line_chart, write_svg
from .teacher import TrajectoryGrid, generate_dataset
from .training import TrainConfig, train

log = logging.getLogger("ardlab")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("ARD_LOG", "info")
    if name not in _LOG_LEVELS:
        raise ConfigError(f"ARD_LOG must be one of {sorted(_LOG_LEVELS)}, "
                          f"got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name],
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _refuse_if_exists(path, force: bool) -> None:
    if Path(path).exists() and not force:
        raise RefusalError(f"{path} exists; pass --force to overwrite")


def _write_run(path, command: str, cfg: ExperimentConfig | None,
               t0: float, extra: dict | None = None) -> None:
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "wall_seconds": round(time.monotonic() - t0, 3),
    }
    if extra:
        record.update(extra)
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _experiment_from_args(args) -> ExperimentConfig:
    cfg = load_experiment(args.config) if getattr(args, "config", None) \
        else ExperimentConfig()
    over = {}
    for name in ("preset", "teacher_file", "steps", "seed", "threads",
                 "count", "fine_steps"):
        if hasattr(args, name):
            over[name] = getattr(args, name)
    if getattr(args, "cfg", None) is not None:
        over["cfg_scale"] = args.cfg
    if getattr(args, "mask", None) is not None:
        over["mask"] = MaskOption.parse(args.mask)
    if getattr(args, "n_history", None) is not None:
        over["history_layers"] = args.n_history
    if getattr(args, "target", None) is not None:
        over["target"] = PredictionTarget.parse(args.target)
    return with_overrides(cfg, **over)


def _load_ckpt(args):
    params, config = load_student(args.ckpt)
    over = {}
    if getattr(args, "mask", None) is not None:
        over["mask"] = MaskOption.parse(args.mask)
    if getattr(args, "n_history", None) is not None:
        over["history_layers"] = args.n_history
    if getattr(args, "target", None) is not None:
        over["target"] = PredictionTarget.parse(args.target)
    if over:
        config = replace(config, **over)
    return params, config


def _out_dir(args) -> Path:
    out = Path(args.out)
    _refuse_if_exists(out / "run.json", args.force)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------- gen

def cmd_gen(args) -> None:
    t0 = time.monotonic()
    cfg = _experiment_from_args(args)
    teacher = build_teacher(cfg)
    validate_experiment(cfg, teacher)
    sched = build_schedule(cfg)
    out = Path(args.out)
    _refuse_if_exists(out, args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid = TrajectoryGrid(cfg.steps, sched.T)
    ds = generate_dataset(teacher, sched, grid, cfg.count, cfg.cfg_scale,
                          cfg.seed, fine_steps=cfg.fine_steps,
                          threads=cfg.threads)
    save_dataset(ds, out)
    digest = _sha256(out)
    _write_run(Path(str(out) + ".run.json"), "gen", cfg, t0,
               {"sha256": digest, "path": str(out)})
    print(f"count={ds.count} D={ds.D} S={ds.S} sha256={digest}")


# ----------------------------------------------------------------- train

def cmd_train(args) -> None:
    t0 = time.monotonic()
    ds = load_dataset(args.data)
    cfg = _experiment_from_args(args)
    if getattr(args, "steps", None) is None and not getattr(args, "config", None):
        cfg = with_overrides(cfg, steps=ds.S)
    teacher = build_teacher(cfg)
    student = cfg.student
    if student.D != ds.D:
        # presets carry their own geometry; adopt the teacher's image when
        # the default student shape does not match the data
        student = replace(student, image=teacher.image,
                          num_classes=len(teacher.labels))
    cfg = replace(cfg, student=student)
    validate_experiment(cfg, teacher)
    flag_over = {
        "learning_rate": args.lr, "batch_size": args.batch,
        "iterations": args.iters, "ema_decay": args.ema,
        "disc_learning_rate": args.disc_lr, "grad_clip": args.grad_clip,
        "log_interval": args.log_interval, "ckpt_interval": args.ckpt_interval,
    }
    flag_over = {k: v for k, v in flag_over.items() if v is not None}
    if args.disc:
        flag_over["use_discriminator"] = True
    if args.disc_cond:
        flag_over["disc_class_conditional"] = True
    tcfg = replace(cfg.train, seed=cfg.seed, **flag_over)
    cfg = replace(cfg, train=tcfg)
    out = _out_dir(args)
    log.info("training %s for %d iterations on %d trajectories",
             cfg.student.mask.value, tcfg.iterations, ds.count)
    sched = build_schedule(cfg)
    result = train(ds, cfg.student, tcfg, teacher=teacher, sched=sched,
                   out_dir=out)
    final = result.metrics[-1] if result.metrics else {}
    _write_run(out / "run.json", "train", cfg, t0,
               {"data": str(args.data), "final_loss": final.get("loss"),
                "iterations": tcfg.iterations})
    print(f"iterations={tcfg.iterations} final_loss={final.get('loss'):.6e} "
          f"out={out}")


# ---------------------------------------------------------------- sample

def _sampler_from_args(args, cfg: ExperimentConfig) -> SamplerConfig:
    use_ema = Path(args.ckpt).name.startswith("ema")
    return SamplerConfig(count=args.count, seed=cfg.seed,
                         class_label=args.class_label, use_ema=use_ema)


def _dump_samples(result, config, sched, out: Path, n_pgm: int = 16) -> str:
    ds = samples_to_dataset(result, config, sched)
    path = out / "samples.ardt"
    save_dataset(ds, path)
    c, h, w = config.image
    for i in range(min(n_pgm, result.states.shape[0])):
        img = result.endpoints[i].reshape(c, h, w)
        write_pgm(out / f"sample_{i:04d}.pgm", img)
    return _sha256(path)


def cmd_sample(args) -> None:
    t0 = time.monotonic()
    params, config = _load_ckpt(args)
    cfg = _experiment_from_args(args)
    sched = build_schedule(cfg)
    sampler = _sampler_from_args(args, cfg)
    out = _out_dir(args)
    result = sample(params, config, sched, sampler, threads=cfg.threads)
    digest = _dump_samples(result, config, sched, out)
    _write_run(out / "run.json", "sample", cfg, t0,
               {"ckpt": str(args.ckpt), "count": sampler.count,
                "sha256": digest})
    print(f"count={sampler.count} S={config.steps} sha256={digest}")


def _load_source(args, config) -> np.ndarray:
    path = Path(args.source)
    if path.suffix == ".ardt":
        src_ds = load_dataset(path)
        if src_ds.S != config.steps or src_ds.D != config.D:
            raise ConfigError(f"source dataset geometry (S={src_ds.S}, "
                              f"D={src_ds.D}) does not match the model")
        idx = args.source_index
        if not (0 <= idx < src_ds.count):
            raise ConfigError(f"source-index {idx} outside dataset of "
                              f"{src_ds.count}")
        return src_ds.states[idx, config.steps - args.s_inject]
    if path.suffix == ".npy":
        return np.load(path)
    raise ConfigError(f"source must be .ardt or .npy, got {path.name}")


def cmd_manipulate(args) -> None:
    t0 = time.monotonic()
    params, config = _load_ckpt(args)
    cfg = _experiment_from_args(args)
    sched = build_schedule(cfg)
    sampler = _sampler_from_args(args, cfg)
    source = _load_source(args, config)
    out = _out_dir(args)
    result = manipulate(params, config, sched, source, args.s_inject, sampler,
                        threads=cfg.threads)
    digest = _dump_samples(result, config, sched, out)
    _write_run(out / "run.json", "manipulate", cfg, t0,
               {"ckpt": str(args.ckpt), "s_inject": args.s_inject,
                "source": str(args.source), "sha256": digest})
    print(f"count={sampler.count} s_inject={args.s_inject} sha256={digest}")


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> None:
    t0 = time.monotonic()
    params, config = _load_ckpt(args)
    cfg = _experiment_from_args(args)
    teacher = build_teacher(cfg)
    sched = build_schedule(cfg)
    ds = load_dataset(args.data)
    if ds.teacher_hash and ds.teacher_hash != teacher.hash64():
        raise ConfigError("dataset was generated by a different teacher than "
                          "the one configured for evaluation")
    if ds.S != config.steps or ds.D != config.D:
        raise ConfigError(f"dataset geometry (S={ds.S}, D={ds.D}) does not "
                          f"match the model")
    n = min(args.count, ds.count)
    sampler = SamplerConfig(count=args.count, seed=cfg.seed,
                            use_ema=Path(args.ckpt).name.startswith("ema"))
    drawn = sample(params, config, sched, sampler, threads=cfg.threads)
    report = metric_report(params, config, sched, teacher,
                           ds.states[:n], ds.labels[:n].astype(np.int64),
                           drawn.endpoints, drawn.labels.astype(np.int64))
    out = _out_dir(args)
    payload = {"endpoint_mse": report.endpoint_mse,
               "mmd2": report.mmd2_value,
               "per_step": {str(s): v for s, v in sorted(report.per_step.items())}}
    with open(out / "report.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run(out / "run.json", "eval", cfg, t0,
               {"ckpt": str(args.ckpt), "data": str(args.data)})
    print(f"endpoint_mse={report.endpoint_mse:.6e} mmd2={report.mmd2_value:.6e}")


# ------------------------------------------------------------------ attn

def cmd_attn(args) -> None:
    t0 = time.monotonic()
    params, config = _load_ckpt(args)
    cfg = _experiment_from_args(args)
    ds = load_dataset(args.data)
    if ds.S != config.steps or ds.D != config.D:
        raise ConfigError(f"dataset geometry (S={ds.S}, D={ds.D}) does not "
                          f"match the model")
    n = min(args.count, ds.count)
    report = attention_report(params, config, ds.states[:n, :config.steps],
                              ds.labels[:n].astype(np.int64))
    out = _out_dir(args)
    with open(out / "attention.csv", "w") as f:
        f.write("layer,query_step,input_step,score\n")
        for layer, s, sp, val in report.rows():
            f.write(f"{layer},{s},{sp},{val:.8e}\n")
    labels = [f"s'={sp}" for sp in range(config.steps, 0, -1)]
    series = {}
    for layer in range(config.layers):
        vec = report.scores[(layer, 1)]
        series[f"layer {layer}"] = [float(v) for v in vec]
    write_svg(out / "attention.svg",
              bar_chart(labels, series, title="attention mass at final step",
                        xlabel="history input", ylabel="mean weight"))
    _write_run(out / "run.json", "attn", cfg, t0, {"ckpt": str(args.ckpt)})
    print(f"layers={config.layers} steps={config.steps} rows={len(report.rows())}")


# -------------------------------------------------------------- exposure

def cmd_exposure(args) -> None:
    t0 = time.monotonic()
    params, config = _load_ckpt(args)
    cfg = _experiment_from_args(args)
    sched = build_schedule(cfg)
    ds = load_dataset(args.data)
    if ds.S != config.steps or ds.D != config.D:
        raise ConfigError(f"dataset geometry (S={ds.S}, D={ds.D}) does not "
                          f"match the model")
    n = min(args.count, ds.count)
    ks = [args.k] if args.k is not None else list(range(config.steps))
    curves = [exposure_harness(params, config, sched, ds.states[:n],
                               ds.labels[:n].astype(np.int64), k) for k in ks]
    out = _out_dir(args)
    with open(out / "exposure.csv", "w") as f:
        f.write("k,step,mse\n")
        for curve in curves:
            for k, s, v in curve.rows():
                f.write(f"{k},{s},{v:.8e}\n")
    write_svg(out / "exposure.svg", line_chart(
        {"endpoint": ([c.k for c in curves], [c.endpoint for c in curves])},
        title="endpoint error vs teacher-solved prefix",
        xlabel="k (ground-truth feeds)", ylabel="mse"))
    _write_run(out / "run.json", "exposure", cfg, t0, {"ckpt": str(args.ckpt)})
    for curve in curves:
        print(f"k={curve.k} endpoint_mse={curve.endpoint:.6e}")


# ----------------------------------------------------------------- flops

def cmd_flops(args) -> None:
    t0 = time.monotonic()
    if args.ckpt is not None:
        _, config = _load_ckpt(args)   # flag overrides already applied
        arch = arch_from_config(config)
        steps = args.steps if args.steps is not None else config.steps
        n_hist = config.history_layers
        mask = config.mask
    else:
        arch = DIT_XL2 if args.arch == "dit-xl2" \
            else arch_from_config(StudentConfig())
        steps = args.steps if args.steps is not None else 4
        n_hist = args.n_history if args.n_history is not None else 0
        mask = MaskOption.parse(args.mask) if args.mask else MaskOption.M4
    b = flops_model(arch, steps, n_hist, mask, args.mode)
    print(f"{b.gflops:.1f} GFLOPs")
    log.info("evals=%d proj=%d scores=%d values=%d mlp=%d embed_head=%d "
             "kv_extra=%d", b.evals, b.projections, b.attention_scores,
             b.attention_values, b.mlp, b.embed_head, b.kv_extra)
    if args.out is not None:
        out = _out_dir(args)
        payload = {"gflops": b.gflops, "total": b.total, "evals": b.evals,
                   "projections": b.projections,
                   "attention_scores": b.attention_scores,
                   "attention_values": b.attention_values, "mlp": b.mlp,
                   "embed_head": b.embed_head, "kv_extra": b.kv_extra,
                   "mode": args.mode, "steps": steps, "n_history": n_hist,
                   "mask": mask.value}
        with open(out / "flops.json", "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        _write_run(out / "run.json", "flops", None, t0)


# ---------------------------------------------------------------- parser

def _add_teacher_flags(p) -> None:
    p.add_argument("--preset", choices=["blobs8", "gmm2d"], default=None)
    p.add_argument("--teacher-file", default=None)
    p.add_argument("--cfg", type=float, default=None,
                   help="classifier-free guidance scale for the teacher")


def _add_model_flags(p) -> None:
    p.add_argument("--mask", choices=["m1", "m2", "m3", "m4"], default=None)
    p.add_argument("--n-history", type=int, default=None,
                   help="layers that read cached history blocks")
    p.add_argument("--target", choices=["next", "x0"], default=None)


def _add_common(p, out_required: bool = True) -> None:
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ardlab",
        description="desk-scale autoregressive distillation laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a teacher trajectory dataset")
    _add_teacher_flags(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fine-steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="distill a student from a dataset")
    p.add_argument("--data", required=True)
    _add_teacher_flags(p)
    _add_model_flags(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--ema", type=float, default=None)
    p.add_argument("--disc", action="store_true",
                   help="enable the adversarial term")
    p.add_argument("--disc-lr", type=float, default=None)
    p.add_argument("--disc-cond", action="store_true")
    p.add_argument("--log-interval", type=int, default=None)
    p.add_argument("--ckpt-interval", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_model_flags(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--class-label", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("manipulate",
                       help="sample with one input block substituted")
    p.add_argument("--ckpt", required=True)
    _add_model_flags(p)
    p.add_argument("--source", required=True, help=".npy block or .ardt file")
    p.add_argument("--source-index", type=int, default=0)
    p.add_argument("--s-inject", type=int, required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--class-label", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_manipulate)

    p = sub.add_parser("eval", help="fidelity metrics against the teacher")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True,
                   help="held-out teacher trajectories")
    _add_teacher_flags(p)
    _add_model_flags(p)
    p.add_argument("--count", type=int, default=256)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn", help="attention mass per history input")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--count", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("exposure",
                       help="error vs ground-truth-fed prefix length")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--k", type=int, default=None,
                   help="single prefix length (default: sweep 0..S-1)")
    _add_common(p)
    p.set_defaults(func=cmd_exposure)

    p = sub.add_parser("flops", help="closed-form cost accounting")
    p.add_argument("--arch", choices=["dit-xl2", "desk"], default="desk")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--mask", choices=["m1", "m2", "m3", "m4"], default=None)
    p.add_argument("--n-history", type=int, default=None)
    p.add_argument("--mode", choices=["student", "teacher-with-cfg", "kd"],
                   default="student")
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_flops)
    return ap


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except RefusalError as e:
        print(f"refused: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (ArdError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
