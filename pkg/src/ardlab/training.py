"""Distillation objectives and the training loop.

The default objective regresses every step's prediction onto the
teacher trajectory's next state (mean over batch, steps, and vector
elements, so learning rates transfer across dimensions and step
counts).  Forcing mask M1 recovers plain per-step distillation; S=1 is
knowledge distillation.  An optional hinge-loss discriminator on the
final prediction adds an adversarial term whose weight is balanced
adaptively from gradient norms at the output head.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import TrajectoryDataset
from .errors import ConfigError, NumericError, ShapeError
from .student import (MaskOption, PredictionTarget, StudentConfig, forward_train,
                      init_params, patchify_ops, save_student, target_transform)
from .teacher import (TrajectoryGrid, VPSchedule, generate_dataset,
                      record_seed, tweedie_x0)
from .tensor import Tape, Tensor

_F32 = np.float32


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 32
    iterations: int = 500
    ema_decay: float = 0.9999
    use_discriminator: bool = False
    disc_learning_rate: float = 1e-4
    disc_class_conditional: bool = False
    seed: int = 0
    log_interval: int = 10
    ckpt_interval: int = 0          # 0: checkpoint only at the end

    def __post_init__(self):
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be >= 1")
        if self.learning_rate <= 0 or self.disc_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip, "batch_size": self.batch_size,
            "iterations": self.iterations, "ema_decay": self.ema_decay,
            "use_discriminator": self.use_discriminator,
            "disc_learning_rate": self.disc_learning_rate,
            "disc_class_conditional": self.disc_class_conditional,
            "seed": self.seed, "log_interval": self.log_interval,
            "ckpt_interval": self.ckpt_interval,
        }


@dataclass
class TrajectoryBatch:
    """A minibatch of trajectories plus optional denoised regression targets."""

    states: np.ndarray                 # (B, S+1, D) float32, x_{tau_S} first
    labels: np.ndarray                 # (B,)
    x0_targets: np.ndarray | None = None   # (B, S, D), aligned with predictions


def make_x0_targets(teacher, sched: VPSchedule, states: np.ndarray,
                    labels: np.ndarray, w: float, steps: int) -> np.ndarray:
    """Teacher denoised estimates at each tau_s, aligned with the
    prediction layout (index j targets the query at step s = S - j)."""
    B = states.shape[0]
    S = steps
    out = np.empty((B, S, states.shape[2]), dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    for j in range(S):
        s = S - j
        t = sched.T * s / S
        for lab in np.unique(labels):
            rows = labels == lab
            out[rows, j] = tweedie_x0(teacher, sched, states[rows, j].astype(np.float64),
                                      t, int(lab), w).astype(np.float32)
    return out


def _loss_terms(params, config: StudentConfig, batch: TrajectoryBatch):
    """(total, per-step scalars ordered by sequence index j = S - s, preds)."""
    S = config.steps
    states = np.ascontiguousarray(batch.states, dtype=np.float32)
    if states.ndim != 3 or states.shape[1] != S + 1:
        raise ShapeError(f"batch states must be (B, {S + 1}, D), got {states.shape}")
    preds = forward_train(params, config, states[:, :S], batch.labels)
    if config.target is PredictionTarget.NEXT_SAMPLE:
        targets = states[:, 1:]
    else:
        if batch.x0_targets is None:
            raise ConfigError("predicted-x0 training needs batch.x0_targets "
                              "(see make_x0_targets)")
        targets = np.ascontiguousarray(batch.x0_targets, dtype=np.float32)
    per_step = []
    for j in range(S):
        diff = preds[:, j] - targets[:, j]
        per_step.append((diff * diff).mean())
    total = per_step[0]
    for term in per_step[1:]:
        total = total + term
    return total * (1.0 / S), per_step, preds


def ard_loss(params, config: StudentConfig, batch: TrajectoryBatch) -> Tensor:
    """History-aware regression loss over all steps (scalar)."""
    total, _, _ = _loss_terms(params, config, batch)
    return total


def step_loss(params, config: StudentConfig, batch: TrajectoryBatch) -> Tensor:
    """Per-step distillation baseline: the same loss with mask forced to M1."""
    total, _, _ = _loss_terms(params, replace(config, mask=MaskOption.M1), batch)
    return total


# discriminator evaluation counter, so tests can audit that the
# discriminator path never runs when it is disabled
_DISC_EVALS = 0


def disc_eval_count() -> int:
    return _DISC_EVALS


def reset_disc_eval_count() -> None:
    global _DISC_EVALS
    _DISC_EVALS = 0


_DISC_WIDTH = 64


def disc_param_shapes(config: StudentConfig, class_conditional: bool = False):
    pc = config.patch_dim
    shapes = {
        "disc.w1": (pc, _DISC_WIDTH), "disc.b1": (_DISC_WIDTH,),
        "disc.w2": (_DISC_WIDTH, _DISC_WIDTH), "disc.b2": (_DISC_WIDTH,),
        "disc.w3": (_DISC_WIDTH, 1), "disc.b3": (1,),
    }
    if class_conditional:
        shapes["disc.cls"] = (config.num_classes, _DISC_WIDTH)
    return shapes


def init_disc_params(config: StudentConfig, seed: int,
                     class_conditional: bool = False) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in disc_param_shapes(config, class_conditional).items():
        if name.endswith("b1") or name.endswith("b2") or name.endswith("b3"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = (0.05 * rng.standard_normal(shape)).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


def disc_forward(disc_params, config: StudentConfig, x, labels=None) -> Tensor:
    """Token-wise MLP critic: per-token logits averaged to one score per sample.

    x: (B, D) tensor or array of final predictions (or real draws).
    """
    global _DISC_EVALS
    _DISC_EVALS += 1
    if not isinstance(x, Tensor):
        x = Tensor(np.ascontiguousarray(x, dtype=np.float32))
    tok = patchify_ops(x, config.image, config.patch)          # (B, T, pc)
    h = T.matmul(tok, disc_params["disc.w1"]) + disc_params["disc.b1"]
    if labels is not None and "disc.cls" in disc_params:
        cls = T.gather_rows(disc_params["disc.cls"], np.asarray(labels))
        h = h + T.reshape(cls, (x.shape[0], 1, _DISC_WIDTH))
    h = T.gelu(h)
    h = T.gelu(T.matmul(h, disc_params["disc.w2"]) + disc_params["disc.b2"])
    logits = T.matmul(h, disc_params["disc.w3"]) + disc_params["disc.b3"]  # (B, T, 1)
    return T.reshape(logits, (x.shape[0], tok.shape[1])).mean(axis=1)


def discriminator_loss(disc_params, config: StudentConfig, student_final,
                       real, labels=None) -> tuple[Tensor, Tensor]:
    """Hinge GAN losses on the final prediction.

    d_loss = mean relu(1 - D(real)) + mean relu(1 + D(fake));
    g_loss = -mean D(fake).  Gradient flow follows whatever graph the
    inputs carry: pass a detached fake to train the critic, a live fake
    to train the generator.
    """
    d_fake = disc_forward(disc_params, config, student_final, labels)
    d_real = disc_forward(disc_params, config, real, labels)
    one = 1.0
    d_loss = T.relu(one - d_real).mean() + T.relu(d_fake + one).mean()
    g_loss = -d_fake.mean()
    return d_loss, g_loss


def adaptive_balance(g_reg_grad_norm: float, g_adv_grad_norm: float) -> float:
    """Weight for the adversarial term: ratio of gradient norms at the
    output head, guarded and clamped to [0, 1e4]."""
    lam = float(g_reg_grad_norm) / (float(g_adv_grad_norm) + 1e-4)
    return float(min(max(lam, 0.0), 1e4))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                     v={k: np.zeros_like(p.data) for k, p in params.items()})


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.square(a, dtype=np.float64).sum())
    return float(np.sqrt(total))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float):
    """Scale the whole gradient set so its global norm is at most max_norm."""
    pre = global_norm(grads.values())
    if pre > max_norm:
        scale = _F32(max_norm / pre)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, pre


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = _F32(beta1) * state.m[name] + _F32(1 - beta1) * g
        v = state.v[name] = _F32(beta2) * state.v[name] + _F32(1 - beta2) * (g * g)
        update = (m / _F32(b1t)) / (np.sqrt(v / _F32(b2t)) + _F32(eps))
        new = p.data - _F32(lr) * update
        if weight_decay > 0.0:
            new = new - _F32(lr * weight_decay) * p.data
        p.data = new


def ema_init(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, Tensor],
               decay: float) -> None:
    d = _F32(decay)
    one_minus = _F32(1.0 - decay)
    for k, p in params.items():
        shadow[k] = d * shadow[k] + one_minus * p.data


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    ema: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    disc_params: dict[str, Tensor] | None = None


def _metrics_header(S: int) -> list[str]:
    return ["iter", "loss"] + [f"loss_s{s}" for s in range(1, S + 1)] + \
        ["grad_norm", "lambda", "seconds"]


def _metrics_row(row: dict, S: int) -> list[str]:
    vals = [str(row["iter"]), f"{row['loss']:.8e}"]
    vals += [f"{row['loss_by_step'][s]:.8e}" for s in range(1, S + 1)]
    vals += [f"{row['grad_norm']:.8e}", f"{row['lambda']:.8e}", f"{row['seconds']:.3f}"]
    return vals


def train(dataset: TrajectoryDataset | None, config: StudentConfig,
          tcfg: TrainConfig, teacher=None, sched: VPSchedule | None = None,
          out_dir=None, online: bool = False, cfg_scale: float | None = None,
          fine_steps: int = 100) -> TrainResult:
    """Optimize a student on teacher trajectories.

    Offline (default): minibatches are drawn with replacement from
    ``dataset``.  With online=True each batch is regenerated from the
    teacher instead (dataset optional; needs teacher, sched, and a
    cfg_scale to inherit or pass).  Deterministic for a fixed config:
    identical seeds give bitwise-identical parameters and checkpoints.
    Raises NumericError with diagnostics if the loss stops being finite.
    """
    grid = None
    if online:
        if teacher is None or sched is None:
            raise ConfigError("online training regenerates batches and needs "
                              "both the teacher and a schedule")
        if teacher.D != config.D:
            raise ConfigError(f"teacher D={teacher.D} != config D={config.D}")
        grid = TrajectoryGrid(config.steps, sched.T)
    elif dataset is None:
        raise ConfigError("train needs a trajectory dataset (or online=True)")
    if dataset is not None:
        if dataset.S != config.steps:
            raise ConfigError(f"dataset has S={dataset.S}, student expects {config.steps}")
        if dataset.D != config.D:
            raise ConfigError(f"dataset D={dataset.D} != config D={config.D}")
        if sched is None:
            sched = VPSchedule(beta_min=dataset.beta_min, beta_max=dataset.beta_max)
        if cfg_scale is None:
            cfg_scale = dataset.cfg_scale
    if online and cfg_scale is None:
        raise ConfigError("online training needs cfg_scale "
                          "(no dataset to inherit it from)")
    needs_teacher = (config.target is PredictionTarget.PREDICTED_X0
                     or tcfg.use_discriminator)
    if needs_teacher and teacher is None:
        raise ConfigError("predicted-x0 targets and the discriminator both "
                          "need the analytic teacher at training time")

    params = init_params(config, tcfg.seed)
    opt = adam_init(params)
    ema = ema_init(params)
    disc_params = None
    disc_opt = None
    real_rng = None
    if tcfg.use_discriminator:
        disc_params = init_disc_params(config, tcfg.seed + 1,
                                       tcfg.disc_class_conditional)
        disc_opt = adam_init(disc_params)
        real_rng = np.random.Generator(np.random.Philox(key=np.uint64(tcfg.seed)))

    rng = np.random.Generator(np.random.PCG64(tcfg.seed))
    S = config.steps
    metrics: list[dict] = []
    csv_writer = None
    csv_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "metrics.csv", "w", newline="")
        csv_writer = csv.writer(csv_file)
        csv_writer.writerow(_metrics_header(S))
    t_start = time.monotonic()

    try:
        for it in range(1, tcfg.iterations + 1):
            if online:
                fresh = generate_dataset(teacher, sched, grid, tcfg.batch_size,
                                         cfg_scale, record_seed(tcfg.seed, it),
                                         fine_steps)
                states = fresh.states
                labels = fresh.labels.astype(np.int64)
            else:
                idx = rng.integers(0, dataset.count, size=tcfg.batch_size)
                states = dataset.states[idx]
                labels = dataset.labels[idx].astype(np.int64)
            x0t = None
            if config.target is PredictionTarget.PREDICTED_X0:
                x0t = make_x0_targets(teacher, sched, states, labels,
                                      cfg_scale, S)
            batch = TrajectoryBatch(states=states, labels=labels, x0_targets=x0t)

            lam = 0.0
            fake_value = None
            with Tape() as tape:
                total, per_step, preds = _loss_terms(params, config, batch)
                total_val = total.item()
                step_vals = [p.item() for p in per_step]
                if not np.isfinite(total_val):
                    bad = next((S - j for j, v in enumerate(step_vals)
                                if not np.isfinite(v)), 0)
                    pnorm = global_norm(p.data for p in params.values())
                    raise NumericError(
                        f"non-finite loss at iteration {it} (step index s={bad}, "
                        f"parameter norm {pnorm:.6e})")
                grads_reg = tape.backward(total)
                grads = {k: grads_reg[p] for k, p in params.items()}
                if tcfg.use_discriminator:
                    fake = target_transform(config, sched,
                                            preds[:, S - 1], states[:, S - 1], 1)
                    g_loss = -disc_forward(disc_params, config, fake,
                                           labels if tcfg.disc_class_conditional
                                           else None).mean()
                    fake_value = fake.data.copy()
                    grads_adv = tape.backward(g_loss)
                    head = params["final.head_w"]
                    lam = adaptive_balance(
                        float(np.linalg.norm(grads_reg[head].astype(np.float64))),
                        float(np.linalg.norm(grads_adv[head].astype(np.float64))))
                    for k, p in params.items():
                        ga = grads_adv.get(p)
                        if ga is not None:
                            grads[k] = grads[k] + _F32(lam) * ga

            grads, pre_norm = clip_grads(grads, tcfg.grad_clip)
            adam_step(params, grads, opt, tcfg.learning_rate, tcfg.weight_decay)
            ema_update(ema, params, tcfg.ema_decay)

            if tcfg.use_discriminator:
                real = teacher.sample_data(real_rng, labels).astype(np.float32)
                with Tape() as dtape:
                    d_loss, _ = discriminator_loss(
                        disc_params, config, fake_value, real,
                        labels if tcfg.disc_class_conditional else None)
                    dgrads_t = dtape.backward(d_loss)
                dgrads = {k: dgrads_t[p] for k, p in disc_params.items()}
                dgrads, _ = clip_grads(dgrads, tcfg.grad_clip)
                adam_step(disc_params, dgrads, disc_opt, tcfg.disc_learning_rate)

            if it == 1 or it % tcfg.log_interval == 0 or it == tcfg.iterations:
                row = {
                    "iter": it, "loss": total_val,
                    "loss_by_step": {S - j: step_vals[j] for j in range(S)},
                    "grad_norm": pre_norm, "lambda": lam,
                    "seconds": time.monotonic() - t_start,
                }
                metrics.append(row)
                if csv_writer is not None:
                    csv_writer.writerow(_metrics_row(row, S))
                    csv_file.flush()
            if out_dir is not None and (
                    (tcfg.ckpt_interval and it % tcfg.ckpt_interval == 0)
                    or it == tcfg.iterations):
                save_student(out_dir, params, config, stem=f"step_{it}")
                ema_t = {k: Tensor(v) for k, v in ema.items()}
                save_student(out_dir, ema_t, config, stem=f"ema_{it}")
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(params=params, ema=ema, metrics=metrics,
                       disc_params=disc_params)
