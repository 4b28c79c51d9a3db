"""Experiment configuration: one JSON-compatible bundle per run.

A config file groups the teacher choice, diffusion schedule, step grid,
student architecture, training settings, and sampling settings.  Flags
override file values.  Cross-field consistency is checked up front so a
mismatched grid or image geometry fails before any heavy work starts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .student import StudentConfig
from .teacher import (GaussianMixtureTeacher, PRESETS, VPSchedule, make_preset)
from .training import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str | None = "blobs8"
    teacher_file: str | None = None
    beta_min: float = 0.1
    beta_max: float = 20.0
    steps: int = 4
    cfg_scale: float = 1.5
    fine_steps: int = 100
    count: int = 1000
    seed: int = 0
    threads: int = 1
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student"] = self.student.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "student" in d:
            d["student"] = StudentConfig.from_dict(d["student"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return ExperimentConfig(**d)


def load_experiment(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return ExperimentConfig.from_dict(raw)


def save_experiment(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def build_teacher(cfg: ExperimentConfig) -> GaussianMixtureTeacher:
    if cfg.teacher_file is not None:
        return load_mixture(cfg.teacher_file)
    if cfg.preset is None:
        raise ConfigError("config needs either a preset name or a teacher file")
    return make_preset(cfg.preset)


def build_schedule(cfg: ExperimentConfig) -> VPSchedule:
    return VPSchedule(beta_min=cfg.beta_min, beta_max=cfg.beta_max)


def load_mixture(path) -> GaussianMixtureTeacher:
    """Read a mixture description: JSON with means, stds, weights,
    class_map (label -> component indices), image (C, H, W)."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read mixture {path}: {e}") from None
    needed = {"means", "stds", "weights", "class_map", "image"}
    missing = needed - set(raw)
    if missing:
        raise ConfigError(f"mixture file lacks fields: {sorted(missing)}")
    class_map = {int(k): tuple(v) for k, v in raw["class_map"].items()}
    return GaussianMixtureTeacher(
        means=np.asarray(raw["means"], dtype=np.float64),
        stds=np.asarray(raw["stds"], dtype=np.float64),
        weights=np.asarray(raw["weights"], dtype=np.float64),
        class_map=class_map,
        image=tuple(raw["image"]))


def validate_experiment(cfg: ExperimentConfig,
                        teacher: GaussianMixtureTeacher | None = None) -> None:
    """Cross-field checks; raises ConfigError naming the offending field."""
    if cfg.steps != cfg.student.steps:
        raise ConfigError(f"steps: grid has S={cfg.steps} but the student is "
                          f"configured for {cfg.student.steps}")
    if cfg.preset is not None and cfg.teacher_file is None \
            and cfg.preset not in PRESETS:
        raise ConfigError(f"preset: unknown name {cfg.preset!r}, "
                          f"choices {sorted(PRESETS)}")
    if cfg.fine_steps < cfg.steps or cfg.fine_steps % cfg.steps:
        raise ConfigError(f"fine_steps: {cfg.fine_steps} must be a positive "
                          f"multiple of steps={cfg.steps}")
    if cfg.count < 1:
        raise ConfigError(f"count: must be >= 1, got {cfg.count}")
    if cfg.threads < 1:
        raise ConfigError(f"threads: must be >= 1, got {cfg.threads}")
    if cfg.cfg_scale < 0:
        raise ConfigError(f"cfg_scale: must be >= 0, got {cfg.cfg_scale}")
    if teacher is not None:
        if teacher.D != cfg.student.D:
            raise ConfigError(
                f"student.image: flattens to D={cfg.student.D} but the "
                f"teacher lives in D={teacher.D}")
        n_labels = len(teacher.labels)
        if cfg.student.num_classes != n_labels:
            raise ConfigError(
                f"student.num_classes: {cfg.student.num_classes} but the "
                f"teacher defines {n_labels} classes")


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Replace top-level fields; None values mean 'not given' and are skipped."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    student_over = {k: clean.pop(k) for k in
                    ("mask", "history_layers", "target") if k in clean}
    if "steps" in clean:
        student_over["steps"] = clean["steps"]
    if student_over:
        clean["student"] = replace(cfg.student, **student_over)
    return replace(cfg, **clean)
