"""Trajectory dataset container and its binary file format.

Layout (all little-endian):

    magic        4 bytes  b"ARDT"
    version      u32      currently 1
    D            u32      state dimension
    S            u32      step count (each record stores S+1 states)
    count        u64      record count
    cfg_scale    f32      guidance scale the trajectories were solved with
    beta_min     f32
    beta_max     f32
    teacher_hash u64      identity of the generating mixture (0 for
                          student-generated trajectory files)
    then per record: class_label u32, seed u64,
                     (S+1)*D float32 states ordered x_{tau_S} first.

Readers reject unknown magics and versions.  save(load(p)) is
byte-identical to p.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError

MAGIC = b"ARDT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQfffQ")


def _record_dtype(S: int, D: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("seed", "<u8"), ("states", "<f4", (S + 1, D))])


@dataclass
class TrajectoryDataset:
    """In-memory trajectory corpus; one teacher ODE path per record."""

    D: int
    S: int
    cfg_scale: float
    beta_min: float
    beta_max: float
    teacher_hash: int
    states: np.ndarray      # (count, S+1, D) float32, x_{tau_S} first
    labels: np.ndarray      # (count,) uint32
    seeds: np.ndarray       # (count,) uint64

    def __post_init__(self):
        n = self.states.shape[0]
        if self.states.shape != (n, self.S + 1, self.D):
            raise ConfigError(f"states shape {self.states.shape} "
                              f"inconsistent with S={self.S}, D={self.D}")
        if self.labels.shape != (n,) or self.seeds.shape != (n,):
            raise ConfigError("labels/seeds length must match record count")
        if self.states.dtype != np.float32:
            raise ConfigError("states must be float32")

    @property
    def count(self) -> int:
        return self.states.shape[0]


def save_dataset(ds: TrajectoryDataset, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, ds.D, ds.S, ds.count,
                          ds.cfg_scale, ds.beta_min, ds.beta_max,
                          ds.teacher_hash & ((1 << 64) - 1))
    rec = np.empty(ds.count, dtype=_record_dtype(ds.S, ds.D))
    rec["label"] = ds.labels
    rec["seed"] = ds.seeds
    rec["states"] = ds.states
    Path(path).write_bytes(header + rec.tobytes())


def load_dataset(path) -> TrajectoryDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size or buf[:4] != MAGIC:
        raise LoadError(f"{path}: not a trajectory dataset (bad magic)")
    magic, version, D, S, count, cfg_scale, beta_min, beta_max, thash = \
        _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported dataset version {version}")
    dtype = _record_dtype(S, D)
    expect = _HEADER.size + count * dtype.itemsize
    if len(buf) != expect:
        raise LoadError(f"{path}: size {len(buf)} does not match header "
                        f"(expected {expect} bytes)")
    rec = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size, count=count)
    return TrajectoryDataset(
        D=int(D), S=int(S), cfg_scale=float(cfg_scale),
        beta_min=float(beta_min), beta_max=float(beta_max),
        teacher_hash=int(thash),
        states=np.ascontiguousarray(rec["states"]),
        labels=np.ascontiguousarray(rec["label"]),
        seeds=np.ascontiguousarray(rec["seed"]),
    )
