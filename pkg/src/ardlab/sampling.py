"""Autoregressive sampling with the key/value cache, plus manipulation.

Generation starts from a Gaussian prior block and queries the student
once per step, feeding each prediction back as the next input block.
Work is split into fixed-size shards so results are bitwise identical
for any thread count: the shard boundaries depend only on the sample
count, and each sample's prior is derived from its own counter-based
seed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import TrajectoryDataset
from .errors import ConfigError, RangeError, ShapeError
from .student import (KVCache, PredictionTarget, StudentConfig, forward_step,
                      target_transform)
from .teacher import VPSchedule, record_seed

SAMPLE_SHARD = 64


@dataclass(frozen=True)
class SamplerConfig:
    count: int
    seed: int = 0
    class_label: int | None = None     # None: uniform over the label set
    use_ema: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")


@dataclass
class SampleResult:
    """Full predicted trajectories: index j holds the block consumed (j < S)
    or produced (j = S) at step s = S - j, so the layout matches teacher
    trajectory datasets."""

    states: np.ndarray              # (count, S+1, D) float32
    labels: np.ndarray              # (count,) uint32
    seeds: np.ndarray               # (count,) uint64
    consumed_rows: list[int]        # cached key rows read per history layer,
                                    # per stream, over one full trajectory

    @property
    def endpoints(self) -> np.ndarray:
        return self.states[:, -1]


def _draw_prior(sampler: SamplerConfig, config: StudentConfig, index: int):
    seed = record_seed(sampler.seed, index)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    if sampler.class_label is None:
        label = int(rng.integers(0, config.num_classes))
    else:
        label = int(sampler.class_label)
        if not (0 <= label < config.num_classes):
            raise RangeError(f"class label {label} outside 0..{config.num_classes - 1}")
    x_T = rng.standard_normal(config.D).astype(np.float32)
    return seed, label, x_T


def _run_shard(params, config: StudentConfig, sched, labels: np.ndarray,
               x_T: np.ndarray, source: np.ndarray | None, s_inject: int,
               cache_enabled: bool):
    """Chain forward_step over one shard; returns (states, consumed)."""
    B, S = x_T.shape[0], config.steps
    states = np.empty((B, S + 1, config.D), dtype=np.float32)
    states[:, 0] = x_T
    cache = KVCache(config, enabled=cache_enabled)
    x = x_T
    for s in range(S, 0, -1):
        if source is not None and s == s_inject:
            x = source
        states[:, S - s] = x
        raw, cache = forward_step(params, config, x, s, cache, labels)
        x = np.asarray(target_transform(config, sched, raw, states[:, S - s], s),
                       dtype=np.float32)
    states[:, S] = x
    return states, list(cache.consumed)


def _sample_impl(params, config: StudentConfig, sched, sampler: SamplerConfig,
                 source: np.ndarray | None, s_inject: int, threads: int,
                 cache_enabled: bool) -> SampleResult:
    if config.target is PredictionTarget.PREDICTED_X0 and sched is None:
        raise ConfigError("predicted-x0 sampling needs the diffusion schedule")
    n = sampler.count
    seeds = np.empty(n, dtype=np.uint64)
    labels = np.empty(n, dtype=np.uint32)
    x_T = np.empty((n, config.D), dtype=np.float32)
    for i in range(n):
        seeds[i], labels[i], x_T[i] = _draw_prior(sampler, config, i)

    states = np.empty((n, config.steps + 1, config.D), dtype=np.float32)
    shards = [(lo, min(lo + SAMPLE_SHARD, n)) for lo in range(0, n, SAMPLE_SHARD)]
    consumed: list[list[int]] = []

    def work(bounds):
        lo, hi = bounds
        src = None if source is None else source[lo:hi]
        return bounds, _run_shard(params, config, sched,
                                  labels[lo:hi].astype(np.int64), x_T[lo:hi],
                                  src, s_inject, cache_enabled)

    if threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, shards))
    else:
        results = [work(b) for b in shards]
    for (lo, hi), (block, rows) in results:
        states[lo:hi] = block
        consumed.append(rows)
    for rows in consumed[1:]:
        if rows != consumed[0]:
            raise ConfigError("cache accounting diverged across shards")
    return SampleResult(states=states, labels=labels, seeds=seeds,
                        consumed_rows=consumed[0] if consumed else [])


def sample(params, config: StudentConfig, sched: VPSchedule | None,
           sampler: SamplerConfig, threads: int = 1,
           _disable_cache: bool = False) -> SampleResult:
    """Draw priors and autoregress the student down to x_hat_{tau_0}.

    Deterministic for fixed (seed, params, config) at any thread count.
    """
    return _sample_impl(params, config, sched, sampler, None, 0, threads,
                        not _disable_cache)


def manipulate(params, config: StudentConfig, sched: VPSchedule | None,
               source: np.ndarray, s_inject: int, sampler: SamplerConfig,
               threads: int = 1) -> SampleResult:
    """Sample, but substitute ``source`` for the block consumed at step
    s_inject.  Earlier steps (and the cache they built) are untouched;
    later steps continue from the substituted block."""
    S = config.steps
    if not (1 <= s_inject <= S - 1):
        raise RangeError(f"s_inject must lie in 1..{S - 1}, got {s_inject}")
    src = np.ascontiguousarray(source, dtype=np.float32)
    if src.ndim == 1:
        src = np.broadcast_to(src, (sampler.count, src.shape[0])).copy()
    if src.shape != (sampler.count, config.D):
        raise ShapeError(f"source must be ({sampler.count}, {config.D}) or "
                         f"({config.D},), got {source.shape}")
    return _sample_impl(params, config, sched, sampler, src, s_inject,
                        threads, True)


def samples_to_dataset(result: SampleResult, config: StudentConfig,
                       sched: VPSchedule) -> TrajectoryDataset:
    """Re-express sampled trajectories in the trajectory-dataset format so
    teacher and student outputs share tooling.  Student provenance is
    marked by a zero teacher hash and zero guidance scale."""
    return TrajectoryDataset(
        D=config.D, S=config.steps, cfg_scale=0.0,
        beta_min=sched.beta_min, beta_max=sched.beta_max, teacher_hash=0,
        states=result.states, labels=result.labels, seeds=result.seeds)


def write_pgm(path, image: np.ndarray) -> None:
    """Dump one sample as a binary (P5) PGM, channels stacked vertically.

    Values are rescaled per image to the full 8-bit range; a constant
    image maps to zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected (C, H, W), got shape {img.shape}")
    c, h, w = img.shape
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.zeros_like(img)
    gray = np.rint(scaled).clip(0, 255).astype(np.uint8).reshape(c * h, w)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {c * h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
