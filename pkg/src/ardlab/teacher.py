"""Analytic diffusion teacher.

A variance-preserving forward process over a Gaussian-mixture data
distribution has closed-form marginals, so the score that drives the
probability-flow ODE is exact: no trained network, no approximation
error beyond the ODE solver's.  This module provides the schedule, the
mixture, classifier-free-guided scores, a Heun solver, and batched
trajectory generation with counter-based per-record seeding.

All math here runs in float64; trajectories are stored as float32 by
the dataset layer.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError, UnknownClassError

_LOG2PI = math.log(2.0 * math.pi)

# Fixed shard size for batched generation.  Work is split into shards of
# this many trajectories no matter how many worker threads run, so the
# set of array shapes (and therefore every floating-point result) is
# identical for any --threads value.
GEN_SHARD = 512


@dataclass(frozen=True)
class VPSchedule:
    """Linear-beta variance-preserving schedule on t in [0, T]."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0

    def __post_init__(self):
        if self.T <= 0:
            raise ConfigError(f"schedule horizon T must be positive, got {self.T}")
        if self.beta_min < 0 or self.beta_min + self.T * (self.beta_max - self.beta_min) < 0:
            raise ConfigError("beta(t) must stay nonnegative on [0, T]")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def _log_alpha(self, t):
        # closed form of -1/2 * integral of beta from 0 to t
        return -0.5 * (self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min))

    def _alpha(self, t):
        return np.exp(self._log_alpha(t))

    def _sigma(self, t):
        # 1 - alpha^2 via expm1 keeps sigma accurate near t = 0
        return np.sqrt(-np.expm1(2.0 * self._log_alpha(t)))

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        """(alpha_t, sigma_t) with alpha_t^2 + sigma_t^2 = 1."""
        if not (0.0 <= t <= self.T):
            raise RangeError(f"t={t} outside [0, {self.T}]")
        return float(self._alpha(t)), float(self._sigma(t))


@dataclass(frozen=True, eq=False)
class GaussianMixtureTeacher:
    """Isotropic Gaussian mixture with a label -> component-subset map.

    The unconditional distribution is the full mixture; a class label
    restricts to its components with renormalized weights.
    """

    means: np.ndarray                      # (K, D) float64
    stds: np.ndarray                       # (K,)   float64, > 0
    weights: np.ndarray                    # (K,)   float64, sums to 1
    class_map: dict[int, tuple[int, ...]]
    image: tuple[int, int, int]            # (C, H, W) with C*H*W == D

    def __post_init__(self):
        means = np.ascontiguousarray(self.means, dtype=np.float64)
        stds = np.ascontiguousarray(self.stds, dtype=np.float64)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", weights)
        k, d = means.shape
        if stds.shape != (k,) or weights.shape != (k,):
            raise ConfigError("means, stds, weights must agree on component count")
        if not (stds > 0).all():
            raise ConfigError("component stds must be positive")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise ConfigError(f"weights sum to {float(weights.sum())}, expected 1")
        if not self.class_map:
            raise ConfigError("class_map must not be empty")
        for label, comps in self.class_map.items():
            if len(comps) == 0:
                raise ConfigError(f"class {label} has no components")
            for c in comps:
                if not (0 <= c < k):
                    raise ConfigError(f"class {label} references component {c} out of range")
        c, h, w = self.image
        if c * h * w != d:
            raise ConfigError(f"image {self.image} does not flatten to D={d}")
        for a in (means, stds, weights):
            a.flags.writeable = False

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(sorted(self.class_map))

    def hash64(self) -> int:
        """Stable 64-bit identity of the mixture parameters."""
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(self.means).tobytes())
        h.update(np.ascontiguousarray(self.stds).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        for label in self.labels:
            h.update(str(label).encode())
            h.update(bytes(self.class_map[label]))
        h.update(bytes(self.image))
        return int.from_bytes(h.digest(), "little")

    def _subset(self, label):
        """(means, stds, log-weights) for a label, or the full mixture."""
        if label is None:
            return self.means, self.stds, np.log(self.weights)
        try:
            comps = self.class_map[int(label)]
        except (KeyError, ValueError, TypeError):
            raise UnknownClassError(f"no class {label!r} in teacher") from None
        idx = np.asarray(comps, dtype=np.int64)
        w = self.weights[idx]
        return self.means[idx], self.stds[idx], np.log(w / w.sum())

    def sample_data(self, rng: np.random.Generator, labels) -> np.ndarray:
        """Draw x_0 from the mixture, one row per entry of ``labels``."""
        labels = np.asarray(labels)
        out = np.empty((labels.shape[0], self.D), dtype=np.float64)
        # per-row component choice, then one vectorized normal draw
        comp = np.empty(labels.shape[0], dtype=np.int64)
        for i, lab in enumerate(labels):
            _, _, logw = self._subset(int(lab))
            idx = np.asarray(self.class_map[int(lab)], dtype=np.int64)
            comp[i] = idx[rng.choice(len(idx), p=np.exp(logw))]
        eps = rng.standard_normal((labels.shape[0], self.D))
        out[:] = self.means[comp] + self.stds[comp][:, None] * eps
        return out


@dataclass(frozen=True)
class TrajectoryGrid:
    """Uniform time grid tau_s = T*s/S for s = 0..S, traversed S -> 0."""

    S: int
    T: float = 1.0

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError(f"grid needs S >= 1, got {self.S}")

    def taus(self) -> np.ndarray:
        return self.T * np.arange(self.S + 1, dtype=np.float64) / self.S

    def tau(self, s: int) -> float:
        if not (0 <= s <= self.S):
            raise RangeError(f"step index {s} outside 0..{self.S}")
        return self.T * s / self.S


@dataclass(frozen=True)
class Trajectory:
    """One teacher ODE path, x_{tau_S} first."""

    states: np.ndarray          # (S+1, D)
    class_label: int
    cfg_scale: float
    seed: int


def _mixture_score(means, stds, logw, x2d, a, sig2):
    """Score and log-density of the mixture marginal at noise level (a, sig2).

    Component marginals are N(a*mu_k, (a^2 s_k^2 + sig2) I); both outputs
    use log-sum-exp stabilized responsibilities.  Every reduction is over
    the component or the feature axis of one row, so each row's result is
    independent of what other rows are in the batch.
    """
    d = means.shape[1]
    v = a * a * stds * stds + sig2                      # (K,)
    diff = a * means[None, :, :] - x2d[:, None, :]      # (B, K, D)
    sq = np.einsum("bkd,bkd->bk", diff, diff)
    logp = logw[None, :] - 0.5 * d * (_LOG2PI + np.log(v))[None, :] - sq / (2.0 * v)[None, :]
    m = logp.max(axis=1, keepdims=True)
    e = np.exp(logp - m)
    z = e.sum(axis=1, keepdims=True)
    r = e / z                                           # responsibilities
    score = ((r / v[None, :])[:, :, None] * diff).sum(axis=1)
    logdens = (m + np.log(z)).reshape(-1)
    return score, logdens


def _check_t(sched: VPSchedule, t: float, exclude_zero: bool = False):
    lo_ok = t > 0.0 if exclude_zero else t >= 0.0
    if not (lo_ok and t <= sched.T):
        dom = "(0, T]" if exclude_zero else "[0, T]"
        raise RangeError(f"t={t} outside {dom} with T={sched.T}")


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ConfigError(f"expected vector or batch of vectors, got shape {x.shape}")


def score(teacher: GaussianMixtureTeacher, sched: VPSchedule, x, t: float, label=None):
    """Exact marginal score of the noised mixture at time t."""
    _check_t(sched, t)
    x2d, single = _as_batch(x)
    means, stds, logw = teacher._subset(label)
    a = float(sched._alpha(t))
    sig2 = float(sched._sigma(t)) ** 2
    s, _ = _mixture_score(means, stds, logw, x2d, a, sig2)
    return s[0] if single else s


def log_marginal(teacher: GaussianMixtureTeacher, sched: VPSchedule, x, t: float, label=None):
    """Log-density of the noised mixture marginal (brute-force normalized)."""
    _check_t(sched, t)
    x2d, single = _as_batch(x)
    means, stds, logw = teacher._subset(label)
    a = float(sched._alpha(t))
    sig2 = float(sched._sigma(t)) ** 2
    _, ld = _mixture_score(means, stds, logw, x2d, a, sig2)
    return float(ld[0]) if single else ld


def cfg_score(teacher, sched, x, t: float, label, w: float):
    """Classifier-free guidance composed on scores: s_u + w*(s_c - s_u).

    w=1 and w=0 return the conditional / unconditional score exactly
    (no floating-point residue from the composition).
    """
    if w == 1.0:
        return score(teacher, sched, x, t, label)
    if w == 0.0:
        return score(teacher, sched, x, t, None)
    su = score(teacher, sched, x, t, None)
    sc = score(teacher, sched, x, t, label)
    return su + w * (sc - su)


def pf_ode_rhs(teacher, sched, x, t: float, label, w: float):
    """Probability-flow ODE right-hand side under the VP schedule.

    dx/dt = -1/2 beta(t) x - 1/2 beta(t) * guided_score(x, t).
    Defined for t in (0, T]; the solver's interior handling of the t=0
    endpoint bypasses this check because the mixture keeps the marginal
    variance bounded away from zero.
    """
    _check_t(sched, t, exclude_zero=True)
    return _rhs_unchecked(teacher, sched, np.asarray(x, dtype=np.float64), t, label, w)


def _rhs_unchecked(teacher, sched, x, t, label, w):
    b = float(sched.beta(t))
    s = cfg_score(teacher, sched, x, t, label, w)
    return -0.5 * b * (x + s)


def _rhs_batch(teacher, sched, X, t, labels, w):
    """Guided rhs for a batch with per-row labels.

    Rows are grouped by label for the conditional score; each row's
    value never depends on other rows, so grouping cannot change bits.
    """
    b = float(sched.beta(t))
    a = float(sched._alpha(t))
    sig2 = float(sched._sigma(t)) ** 2
    if w == 0.0:
        mu, sd, lw = teacher._subset(None)
        s, _ = _mixture_score(mu, sd, lw, X, a, sig2)
        return -0.5 * b * (X + s)
    sc = np.empty_like(X)
    for lab in np.unique(labels):
        rows = labels == lab
        mu, sd, lw = teacher._subset(int(lab))
        sc[rows], _ = _mixture_score(mu, sd, lw, X[rows], a, sig2)
    if w == 1.0:
        return -0.5 * b * (X + sc)
    mu, sd, lw = teacher._subset(None)
    su, _ = _mixture_score(mu, sd, lw, X, a, sig2)
    return -0.5 * b * (X + su + w * (sc - su))


def solve_trajectories(teacher, sched, X_T, labels, grid: TrajectoryGrid,
                       w: float, fine_steps: int) -> np.ndarray:
    """Heun integration of the PF-ODE from T to 0 for a batch.

    Returns (B, S+1, D) float64 with x_{tau_S} first.  fine_steps is the
    total substep count, spread evenly; it must be divisible by S so
    every grid node lands exactly on a substep boundary.
    """
    if fine_steps < grid.S:
        raise ConfigError(f"fine_steps={fine_steps} < S={grid.S}")
    if fine_steps % grid.S != 0:
        raise ConfigError(f"fine_steps={fine_steps} not divisible by S={grid.S}")
    X = np.ascontiguousarray(X_T, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or labels.shape != (X.shape[0],):
        raise ConfigError("X_T must be (B, D) with one label per row")
    taus = grid.taus()
    m = fine_steps // grid.S
    out = np.empty((X.shape[0], grid.S + 1, X.shape[1]), dtype=np.float64)
    out[:, 0] = X
    for s in range(grid.S, 0, -1):
        t_hi, t_lo = taus[s], taus[s - 1]
        h = (t_lo - t_hi) / m
        for j in range(m):
            t0 = t_hi + j * h
            t1 = t_lo if j == m - 1 else t0 + h
            f0 = _rhs_batch(teacher, sched, X, t0, labels, w)
            xe = X + h * f0
            f1 = _rhs_batch(teacher, sched, xe, t1, labels, w)
            X = X + (0.5 * h) * (f0 + f1)
        out[:, grid.S - s + 1] = X
    return out


def solve_trajectory(teacher, sched, x_T, grid: TrajectoryGrid, label, w: float,
                     fine_steps: int = 1000, seed: int = 0) -> Trajectory:
    """Single-path convenience wrapper around the batched solver."""
    x_T = np.asarray(x_T, dtype=np.float64)
    states = solve_trajectories(teacher, sched, x_T[None, :],
                                np.asarray([label]), grid, w, fine_steps)[0]
    return Trajectory(states=states, class_label=int(label), cfg_scale=float(w),
                      seed=int(seed))


_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def record_seed(dataset_seed: int, index: int) -> int:
    """Per-record 64-bit seed derived from (dataset seed, record index).

    Stored in each record so any single trajectory can be reproduced
    without knowing the dataset-level seed.
    """
    return _splitmix64(_splitmix64(dataset_seed & _MASK64) ^ _splitmix64((index + 1) & _MASK64))


def _draw_record(seed_i: int, D: int, labels: tuple[int, ...]):
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed_i)))
    label = labels[int(rng.integers(len(labels)))]
    x_T = rng.standard_normal(D)
    return label, x_T


def generate_dataset(teacher: GaussianMixtureTeacher, sched: VPSchedule,
                     grid: TrajectoryGrid, n: int, w: float, seed: int,
                     fine_steps: int = 1000, threads: int = 1):
    """Generate n teacher trajectories with uniform class labels.

    Each record draws its prior state and label from a Philox stream
    keyed by record_seed(seed, index), and work is split into fixed-size
    shards, so the output is bit-identical for any thread count.
    Returns a TrajectoryDataset (see the dataset module).
    """
    from .dataset import TrajectoryDataset

    if n < 1:
        raise ConfigError(f"need n >= 1 trajectories, got {n}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    labels_all = teacher.labels
    D = teacher.D
    states = np.empty((n, grid.S + 1, D), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint32)
    seeds = np.empty(n, dtype=np.uint64)

    def run_shard(start: int) -> None:
        stop = min(start + GEN_SHARD, n)
        b = stop - start
        XT = np.empty((b, D), dtype=np.float64)
        lab = np.empty(b, dtype=np.int64)
        for i in range(b):
            rs = record_seed(seed, start + i)
            seeds[start + i] = rs
            lab[i], XT[i] = _draw_record(rs, D, labels_all)
        traj = solve_trajectories(teacher, sched, XT, lab, grid, w, fine_steps)
        states[start:stop] = traj.astype(np.float32)
        labels[start:stop] = lab

    starts = list(range(0, n, GEN_SHARD))
    if threads == 1:
        for st in starts:
            run_shard(st)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_shard, starts))
    return TrajectoryDataset(
        D=D, S=grid.S, cfg_scale=float(w),
        beta_min=float(sched.beta_min), beta_max=float(sched.beta_max),
        teacher_hash=teacher.hash64(),
        states=states, labels=labels, seeds=seeds,
    )


def tweedie_x0(teacher, sched, x, t: float, label, w: float):
    """Teacher's denoised estimate at time t: (x + sigma_t^2 * score) / alpha_t.

    This is the guided-score plug-in of the conditional-mean formula and
    serves as the regression target in predicted-x0 training mode.
    """
    _check_t(sched, t, exclude_zero=True)
    a = float(sched._alpha(t))
    sig2 = float(sched._sigma(t)) ** 2
    x = np.asarray(x, dtype=np.float64)
    s = cfg_score(teacher, sched, x, t, label, w)
    return (x + sig2 * s) / a


def _blob_template(h: int, w: int, center: tuple[float, float], width: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ci, cj = center
    return np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * width * width))


def make_blobs8() -> GaussianMixtureTeacher:
    """1x8x8 images; 4 classes x 2 blob widths = 8 components."""
    centers = [(2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0)]
    widths = (1.0, 1.6)
    stds = (0.10, 0.15)
    means, sds, class_map = [], [], {}
    for cls, center in enumerate(centers):
        comp_ids = []
        for wd, sd in zip(widths, stds):
            comp_ids.append(len(means))
            means.append(_blob_template(8, 8, center, wd).reshape(-1))
            sds.append(sd)
        class_map[cls] = tuple(comp_ids)
    k = len(means)
    return GaussianMixtureTeacher(
        means=np.stack(means), stds=np.array(sds),
        weights=np.full(k, 1.0 / k), class_map=class_map, image=(1, 8, 8))


def make_gmm2d() -> GaussianMixtureTeacher:
    """Planar mixture: 8 components on a circle, 4 classes of adjacent pairs."""
    k = 8
    ang = 2.0 * math.pi * np.arange(k) / k
    means = 1.5 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    class_map = {c: (2 * c, 2 * c + 1) for c in range(4)}
    return GaussianMixtureTeacher(
        means=means, stds=np.full(k, 0.1),
        weights=np.full(k, 1.0 / k), class_map=class_map, image=(1, 1, 2))


PRESETS = {
    "blobs8": make_blobs8,
    "gmm2d": make_gmm2d,
}


def make_preset(name: str) -> GaussianMixtureTeacher:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown teacher preset {name!r}; "
                          f"available: {', '.join(sorted(PRESETS))}") from None
