"""Quantitative instruments for trained students.

Four tools: aggregate attention-score reports (how much each query step
reads from each history input), a closed-form multiply-accumulate FLOPs
model of block-causal generation, an exposure-bias harness that swaps
ground-truth states in for the first k autoregressive feeds, and kernel
two-sample statistics (MMD) as a desk-scale distribution metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, RangeError, ShapeError
from .student import (KVCache, MaskOption, StudentConfig, allowed_blocks,
                      forward_step, forward_train, param_shapes,
                      target_transform)
from .teacher import VPSchedule


# ---------------------------------------------------------------- attention

@dataclass
class AttentionReport:
    """Mean post-softmax weight mass per (layer, query step, history input).

    ``scores[(layer, s)]`` is a vector over inputs tau_S..tau_s (newest
    query last): entry p is the average over batch, heads, and the
    query's tokens of the summed attention weight on input s' = S - p.
    Inputs the mask forbids hold exact zeros.
    """

    S: int
    layers: int
    scores: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def rows(self):
        """(layer, query step s, input step s', score) tuples for CSV."""
        out = []
        for (layer, s), vec in sorted(self.scores.items()):
            for p, val in enumerate(vec):
                out.append((layer, s, self.S - p, float(val)))
        return out


def attention_report(params, config: StudentConfig, states: np.ndarray,
                     labels: np.ndarray) -> AttentionReport:
    """Run the parallel forward pass and aggregate its attention maps."""
    S, Tt = config.steps, config.T_tok
    captured: list[np.ndarray] = []
    forward_train(params, config, states, labels, capture_attention=captured)
    report = AttentionReport(S=S, layers=config.layers)
    for layer, att in enumerate(captured):
        # att: (B, heads, S*Tt, S*Tt); average over batch, heads, and the
        # Tt query rows of each block, sum over the Tt key columns of each
        per_block = att.reshape(att.shape[0], att.shape[1], S, Tt, S, Tt)
        agg = per_block.sum(axis=5).mean(axis=(0, 1, 3))        # (S, S)
        for j in range(S):
            s = S - j
            report.scores[(layer, s)] = agg[j, :j + 1].astype(np.float64)
    return report


# -------------------------------------------------------------------- flops

@dataclass(frozen=True)
class ArchDims:
    layers: int
    d_model: int
    heads: int
    T_tok: int
    patch: int
    channels: int

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


DIT_XL2 = ArchDims(layers=28, d_model=1152, heads=16, T_tok=256, patch=2,
                   channels=4)


def arch_from_config(config: StudentConfig) -> ArchDims:
    return ArchDims(layers=config.layers, d_model=config.d_model,
                    heads=config.heads, T_tok=config.T_tok,
                    patch=config.patch, channels=config.image[0])


@dataclass(frozen=True)
class FlopsBreakdown:
    """Multiply-accumulate counts for one full generation (1 FLOP = 1 MAC)."""

    projections: int
    attention_scores: int
    attention_values: int
    mlp: int
    embed_head: int
    kv_extra: int
    evals: int

    @property
    def total(self) -> int:
        return (self.projections + self.attention_scores + self.attention_values
                + self.mlp + self.embed_head + self.kv_extra)

    @property
    def gflops(self) -> float:
        return self.total / 1e9


FLOPS_MODES = ("student", "teacher-with-cfg", "kd")


def flops_model(arch: ArchDims, S: int, N: int, mask: MaskOption,
                mode: str = "student") -> FlopsBreakdown:
    """Closed-form cost of generating one sample.

    Per network evaluation (one T_tok-token block): qkv/out projections
    and per-layer conditioning, self-block attention, the two MLP mats,
    and patch embedding plus output head.  The ``student`` mode adds the
    cache cross-attention surcharge: at each of the N history layers,
    reading h_s extra blocks costs 2 * T_tok * (h_s * T_tok) * d_model
    MACs (scores plus value aggregation).  ``teacher-with-cfg`` doubles
    every step for guidance; ``kd`` is a single evaluation.
    """
    if mode not in FLOPS_MODES:
        raise ConfigError(f"mode must be one of {FLOPS_MODES}, got {mode!r}")
    if S < 1:
        raise RangeError(f"S must be >= 1, got {S}")
    if not (0 <= N <= arch.layers):
        raise RangeError(f"N must lie in 0..{arch.layers}, got {N}")
    L, d, Tt, pc = arch.layers, arch.d_model, arch.T_tok, arch.patch_dim
    evals = {"student": S, "teacher-with-cfg": 2 * S, "kd": 1}[mode]

    proj_eval = L * (4 * Tt * d * d + 6 * d * d) + 2 * d * d
    attn_eval = L * Tt * Tt * d
    mlp_eval = L * 8 * Tt * d * d
    embed_head_eval = 2 * Tt * pc * d

    kv_extra = 0
    if mode == "student":
        h_total = sum(len(allowed_blocks(mask, S, s)) - 1 for s in range(1, S + 1))
        kv_extra = h_total * N * 2 * Tt * Tt * d
    return FlopsBreakdown(
        projections=evals * proj_eval,
        attention_scores=evals * attn_eval,
        attention_values=evals * attn_eval,
        mlp=evals * mlp_eval,
        embed_head=evals * embed_head_eval,
        kv_extra=kv_extra,
        evals=evals)


def param_count(config: StudentConfig) -> int:
    """Exact learnable-parameter count (agrees with the weight shapes)."""
    return sum(int(np.prod(shape)) for shape in param_shapes(config).values())


# ---------------------------------------------------------------- exposure

@dataclass
class ExposureCurve:
    """Per-step squared deviation from the teacher trajectory.

    ``per_step[s]`` is the mean per-element squared error of the step-s
    prediction x_hat_{tau_{s-1}} against the teacher's x_{tau_{s-1}},
    measured before any ground-truth substitution of the feeds.
    """

    k: int
    per_step: dict[int, float]
    endpoint: float

    def rows(self):
        return [(self.k, s, self.per_step[s])
                for s in sorted(self.per_step, reverse=True)]


def exposure_harness(params, config: StudentConfig, sched: VPSchedule | None,
                     states: np.ndarray, labels: np.ndarray,
                     k: int) -> ExposureCurve:
    """Autoregress along teacher trajectories, feeding ground truth for the
    first k predictions and the model's own outputs afterwards.

    states: (B, S+1, D) teacher trajectories.  k=0 is free-running
    generation from the teacher's prior draw; k=S-1 makes every consumed
    block ground truth, isolating single-step regression error.
    """
    S = config.steps
    if not (0 <= k <= S - 1):
        raise RangeError(f"k must lie in 0..{S - 1}, got {k}")
    states = np.ascontiguousarray(states, dtype=np.float32)
    if states.ndim != 3 or states.shape[1] != S + 1:
        raise ShapeError(f"states must be (B, {S + 1}, D), got {states.shape}")
    cache = KVCache(config)
    x = states[:, 0]
    per_step: dict[int, float] = {}
    for s in range(S, 0, -1):
        raw, cache = forward_step(params, config, x, s, cache, labels)
        pred = np.asarray(target_transform(config, sched, raw, x, s),
                          dtype=np.float32)
        truth = states[:, S - s + 1]
        err = pred.astype(np.float64) - truth.astype(np.float64)
        per_step[s] = float(np.mean(err * err))
        predictions_made = S - s + 1
        x = truth if predictions_made <= k else pred
    return ExposureCurve(k=k, per_step=per_step, endpoint=per_step[1])


# --------------------------------------------------------------------- mmd

def _sq_bandwidth(a: np.ndarray, b: np.ndarray, bandwidth) -> float:
    if bandwidth is None:
        dists = pdist(np.vstack([a, b]))
        bandwidth = float(np.median(dists))
        if bandwidth == 0.0:
            bandwidth = 1.0
    if bandwidth <= 0:
        raise RangeError(f"bandwidth must be positive, got {bandwidth}")
    return float(bandwidth) ** 2


def _kernels(a: np.ndarray, b: np.ndarray, bw2: float):
    k_aa = np.exp(cdist(a, a, "sqeuclidean") / (-2.0 * bw2))
    k_bb = np.exp(cdist(b, b, "sqeuclidean") / (-2.0 * bw2))
    k_ab = np.exp(cdist(a, b, "sqeuclidean") / (-2.0 * bw2))
    return k_aa, k_bb, k_ab


def mmd2(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None,
         unbiased: bool = True) -> float:
    """Squared maximum mean discrepancy under an RBF kernel.

    exp(-||x-y||^2 / (2 bandwidth^2)); the bandwidth defaults to the
    median pairwise distance of the pooled batches.  The unbiased
    estimator can be slightly negative; the biased variant is a proper
    squared norm and is exactly 0 on identical batches.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"batches must be (n, D)/(m, D), got {a.shape}, {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if n < 1 or m < 1:
        raise ShapeError("batches must be non-empty")
    if unbiased and (n < 2 or m < 2):
        raise ShapeError("unbiased estimator needs at least two samples per batch")
    k_aa, k_bb, k_ab = _kernels(a, b, _sq_bandwidth(a, b, bandwidth))
    if unbiased:
        term_a = (k_aa.sum() - n) / (n * (n - 1))
        term_b = (k_bb.sum() - m) / (m * (m - 1))
    else:
        term_a = k_aa.mean()
        term_b = k_bb.mean()
    return float(term_a + term_b - 2.0 * k_ab.mean())


def mmd2_jackknife(a: np.ndarray, b: np.ndarray,
                   bandwidth: float | None = None) -> tuple[float, float]:
    """(unbiased MMD^2, delete-one-pair jackknife standard error).

    Requires equal batch sizes; the bandwidth is fixed once from the full
    pooled sample so replicates differ only in the deleted pair.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if b.shape[0] != n:
        raise ShapeError("jackknife needs equal batch sizes")
    if n < 3:
        raise ShapeError("jackknife needs at least three pairs")
    bw2 = _sq_bandwidth(a, b, bandwidth)
    k_aa, k_bb, k_ab = _kernels(a, b, bw2)
    s_aa = k_aa.sum() - n
    s_bb = k_bb.sum() - n
    s_ab = k_ab.sum()
    row_aa = k_aa.sum(axis=1) - 1.0
    row_bb = k_bb.sum(axis=1) - 1.0
    row_ab = k_ab.sum(axis=1)
    col_ab = k_ab.sum(axis=0)
    full = s_aa / (n * (n - 1)) + s_bb / (n * (n - 1)) - 2.0 * s_ab / (n * n)
    nn = n - 1
    reps = ((s_aa - 2.0 * row_aa) / (nn * (nn - 1))
            + (s_bb - 2.0 * row_bb) / (nn * (nn - 1))
            - 2.0 * (s_ab - row_ab - col_ab + np.diag(k_ab)) / (nn * nn))
    se = float(np.sqrt((n - 1) / n * np.sum((reps - reps.mean()) ** 2)))
    return float(full), se


# ------------------------------------------------------------------ report

@dataclass
class MetricReport:
    endpoint_mse: float
    mmd2_value: float
    per_step: dict[int, float]


def metric_report(params, config: StudentConfig, sched: VPSchedule,
                  teacher, states: np.ndarray, labels: np.ndarray,
                  sample_endpoints: np.ndarray,
                  sample_labels: np.ndarray) -> MetricReport:
    """Bundle the fidelity proxies: teacher-coupled endpoint MSE, the
    per-step deviation curve (both from free-running generation along
    held-out trajectories), and MMD^2 between independently sampled
    endpoints and fresh analytic-teacher draws matched by label."""
    curve = exposure_harness(params, config, sched, states, labels, k=0)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(1)))
    real = teacher.sample_data(rng, np.asarray(sample_labels, dtype=np.int64))
    value = mmd2(np.asarray(sample_endpoints, dtype=np.float64), real)
    return MetricReport(endpoint_mse=curve.endpoint, mmd2_value=value,
                        per_step=curve.per_step)
