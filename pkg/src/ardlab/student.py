"""Miniature diffusion-transformer student for autoregressive distillation.

One parameter set serves every step: a shared patch embedder, a shared
positional table, a learned per-step time table (added token-wise so each
block announces its own noise level), and L transformer blocks driven by
adaptive layer-norm conditioning on (class, current step).  During
training all S blocks are processed in a single masked pass; during
inference the same function is evaluated block by block, with the lower
N layers keeping keys/values of earlier blocks in a cache so no
attention mask is needed.

Masking options (allowed key blocks for the query at step s):
    M1  {s}                  per-step distillation, no history
    M2  {min(s+1, S), s}     sliding window of two blocks
    M3  {S, s}               initial noise plus current
    M4  {S, ..., s}          full block-causal history (default)
Layers at index >= N intersect the option with {s}: history is visible
only to the lower N layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import erf as _erf

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .errors import (CacheStateError, ConfigError, LoadError, RangeError,
                     ShapeError, UnknownClassError)
from .tensor import Tensor

_F32 = np.float32


class MaskOption(Enum):
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"
    M4 = "m4"

    @classmethod
    def parse(cls, s: str) -> "MaskOption":
        try:
            return cls(s.lower())
        except ValueError:
            raise ConfigError(f"unknown mask option {s!r}; expected m1..m4") from None


class PredictionTarget(Enum):
    NEXT_SAMPLE = "next"
    PREDICTED_X0 = "x0"

    @classmethod
    def parse(cls, s: str) -> "PredictionTarget":
        try:
            return cls(s.lower())
        except ValueError:
            raise ConfigError(f"unknown prediction target {s!r}; expected next or x0") from None


@dataclass(frozen=True)
class StudentConfig:
    layers: int = 8
    history_layers: int = 2
    d_model: int = 64
    heads: int = 4
    patch: int = 2
    image: tuple[int, int, int] = (1, 8, 8)
    steps: int = 4
    mask: MaskOption = MaskOption.M4
    target: PredictionTarget = PredictionTarget.NEXT_SAMPLE
    num_classes: int = 4

    def __post_init__(self):
        c, h, w = self.image
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not (0 <= self.history_layers <= self.layers):
            raise ConfigError(f"history_layers must lie in [0, layers], "
                              f"got {self.history_layers} with layers={self.layers}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if h % self.patch != 0 or w % self.patch != 0:
            raise ConfigError(f"image {self.image} not divisible by patch={self.patch}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if min(c, h, w) < 1:
            raise ConfigError(f"bad image shape {self.image}")

    @property
    def T_tok(self) -> int:
        _, h, w = self.image
        return (h // self.patch) * (w // self.patch)

    @property
    def D(self) -> int:
        c, h, w = self.image
        return c * h * w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.image[0]

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "history_layers": self.history_layers,
            "d_model": self.d_model, "heads": self.heads, "patch": self.patch,
            "image": list(self.image), "steps": self.steps,
            "mask": self.mask.value, "target": self.target.value,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        try:
            return cls(
                layers=int(d["layers"]), history_layers=int(d["history_layers"]),
                d_model=int(d["d_model"]), heads=int(d["heads"]), patch=int(d["patch"]),
                image=tuple(int(v) for v in d["image"]), steps=int(d["steps"]),
                mask=MaskOption.parse(d["mask"]), target=PredictionTarget.parse(d["target"]),
                num_classes=int(d["num_classes"]),
            )
        except KeyError as e:
            raise ConfigError(f"student config missing field {e.args[0]!r}") from None


def allowed_blocks(option: MaskOption, S: int, s: int) -> tuple[int, ...]:
    """Key blocks the query at step s may attend, descending (oldest first)."""
    if not (1 <= s <= S):
        raise RangeError(f"query step {s} outside 1..{S}")
    if option is MaskOption.M1:
        return (s,)
    if option is MaskOption.M2:
        nxt = min(s + 1, S)
        return (s,) if nxt == s else (nxt, s)
    if option is MaskOption.M3:
        return (s,) if s == S else (S, s)
    return tuple(range(S, s - 1, -1))


def build_mask(S: int, s_query: int, option: MaskOption, layer: int, N: int,
               T_tok: int) -> np.ndarray:
    """Boolean (T_tok, S*T_tok) admissibility rows for one query block.

    Key columns follow the training sequence layout (block S first).
    Layers at index >= N see only the current block.
    """
    if not (0 <= layer):
        raise RangeError(f"layer index {layer} negative")
    blocks = allowed_blocks(option, S, s_query)
    if layer >= N:
        blocks = (s_query,)
    row = np.zeros(S * T_tok, dtype=bool)
    for sp in blocks:
        j = S - sp
        row[j * T_tok:(j + 1) * T_tok] = True
    return np.broadcast_to(row, (T_tok, S * T_tok)).copy()


@lru_cache(maxsize=64)
def _train_mask(S: int, T_tok: int, option: MaskOption, gated: bool) -> np.ndarray:
    """Full (S*T, S*T) mask for the parallel pass; gated = layer >= N."""
    layer, n = (1, 0) if gated else (0, 1)
    rows = [build_mask(S, S - j, option, layer, n, T_tok) for j in range(S)]
    m = np.concatenate(rows, axis=0)
    m.flags.writeable = False
    return m


def param_shapes(config: StudentConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter; the single source of truth."""
    d, pc = config.d_model, config.patch_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.patch_w": (pc, d), "embed.patch_b": (d,),
        "embed.pos": (config.T_tok, d),
        "embed.time": (config.steps + 1, d),
        "embed.cls": (config.num_classes, d),
    }
    for i in range(config.layers):
        p = f"layer{i}."
        shapes[p + "qkv_w"] = (d, 3 * d)
        shapes[p + "qkv_b"] = (3 * d,)
        shapes[p + "out_w"] = (d, d)
        shapes[p + "out_b"] = (d,)
        shapes[p + "mlp1_w"] = (d, 4 * d)
        shapes[p + "mlp1_b"] = (4 * d,)
        shapes[p + "mlp2_w"] = (4 * d, d)
        shapes[p + "mlp2_b"] = (d,)
        shapes[p + "mod_w"] = (d, 6 * d)
        shapes[p + "mod_b"] = (6 * d,)
    shapes["final.mod_w"] = (d, 2 * d)
    shapes["final.mod_b"] = (2 * d,)
    shapes["final.head_w"] = (d, pc)
    shapes["final.head_b"] = (pc,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    for _ in range(100):
        bad = np.abs(out) > 2.0
        n = int(bad.sum())
        if n == 0:
            break
        out[bad] = rng.standard_normal(n)
    return (std * out).astype(np.float32)


# zero-initialized parameters: modulation and the output head, so the
# freshly initialized student is the identity-plus-skip map
_ZERO_INIT = ("mod_w", "mod_b", "head_w", "head_b")


def init_params(config: StudentConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf in _ZERO_INIT or leaf.endswith("_b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def save_student(dir_path, params: dict[str, Tensor], config: StudentConfig,
                 stem: str = "model") -> Path:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{stem}.ardw"
    save_tensors(path, {k: v.data for k, v in params.items()})
    (d / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_student(ckpt_path) -> tuple[dict[str, Tensor], StudentConfig]:
    ckpt_path = Path(ckpt_path)
    cfg_path = ckpt_path.parent / "config.json"
    if not cfg_path.exists():
        raise LoadError(f"{cfg_path} not found next to checkpoint")
    config = StudentConfig.from_dict(json.loads(cfg_path.read_text()))
    raw = load_tensors(ckpt_path)
    expected = param_shapes(config)
    if set(raw) != set(expected):
        missing = sorted(set(expected) - set(raw))
        extra = sorted(set(raw) - set(expected))
        raise LoadError(f"{ckpt_path}: parameter names do not match config "
                        f"(missing {missing[:4]}, extra {extra[:4]})")
    for name, shape in expected.items():
        if raw[name].shape != shape:
            raise LoadError(f"{ckpt_path}: {name} has shape {raw[name].shape}, "
                            f"config implies {shape}")
    return {k: Tensor(raw[k], requires_grad=True) for k in expected}, config


def patchify_np(x: np.ndarray, image: tuple[int, int, int], patch: int) -> np.ndarray:
    """(..., C*H*W) -> (..., T_tok, patch*patch*C), raster token order."""
    c, h, w = image
    p = patch
    lead = x.shape[:-1]
    x = x.reshape(lead + (c, h // p, p, w // p, p))
    nd = len(lead)
    x = np.transpose(x, tuple(range(nd)) + (nd + 1, nd + 3, nd, nd + 2, nd + 4))
    return np.ascontiguousarray(x).reshape(lead + ((h // p) * (w // p), p * p * c))


def unpatchify_np(tok: np.ndarray, image: tuple[int, int, int], patch: int) -> np.ndarray:
    """Inverse of patchify_np: (..., T_tok, p*p*C) -> (..., C*H*W)."""
    c, h, w = image
    p = patch
    lead = tok.shape[:-2]
    nd = len(lead)
    x = tok.reshape(lead + (h // p, w // p, c, p, p))
    x = np.transpose(x, tuple(range(nd)) + (nd + 2, nd, nd + 3, nd + 1, nd + 4))
    return np.ascontiguousarray(x).reshape(lead + (c * h * w,))


def patchify_ops(t: Tensor, image: tuple[int, int, int], patch: int) -> Tensor:
    """Differentiable patchify for rank-2 (B, C*H*W) tensors."""
    c, h, w = image
    p = patch
    b = t.shape[0]
    x = T.reshape(t, (b, c, h // p, p, w // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, (h // p) * (w // p), p * p * c))


def _unpatchify_ops(tok: Tensor, lead: tuple[int, ...], image, patch) -> Tensor:
    c, h, w = image
    p = patch
    x = T.reshape(tok, lead + (h // p, w // p, c, p, p))
    nd = len(lead)
    x = T.transpose(x, tuple(range(nd)) + (nd + 2, nd, nd + 3, nd + 1, nd + 4))
    return T.reshape(x, lead + (c * h * w,))


def _check_labels(labels: np.ndarray, config: StudentConfig) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= config.num_classes):
        raise UnknownClassError(
            f"labels must lie in [0, {config.num_classes}), got "
            f"[{labels.min()}, {labels.max()}]")
    return labels


def add_embeddings(params: dict[str, Tensor], config: StudentConfig,
                   tokens: Tensor, s: int) -> Tensor:
    """tokens + shared positional table + time row for step s."""
    if not (1 <= s <= config.steps):
        raise RangeError(f"step {s} outside 1..{config.steps}")
    time_row = T.gather_rows(params["embed.time"], np.array([s]))
    return tokens + params["embed.pos"] + time_row


def _split_heads(t: Tensor, b: int, n: int, heads: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))


def _merge_heads(t: Tensor, b: int, n: int, d: int) -> Tensor:
    return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b, n, d))


def forward_train(params: dict[str, Tensor], config: StudentConfig,
                  states: np.ndarray, labels: np.ndarray,
                  capture_attention: list | None = None) -> Tensor:
    """Masked parallel pass over all S blocks of each trajectory.

    states: (B, S, D) float32, blocks ordered x_{tau_S} first.  Returns
    (B, S, D) predictions in the config's target space; prediction j is
    produced by the query block at step s = S - j.  Dependence on other
    blocks is limited to the mask's allowed set, exactly.
    """
    S, d, heads = config.steps, config.d_model, config.heads
    Tt, dh = config.T_tok, config.d_model // config.heads
    states = np.ascontiguousarray(states, dtype=np.float32)
    if states.ndim != 3 or states.shape[1] != S or states.shape[2] != config.D:
        raise ShapeError(f"states must be (B, {S}, {config.D}), got {states.shape}")
    labels = _check_labels(labels, config)
    B = states.shape[0]
    n = S * Tt
    scale = 1.0 / np.sqrt(dh)

    x = T.matmul(Tensor(patchify_np(states, config.image, config.patch)),
                 params["embed.patch_w"]) + params["embed.patch_b"]
    steps_desc = np.arange(S, 0, -1)
    time_sel = T.gather_rows(params["embed.time"], steps_desc)       # (S, d)
    x = x + params["embed.pos"] + T.reshape(time_sel, (S, 1, d))
    c = T.reshape(T.gather_rows(params["embed.cls"], labels), (B, 1, d)) + time_sel

    ln_g = Tensor(np.ones(d, dtype=np.float32))
    ln_b = Tensor(np.zeros(d, dtype=np.float32))
    mask_hist = _train_mask(S, Tt, config.mask, gated=False)
    mask_gated = _train_mask(S, Tt, config.mask, gated=True)

    for layer in range(config.layers):
        p = f"layer{layer}."
        mask = mask_hist if layer < config.history_layers else mask_gated
        mod = T.matmul(c, params[p + "mod_w"]) + params[p + "mod_b"]   # (B, S, 6d)
        sh1, sc1, g1, sh2, sc2, g2 = (
            T.reshape(mod[:, :, k * d:(k + 1) * d], (B, S, 1, d)) for k in range(6))

        h1 = T.layernorm(x, ln_g, ln_b)
        h1 = h1 * (sc1 + 1.0) + sh1
        qkv = T.matmul(T.reshape(h1, (B, n, d)), params[p + "qkv_w"]) + params[p + "qkv_b"]
        q = _split_heads(qkv[:, :, 0:d], B, n, heads, dh)
        k = _split_heads(qkv[:, :, d:2 * d], B, n, heads, dh)
        v = _split_heads(qkv[:, :, 2 * d:3 * d], B, n, heads, dh)
        att = T.softmax_rows(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale, mask)
        if capture_attention is not None:
            capture_attention.append(att.data.copy())
        o = T.matmul(_merge_heads(T.matmul(att, v), B, n, d), params[p + "out_w"]) \
            + params[p + "out_b"]
        x = x + g1 * T.reshape(o, (B, S, Tt, d))

        h2 = T.layernorm(x, ln_g, ln_b)
        h2 = h2 * (sc2 + 1.0) + sh2
        m = T.gelu(T.matmul(h2, params[p + "mlp1_w"]) + params[p + "mlp1_b"])
        m = T.matmul(m, params[p + "mlp2_w"]) + params[p + "mlp2_b"]
        x = x + g2 * m

    fmod = T.matmul(c, params["final.mod_w"]) + params["final.mod_b"]  # (B, S, 2d)
    fsh = T.reshape(fmod[:, :, 0:d], (B, S, 1, d))
    fsc = T.reshape(fmod[:, :, d:2 * d], (B, S, 1, d))
    hf = T.layernorm(x, ln_g, ln_b) * (fsc + 1.0) + fsh
    raw = T.matmul(hf, params["final.head_w"]) + params["final.head_b"]
    out = _unpatchify_ops(raw, (B, S), config.image, config.patch)
    return out + states


class KVCache:
    """Per-layer key/value store for sequential block inference.

    Only layers below history_layers ever hold entries, and each mask
    option stores exactly what a later query can still read: M4 appends
    every block, M3 keeps only block S, M2 keeps only the newest block,
    M1 keeps nothing.  ``consumed`` counts cached key rows read per
    layer (per stream) for the cache audit.
    """

    def __init__(self, config: StudentConfig, enabled: bool = True):
        self.option = config.mask
        self.S = config.steps
        self.T_tok = config.T_tok
        self.n_hist = config.history_layers
        self.enabled = enabled
        self.expect_s = config.steps
        self.keys: list[np.ndarray | None] = [None] * self.n_hist
        self.values: list[np.ndarray | None] = [None] * self.n_hist
        self.consumed = [0] * self.n_hist
        self.batch: int | None = None

    def key_length(self, layer: int) -> int:
        if layer >= self.n_hist or self.keys[layer] is None:
            return 0
        return self.keys[layer].shape[2]

    def _read(self, layer: int):
        if layer >= self.n_hist or self.keys[layer] is None:
            return None
        self.consumed[layer] += self.keys[layer].shape[2]
        return self.keys[layer], self.values[layer]

    def _store(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if not self.enabled or layer >= self.n_hist:
            return
        if self.option is MaskOption.M1:
            return
        if self.option is MaskOption.M2:
            self.keys[layer], self.values[layer] = k, v
        elif self.option is MaskOption.M3:
            if self.expect_s == self.S:
                self.keys[layer], self.values[layer] = k, v
        else:  # M4
            if self.keys[layer] is None:
                self.keys[layer], self.values[layer] = k, v
            else:
                self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)
                self.values[layer] = np.concatenate([self.values[layer], v], axis=2)

    def _advance(self) -> None:
        self.expect_s -= 1


def _np_layernorm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _F32(1e-5))


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return x * (_F32(0.5) * (_F32(1.0) + _erf(x * _F32(1.0 / np.sqrt(2.0)))))


def _np_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m, dtype=np.float32)
    return e / e.sum(axis=-1, keepdims=True)


def forward_step(params: dict[str, Tensor], config: StudentConfig,
                 x_s: np.ndarray, s: int, cache: KVCache,
                 labels: np.ndarray) -> tuple[np.ndarray, KVCache]:
    """One autoregressive query pass over the block at step s.

    Plain float32 numpy, no tape, no attention mask: visibility is
    exactly the cache contents plus the block itself.  Returns the raw
    prediction (target space) and the updated cache.
    """
    S, d, heads = config.steps, config.d_model, config.heads
    Tt, dh = config.T_tok, config.d_model // config.heads
    if not (1 <= s <= S):
        raise RangeError(f"step {s} outside 1..{S}")
    if not isinstance(cache, KVCache):
        raise CacheStateError("forward_step needs a KVCache instance")
    if cache.expect_s != s:
        raise CacheStateError(f"cache expects step {cache.expect_s}, got {s}")
    if cache.expect_s < 1:
        raise CacheStateError("cache already consumed the full trajectory")
    x_s = np.ascontiguousarray(x_s, dtype=np.float32)
    if x_s.ndim != 2 or x_s.shape[1] != config.D:
        raise ShapeError(f"x_s must be (B, {config.D}), got {x_s.shape}")
    labels = _check_labels(labels, config)
    B = x_s.shape[0]
    if cache.batch is None:
        cache.batch = B
    elif cache.batch != B:
        raise CacheStateError(f"cache built for batch {cache.batch}, got {B}")
    scale = _F32(1.0 / np.sqrt(dh))

    P = {name: t.data for name, t in params.items()}
    x = patchify_np(x_s, config.image, config.patch) @ P["embed.patch_w"] \
        + P["embed.patch_b"]
    x = x + P["embed.pos"] + P["embed.time"][s]
    c = P["embed.cls"][labels] + P["embed.time"][s]            # (B, d)

    for layer in range(config.layers):
        p = f"layer{layer}."
        mod = c @ P[p + "mod_w"] + P[p + "mod_b"]
        sh1, sc1, g1, sh2, sc2, g2 = (
            mod[:, k * d:(k + 1) * d][:, None, :] for k in range(6))

        h1 = _np_layernorm(x) * (sc1 + _F32(1.0)) + sh1
        qkv = h1 @ P[p + "qkv_w"] + P[p + "qkv_b"]
        q = qkv[:, :, 0:d].reshape(B, Tt, heads, dh).transpose(0, 2, 1, 3)
        k = qkv[:, :, d:2 * d].reshape(B, Tt, heads, dh).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * d:3 * d].reshape(B, Tt, heads, dh).transpose(0, 2, 1, 3)
        k = np.ascontiguousarray(k)
        v = np.ascontiguousarray(v)
        hist = cache._read(layer)
        kk, vv = (k, v) if hist is None else (
            np.concatenate([hist[0], k], axis=2), np.concatenate([hist[1], v], axis=2))
        att = _np_softmax(q @ kk.transpose(0, 1, 3, 2) * scale)
        o = (att @ vv).transpose(0, 2, 1, 3).reshape(B, Tt, d) @ P[p + "out_w"] \
            + P[p + "out_b"]
        x = x + g1 * o
        cache._store(layer, k, v)

        h2 = _np_layernorm(x) * (sc2 + _F32(1.0)) + sh2
        m = _np_gelu(h2 @ P[p + "mlp1_w"] + P[p + "mlp1_b"]) @ P[p + "mlp2_w"] \
            + P[p + "mlp2_b"]
        x = x + g2 * m

    fmod = c @ P["final.mod_w"] + P["final.mod_b"]
    fsh, fsc = fmod[:, 0:d][:, None, :], fmod[:, d:2 * d][:, None, :]
    hf = _np_layernorm(x) * (fsc + _F32(1.0)) + fsh
    raw = hf @ P["final.head_w"] + P["final.head_b"]
    pred = x_s + unpatchify_np(raw, config.image, config.patch)
    cache._advance()
    return pred, cache


def target_transform(config: StudentConfig, sched, network_output, x_s, s: int):
    """Map the raw prediction to an estimate of x_{tau_{s-1}}.

    NextSample passes through; PredictedX0 treats the output as a
    denoised estimate and applies the deterministic noise-preserving
    update x = alpha_prev * x0 + sigma_prev * (x_s - alpha_s * x0) / sigma_s.
    Works on engine tensors (training graph) and numpy arrays alike.
    """
    if not (1 <= s <= config.steps):
        raise RangeError(f"step {s} outside 1..{config.steps}")
    if config.target is PredictionTarget.NEXT_SAMPLE:
        return network_output
    tau_s = sched.T * s / config.steps
    tau_prev = sched.T * (s - 1) / config.steps
    a_s, sig_s = sched.alpha_sigma(tau_s)
    a_p, sig_p = sched.alpha_sigma(tau_prev)
    c0 = a_p - sig_p * a_s / sig_s
    cs = sig_p / sig_s
    if cs == 0.0:
        return network_output
    # single rounding point keeps the graph and plain-numpy paths aligned
    c0, cs = np.float32(c0), np.float32(cs)
    return c0 * network_output + cs * x_s
