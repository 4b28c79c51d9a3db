"""Student transformer: mask construction against hand tables, the
parallel forward against a float64 reference, bitwise causality through
the attention closure, KV-cache retention, and checkpoint round-trips."""

import numpy as np
import pytest

from ardlab.errors import (CacheStateError, ConfigError, LoadError, RangeError,
                           ShapeError, UnknownClassError)
from ardlab.student import (KVCache, MaskOption, PredictionTarget, StudentConfig,
                            add_embeddings, allowed_blocks, build_mask,
                            forward_step, forward_train, init_params,
                            load_student, param_shapes, patchify_np,
                            save_student, target_transform, unpatchify_np)
from ardlab.teacher import VPSchedule
from ardlab.tensor import Tensor

from oracles import (ALLOWED_S3, ALLOWED_S4, allowed_set, f64_forward,
                     f64_patchify, f64_unpatchify, oracle_mask,
                     randomize_params, reachable_blocks)

OPTIONS = (MaskOption.M1, MaskOption.M2, MaskOption.M3, MaskOption.M4)


def tiny_config(**kw):
    base = dict(layers=2, history_layers=1, d_model=8, heads=2, patch=1,
                image=(1, 2, 2), steps=3, num_classes=3)
    base.update(kw)
    return StudentConfig(**base)


def tensor_params(config, seed, scale=0.05):
    arrays = randomize_params(config, seed, scale)
    return ({k: Tensor(v.astype(np.float32), requires_grad=True)
             for k, v in arrays.items()}, arrays)


# ----------------------------------------------------------------- masks

def test_allowed_blocks_match_hand_tables():
    for S, table in ((4, ALLOWED_S4), (3, ALLOWED_S3)):
        for opt in OPTIONS:
            for s in range(1, S + 1):
                assert set(allowed_blocks(opt, S, s)) == table[opt.value][s], \
                    f"{opt} S={S} s={s}"


def test_allowed_blocks_rule_cases():
    # S=1 collapses every option to the single block
    for opt in OPTIONS:
        assert allowed_blocks(opt, 1, 1) == (1,)
    assert allowed_blocks(MaskOption.M4, 6, 2) == (6, 5, 4, 3, 2)
    with pytest.raises(RangeError):
        allowed_blocks(MaskOption.M4, 4, 5)
    with pytest.raises(RangeError):
        allowed_blocks(MaskOption.M1, 4, 0)


def test_build_mask_matches_oracle_everywhere():
    for S in (1, 2, 3, 4):
        for opt in OPTIONS:
            for s in range(1, S + 1):
                for layer, N in ((0, 0), (0, 2), (1, 2), (3, 2), (0, 5)):
                    got = build_mask(S, s, opt, layer, N, T_tok=3)
                    ref = oracle_mask(S, s, opt.value, layer, N, 3)
                    np.testing.assert_array_equal(got, ref,
                                                  err_msg=f"{opt} S={S} s={s} "
                                                          f"layer={layer} N={N}")


def test_build_mask_gated_layer_sees_only_current():
    m = build_mask(4, 2, MaskOption.M4, layer=2, N=2, T_tok=2)
    expect = np.zeros((2, 8), dtype=bool)
    expect[:, 4:6] = True  # block 2 sits at sequence slot j = S - s = 2
    np.testing.assert_array_equal(m, expect)


# ------------------------------------------------------------ patch layout

def test_patchify_matches_reference_and_inverts():
    image = (2, 4, 6)
    rng = np.random.Generator(np.random.PCG64(0))
    x = rng.standard_normal((3, 2 * 4 * 6)).astype(np.float32)
    for patch in (1, 2):
        tok = patchify_np(x, image, patch)
        ref = f64_patchify(x, image, patch)
        assert tok.shape == (3, (4 // patch) * (6 // patch), patch * patch * 2)
        np.testing.assert_array_equal(tok, ref.astype(np.float32))
        back = unpatchify_np(tok, image, patch)
        np.testing.assert_array_equal(back, x)
        np.testing.assert_array_equal(f64_unpatchify(tok, image, patch), x)


def test_patchify_leading_axes():
    image = (1, 4, 4)
    x = np.arange(2 * 3 * 16, dtype=np.float32).reshape(2, 3, 16)
    tok = patchify_np(x, image, 2)
    assert tok.shape == (2, 3, 4, 4)
    np.testing.assert_array_equal(unpatchify_np(tok, image, 2), x)


# ------------------------------------------------------------ forward pass

def test_forward_train_matches_f64_reference():
    for opt, N in ((MaskOption.M4, 1), (MaskOption.M1, 0), (MaskOption.M2, 2),
                   (MaskOption.M3, 2)):
        config = tiny_config(mask=opt, history_layers=N)
        params, arrays = tensor_params(config, seed=11)
        rng = np.random.Generator(np.random.PCG64(7))
        states = rng.standard_normal((4, config.steps, config.D)).astype(np.float32)
        labels = rng.integers(0, config.num_classes, size=4)
        got = forward_train(params, config, states, labels).data
        ref = f64_forward({k: v.astype(np.float64) for k, v in arrays.items()},
                          config, states, labels)
        assert np.abs(got - ref).max() < 1e-5, f"{opt} N={N}"


def test_forward_train_identity_at_init():
    # zero-initialized head and modulation leave only the skip connection
    config = tiny_config()
    params = init_params(config, seed=0)
    rng = np.random.Generator(np.random.PCG64(1))
    states = rng.standard_normal((2, config.steps, config.D)).astype(np.float32)
    out = forward_train(params, config, states, np.zeros(2, dtype=np.int64))
    np.testing.assert_array_equal(out.data, states)


def test_forward_train_validation():
    config = tiny_config()
    params = init_params(config, 0)
    with pytest.raises(ShapeError):
        forward_train(params, config, np.zeros((2, 2, config.D), dtype=np.float32),
                      np.zeros(2, dtype=np.int64))
    with pytest.raises(UnknownClassError):
        forward_train(params, config,
                      np.zeros((2, config.steps, config.D), dtype=np.float32),
                      np.array([0, 3]))


def test_causality_bitwise_over_attention_closure():
    """Perturbing a block outside the attention closure leaves the query's
    output bit-identical; perturbing one inside it changes the output."""
    rng = np.random.Generator(np.random.PCG64(3))
    for opt in OPTIONS:
        for N in (0, 1, 2):
            config = tiny_config(layers=2, history_layers=N, mask=opt, steps=4)
            params, _ = tensor_params(config, seed=5, scale=0.2)
            states = rng.standard_normal((2, 4, config.D)).astype(np.float32)
            labels = np.array([0, 1])
            base = forward_train(params, config, states, labels).data
            for s in range(1, 5):
                j = 4 - s
                reach = reachable_blocks(opt.value, 4, s, N)
                for sp in range(1, 5):
                    bumped = states.copy()
                    bumped[:, 4 - sp] += 0.25
                    out = forward_train(params, config, bumped, labels).data
                    if sp in reach and sp != s:
                        assert not np.array_equal(out[:, j], base[:, j]), \
                            f"{opt} N={N}: block {sp} should reach query {s}"
                    elif sp not in reach:
                        np.testing.assert_array_equal(
                            out[:, j], base[:, j],
                            err_msg=f"{opt} N={N}: block {sp} leaked into query {s}")


def test_zero_history_layers_equal_m1_bitwise():
    rng = np.random.Generator(np.random.PCG64(4))
    states = rng.standard_normal((3, 3, 4)).astype(np.float32)
    labels = np.array([0, 1, 2])
    outs = {}
    for opt in OPTIONS:
        config = tiny_config(mask=opt, history_layers=0)
        params, _ = tensor_params(config, seed=9, scale=0.2)
        outs[opt] = forward_train(params, config, states, labels).data
    for opt in OPTIONS:
        np.testing.assert_array_equal(outs[opt], outs[MaskOption.M1])


# ------------------------------------------------- sequential (cached) pass

def run_chain(params, config, states, labels, enabled=True):
    """forward_step over a teacher trajectory, collecting raw predictions."""
    cache = KVCache(config, enabled=enabled)
    preds = []
    for s in range(config.steps, 0, -1):
        pred, cache = forward_step(params, config, states[:, config.steps - s],
                                   s, cache, labels)
        preds.append(pred)
    return np.stack(preds, axis=1), cache


def test_train_and_step_agree():
    for opt, N in ((MaskOption.M4, 2), (MaskOption.M3, 1), (MaskOption.M2, 2),
                   (MaskOption.M1, 0)):
        config = tiny_config(mask=opt, history_layers=N, steps=3)
        params, _ = tensor_params(config, seed=21, scale=0.1)
        rng = np.random.Generator(np.random.PCG64(22))
        states = rng.standard_normal((5, 3, config.D)).astype(np.float32)
        labels = rng.integers(0, config.num_classes, size=5)
        par = forward_train(params, config, states, labels).data
        seq, _ = run_chain(params, config, states, labels)
        assert np.abs(par - seq).max() <= 1e-5, f"{opt} N={N}"


def test_step_without_cache_equals_m1():
    config = tiny_config(mask=MaskOption.M1, history_layers=2, steps=3)
    params, _ = tensor_params(config, seed=30, scale=0.1)
    rng = np.random.Generator(np.random.PCG64(31))
    states = rng.standard_normal((2, 3, config.D)).astype(np.float32)
    labels = np.array([0, 1])
    with_cache, _ = run_chain(params, config, states, labels, enabled=True)
    without, _ = run_chain(params, config, states, labels, enabled=False)
    np.testing.assert_array_equal(with_cache, without)


def test_cache_retention_per_option():
    """After two steps the cache holds exactly what a later query can read:
    M4 both blocks, M3 only block S, M2 only the newest, M1 nothing."""
    expect_after_two = {MaskOption.M4: 2, MaskOption.M3: 1,
                        MaskOption.M2: 1, MaskOption.M1: 0}
    for opt, blocks in expect_after_two.items():
        config = tiny_config(mask=opt, history_layers=2, steps=3)
        params = init_params(config, 0)
        rng = np.random.Generator(np.random.PCG64(40))
        x = rng.standard_normal((2, config.D)).astype(np.float32)
        labels = np.array([0, 0])
        cache = KVCache(config)
        _, cache = forward_step(params, config, x, 3, cache, labels)
        first = 0 if opt is MaskOption.M1 else config.T_tok
        assert cache.key_length(0) == first
        _, cache = forward_step(params, config, x, 2, cache, labels)
        assert cache.key_length(0) == blocks * config.T_tok, opt
        assert cache.key_length(1) == blocks * config.T_tok
        # gated layers never hold entries
        assert cache.key_length(2) == 0


def test_cache_consumed_row_audit():
    # M4: layer reads T_tok * (S - s) rows at step s, summing to T*S(S-1)/2
    config = tiny_config(mask=MaskOption.M4, history_layers=2, steps=4)
    params = init_params(config, 0)
    rng = np.random.Generator(np.random.PCG64(41))
    states = rng.standard_normal((3, 4, config.D)).astype(np.float32)
    _, cache = run_chain(params, config, states, np.array([0, 1, 2]))
    expect = config.T_tok * 4 * 3 // 2
    assert cache.consumed == [expect, expect]
    config1 = tiny_config(mask=MaskOption.M1, history_layers=2, steps=4)
    _, cache1 = run_chain(init_params(config1, 0), config1, states,
                          np.array([0, 1, 2]))
    assert cache1.consumed == [0, 0]


def test_step_order_and_state_errors():
    config = tiny_config(steps=3)
    params = init_params(config, 0)
    x = np.zeros((2, config.D), dtype=np.float32)
    labels = np.array([0, 0])
    cache = KVCache(config)
    with pytest.raises(CacheStateError):
        forward_step(params, config, x, 2, cache, labels)  # must start at S
    with pytest.raises(RangeError):
        forward_step(params, config, x, 9, cache, labels)
    with pytest.raises(CacheStateError):
        forward_step(params, config, x, 3, "not a cache", labels)
    _, cache = forward_step(params, config, x, 3, cache, labels)
    with pytest.raises(CacheStateError):
        forward_step(params, config, np.zeros((5, config.D), dtype=np.float32),
                     2, cache, labels[:1].repeat(5))
    with pytest.raises(ShapeError):
        forward_step(params, config, np.zeros((2, 7), dtype=np.float32),
                     2, cache, labels)


def test_add_embeddings_range():
    config = tiny_config()
    params = init_params(config, 0)
    tok = Tensor(np.zeros((config.T_tok, config.d_model), dtype=np.float32))
    with pytest.raises(RangeError):
        add_embeddings(params, config, tok, 0)
    with pytest.raises(RangeError):
        add_embeddings(params, config, tok, config.steps + 1)


# ------------------------------------------------------------- config etc.

def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(layers=0)
    with pytest.raises(ConfigError):
        tiny_config(history_layers=3)  # more than layers=2
    with pytest.raises(ConfigError):
        tiny_config(d_model=9)
    with pytest.raises(ConfigError):
        tiny_config(image=(1, 3, 3), patch=2)
    with pytest.raises(ConfigError):
        tiny_config(steps=0)
    with pytest.raises(ConfigError):
        tiny_config(num_classes=0)


def test_config_dict_roundtrip():
    config = tiny_config(mask=MaskOption.M3, target=PredictionTarget.PREDICTED_X0)
    assert StudentConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ConfigError):
        StudentConfig.from_dict({"layers": 2})
    with pytest.raises(ConfigError):
        MaskOption.parse("m9")
    with pytest.raises(ConfigError):
        PredictionTarget.parse("prev")


def test_param_shapes_and_init():
    config = tiny_config()
    shapes = param_shapes(config)
    params = init_params(config, 0)
    assert set(params) == set(shapes)
    for name, t in params.items():
        assert t.data.shape == shapes[name] and t.data.dtype == np.float32
        assert t.requires_grad
    # two seeds differ, same seed agrees
    again = init_params(config, 0)
    other = init_params(config, 1)
    assert all(np.array_equal(params[k].data, again[k].data) for k in params)
    assert any(not np.array_equal(params[k].data, other[k].data) for k in params)


def test_checkpoint_roundtrip(tmp_path):
    config = tiny_config(mask=MaskOption.M2)
    params, _ = tensor_params(config, seed=3)
    path = save_student(tmp_path, params, config)
    back, cfg2 = load_student(path)
    assert cfg2 == config
    for k in params:
        np.testing.assert_array_equal(back[k].data, params[k].data)
    # byte-identical on re-save
    p2 = save_student(tmp_path / "again", back, cfg2)
    assert path.read_bytes() == p2.read_bytes()


def test_checkpoint_load_errors(tmp_path):
    config = tiny_config()
    params, _ = tensor_params(config, seed=3)
    path = save_student(tmp_path, params, config)
    (tmp_path / "config.json").unlink()
    with pytest.raises(LoadError):
        load_student(path)
    # shape mismatch against a different config
    other = tiny_config(d_model=16, heads=2)
    save_student(tmp_path, params, other)
    with pytest.raises(LoadError):
        load_student(path)


# --------------------------------------------------------- target transform

def test_target_transform_next_is_passthrough():
    config = tiny_config()
    x = np.ones((2, config.D), dtype=np.float32)
    out = np.zeros_like(x)
    assert target_transform(config, VPSchedule(), out, x, 2) is out


def test_target_transform_x0_coefficients():
    sched = VPSchedule()
    config = tiny_config(target=PredictionTarget.PREDICTED_X0, steps=4)
    rng = np.random.Generator(np.random.PCG64(50))
    x0 = rng.standard_normal((3, config.D)).astype(np.float32)
    xs = rng.standard_normal((3, config.D)).astype(np.float32)
    for s in (4, 3, 2):
        tau_s = sched.T * s / 4
        tau_p = sched.T * (s - 1) / 4
        a_s, sig_s = sched.alpha_sigma(tau_s)
        a_p, sig_p = sched.alpha_sigma(tau_p)
        ref = np.float32(a_p - sig_p * a_s / sig_s) * x0 + np.float32(sig_p / sig_s) * xs
        got = target_transform(config, sched, x0, xs, s)
        np.testing.assert_array_equal(got, ref)
    # s=1 lands on tau=0 where sigma_prev is exactly zero: passthrough
    assert target_transform(config, sched, x0, xs, 1) is x0
    with pytest.raises(RangeError):
        target_transform(config, sched, x0, xs, 5)


def test_target_transform_tensor_and_numpy_agree():
    sched = VPSchedule()
    config = tiny_config(target=PredictionTarget.PREDICTED_X0, steps=3)
    rng = np.random.Generator(np.random.PCG64(51))
    x0 = rng.standard_normal((2, config.D)).astype(np.float32)
    xs = rng.standard_normal((2, config.D)).astype(np.float32)
    via_np = target_transform(config, sched, x0, xs, 2)
    via_t = target_transform(config, sched, Tensor(x0), xs, 2)
    np.testing.assert_array_equal(via_np, via_t.data)
