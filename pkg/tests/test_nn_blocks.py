from __future__ import annotations

import numpy as np
import pytest

import nn_blocks as nb
import tensor_core as tc
from errors import ConfigurationError, NumericalError


def test_causal_mask_rows():
    m = nb.build_attention_mask(3, 3, "causal")
    assert m.allowed.tolist() == [[True, False, False], [True, True, False], [True, True, True]]


def test_full_mask_and_single_pair():
    assert nb.build_attention_mask(2, 4, "full").allowed.sum() == 8
    assert nb.build_attention_mask(1, 1, "causal").allowed.tolist() == [[True]]


@pytest.mark.parametrize("args", [(2, 3, "causal"), (0, 1, "full"), (2, 2, "banded")])
def test_bad_masks_rejected(args):
    with pytest.raises(ConfigurationError, match="build_attention_mask"):
        nb.build_attention_mask(*args)


def _identity_attention(d: int) -> tc.ParamStore:
    store = tc.ParamStore()
    s = store.scope("attn")
    for name in ("q", "k", "v", "o"):
        s.add(f"{name}.w", np.eye(d))
        s.add(f"{name}.b", np.zeros(d))
    return store


def test_single_value_passthrough(f64):
    store = _identity_attention(3)
    value = tc.constant(np.array([[0.5, -1.0, 2.0]]))
    query = tc.constant(np.array([[1.0, 1.0, 1.0]]))
    out = nb.attention(query, value, store.scope("attn"), nb.build_attention_mask(1, 1), 1)
    np.testing.assert_allclose(out.data, value.data)


def test_zero_queries_average_allowed_values(f64):
    store = _identity_attention(2)
    kv = tc.constant(np.array([[1.0, 0.0], [3.0, 2.0], [100.0, 100.0]]))
    queries = tc.constant(np.zeros((3, 2)))
    mask = nb.AttentionMask(np.array([[True, True, False]] * 3))
    out = nb.attention(queries, kv, store.scope("attn"), mask, 1)
    np.testing.assert_allclose(out.data, np.tile([[2.0, 1.0]], (3, 1)))


def test_row_without_keys_raises(rng):
    store = tc.ParamStore()
    nb.init_attention(store.scope("attn"), 4, 4, rng)
    x = tc.constant(rng.normal(0.0, 1.0, (2, 4)))
    with pytest.raises(NumericalError):
        nb.attention(x, x, store.scope("attn"), nb.AttentionMask(np.array([[True, False], [False, False]])), 2)


def test_width_mismatch_raises(rng):
    store = tc.ParamStore()
    nb.init_attention(store.scope("attn"), 4, 4, rng)
    with pytest.raises(ConfigurationError, match="attention"):
        nb.attention(tc.constant(np.zeros((2, 5))), tc.constant(np.zeros((2, 4))), store.scope("attn"), nb.build_attention_mask(2, 2), 2)


def test_depth_zero_is_identity(rng):
    spec = nb.StackSpec(0, 4, 2)
    x = tc.constant(rng.normal(0.0, 1.0, (3, 4)))
    out = nb.transformer_stack(x, tc.ParamStore().scope("s"), spec, nb.build_attention_mask(3, 3, "causal"))
    assert out is x


def test_depth_zero_still_checks_wiring():
    store = tc.ParamStore()
    x = tc.constant(np.zeros((3, 4)))
    mask = nb.build_attention_mask(3, 3)
    with pytest.raises(ConfigurationError, match="cross inputs must be given"):
        nb.transformer_stack(x, store.scope("s"), nb.StackSpec(0, 4, 2, d_cross=6), mask)
    with pytest.raises(ConfigurationError, match="cross inputs must be given"):
        nb.transformer_stack(x, store.scope("s"), nb.StackSpec(0, 4, 2), mask, tc.constant(np.zeros((2, 6))))
    with pytest.raises(ConfigurationError, match="cross width 5 != 6"):
        nb.transformer_stack(x, store.scope("s"), nb.StackSpec(0, 4, 2, d_cross=6), mask, tc.constant(np.zeros((2, 5))))
    with pytest.raises(ConfigurationError, match="input width 4 != 8"):
        nb.transformer_stack(x, store.scope("s"), nb.StackSpec(0, 8, 2), mask)
    with pytest.raises(ConfigurationError, match="self mask 2x2"):
        nb.transformer_stack(x, store.scope("s"), nb.StackSpec(0, 4, 2), nb.build_attention_mask(2, 2))


def test_causal_stack_prefix_invariance(rng):
    spec = nb.StackSpec(2, 8, 2)
    store = tc.ParamStore()
    nb.init_stack(store.scope("s"), spec, rng)
    x = rng.normal(0.0, 1.0, (8, 8)).astype(np.float32)
    y = x.copy()
    y[4] += 1.0
    mask = nb.build_attention_mask(8, 8, "causal")
    with tc.no_grad():
        a = nb.transformer_stack(tc.constant(x), store.scope("s"), spec, mask).data
        b = nb.transformer_stack(tc.constant(y), store.scope("s"), spec, mask).data
    assert np.array_equal(a[:4], b[:4])
    assert not np.array_equal(a[4:], b[4:])


def test_cross_inputs_required_exactly_when_configured(rng):
    spec = nb.StackSpec(1, 4, 2, d_cross=6)
    store = tc.ParamStore()
    nb.init_stack(store.scope("s"), spec, rng)
    x = tc.constant(np.zeros((2, 4)))
    with pytest.raises(ConfigurationError, match="transformer_stack"):
        nb.transformer_stack(x, store.scope("s"), spec, nb.build_attention_mask(2, 2))
    with pytest.raises(ConfigurationError, match="cross width"):
        nb.transformer_stack(x, store.scope("s"), spec, nb.build_attention_mask(2, 2), tc.constant(np.zeros((3, 5))))


def test_parameter_names(rng):
    store = tc.ParamStore()
    nb.init_stack(store.scope("q"), nb.StackSpec(1, 4, 2, d_cross=6), rng)
    names = store.names()
    for expected in ("q.blocks.0.attn.q.w", "q.blocks.0.cross.k.w", "q.blocks.0.ln_c.g", "q.blocks.0.ffn.fc1.w", "q.ln_f.b"):
        assert expected in names
    assert store["q.blocks.0.cross.k.w"].shape == (6, 4)
    assert store["q.blocks.0.ffn.fc1.w"].shape == (4, 16)


def test_block_grad_check(f64, rng):
    spec = nb.StackSpec(1, 4, 2, d_cross=3)
    store = tc.ParamStore()
    nb.init_stack(store.scope("s"), spec, rng)
    x = tc.constant(rng.normal(0.0, 1.0, (2, 3, 4)))
    c = tc.constant(rng.normal(0.0, 1.0, (2, 5, 3)))
    upstream = tc.constant(rng.normal(0.0, 1.0, (2, 3, 4)))
    mask = nb.build_attention_mask(3, 3, "causal")
    report = tc.grad_check(lambda: tc.tsum(nb.transformer_stack(x, store.scope("s"), spec, mask, c) * upstream), store, max_components=6, rng=rng)
    assert report.passed, report.max_rel_error


def test_adapter_sees_projection_names(rng):
    spec = nb.StackSpec(1, 4, 2)
    store = tc.ParamStore()
    nb.init_stack(store.scope("lm"), spec, rng)
    seen = []

    def adapter(name, x, base):
        seen.append(name)
        return base

    nb.transformer_stack(tc.constant(np.zeros((2, 4))), store.scope("lm"), spec, nb.build_attention_mask(2, 2, "causal"), adapter=adapter)
    assert seen == ["lm.blocks.0.attn.q", "lm.blocks.0.attn.k", "lm.blocks.0.attn.v", "lm.blocks.0.attn.o"]


def test_sinusoidal_positions_shape_and_first_row():
    p = nb.sinusoidal_positions(5, 6)
    assert p.shape == (5, 6)
    np.testing.assert_allclose(p[0], [0, 1, 0, 1, 0, 1])
