import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbtune.model import (COMPACT, DeepPrompt, ModelConfig, PrefixCache, block, build_model,
                          capture_initial_deep_prompt, decomposition_check, default_prompt, forward,
                          layer_hidden_stats, load_model, run_layers, save_model)
from bbtune.projection import DegenerateStatsError
from bbtune.tasks import make_few_shot_task
from oracles import forward_loop


@pytest.fixture(scope="module")
def small():
    return build_model(ModelConfig(vocab_size=64, hidden=8, layers=3, prompt_len=3, seed=5))


def _batch(model, B=3, T=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, model.config.vocab_size, size=(B, T))


def test_parameters_are_frozen(small):
    for a in small.param_arrays():
        assert not a.flags.writeable
    with pytest.raises(Exception):
        small.config = None


def test_zero_offsets_equal_default_prompt(small):
    ids = _batch(small)
    mp, lab = np.full(3, 5), np.arange(4, 8)
    p = default_prompt(small)
    a = forward(small, None, ids, mp, lab)
    b = forward(small, p.zeroed(), ids, mp, lab)
    assert np.array_equal(a, b)


def test_identical_rows_identical_logits(small):
    ids = np.repeat(_batch(small, B=1), 2, axis=0)
    out = forward(small, None, ids, [2, 2], [4, 5])
    assert np.array_equal(out[0], out[1])


def test_forward_deterministic(small):
    ids = _batch(small)
    assert np.array_equal(forward(small, None, ids, [1, 2, 3], [4, 5]), forward(small, None, ids, [1, 2, 3], [4, 5]))


def test_micro_model_matches_straight_line_recompute():
    m = build_model(ModelConfig(vocab_size=40, hidden=4, layers=2, prompt_len=2, seed=1))
    p = capture_initial_deep_prompt(m, 3)
    off = np.random.default_rng(0).standard_normal((2, 2, 4)) * 0.3
    dp = p.with_offsets(off)
    ids, labels = [3, 30, 31, 1], [4, 5, 6]
    fast = forward(m, dp, np.array([ids]), [3], labels)[0]
    slow = forward_loop(m, [dp.layer(0).tolist(), dp.layer(1).tolist()], ids, 3, labels)
    assert np.allclose(fast, slow, atol=1e-12, rtol=0)


def test_shallow_prompt_leaves_upper_layers_alone():
    m = build_model(ModelConfig(vocab_size=40, hidden=4, layers=2, prompt_len=2, seed=1))
    p = capture_initial_deep_prompt(m, 3)
    dp = p.with_offsets(np.full((1, 2, 4), 0.2))
    ids = [3, 30, 31, 1]
    slow = forward_loop(m, [dp.layer(0).tolist()], ids, 3, [4, 5])
    assert np.allclose(forward(m, dp, np.array([ids]), [3], [4, 5])[0], slow, atol=1e-12)


def test_no_prompt_matches_recompute():
    m = build_model(ModelConfig(vocab_size=40, hidden=4, layers=2, prompt_len=2, seed=2))
    ids = [3, 30, 31, 1]
    out = forward(m, None, np.array([ids]), [3], [4, 5], use_prompt=False)[0]
    assert np.allclose(out, forward_loop(m, [], ids, 3, [4, 5]), atol=1e-12)


def test_forward_errors(small):
    ids = _batch(small)
    with pytest.raises(ValueError, match="unknown token"):
        forward(small, None, np.array([[1, 999]]), [0], [4])
    with pytest.raises(ValueError):
        forward(small, None, ids, [0, 0], [4])
    with pytest.raises(ValueError):
        forward(small, None, ids, [0, 0, 6], [4])
    bad = DeepPrompt(np.zeros((3, 2, 8)), np.zeros((3, 2, 8)))
    with pytest.raises(ValueError, match="shape"):
        forward(small, bad, ids, [0, 0, 0], [4])
    with pytest.raises(ValueError, match="max_len"):
        forward(small, None, np.zeros((1, 70), int), [0], [4])


def test_padding_is_ignored(small):
    ids = np.array([[3, 20, 21, 1]])
    padded = np.array([[3, 20, 21, 1, 0, 0]])
    mask = np.array([[1, 1, 1, 1, 0, 0]], bool)
    a = forward(small, None, ids, [3], [4, 5])
    b = forward(small, None, padded, [3], [4, 5], mask)
    assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("L", [1, 2, 4, 8])
def test_decomposition_residual(L):
    m = build_model(ModelConfig(vocab_size=64, hidden=16, layers=L, prompt_len=4, seed=L))
    ids = _batch(m, B=4, T=7, seed=L)
    assert decomposition_check(m, ids) < 1e-6
    assert decomposition_check(m, ids, prompt=default_prompt(m)) < 1e-6


def test_decomposition_single_layer_exact():
    m = build_model(ModelConfig(vocab_size=32, hidden=8, layers=1, prompt_len=2))
    ids = _batch(m, B=2, T=5)
    inputs, out = run_layers(m, None, ids, dtype=np.float64)
    assert np.array_equal(out, inputs[0] + block(m.layer_params[0], inputs[0]))


def test_decomposition_stress_config():
    m = build_model(ModelConfig(vocab_size=128, hidden=64, layers=24, prompt_len=10, seed=3))
    assert decomposition_check(m, _batch(m, B=4, T=12)) < 1e-4


def test_capture_initial_prompt():
    m = build_model(ModelConfig(vocab_size=64, hidden=8, layers=3, prompt_len=3, seed=5))
    a, b = capture_initial_deep_prompt(m, 11), capture_initial_deep_prompt(m, 11)
    assert np.array_equal(a.init, b.init) and np.array_equal(a.token_ids, b.token_ids)
    assert not np.any(a.offsets)
    for row in a.init[0]:
        assert np.any(np.all(m.embedding == row, axis=1))
    # p_2^0 = p_1^0 + f_1(p_1^0), recomputed by hand
    x = a.init[0][None]
    assert np.allclose(a.init[1], (x + block(m.layer_params[0], x))[0], atol=1e-12)


def test_prompt_locality():
    m = build_model(ModelConfig(vocab_size=64, hidden=8, layers=4, prompt_len=3, seed=5))
    p = default_prompt(m)
    ids = _batch(m)
    base, _ = run_layers(m, p, ids, dtype=np.float64)
    off = np.zeros_like(p.offsets)
    off[2] = 0.5
    moved, _ = run_layers(m, p.with_offsets(off), ids, dtype=np.float64)
    n_p = m.prompt_len
    for j in range(4):
        same = np.array_equal(base[j][:, n_p:], moved[j][:, n_p:])
        assert same == (j <= 2)


def test_prefix_cache_is_bitwise_transparent():
    m = build_model(COMPACT)
    task = make_few_shot_task(n_classes=3, k=4, seed=1)
    tr = task.train
    p = default_prompt(m)
    cache = PrefixCache(capacity=4)
    rng = np.random.default_rng(0)
    off = np.zeros_like(p.offsets)
    for step in range(12):
        off[step % 4] = rng.standard_normal(off.shape[1:]) * 0.1
        dp = p.with_offsets(off.copy())
        a = forward(m, dp, tr.input_ids, tr.mask_pos, task.label_ids, tr.attention_mask, cache=cache)
        b = forward(m, dp, tr.input_ids, tr.mask_pos, task.label_ids, tr.attention_mask)
        assert np.array_equal(a, b)
    assert cache.hits > 0


def test_float32_close_to_float64():
    m = build_model(COMPACT)
    ids = _batch(m, B=4, T=6)
    a = forward(m, None, ids, [5] * 4, [4, 5, 6])
    b = forward(m, None, ids, [5] * 4, [4, 5, 6], dtype=np.float64)
    assert np.allclose(a, b, atol=1e-4)


def test_layer_stats_count_and_determinism():
    m = build_model(ModelConfig(vocab_size=64, hidden=8, layers=4, prompt_len=3))
    task = make_few_shot_task(vocab_size=64, n_classes=2, k=4)
    a, b = layer_hidden_stats(m, task), layer_hidden_stats(m, task)
    assert len(a) == 5
    assert [s.layer for s in a] == list(range(5))
    assert a == b
    assert all(s.clip_rounds == 5 for s in a)


def test_layer_stats_embedding_oracle():
    m = build_model(ModelConfig(vocab_size=2048, hidden=64, layers=2, prompt_len=4, embed_std=0.02,
                                topic_strength=0.0))
    task = make_few_shot_task(vocab_size=2048, n_classes=2, k=2)
    assert m.embedding.size >= 10**5
    assert layer_hidden_stats(m, task)[0].sigma_hat == pytest.approx(0.02, rel=0.05)


def test_layer_stats_propagates_degenerate():
    m = build_model(ModelConfig(vocab_size=16, hidden=4, layers=1, prompt_len=1))
    m = dataclasses.replace(m, embedding=np.full((16, 4), 0.5))
    with pytest.raises(DegenerateStatsError):
        layer_hidden_stats(m, np.array([[4, 5, 6]]))


def test_checkpoint_round_trip(tmp_path):
    m = build_model(ModelConfig(vocab_size=50, hidden=8, layers=2, prompt_len=2, seed=9, dtype="float32"))
    save_model(m, tmp_path / "m.ckpt")
    m2 = load_model(tmp_path / "m.ckpt")
    assert m2.config == m.config
    assert m2.checksum() == m.checksum()
    ids = _batch(m)
    assert np.array_equal(forward(m, None, ids, [1, 1, 1], [4]), forward(m2, None, ids, [1, 1, 1], [4]))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.ckpt")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(1, 4), H=st.sampled_from([4, 8, 12]))
def test_decomposition_property(seed, L, H):
    m = build_model(ModelConfig(vocab_size=48, hidden=H, layers=L, prompt_len=2, seed=seed))
    ids = np.random.default_rng(seed).integers(0, 48, size=(2, 5))
    assert decomposition_check(m, ids, prompt=default_prompt(m)) < 1e-6
