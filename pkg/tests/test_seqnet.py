import numpy as np
import pytest

from metaskill import diffcore as dc
from metaskill import seqnet
from metaskill.episodes import pad_batch


def test_width_tables():
    cfg, _ = seqnet.build_backbone(8, seed=0)
    assert (cfg.k_mid, cfg.d_out) == (16, 512)
    cfg, _ = seqnet.build_backbone(64, seed=0)
    assert (cfg.k_mid, cfg.d_out) == (256, 1024)
    cfg, _ = seqnet.build_backbone(16, seed=0)
    assert (cfg.k_mid, cfg.d_out) == (64, 512)
    with pytest.raises(ValueError, match="unsupported"):
        seqnet.build_backbone(5, seed=0)


def test_build_backbone_deterministic():
    _, a = seqnet.build_backbone(4, seed=123)
    _, b = seqnet.build_backbone(4, seed=123)
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name].value, b[name].value)
    _, c = seqnet.build_backbone(4, seed=124)
    assert any(not np.array_equal(a[n].value, c[n].value) for n in a)


def test_se_attention_constant_gate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    mask = np.ones(6, dtype=bool)
    zeros_w = np.zeros((2, 4)), np.zeros(2), np.zeros((4, 2)), np.zeros(4)
    out = seqnet.se_attention(x, mask, *zeros_w)
    np.testing.assert_allclose(out.value, 0.5 * x, atol=1e-12)

    out = seqnet.se_attention(np.zeros((6, 4)), mask, rng.normal(size=(2, 4)),
                              rng.normal(size=2), rng.normal(size=(4, 2)), rng.normal(size=4))
    np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    # a large positive expand bias saturates the gate open
    out = seqnet.se_attention(x, mask, np.zeros((2, 4)), np.zeros(2),
                              np.zeros((4, 2)), np.full(4, 50.0))
    np.testing.assert_allclose(out.value, x, atol=1e-9)


def _block_params(rng, width, k, reduction=4):
    mid = max(2, width // reduction)
    return {
        "conv1.kernel": rng.normal(size=(width, width, k)) * 0.3,
        "conv2.kernel": rng.normal(size=(width, width, k)) * 0.3,
        "se.reduce.weight": rng.normal(size=(mid, width)) * 0.3,
        "se.reduce.bias": np.zeros(mid),
        "se.expand.weight": rng.normal(size=(width, mid)) * 0.3,
        "se.expand.bias": np.zeros(width),
    }


def test_residual_block_dead_branch_and_zero_input():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 4))
    mask = np.ones(7, dtype=bool)
    bp = _block_params(rng, 4, 3)
    bp["conv1.kernel"] = np.zeros_like(bp["conv1.kernel"])
    bp["conv2.kernel"] = np.zeros_like(bp["conv2.kernel"])
    out = seqnet.residual_block(x, mask, bp, filt=3, dilation=1)
    np.testing.assert_allclose(out.value, np.maximum(x, 0.0), atol=1e-12)

    bp = _block_params(rng, 4, 3)
    out = seqnet.residual_block(np.zeros((7, 4)), mask, bp, filt=3, dilation=1)
    np.testing.assert_allclose(out.value, 0.0, atol=1e-12)


def test_residual_block_gradients_match_fd():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 2))
    mask = np.array([True, True, True, True, False, False])
    raw = _block_params(rng, 2, 3)
    params = {k: dc.Parameter(k, v) for k, v in raw.items()}
    weights = rng.normal(size=(6, 2))

    def fn(ps):
        out = seqnet.residual_block(dc.constant(x), mask, ps, filt=3, dilation=2)
        return dc.ssum(dc.mul(out, dc.constant(weights)))

    report = dc.finite_diff_check(fn, params, rtol=1e-4)
    assert report.passed, str(report)


def test_forward_embed_padding_invariance():
    cfg, params = seqnet.build_backbone(4, seed=5)
    rng = np.random.default_rng(3)
    seqs = [rng.normal(size=(t, 4)) for t in (11, 4, 17)]
    batch, masks = pad_batch(seqs)
    together = seqnet.embed_sequences(cfg, params, batch, masks)
    for i, s in enumerate(seqs):
        alone = seqnet.embed_sequences(cfg, params, s[None], np.ones((1, len(s)), bool))
        assert np.abs(alone[0] - together[i]).max() < 1e-10


def test_forward_embed_batch_permutation_equivariance():
    cfg, params = seqnet.build_backbone(2, seed=5)
    rng = np.random.default_rng(4)
    seqs = [rng.normal(size=(t, 2)) for t in (5, 9, 7, 6)]
    batch, masks = pad_batch(seqs)
    emb = seqnet.embed_sequences(cfg, params, batch, masks)
    perm = [2, 0, 3, 1]
    emb_p = seqnet.embed_sequences(cfg, params, batch[perm], masks[perm])
    np.testing.assert_allclose(emb_p, emb[perm], atol=1e-12)


def test_forward_embed_duplicate_rows_identical():
    cfg, params = seqnet.build_backbone(2, seed=9)
    rng = np.random.default_rng(8)
    s = rng.normal(size=(8, 2))
    batch, masks = pad_batch([s, s])
    emb = seqnet.embed_sequences(cfg, params, batch, masks)
    np.testing.assert_array_equal(emb[0], emb[1])


def test_full_model_gradcheck_small_configs():
    rng = np.random.default_rng(6)
    for trial, d_in in enumerate((2, 4)):
        cfg, params = seqnet.build_backbone(d_in, seed=trial)
        seqs = [rng.normal(size=(rng.integers(4, 13), d_in)) for _ in range(3)]
        batch, masks = pad_batch(seqs)
        labels = rng.integers(0, 2, size=3)
        head = {
            "head.weight": dc.Parameter("head.weight", rng.normal(size=(2, cfg.d_out)) * 0.05),
            "head.bias": dc.Parameter("head.bias", np.zeros(2)),
        }
        allp = dict(params) | head

        def fn(ps):
            lv = dc.make_leaves(ps)
            emb = seqnet.forward_embed(cfg, lv, batch, masks)
            logits = dc.dense(emb, lv["head.weight"], lv["head.bias"])
            return dc.softmax_cross_entropy(logits, labels)

        report = dc.finite_diff_check(fn, allp, rtol=1e-4, max_coords_per_param=4,
                                      rng=np.random.default_rng(trial))
        assert report.passed, str(report)


def test_receptive_field_bound():
    # block1 (k=5, d=1) contributes +-4, block2 (k=3, d=2) another +-4
    cfg, params = seqnet.build_backbone(2, seed=11)
    rng = np.random.default_rng(12)
    t_len = 40
    x = rng.normal(size=(t_len, 2))
    mask = np.ones((1, t_len), dtype=bool)
    base = seqnet.forward_features(cfg, params, x[None], mask).value[0]
    poke = 20
    x2 = x.copy()
    x2[poke] += 3.0
    bumped = seqnet.forward_features(cfg, params, x2[None], mask).value[0]
    changed = np.where(np.abs(bumped - base).max(axis=1) > 1e-12)[0]
    assert changed.size > 0
    assert changed.min() >= poke - 8
    assert changed.max() <= poke + 8


def test_head_logits_examples():
    e = np.array([[1.0, 2.0]])
    head = seqnet.Head(weights=np.zeros((3, 2)), bias=np.zeros(3))
    logits = seqnet.head_logits(e, head)
    p = np.exp(logits)
    np.testing.assert_allclose(p / p.sum(), [[1 / 3, 1 / 3, 1 / 3]])

    head = seqnet.Head(weights=2.0 * e, bias=np.array([-float(e @ e.T)]))
    np.testing.assert_allclose(seqnet.head_logits(e, head), [[float(e @ e.T)]])

    with pytest.raises(ValueError, match="match"):
        seqnet.head_logits(np.zeros((1, 3)), seqnet.Head(np.zeros((2, 2)), np.zeros(2)))
