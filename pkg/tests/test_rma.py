import json
from pathlib import Path

import numpy as np
import pytest

import oracles
from golden_inputs import GOLDEN_CONFIG, golden_inputs
from maskclip import numerics as nx
from maskclip import rma as R
from maskclip.mask_tokens import EmptyMaskError, MaskSet, encode_with_mask_tokens
from maskclip.vit import ViTConfig, init_weights

GOLDEN = json.loads((Path(__file__).parent / "golden" / "toy_forward.json").read_text())
SMALL = ViTConfig(image_size=8, patch_size=4, depth=3, dim=8, heads=2, mlp_ratio=2, out_dim=4)


def _masks(rng, m=2, size=8):
    x = rng.random((m, size, size))
    x[:, 0, 0] = 0.9
    return x


def test_default_layers():
    assert R.default_layers(24) == (6, 12, 18, 24)
    assert R.default_layers(8) == (2, 4, 6, 8)
    assert R.default_layers(2) == (1, 2)


def test_mask_patch_tokens_examples():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(8, 1, 4, 4))
    assert np.all(R.mask_patch_tokens(np.zeros((1, 8, 8)), w, np.zeros(8)) == 0.0)
    tok = R.mask_patch_tokens(np.ones((2, 8, 8)), w, rng.normal(size=8))
    assert np.all(tok[1] == tok[1][0])
    m = rng.random((1, 8, 8))
    b = rng.normal(size=8)
    ref = oracles.conv2d(m, w, b, stride=4)
    np.testing.assert_allclose(R.mask_patch_tokens(m, w, b)[0, 3], ref[:, 1, 1], atol=1e-12)


def test_relative_logits_examples():
    eye = np.eye(1)
    out = R.relative_attention_logits(np.full((1, 1, 1), 2.0), np.full((1, 1), 3.0), eye, np.zeros(1), eye, np.zeros(1))
    assert out.tolist() == [[6.0]]
    rng = np.random.default_rng(1)
    t_mp, t_im = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 4))
    zero = R.relative_attention_logits(t_mp, t_im, np.zeros((4, 4)), np.zeros(4), rng.normal(size=(4, 4)), np.zeros(4))
    assert np.all(zero == 0.0)
    wq, bq, wk, bk = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=(4, 4)), rng.normal(size=4)
    got = R.relative_attention_logits(t_mp, t_im, wq, bq, wk, bk)
    for i in range(2):
        for j in range(3):
            q = [sum(t_mp[i, j, c] * wq[c, o] for c in range(4)) + bq[o] for o in range(4)]
            k = [sum(t_im[j, c] * wk[c, o] for c in range(4)) + bk[o] for o in range(4)]
            assert got[i, j] == pytest.approx(sum(a * b for a, b in zip(q, k)), abs=1e-12)


def test_combined_attention_examples():
    eye, z = np.eye(2), np.zeros(2)
    out = R.combined_attention(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.zeros((1, 1)), eye, z, eye, z, 1)
    assert out[0, 0, 0] == pytest.approx(1 / (2 * np.sqrt(2)), abs=1e-15)

    rng = np.random.default_rng(2)
    t_mc, t_im = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    wq, bq, wk, bk = rng.normal(size=(8, 8)), rng.normal(size=8), rng.normal(size=(8, 8)), rng.normal(size=8)
    a = rng.normal(size=(3, 5))
    base = R.combined_attention(t_mc, t_im, np.zeros((3, 5)), wq, bq, wk, bk, 2)
    std = oracles.attention_logits(np.vstack([t_mc, t_im]), wq, bq, wk, bk, 2)[:, :3, 3:]
    np.testing.assert_allclose(base, 0.5 * std, atol=1e-12)
    shifted = R.combined_attention(t_mc, t_im, 2 * a, wq, bq, wk, bk, 2)
    once = R.combined_attention(t_mc, t_im, a, wq, bq, wk, bk, 2)
    np.testing.assert_allclose(shifted - once, np.broadcast_to(a / (2 * 2.0), once.shape), atol=1e-12)


def _fr(d, scale=0.0, bias=0.0, seed=0):
    rng = np.random.default_rng(seed)
    half = d // 2
    return {
        "fr1.weight": rng.normal(size=(half, d, 3, 3)), "fr1.bias": rng.normal(size=half),
        "fr2.weight": scale * rng.normal(size=(1, half, 3, 3)), "fr2.bias": np.full(1, bias),
    }


def test_refine_identity_with_zero_head():
    rng = np.random.default_rng(3)
    m = rng.random((2, 8, 8))
    m[0, 0, :3] = [0.0, 1.0, 0.5]
    out = R.refine_mask(m, rng.normal(size=(2, 8)), rng.normal(size=(4, 8)), np.eye(8), np.zeros(8), np.eye(8),
                        np.zeros(8), _fr(8))
    assert np.array_equal(out, np.clip(m, 1e-4, 1 - 1e-4))


def test_refine_saturates_with_large_residual():
    rng = np.random.default_rng(4)
    out = R.refine_mask(rng.random((1, 8, 8)), rng.normal(size=(1, 8)), rng.normal(size=(4, 8)), np.eye(8), np.zeros(8),
                        np.eye(8), np.zeros(8), _fr(8, bias=40.0))
    assert np.all(out > 1 - 1e-6)


def test_refine_single_pixel_scalar_form():
    d = 2
    fr = {"fr1.weight": np.zeros((1, d, 3, 3)), "fr1.bias": np.zeros(1),
          "fr2.weight": np.zeros((1, 1, 3, 3)), "fr2.bias": np.array([1.0])}
    out = R.refine_mask(np.full((1, 1, 1), 0.5), np.ones((1, d)), np.ones((1, d)), np.eye(d), np.zeros(d), np.eye(d),
                        np.zeros(d), fr)
    assert out[0, 0, 0] == pytest.approx(0.73106, abs=1e-5)


def test_empty_layer_set_reduces_to_mask_tokens():
    w = init_weights(SMALL, 0)
    rng = np.random.default_rng(5)
    img, m = rng.random((3, 8, 8)), MaskSet(_masks(rng))
    res = R.rma_forward(img, m, w, R.RMAParams(()))
    feats, cls, _ = encode_with_mask_tokens(img, m, w)
    assert np.array_equal(res.mask_features, feats)
    assert np.array_equal(res.class_feature, cls)
    assert np.array_equal(res.refined_masks.masks, m.masks)


def test_zero_relative_and_refinement_is_half_scaled_forward():
    w = init_weights(SMALL, 1)
    p = R.init_rma_params(w, layers=(1, 3), seed=0)
    for k in p.layers:
        for nm in ("qm.weight", "qm.bias", "km.weight", "km.bias"):
            p.tensors[R.prefix(k) + nm] = np.zeros_like(p.tensors[R.prefix(k) + nm])
    rng = np.random.default_rng(6)
    img, m = rng.random((3, 8, 8)), _masks(rng)
    res = R.rma_forward(img, MaskSet(m), w, p)
    assert np.array_equal(res.refined_masks.masks, np.clip(m, 1e-4, 1 - 1e-4))
    _, feats, _ = oracles.forward(img, w.tensors, SMALL.as_dict(), m, rma=p.tensors, rma_layers=(1, 3))
    np.testing.assert_allclose(res.mask_features, feats, atol=1e-12)


def test_rma_forward_matches_golden_reference():
    inp = golden_inputs()
    res = R.rma_forward(inp["image"], MaskSet(inp["masks"]), inp["weights"], inp["rma"])
    g = GOLDEN["rma"]
    np.testing.assert_allclose(res.mask_features, g["mask_features"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.refined_masks.masks, g["refined_masks"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.class_feature, g["class_feature"], rtol=0, atol=1e-12)
    assert not np.allclose(res.refined_masks.masks, inp["masks"])


def test_refinement_that_empties_a_mask_raises():
    w = init_weights(SMALL, 0)
    p = R.init_rma_params(w, layers=(1, 2), seed=0)
    p.tensors[R.prefix(1) + "fr2.bias"] = np.array([-50.0])
    rng = np.random.default_rng(7)
    with pytest.raises(EmptyMaskError):
        R.rma_forward(rng.random((3, 8, 8)), MaskSet(_masks(rng)), w, p)


def test_layer_validation():
    w = init_weights(SMALL, 0)
    with pytest.raises(ValueError):
        R.init_rma_params(w, layers=(4,))
    with pytest.raises(ValueError):
        R.RMAParams((2,), {}).validate(SMALL)


def test_backward_matches_finite_differences_small():
    cfg = ViTConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2, mlp_ratio=2, out_dim=4)
    w = init_weights(cfg, 3)
    p = R.init_rma_params(w, layers=(1, 2), seed=1)
    prng = np.random.default_rng(8)
    for k in p.tensors:
        p.tensors[k] = p.tensors[k] + prng.normal(0, 0.05, p.tensors[k].shape)
    img, m = prng.random((3, 8, 8)), MaskSet(_masks(prng))
    gf, gm = prng.normal(size=(2, 4)), prng.normal(size=(2, 8, 8))

    def loss(params):
        r = R.rma_forward(img, m, w, params)
        return float((r.mask_features * gf).sum() + (r.refined_masks.masks * gm).sum())

    res = R.rma_forward(img, m, w, p, keep_cache=True)
    grads = R.rma_backward(w, p, res.cache, gf, gm)
    for name in ("rma.layer1.f2.weight", "rma.layer2.km.bias", "rma.layer1.fr2.weight", "rma.layer2.qm.weight"):
        def f(v, name=name):
            q = p.copy()
            q.tensors[name] = v
            return loss(q)

        num = nx.finite_diff_grad(f, p.tensors[name], h=1e-6)
        err = np.abs(grads[name] - num).max() / max(np.abs(num).max(), 1e-12)
        assert err < 1e-5, name
