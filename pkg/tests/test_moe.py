import math

import numpy as np
import pytest

from emoe import core
from emoe.errors import ShapeError
from emoe.moe import Expert, MoELayer, expert_forward, moe_forward
from emoe.router import EigenRouter
from emoe.train import LoadStats, accumulate_load
from emoe.vit import ViT, ViTConfig


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def random_expert(rng, d=6, dh=3, scale=1.0):
    return Expert(rng.normal(size=(d, dh)) * scale, rng.normal(size=(1, dh)), rng.normal(size=(dh, d)) * scale,
                  rng.normal(size=(1, d)))


def random_layer(rng, d=6, k=4, alpha=0.7):
    router = EigenRouter.init(d, 3, k, rng)
    router.params.pi.value = rng.normal(size=(3, k)) * 3
    router.params.bias.value = rng.normal(size=(1, k))
    return MoELayer([random_expert(rng, d) for _ in range(k)], router, alpha=alpha)


def test_expert_zero_map(rng):
    d = 5
    e = Expert(np.zeros((d, 2)), np.zeros((1, 2)), np.zeros((2, d)), np.zeros((1, d)))
    assert np.array_equal(expert_forward(e, rng.normal(size=(3, d))).value, np.zeros((3, d)))


def test_expert_bias_path(rng):
    d = 5
    c = rng.normal(size=(1, d))
    e = Expert(rng.normal(size=(d, 2)), np.zeros((1, 2)), rng.normal(size=(2, d)), c)
    assert np.array_equal(expert_forward(e, np.zeros((4, d))).value, np.repeat(c, 4, axis=0))


def test_expert_composition_oracle(rng):
    e = random_expert(rng)
    h = rng.normal(size=(7, 6))
    want = gelu_ref(h @ e.w_in.value + e.b_in.value) @ e.w_out.value + e.b_out.value
    assert np.abs(expert_forward(e, h).value - want).max() < 1e-12


def test_expert_must_be_bottleneck(rng):
    with pytest.raises(ShapeError):
        Expert(np.zeros((4, 4)), np.zeros((1, 4)), np.zeros((4, 4)), np.zeros((1, 4)))


def test_alpha_zero_is_identity(rng):
    layer = random_layer(rng, alpha=0.0)
    h = rng.normal(size=(9, 6))
    out, _ = moe_forward(layer, h)
    assert np.array_equal(out.value, h)


def test_single_expert_gate_is_one(rng):
    router = EigenRouter.init(6, 3, 1, rng)
    e = random_expert(rng)
    layer = MoELayer([e], router, alpha=0.4)
    h = rng.normal(size=(5, 6))
    out, dec = moe_forward(layer, h)
    assert np.array_equal(dec.gate_score, np.ones(5))
    want = h + 0.4 * expert_forward(e, h).value
    assert np.abs(out.value - want).max() < 1e-12


def dense_oracle(layer, h):
    """Run every expert on every token, then keep row k* scaled by its gate."""
    dec = layer.router(h)
    alpha = layer.alpha.value[0, 0]
    outs = [gelu_ref(h @ e.w_in.value + e.b_in.value) @ e.w_out.value + e.b_out.value for e in layer.experts]
    rows = [outs[k][t] * (dec.gate_score[t] if layer.scale_by_gate else 1.0) for t, k in enumerate(dec.expert_index)]
    return h + alpha * np.array(rows)


@pytest.mark.parametrize("scale_by_gate", [True, False])
def test_sparse_matches_dense(rng, scale_by_gate):
    layer = random_layer(rng)
    layer.scale_by_gate = scale_by_gate
    h = rng.normal(size=(20, 6))
    out, _ = moe_forward(layer, h)
    assert np.abs(out.value - dense_oracle(layer, h)).max() < 1e-12


def test_one_expert_call_per_token(rng):
    layer = random_layer(rng)
    h = rng.normal(size=(30, 6))
    _, dec = moe_forward(layer, h)
    assert sum(e.tokens_evaluated for e in layer.experts) == 30
    assert sum(e.calls for e in layer.experts) == len(set(dec.expert_index.tolist()))


def test_layer_shape_checks(rng):
    router = EigenRouter.init(6, 3, 4, rng)
    with pytest.raises(ShapeError):
        MoELayer([random_expert(rng) for _ in range(3)], router)


# ---------------------------------------------------------------- block with MoE


def small_vit(rng, **kw):
    cfg = dict(image_size=8, patch_size=4, channels=3, embed_dim=16, depth=2, heads=2, mlp_hidden=24,
               moe_block_indices=(0,), num_classes=5, r=4, K=4)
    cfg.update(kw)
    return ViT(ViTConfig(**cfg), rng=rng)


def layernorm_ref(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def test_block_alpha_zero_identity_attention_reference(rng):
    model = small_vit(rng)
    d = 16
    p = model.params
    for n in ("wq", "wk", "wv", "wo"):
        p[f"blocks.0.{n}"].value = np.eye(d)
    for n in ("bq", "bk", "bv", "bo"):
        p[f"blocks.0.{n}"].value = rng.normal(size=(1, d)) * 0.1
    p["blocks.0.moe.alpha"].value = np.zeros((1, 1))
    for n in ("w1", "w2"):
        p[f"blocks.0.{n}"].value = rng.normal(size=p[f"blocks.0.{n}"].shape) * 0.3
    t, b = 5, 3
    x = rng.normal(size=(b * t, d))
    got = model.block_forward(0, core.const(x), t).value

    w = {k.split(".", 2)[2]: v.value for k, v in p.items() if k.startswith("blocks.0.") and ".moe." not in k}
    u = layernorm_ref(x, w["ln1.gain"], w["ln1.bias"], 1e-5)
    q, k, v = u + w["bq"], u + w["bk"], u + w["bv"]
    att = np.zeros_like(x)
    heads, dh = 2, d // 2
    for s in range(b):
        rows = slice(s * t, (s + 1) * t)
        for hd in range(heads):
            cols = slice(hd * dh, (hd + 1) * dh)
            sc = q[rows, cols] @ k[rows, cols].T / math.sqrt(dh)
            pr = np.exp(sc - sc.max(axis=1, keepdims=True))
            pr /= pr.sum(axis=1, keepdims=True)
            att[rows, cols] = pr @ v[rows, cols]
    x1 = x + att + w["bo"]
    u2 = layernorm_ref(x1, w["ln2.gain"], w["ln2.bias"], 1e-5)
    want = x1 + gelu_ref(u2 @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
    assert np.abs(got - want).max() < 1e-12


def test_block_class_token_bypass_and_shape(rng):
    model = small_vit(rng)
    t, b, d = 5, 4, 16
    x = core.const(rng.normal(size=(b * t, d)))
    res_on = type("R", (), {"decisions": {}, "router_inputs": {}})()
    on = model.block_forward(0, x, t, res_on).value
    model.moe_enabled = False
    off = model.block_forward(0, x, t).value
    assert on.shape == x.shape
    cls_rows = np.arange(b) * t
    assert np.array_equal(on[cls_rows], off[cls_rows])
    dec = res_on.decisions[0]
    assert dec.expert_index.size == b * (t - 1)
    stats = accumulate_load(LoadStats(4, 2), dec, np.zeros(b * (t - 1), dtype=int))
    assert stats.tokens_seen == b * (t - 1)  # class tokens never reach the tally
