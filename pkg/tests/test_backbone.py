import math

import numpy as np
import pytest

from replay_prompt import autodiff as ad
from replay_prompt import backbone as bb
from replay_prompt.autodiff import Tensor
from replay_prompt.data import generate_synthetic
from replay_prompt.missing import placeholder

from conftest import tiny_backbone_config, tiny_task


def test_embedding_is_deterministic(tiny_weights):
    p = tiny_weights.tensors()
    x = np.random.default_rng(0).normal(size=(3, 4, 6))
    a = bb.embed_modality(p, tiny_weights.config, x, 0).data
    b = bb.embed_modality(p, tiny_weights.config, x, 0).data
    assert a.tobytes() == b.tobytes()


def test_text_placeholder_embeds_to_fixed_value(tiny_weights):
    p = tiny_weights.tensors()
    ph = placeholder("text", 4, 6)
    first = bb.embed_modality(p, tiny_weights.config, ph, 1).data
    for _ in range(3):
        assert bb.embed_modality(p, tiny_weights.config, ph, 1).data.tobytes() == first.tobytes()


def test_batch_embedding_equals_stacked_samples(tiny_weights):
    p = tiny_weights.tensors()
    x = np.random.default_rng(2).normal(size=(5, 4, 6))
    batch = bb.embed_modality(p, tiny_weights.config, x, 1).data
    loop = np.stack([bb.embed_modality(p, tiny_weights.config, s, 1).data for s in x])
    np.testing.assert_allclose(batch, loop, rtol=0, atol=1e-13)


def test_embed_rejects_bad_modality_and_width(tiny_weights):
    p = tiny_weights.tensors()
    with pytest.raises(IndexError):
        bb.embed_modality(p, tiny_weights.config, np.zeros((4, 6)), 2)
    with pytest.raises(ad.ShapeError):
        bb.embed_modality(p, tiny_weights.config, np.zeros((4, 5)), 0)


def test_zero_branches_give_residual_identity(tiny_weights):
    params = dict(tiny_weights.params)
    for name in ("attn.wo", "attn.bo", "ff.w1", "ff.b1", "ff.w2", "ff.b2"):
        params[f"m0.l1.{name}"] = np.zeros_like(params[f"m0.l1.{name}"])
    p = {k: Tensor(v) for k, v in params.items()}
    x = Tensor(np.random.default_rng(3).normal(size=(2, 7, 8)))
    out = bb.encoder_layer_forward(p, tiny_weights.config, x, 1, 0)
    assert np.array_equal(out.data, x.data)


def test_layer_preserves_shape_and_is_batch_equivariant(tiny_weights):
    p = tiny_weights.tensors()
    x = np.random.default_rng(4).normal(size=(5, 9, 8))
    out = x
    for k in range(tiny_weights.config.n_layers):
        out = bb.encoder_layer_forward(p, tiny_weights.config, Tensor(out), k, 1).data
        assert out.shape == x.shape
    perm = np.array([3, 0, 4, 1, 2])
    a = bb.encoder_layer_forward(p, tiny_weights.config, Tensor(x), 0, 0).data
    b = bb.encoder_layer_forward(p, tiny_weights.config, Tensor(x[perm]), 0, 0).data
    np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-13)


def test_layer_index_out_of_range(tiny_weights):
    p = tiny_weights.tensors()
    with pytest.raises(IndexError):
        bb.encoder_layer_forward(p, tiny_weights.config, Tensor(np.zeros((1, 2, 8))), 3, 0)


def _hand_layer(x, P):
    """Pre-norm block for a single head, written out token by token."""
    T, D = x.shape

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((vi - mu) ** 2 for vi in v) / len(v)
        return [(vi - mu) / math.sqrt(var + 1e-5) * g[i] + b[i] for i, vi in enumerate(v)]

    def lin(v, w, b):
        return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]

    def gelu(z):
        return 0.5 * z * (1 + math.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))

    h = [ln(list(x[t]), P["ln1.g"], P["ln1.b"]) for t in range(T)]
    qkv = [lin(h[t], P["attn.wqkv"], P["attn.bqkv"]) for t in range(T)]
    q = [r[:D] for r in qkv]
    k = [r[D:2 * D] for r in qkv]
    v = [r[2 * D:] for r in qkv]
    out = []
    for t in range(T):
        s = [sum(q[t][i] * k[u][i] for i in range(D)) / math.sqrt(D) for u in range(T)]
        mx = max(s)
        e = [math.exp(si - mx) for si in s]
        a = [ei / sum(e) for ei in e]
        ctx = [sum(a[u] * v[u][i] for u in range(T)) for i in range(D)]
        y = lin(ctx, P["attn.wo"], P["attn.bo"])
        res = [x[t][i] + y[i] for i in range(D)]
        h2 = ln(res, P["ln2.g"], P["ln2.b"])
        f = [gelu(z) for z in lin(h2, P["ff.w1"], P["ff.b1"])]
        f = lin(f, P["ff.w2"], P["ff.b2"])
        out.append([res[i] + f[i] for i in range(D)])
    return np.array(out)


def test_tiny_layer_matches_hand_unrolled_oracle():
    cfg = bb.BackboneConfig(n_modalities=2, d_model=2, n_layers=1, n_heads=1, seq_len=2,
                            n_classes=2, feature_widths=(2, 2), ff_width=3)
    w = bb.BackboneWeights.init(cfg, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    for name in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "attn.bqkv", "attn.bo", "ff.b1", "ff.b2"):
        w.params[f"m0.l0.{name}"] = rng.normal(size=w.params[f"m0.l0.{name}"].shape)
    x = rng.normal(size=(2, 2))
    got = bb.encoder_layer_forward(w.tensors(), cfg, Tensor(x[None]), 0, 0).data[0]
    P = {n.split("m0.l0.")[1]: v.tolist() for n, v in w.params.items() if n.startswith("m0.l0.")}
    np.testing.assert_allclose(got, _hand_layer(x, P), rtol=0, atol=1e-12)


def test_fusion_zero_states_and_zero_bias_give_zero_logits(tiny_weights):
    cfg = tiny_weights.config
    head = {"head.w": Tensor(tiny_weights.params["head.w"]), "head.b": Tensor(np.zeros(4))}
    states = [Tensor(np.zeros((3, 5, 8))) for _ in range(2)]
    assert np.array_equal(bb.fuse_and_classify(head, cfg, states).data, np.zeros((3, 4)))


def test_fusion_invariant_to_token_order_and_matches_oracle(tiny_weights):
    cfg = tiny_weights.config
    head = tiny_weights.tensors()
    rng = np.random.default_rng(7)
    s = [rng.normal(size=(3, 5, 8)) for _ in range(2)]
    logits = bb.fuse_and_classify(head, cfg, [Tensor(a) for a in s]).data
    perm = [4, 2, 0, 1, 3]
    shuffled = bb.fuse_and_classify(head, cfg, [Tensor(s[0][:, perm]), Tensor(s[1])]).data
    np.testing.assert_allclose(logits, shuffled, rtol=0, atol=1e-12)
    pooled = np.concatenate([a.mean(axis=1) for a in s], axis=1)
    oracle = pooled @ tiny_weights.params["head.w"] + tiny_weights.params["head.b"]
    np.testing.assert_allclose(logits, oracle, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        bb.fuse_and_classify(head, cfg, [Tensor(s[0])])


def test_frozen_weights_refuse_gradients(tiny_weights):
    with pytest.raises(RuntimeError):
        tiny_weights.tensors(requires_grad=True)


def _pretrain(epochs=2, min_accuracy=0.0, seed=3):
    splits = generate_synthetic(tiny_task(), np.random.default_rng(0))
    cfg = tiny_backbone_config()
    pc = bb.PretrainConfig(epochs=epochs, batch_size=16, lr=5e-3, min_accuracy=min_accuracy)
    return splits, bb.pretrain_backbone(cfg, splits["pretrain"], splits["val"], pc, seed)


def test_pretraining_is_deterministic_and_beats_majority():
    splits, a = _pretrain()
    _, b = _pretrain()
    assert a.frozen and b.frozen
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    acc = (bb.predict_logits(a, splits["pretrain"].features).argmax(1) == splits["pretrain"].labels).mean()
    majority = np.bincount(splits["pretrain"].labels).max() / len(splits["pretrain"])
    assert acc > majority
    assert "val_accuracy" in a.eval_record


def test_pretraining_reports_non_convergence():
    with pytest.raises(bb.ConvergenceError) as info:
        _pretrain(epochs=1, min_accuracy=1.01)
    assert info.value.threshold == 1.01
    assert "did not converge" in str(info.value)


def test_plain_forward_ignores_rep_state(tiny_weights, tiny_splits):
    from replay_prompt import rep

    x = [f[:5] for f in tiny_splits["test"].features]
    before = bb.predict_logits(tiny_weights, x)
    rep.RepState.init(rep.RepConfig(buffer_width=2, replay_depth=2), tiny_weights,
                      [f[:8] for f in tiny_splits["val"].features], np.random.default_rng(0))
    assert bb.predict_logits(tiny_weights, x).tobytes() == before.tobytes()
