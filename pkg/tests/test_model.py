import dataclasses
import math

import numpy as np
import pytest
import torch

from lepa.geometry import TransformParams, invert
from lepa.model import LEPAModel, ModelConfig, NumericalError, ema_update, patchify
from lepa.posenc import cond_pos_encodings

TINY = ModelConfig(
    img_size=16,
    patch_size=4,
    channels=2,
    enc_dim=16,
    enc_depth=1,
    enc_heads=2,
    pred_dim=16,
    pred_depth=1,
    pred_heads=2,
    mlp_ratio=2.0,
    cond_mlp_hidden=12,
)


# -- straight-line numpy re-implementation -----------------------------------

_erf = np.vectorize(math.erf)


def np_layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def np_gelu(x):
    return 0.5 * x * (1 + _erf(x / math.sqrt(2)))


def np_linear(x, sd, name, bias=True):
    y = x @ sd[name + ".weight"].T
    return y + sd[name + ".bias"] if bias else y


def np_attention(x, ctx, sd, name, heads):
    n, d = x.shape
    hd = d // heads
    q = np_linear(x, sd, name + ".q")
    k = np_linear(ctx, sd, name + ".k", bias=False)
    v = np_linear(ctx, sd, name + ".v")
    out = np.zeros_like(q)
    for h in range(heads):
        s = slice(h * hd, (h + 1) * hd)
        scores = q[:, s] @ k[:, s].T / math.sqrt(hd)
        scores = np.exp(scores - scores.max(-1, keepdims=True))
        scores /= scores.sum(-1, keepdims=True)
        out[:, s] = scores @ v[:, s]
    return np_linear(out, sd, name + ".proj")


def np_block(x, sd, name, heads, ctx=None):
    ln = lambda z, n: np_layer_norm(z, sd[f"{name}.{n}.weight"], sd[f"{name}.{n}.bias"])  # noqa: E731
    h = ln(x, "norm1")
    x = x + np_attention(h, h, sd, name + ".attn", heads)
    if ctx is not None:
        x = x + np_attention(ln(x, "norm_q"), ln(ctx, "norm_kv"), sd, name + ".cross_attn", heads)
    h = ln(x, "norm2")
    h = np_gelu(np_linear(h, sd, name + ".mlp.0"))
    return x + np_linear(h, sd, name + ".mlp.2")


def np_encode(sd, cfg, img, pos):
    p = cfg.patch_size
    g = cfg.grid_size
    toks = []
    for i in range(g):
        for j in range(g):
            toks.append(img[:, i * p : (i + 1) * p, j * p : (j + 1) * p].ravel())
    x = np_linear(np.array(toks), sd, "student.patch_embed") + pos
    for b in range(cfg.enc_depth):
        x = np_block(x, sd, f"student.blocks.{b}", cfg.enc_heads)
    return np_layer_norm(x, sd["student.norm.weight"], sd["student.norm.bias"])


def np_predict(sd, cfg, ctx, ctx_pos, tgt_pos, params_vec):
    c = np_linear(ctx, sd, "predictor.in_proj") + ctx_pos
    mask = np.broadcast_to(sd["predictor.mask_token"][0], (tgt_pos.shape[0], cfg.pred_dim))
    if cfg.posenc_mode == "default":
        h = np.concatenate([mask, np.broadcast_to(params_vec, (mask.shape[0], 4))], axis=-1)
        h = np_gelu(np_linear(h, sd, "predictor.cond_mlp.0"))
        h = np_gelu(np_linear(h, sd, "predictor.cond_mlp.2"))
        mask = np_linear(h, sd, "predictor.cond_mlp.4")
    x = mask + tgt_pos
    for b in range(cfg.pred_depth):
        x = np_block(x, sd, f"predictor.blocks.{b}", cfg.pred_heads, ctx=c)
    x = np_layer_norm(x, sd["predictor.norm.weight"], sd["predictor.norm.bias"])
    return np_linear(x, sd, "predictor.out_proj")


def _randomized(cfg, seed=0):
    m = LEPAModel(cfg, seed=seed).double()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)
    return m


def _state(m):
    return {k: v.detach().numpy() for k, v in m.state_dict().items()}


# -- tests --------------------------------------------------------------------


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"img_size": 30},
            {"enc_dim": 18, "enc_heads": 3},
            {"enc_heads": 5},
            {"posenc_mode": "rope"},
            {"query_coords": "sideways"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            dataclasses.replace(ModelConfig(), **kw)

    def test_dict_round_trip(self):
        cfg = dataclasses.replace(TINY, use_cls=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"depth": 3})


class TestPatchify:
    def test_token_count(self):
        assert patchify(torch.zeros(1, 3, 32, 32), 8).shape == (1, 16, 192)

    def test_zero_image_zero_bias(self):
        m = LEPAModel(ModelConfig())
        assert torch.count_nonzero(m.student.tokens(torch.zeros(2, 3, 32, 32))) == 0

    @pytest.mark.parametrize("c,y,x", [(0, 0, 0), (1, 5, 9), (2, 31, 17), (0, 8, 7)])
    def test_one_hot_pixel(self, c, y, x):
        img = torch.zeros(1, 3, 32, 32)
        img[0, c, y, x] = 1.0
        out = patchify(img, 8)[0]
        nz = torch.nonzero(out).tolist()
        assert nz == [[(y // 8) * 4 + x // 8, c * 64 + (y % 8) * 8 + x % 8]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            patchify(torch.zeros(1, 3, 30, 30), 8)


class TestEncode:
    def test_depth_zero(self):
        cfg = dataclasses.replace(TINY, enc_depth=0)
        m = _randomized(cfg)
        imgs = torch.randn(2, 2, 16, 16, dtype=torch.float64)
        toks = m.student.tokens(imgs)
        out, cls = m.student.encode(toks, m.enc_pos)
        expected = m.student.norm(toks + m.enc_pos)
        assert cls is None
        assert torch.equal(out, expected)

    def test_permutation_equivariance(self):
        m = _randomized(TINY)
        toks = torch.randn(1, 16, 16, dtype=torch.float64)
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
        a, _ = m.student.encode(toks, m.enc_pos)
        b, _ = m.student.encode(toks[:, perm], m.enc_pos[perm])
        torch.testing.assert_close(b, a[:, perm], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("use_cls", [False, True])
    def test_straight_line_oracle(self, use_cls):
        cfg = dataclasses.replace(TINY, use_cls=use_cls)
        m = _randomized(cfg)
        sd = _state(m)
        img = np.random.default_rng(0).standard_normal((2, 16, 16))
        out, cls = m.student(torch.tensor(img[None]), m.enc_pos)
        if not use_cls:
            expected = np_encode(sd, cfg, img, m.enc_pos.numpy())
            assert np.abs(out[0].detach().numpy() - expected).max() < 1e-5
        else:
            # oracle with the CLS row prepended
            p = cfg.patch_size
            toks = [img[:, i * p : (i + 1) * p, j * p : (j + 1) * p].ravel() for i in range(4) for j in range(4)]
            x = np_linear(np.array(toks), sd, "student.patch_embed") + m.enc_pos.numpy()
            x = np.concatenate([sd["student.cls_token"][0], x])
            x = np_block(x, sd, "student.blocks.0", cfg.enc_heads)
            x = np_layer_norm(x, sd["student.norm.weight"], sd["student.norm.bias"])
            assert np.abs(cls[0].detach().numpy() - x[0]).max() < 1e-5
            assert np.abs(out[0].detach().numpy() - x[1:]).max() < 1e-5

    def test_nonfinite_reports_layer(self):
        m = LEPAModel(TINY)
        with torch.no_grad():
            m.student.blocks[0].mlp[0].weight.fill_(float("inf"))
        with pytest.raises(NumericalError, match="layer 0"):
            m.student(torch.ones(1, 2, 16, 16), m.enc_pos)

    def test_posenc_count_mismatch(self):
        m = LEPAModel(TINY)
        with pytest.raises(ValueError):
            m.student.encode(torch.zeros(1, 16, 16), m.enc_pos[:8])

    def test_deterministic(self):
        m = LEPAModel(ModelConfig())
        x = torch.randn(3, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        a = m.predict(x, [TransformParams(0.1, 0, 0.2, 1.1)] * 3)
        b = m.predict(x, [TransformParams(0.1, 0, 0.2, 1.1)] * 3)
        assert torch.equal(a, b)


class TestPredict:
    @pytest.mark.parametrize("mode", ["condpos", "default"])
    @pytest.mark.parametrize("query_coords", ["source", "landing"])
    def test_straight_line_oracle(self, mode, query_coords):
        cfg = dataclasses.replace(TINY, posenc_mode=mode, query_coords=query_coords)
        m = _randomized(cfg, seed=3)
        sd = _state(m)
        p = TransformParams(0.1, -0.2, 0.4, 0.9)
        ctx_idx = np.array([0, 2, 3, 7, 8, 12, 15])
        ctx = torch.randn(1, len(ctx_idx), cfg.enc_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        got = m.predict_from_context(ctx, [p], ctx_idx)[0].detach().numpy()
        pred_pos = m.pred_pos.numpy()
        if mode == "condpos":
            q = invert(p) if query_coords == "source" else p
            tgt_pos = cond_pos_encodings(4, 4, cfg.pred_dim, q)
        else:
            tgt_pos = pred_pos
        expected = np_predict(sd, cfg, ctx[0].numpy(), pred_pos[ctx_idx], tgt_pos, p.as_vector())
        assert np.abs(got - expected).max() < 1e-5

    def test_no_context_leak_with_zero_values(self):
        m = _randomized(TINY, seed=4)
        with torch.no_grad():
            for blk in m.predictor.blocks:
                blk.cross_attn.v.weight.zero_()
                blk.cross_attn.v.bias.zero_()
        p = [TransformParams(0.1, 0, 0.3, 1.0)]
        g = torch.Generator().manual_seed(0)
        a = m.predict_from_context(torch.randn(1, 16, 16, dtype=torch.float64, generator=g), p)
        b = m.predict_from_context(torch.randn(1, 16, 16, dtype=torch.float64, generator=g), p)
        z = m.predict_from_context(torch.zeros(1, 16, 16, dtype=torch.float64), p)
        assert torch.equal(a, b) and torch.equal(a, z)
        rows = a[0]
        assert not torch.allclose(rows[0], rows[5])  # position dependent

    @pytest.mark.parametrize("mode", ["condpos", "default"])
    def test_conditioning_is_live(self, mode):
        m = LEPAModel(dataclasses.replace(ModelConfig(), posenc_mode=mode))
        x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        a = m.predict(x, [TransformParams(0.1, 0, 0.3, 1.0)])
        b = m.predict(x, [TransformParams(-0.1, 0.2, -0.5, 1.3)])
        assert (a - b).abs().max() > 0

    def test_default_mode_requires_params(self):
        m = LEPAModel(dataclasses.replace(TINY, posenc_mode="default"))
        with pytest.raises(ValueError):
            m.predictor(torch.zeros(1, 16, 16), m.pred_pos, m.pred_pos, None)

    def test_output_shape(self):
        m = LEPAModel(ModelConfig(use_cls=True))
        out = m.predict(torch.zeros(2, 3, 32, 32), [TransformParams()] * 2, np.arange(5))
        assert out.shape == (2, 16, 64)


class TestEma:
    def _pair(self):
        m = LEPAModel(TINY)
        with torch.no_grad():
            for p in m.student.parameters():
                p.add_(torch.randn_like(p))
        return m

    @pytest.mark.parametrize("mom", [0.0, 0.5, 0.99, 1.0])
    def test_closed_form(self, mom):
        m = self._pair()
        t0 = [p.detach().numpy().copy() for p in m.teacher.parameters()]
        s0 = [p.detach().numpy().copy() for p in m.student.parameters()]
        ema_update(m.teacher, m.student, mom)
        for pt, a, b in zip(m.teacher.parameters(), t0, s0):
            expected = np.float32(mom) * a + np.float32(1.0 - mom) * b
            assert np.array_equal(pt.detach().numpy(), expected)

    def test_toy_values(self):
        t, s = torch.nn.Linear(2, 2), torch.nn.Linear(2, 2)
        with torch.no_grad():
            for p in t.parameters():
                p.fill_(0)
            for p in s.parameters():
                p.fill_(1)
        ema_update(t, s, 0.99)
        for p in t.parameters():
            assert torch.allclose(p, torch.full_like(p, 0.01))

    def test_edges_bit_exact(self):
        m = self._pair()
        before = [p.clone() for p in m.teacher.parameters()]
        ema_update(m.teacher, m.student, 1.0)
        assert all(torch.equal(a, b) for a, b in zip(before, m.teacher.parameters()))
        ema_update(m.teacher, m.student, 0.0)
        assert all(torch.equal(a, b) for a, b in zip(m.student.parameters(), m.teacher.parameters()))

    def test_shape_mismatch(self):
        with pytest.raises(RuntimeError):
            ema_update(torch.nn.Linear(2, 3), torch.nn.Linear(3, 2), 0.5)

    def test_momentum_range(self):
        with pytest.raises(ValueError):
            ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2), 1.5)


def test_teacher_receives_no_gradient():
    m = LEPAModel(TINY)
    x = torch.randn(2, 2, 16, 16)
    pred = m.predict(x, [TransformParams()] * 2)
    loss = ((pred - m.teacher_grid(x)) ** 2).mean()
    loss.backward()
    assert all(p.grad is None for p in m.teacher.parameters())
    assert all(not p.requires_grad for p in m.teacher.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.student.parameters())
