"""Desk-scale ViT encoder, conditioned cross-attention predictor and EMA teacher."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from lepa.geometry import TransformParams, invert
from lepa.posenc import cond_pos_encodings, default_pos_encodings

__all__ = [
    "ModelConfig",
    "NumericalError",
    "patchify",
    "Attention",
    "Block",
    "Encoder",
    "Predictor",
    "LEPAModel",
    "ema_update",
    "normalize_targets",
]

POSENC_MODES = ("default", "condpos")
QUERY_COORDS = ("source", "landing")


class NumericalError(RuntimeError):
    """Raised when activations or losses stop being finite."""


@dataclass
class ModelConfig:
    img_size: int = 32
    patch_size: int = 8
    channels: int = 3
    enc_dim: int = 64
    enc_depth: int = 3
    enc_heads: int = 4
    pred_dim: int = 32
    pred_depth: int = 2
    pred_heads: int = 4
    mlp_ratio: float = 4.0
    use_cls: bool = False
    posenc_mode: str = "condpos"
    cond_mlp_hidden: int = 64
    query_coords: str = "source"

    def __post_init__(self):
        if self.patch_size <= 0 or self.img_size <= 0 or self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        for dim, heads, name in (
            (self.enc_dim, self.enc_heads, "enc"),
            (self.pred_dim, self.pred_heads, "pred"),
        ):
            if heads <= 0 or dim % heads:
                raise ValueError(f"{name}_dim {dim} not divisible by {name}_heads {heads}")
            if dim % 4:
                raise ValueError(f"{name}_dim {dim} must be divisible by 4")
        if self.enc_depth < 0 or self.pred_depth < 0:
            raise ValueError("depths must be non-negative")
        if self.posenc_mode not in POSENC_MODES:
            raise ValueError(f"posenc_mode must be one of {POSENC_MODES}, got {self.posenc_mode!r}")
        if self.query_coords not in QUERY_COORDS:
            raise ValueError(f"query_coords must be one of {QUERY_COORDS}, got {self.query_coords!r}")

    @property
    def grid_size(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def patchify(imgs: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, C * p * p)`` in row-major patch order."""
    if imgs.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(imgs.shape)}")
    b, c, h, w = imgs.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = imgs.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


class Attention(nn.Module):
    """Multi-head attention; ``context=None`` means self-attention.

    The key projection has no bias: a key bias only shifts every score of a
    query by the same amount and so never receives gradient.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        hd = d // self.heads
        q = self.q(x).reshape(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(context).reshape(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(context).reshape(b, m, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class Block(nn.Module):
    """Pre-norm transformer block, optionally with a cross-attention stage."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, cross: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.cross = cross
        if cross:
            self.norm_q = nn.LayerNorm(dim)
            self.norm_kv = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, context=None):
        x = x + self.attn(self.norm1(x))
        if self.cross:
            x = x + self.cross_attn(self.norm_q(x), self.norm_kv(context))
        return x + self.mlp(self.norm2(x))


def _check_finite(x: torch.Tensor, where: str, layer: int):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations in {where} after layer {layer}")


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.channels * cfg.patch_size**2, cfg.enc_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.enc_dim)) if cfg.use_cls else None
        self.blocks = nn.ModuleList(
            [Block(cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth)]
        )
        self.norm = nn.LayerNorm(cfg.enc_dim)

    def tokens(self, imgs):
        return self.patch_embed(patchify(imgs, self.cfg.patch_size))

    def encode(self, tokens, posenc, indices=None):
        """Run the blocks on ``tokens + posenc``.

        ``indices`` keeps only those patch positions (shared across the
        batch). Returns ``(patch_embeddings, cls_embedding_or_None)``.
        """
        if tokens.shape[1] != posenc.shape[0]:
            raise ValueError(f"{tokens.shape[1]} tokens but {posenc.shape[0]} positional encodings")
        x = tokens + posenc
        if indices is not None:
            x = x[:, indices]
        n_cls = 0
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
            n_cls = 1
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            _check_finite(x, "encoder", i)
        x = self.norm(x)
        _check_finite(x, "encoder norm", len(self.blocks))
        if n_cls:
            return x[:, 1:], x[:, 0]
        return x, None

    def forward(self, imgs, posenc, indices=None):
        return self.encode(self.tokens(imgs), posenc, indices)


class Predictor(nn.Module):
    """Cross-attention predictor whose queries are conditioned on the transform.

    In ``condpos`` mode the queries carry positional encodings of the
    transformed centered grid. In ``default`` mode the four transform
    parameters are appended to the mask token and mapped back to
    ``pred_dim`` by a 3-layer MLP.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.pred_dim
        self.in_proj = nn.Linear(cfg.enc_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        if cfg.posenc_mode == "default":
            h = cfg.cond_mlp_hidden
            self.cond_mlp = nn.Sequential(
                nn.Linear(d + 4, h), nn.GELU(), nn.Linear(h, h), nn.GELU(), nn.Linear(h, d)
            )
        else:
            self.cond_mlp = None
        self.blocks = nn.ModuleList(
            [Block(d, cfg.pred_heads, cfg.mlp_ratio, cross=True) for _ in range(cfg.pred_depth)]
        )
        self.norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.enc_dim)

    def forward(self, context, context_pos, target_pos, params=None):
        """Predict encoder embeddings at the target positions.

        context: ``(B, K, enc_dim)``; context_pos: ``(K, pred_dim)`` or
        ``(B, K, pred_dim)``; target_pos: ``(T, pred_dim)`` or
        ``(B, T, pred_dim)``; params: ``(B, 4)`` transform vectors, required
        in ``default`` mode.
        """
        b = context.shape[0]
        ctx = self.in_proj(context) + context_pos
        if target_pos.ndim == 2:
            target_pos = target_pos.unsqueeze(0).expand(b, -1, -1)
        t = target_pos.shape[1]
        mask = self.mask_token.expand(b, t, -1)
        if self.cond_mlp is not None:
            if params is None:
                raise ValueError("transform parameters are required for MLP conditioning")
            cond = params[:, None, :].expand(b, t, 4).to(mask.dtype)
            mask = self.cond_mlp(torch.cat([mask, cond], dim=-1))
        x = mask + target_pos
        for i, blk in enumerate(self.blocks):
            x = blk(x, ctx)
            _check_finite(x, "predictor", i)
        return self.out_proj(self.norm(x))


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for name, p in module.named_parameters():
        if name.endswith("mask_token") or name.endswith("cls_token"):
            nn.init.trunc_normal_(p, std=0.02)


def normalize_targets(x: torch.Tensor) -> torch.Tensor:
    """Per-patch layer norm without affine parameters."""
    return F.layer_norm(x, x.shape[-1:])


class LEPAModel(nn.Module):
    """Student encoder, EMA teacher and predictor with their fixed encodings."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.student = Encoder(cfg)
            self.predictor = Predictor(cfg)
            _init_weights(self.student)
            _init_weights(self.predictor)
        finally:
            torch.random.set_rng_state(gen_state)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        g = cfg.grid_size
        if cfg.posenc_mode == "condpos":
            enc_pos = cond_pos_encodings(g, g, cfg.enc_dim)
            pred_pos = cond_pos_encodings(g, g, cfg.pred_dim)
        else:
            enc_pos = default_pos_encodings(g, g, cfg.enc_dim)
            pred_pos = default_pos_encodings(g, g, cfg.pred_dim)
        self.register_buffer("enc_pos", torch.tensor(enc_pos, dtype=torch.float32), persistent=False)
        self.register_buffer("pred_pos", torch.tensor(pred_pos, dtype=torch.float32), persistent=False)

    # -- building blocks -------------------------------------------------

    def target_queries_pos(self, params_list, indices=None):
        """Positional encodings for the predictor queries, per image.

        With ``query_coords="source"`` target patch ``j`` is encoded at the
        context location its content comes from, ``T^-1(c_j)``; with
        ``"landing"`` at ``T(c_j)``.
        """
        cfg = self.cfg
        g = cfg.grid_size
        if cfg.posenc_mode == "condpos":
            if cfg.query_coords == "source":
                params_list = [invert(p) for p in params_list]
            pos = np.stack([cond_pos_encodings(g, g, cfg.pred_dim, p) for p in params_list])
            pos = torch.tensor(pos, dtype=self.pred_pos.dtype, device=self.pred_pos.device)
        else:
            pos = self.pred_pos.unsqueeze(0).expand(len(params_list), -1, -1)
        if indices is not None:
            pos = pos[:, indices]
        return pos

    def context_pos(self, indices=None):
        pos = self.pred_pos if indices is None else self.pred_pos[indices]
        if self.cfg.use_cls:
            pos = torch.cat([torch.zeros_like(pos[:1]), pos], dim=0)
        return pos

    def params_tensor(self, params_list):
        vecs = np.stack([p.as_vector() for p in params_list])
        return torch.tensor(vecs, dtype=self.pred_pos.dtype, device=self.pred_pos.device)

    @torch.no_grad()
    def teacher_grid(self, imgs):
        """Layer-normalized teacher embeddings ``(B, N, enc_dim)``."""
        x, _ = self.teacher(imgs, self.enc_pos)
        return normalize_targets(x)

    def student_context(self, imgs, indices=None):
        x, cls = self.student(imgs, self.enc_pos, indices)
        if cls is not None:
            x = torch.cat([cls[:, None], x], dim=1)
        return x

    def predict(self, imgs, params_list, context_indices=None, target_indices=None):
        """Student-encode ``imgs`` and predict the transformed embedding grid."""
        ctx = self.student_context(imgs, context_indices)
        return self.predict_from_context(ctx, params_list, context_indices, target_indices)

    def predict_from_context(self, ctx, params_list, context_indices=None, target_indices=None):
        tpos = self.target_queries_pos(params_list, target_indices)
        params = self.params_tensor(params_list) if self.cfg.posenc_mode == "default" else None
        return self.predictor(ctx, self.context_pos(context_indices), tpos, params)

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("teacher.")]


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float):
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise RuntimeError("teacher and student have different parameter counts")
    for pt, ps in zip(t_params, s_params):
        if pt.shape != ps.shape:
            raise RuntimeError(f"teacher/student shape mismatch {tuple(pt.shape)} vs {tuple(ps.shape)}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            pt.copy_(ps)
            continue
        pt.copy_(momentum * pt + (1.0 - momentum) * ps)
