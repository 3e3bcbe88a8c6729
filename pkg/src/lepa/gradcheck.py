"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

import copy
import math

import numpy as np
import torch

from lepa.geometry import TransformParams, warp_image
from lepa.model import LEPAModel, ModelConfig, NumericalError
from lepa.training import lepa_loss

__all__ = ["TINY_CONFIG", "grad_check", "lepa_grad_check", "relative_error"]

TINY_CONFIG = ModelConfig(
    img_size=16,
    patch_size=4,
    channels=1,
    enc_dim=8,
    enc_depth=1,
    enc_heads=2,
    pred_dim=8,
    pred_depth=1,
    pred_heads=2,
    mlp_ratio=2.0,
    cond_mlp_hidden=8,
)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, per: str = "tensor") -> float:
    """``|a - n| / max(|a|, |n|, 1e-8)``.

    ``per="tensor"`` takes Euclidean norms over the whole parameter tensor;
    ``per="element"`` returns the worst entry.
    """
    if per == "tensor":
        a, n = np.linalg.norm(analytic), np.linalg.norm(numeric)
        return float(np.linalg.norm(analytic - numeric) / max(a, n, 1e-8))
    if per == "element":
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        return float((np.abs(analytic - numeric) / denom).max())
    raise ValueError(f"unknown reduction {per!r}")


def grad_check(loss_fn, params, eps: float = 1e-3, ref_loss_fn=None, ref_params=None, per: str = "tensor") -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn()`` returns a scalar tensor depending on ``params``. The finite
    differences are taken on ``ref_loss_fn``/``ref_params`` when given (for
    example a float64 copy of a float32 model), else on the same objects.
    Uses the fourth-order central stencil, whose truncation error is
    ``O(eps**4)``.
    """
    ref_loss_fn = ref_loss_fn or loss_fn
    ref_params = ref_params if ref_params is not None else params
    if len(ref_params) != len(params):
        raise ValueError("reference parameter list does not match")

    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    loss.backward()

    worst = 0.0
    with torch.no_grad():
        for p, rp in zip(params, ref_params):
            analytic = (p.grad if p.grad is not None else torch.zeros_like(p)).double().numpy().ravel()
            flat = rp.view(-1)
            numeric = np.empty(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                vals = []
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * eps
                    vals.append(ref_loss_fn().item())
                flat[i] = orig
                if not all(math.isfinite(v) for v in vals):
                    raise NumericalError("non-finite loss during finite differences")
                f2, f1, m1, m2 = vals
                numeric[i] = (-f2 + 8 * f1 - 8 * m1 + m2) / (12 * eps)
            worst = max(worst, relative_error(analytic, numeric, per))
    return worst


def _randomize(model: LEPAModel, seed: int):
    # std 0.02 init gives near-zero gradients deep in the net; checks are
    # better conditioned on O(1) weights
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.trainable_parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.5)
        for pt, ps in zip(model.teacher.parameters(), model.student.parameters()):
            pt.copy_(ps + 0.1 * torch.randn(ps.shape, generator=gen, dtype=ps.dtype))


def lepa_grad_check(
    cfg: ModelConfig | None = None,
    eps: float = 1e-3,
    seed: int = 0,
    dtype=torch.float64,
    batch: int = 2,
    per: str = "tensor",
) -> float:
    """Gradient check of the full masked LEPA loss on a tiny model.

    Analytic gradients use ``dtype``; finite differences always run on a
    float64 copy.
    """
    cfg = cfg or TINY_CONFIG
    ref = LEPAModel(cfg, seed=seed).double()
    _randomize(ref, seed)
    model = copy.deepcopy(ref).to(dtype)

    rng = np.random.default_rng(seed)
    imgs = rng.uniform(-1, 1, (batch, cfg.channels, cfg.img_size, cfg.img_size))
    params_list = [TransformParams(0.1, -0.05, 0.3, 1.1), TransformParams(-0.2, 0.1, -0.7, 0.8)] * batch
    params_list = params_list[:batch]
    warped = np.stack([warp_image(im, p) for im, p in zip(imgs, params_list)])
    n = cfg.num_patches
    context = np.sort(rng.choice(n, size=max(1, (3 * n) // 4), replace=False))

    def make_loss(m):
        def fn():
            return lepa_loss(m, imgs, warped, params_list, context)[0]

        return fn

    return grad_check(
        make_loss(model), model.trainable_parameters(), eps, make_loss(ref), ref.trainable_parameters(), per
    )
