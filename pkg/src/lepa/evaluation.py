"""Mean reciprocal rank benchmark for embedding-space transformations.

An *encoder* maps a ``(B, C, H, W)`` stack of raw images in [0, 1] to a
``(B, gh, gw, D)`` stack of embedding grids. A *predictor* maps
``(image, encoder_grid, params)`` to the grid it expects the encoder to
produce for the transformed image.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from lepa.data import normalize
from lepa.geometry import TransformParams, TransformRanges, resample_grid, sample_transform, warp_image
from lepa.model import LEPAModel

__all__ = [
    "MrrReport",
    "DistinctnessError",
    "TeacherEncoder",
    "candidate_embeddings",
    "rank_of_target",
    "reciprocal_rank_mean",
    "mrr",
    "OraclePredictor",
    "RandomPredictor",
    "InterpolationPredictor",
    "LearnedPredictor",
    "interpolation_predictor",
    "learned_predictor",
    "pca_project",
    "pca_colorwheel",
    "harmonic",
]


class DistinctnessError(ValueError):
    """Candidate transforms must be pairwise distinct."""


@dataclass
class MrrReport:
    ranks: np.ndarray
    n_candidates: int

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if self.ranks.size == 0:
            raise ValueError("empty report")
        if self.ranks.min() < 1 or self.ranks.max() > self.n_candidates:
            raise ValueError(f"ranks must lie in [1, {self.n_candidates}]")

    @property
    def n_images(self) -> int:
        return int(self.ranks.size)

    @property
    def reciprocal_ranks(self) -> np.ndarray:
        return 1.0 / self.ranks

    @property
    def mrr(self) -> float:
        return reciprocal_rank_mean(self.ranks)

    def to_lines(self) -> list[str]:
        lines = [
            json.dumps({"image": i, "rank": int(r), "reciprocal_rank": 1.0 / int(r)})
            for i, r in enumerate(self.ranks)
        ]
        lines.append(json.dumps({"n_images": self.n_images, "n_candidates": self.n_candidates, "mrr": self.mrr}))
        return lines

    @classmethod
    def from_lines(cls, lines) -> "MrrReport":
        recs = [json.loads(x) for x in lines if x.strip()]
        agg = recs[-1]
        return cls(np.array([r["rank"] for r in recs[:-1]]), agg["n_candidates"])


def reciprocal_rank_mean(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(1.0 / ranks))


def harmonic(n: int) -> float:
    return math.fsum(1.0 / k for k in range(1, n + 1))


# -- encoders -------------------------------------------------------------------


class TeacherEncoder:
    """Layer-normalized teacher embeddings, the space the predictor targets."""

    def __init__(self, model: LEPAModel, stats, batch_size: int = 256):
        self.model = model
        self.stats = stats
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, imgs) -> np.ndarray:
        imgs = np.asarray(imgs)
        g = self.model.cfg.grid_size
        outs = []
        for i in range(0, len(imgs), self.batch_size):
            x = torch.as_tensor(normalize(imgs[i : i + self.batch_size], self.stats), dtype=self.model.pred_pos.dtype)
            outs.append(self.model.teacher_grid(x).double().numpy())
        out = np.concatenate(outs)
        return out.reshape(len(imgs), g, g, -1)


def candidate_embeddings(encoder, img, params_list) -> np.ndarray:
    """Encode ``warp_image(img, p)`` for every ``p``; order preserved."""
    vecs = [tuple(p.as_vector()) for p in params_list]
    if len(set(vecs)) != len(vecs):
        raise DistinctnessError("candidate transform parameters are not pairwise distinct")
    warped = np.stack([warp_image(img, p) for p in params_list]).astype(np.float32)
    return encoder(warped)


# -- ranking --------------------------------------------------------------------


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    return a / norms


def rank_of_target(predicted, candidates, target_index: int) -> int:
    """1-based rank of the target among candidates by cosine similarity.

    Grids are flattened to single vectors. Ties count against the target.
    """
    pred = np.asarray(predicted, dtype=np.float64).reshape(1, -1)
    cands = np.asarray(candidates, dtype=np.float64)
    if cands.shape[0] == 0:
        raise ValueError("no candidates")
    cands = cands.reshape(cands.shape[0], -1)
    if cands.shape[1] != pred.shape[1]:
        raise ValueError(f"shape mismatch: prediction {pred.shape[1]} vs candidates {cands.shape[1]}")
    sims = (_unit_rows(cands) @ _unit_rows(pred).T).ravel()
    others = np.delete(sims, target_index)
    return 1 + int(np.sum(others >= sims[target_index]))


def mrr(predictor, encoder, images, n_candidates: int = 64, rng=None, ranges: TransformRanges | None = None) -> MrrReport:
    """Mean reciprocal rank of ``predictor`` over ``images``.

    Per image, ``n_candidates`` distinct transforms are drawn, one is picked
    uniformly as the target, and the prediction from the unmodified image is
    ranked among the encoded candidates.
    """
    if n_candidates < 2:
        raise ValueError("need at least 2 candidates")
    if len(images) == 0:
        raise ValueError("no images")
    rng = rng if rng is not None else np.random.default_rng(0)
    ranks = []
    for img in images:
        img = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
        params = [sample_transform(rng, ranges) for _ in range(n_candidates)]
        target = int(rng.integers(n_candidates))
        cands = candidate_embeddings(encoder, img, params)
        grid = encoder(img[None])[0]
        pred = predictor(img, grid, params[target])
        ranks.append(rank_of_target(pred, cands, target))
    return MrrReport(np.array(ranks), n_candidates)


# -- predictors -------------------------------------------------------------------


class OraclePredictor:
    """Returns the encoder's embedding of the actually transformed image."""

    def __init__(self, encoder):
        self.encoder = encoder

    def __call__(self, img, grid, p):
        return self.encoder(warp_image(img, p)[None].astype(np.float32))[0]


class RandomPredictor:
    """Ignores its inputs; a Gaussian grid of the right shape."""

    def __init__(self, rng):
        self.rng = rng

    def __call__(self, img, grid, p):
        return self.rng.standard_normal(np.shape(grid))


class InterpolationPredictor:
    def __init__(self, mode: str = "nearest"):
        if mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown interpolation mode {mode!r}")
        self.mode = mode

    def __call__(self, img, grid, p):
        return resample_grid(grid, p, self.mode)


class LearnedPredictor:
    """Student encoder plus conditioned predictor over the full grid."""

    def __init__(self, model: LEPAModel, stats, conditioning_mode: str | None = None):
        if conditioning_mode is not None and conditioning_mode != model.cfg.posenc_mode:
            raise ValueError(
                f"model was built for {model.cfg.posenc_mode!r} conditioning, not {conditioning_mode!r}"
            )
        self.model = model
        self.stats = stats

    @torch.no_grad()
    def __call__(self, img, grid, p):
        x = torch.as_tensor(normalize(np.asarray(img)[None], self.stats), dtype=self.model.pred_pos.dtype)
        out = self.model.predict(x, [p])[0].double().numpy()
        g = self.model.cfg.grid_size
        return out.reshape(g, g, -1)

    @torch.no_grad()
    def from_grid(self, grid, p):
        """Predict from a stored student grid instead of an image."""
        g = self.model.cfg.grid_size
        ctx = torch.as_tensor(np.asarray(grid).reshape(1, g * g, -1), dtype=self.model.pred_pos.dtype)
        if self.model.cfg.use_cls:
            raise ValueError("stored grids carry no CLS token; cannot feed a CLS model")
        out = self.model.predict_from_context(ctx, [p])[0].double().numpy()
        return out.reshape(g, g, -1)


def interpolation_predictor(mode: str) -> InterpolationPredictor:
    return InterpolationPredictor(mode)


def learned_predictor(model: LEPAModel, stats, conditioning_mode: str | None = None) -> LearnedPredictor:
    return LearnedPredictor(model, stats, conditioning_mode)


# -- PCA visualization --------------------------------------------------------------


def pca_project(grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-2 principal components of a grid's vectors.

    Returns ``(projections (N, 2), components (2, D), eigenvalues (2,))``.
    Each component's largest-magnitude loading is made positive.
    """
    g = np.asarray(grid, dtype=np.float64)
    x = g.reshape(-1, g.shape[-1])
    if x.shape[0] < 3:
        raise ValueError("need at least 3 vectors for a PCA view")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order].T.copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[:1])])
        evals = np.append(evals, 0.0)
        order = np.append(order, -1)
    for c in comps:
        j = np.argmax(np.abs(c))
        if c[j] < 0:
            c *= -1
    lam = np.where(order >= 0, evals[order], 0.0)
    return xc @ comps.T, comps, np.clip(lam, 0.0, None)


def pca_colorwheel(grid) -> np.ndarray:
    """``(gh, gw, 3)`` uint8 image: hue from the PC1/PC2 angle, saturation
    and brightness from the normalized magnitude.

    The hue uses the axis angle (mod 180 degrees), so points on either side
    of the mean along one direction share a hue. Zero variance gives gray.
    """
    g = np.asarray(grid, dtype=np.float64)
    gh, gw = g.shape[:2]
    proj, _, lam = pca_project(g)
    scale = np.sqrt(lam[0]) if lam[0] > 0 else 0.0
    if scale == 0 or not np.isfinite(scale) or lam[0] <= 1e-24:
        return np.full((gh, gw, 3), 128, dtype=np.uint8)
    # components below round-off relative to the leading one are zero
    proj = np.where(np.abs(proj) < 1e-9 * np.abs(proj).max(), 0.0, proj)
    mag = np.hypot(proj[:, 0], proj[:, 1])
    mag = mag / mag.max()
    hue = np.mod(np.arctan2(proj[:, 1], proj[:, 0]), math.pi) / math.pi
    rgb = np.array([colorsys.hsv_to_rgb(h, m, 0.5 + 0.5 * m) for h, m in zip(hue, mag)])
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8).reshape(gh, gw, 3)
