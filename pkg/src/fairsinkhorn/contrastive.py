"""Image-text similarity, CLIP's symmetric InfoNCE loss and the FairCLIP objective.

All gradients are analytic and returned alongside the loss; nothing here
depends on an autodiff framework.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ot import EmpiricalDistribution, SinkhornConfig, sinkhorn_distance, sinkhorn_value_and_grad

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.07
DEFAULT_LAMBDA = 1e-7
DEFAULT_GROUP_BATCH = 32


@dataclass(frozen=True)
class EmbeddingBatch:
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    already_normalized: bool = False

    def __post_init__(self):
        zi = np.atleast_2d(np.asarray(self.image_embeddings, dtype=np.float64))
        zt = np.atleast_2d(np.asarray(self.text_embeddings, dtype=np.float64))
        if zi.shape != zt.shape:
            raise ValueError(f"image {zi.shape} and text {zt.shape} embeddings differ in shape")
        if self.already_normalized:
            for name, z in (("image", zi), ("text", zt)):
                if np.any(np.abs(np.linalg.norm(z, axis=1) - 1.0) > 1e-6):
                    raise ValueError(f"{name} embeddings flagged normalized but rows are not unit norm")
        object.__setattr__(self, "image_embeddings", zi)
        object.__setattr__(self, "text_embeddings", zt)

    def __len__(self) -> int:
        return self.image_embeddings.shape[0]


@dataclass(frozen=True)
class SimilarityMatrix:
    """Cosine similarities; ``entries`` are the temperature-scaled logits."""

    cosine: np.ndarray
    temperature: float

    @property
    def entries(self) -> np.ndarray:
        return self.cosine / self.temperature

    @property
    def n(self) -> int:
        return self.cosine.shape[0]


@dataclass(frozen=True)
class FairClipConfig:
    lambda_fair: float = DEFAULT_LAMBDA
    attribute_name: str = ""
    group_batch_size: int = DEFAULT_GROUP_BATCH
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        if self.lambda_fair < 0:
            raise ValueError("lambda_fair must be >= 0")
        if self.group_batch_size < 1:
            raise ValueError("group_batch_size must be >= 1")


def _unit_rows(z: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"{name} embedding row {int(bad[0])} has zero norm")
    return z / norms[:, None], norms


def similarity(batch: EmbeddingBatch, temperature: float = DEFAULT_TEMPERATURE) -> SimilarityMatrix:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if len(batch) < 1:
        raise ValueError("empty batch")
    u, _ = _unit_rows(batch.image_embeddings, "image")
    v, _ = _unit_rows(batch.text_embeddings, "text")
    return SimilarityMatrix(u @ v.T, float(temperature))


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def clip_loss(M: SimilarityMatrix) -> tuple[float, np.ndarray]:
    """Symmetric cross-entropy over the logits with the diagonal as targets.

    Returns the loss and its gradient with respect to ``M.entries``.
    """
    logits = M.entries
    n = logits.shape[0]
    log_rows = _log_softmax(logits, axis=1)
    log_cols = _log_softmax(logits, axis=0)
    diag = np.arange(n)
    loss = -0.5 * (log_rows[diag, diag].mean() + log_cols[diag, diag].mean())
    eye = np.eye(n)
    grad = 0.5 / n * ((np.exp(log_rows) - eye) + (np.exp(log_cols) - eye))
    return float(loss), grad


def diagonal_distribution(M: SimilarityMatrix) -> EmpiricalDistribution:
    """Paired-sample cosine similarities as a uniform empirical distribution (no temperature)."""
    return EmpiricalDistribution.uniform(np.diag(M.cosine).copy())


@dataclass
class FairClipGradients:
    image: np.ndarray
    text: np.ndarray
    group_image: dict[int, np.ndarray]
    group_text: dict[int, np.ndarray]


@dataclass
class FairClipResult:
    loss: float
    clip_loss: float
    sinkhorn_terms: dict[int, float]
    grads: FairClipGradients


def _backprop_normalize(z: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit rows back to the raw rows."""
    u, norms = _unit_rows(z, "embedding")
    radial = np.sum(u * grad_unit, axis=1, keepdims=True)
    return (grad_unit - u * radial) / norms[:, None]


def _diag_cos_grad(batch: EmbeddingBatch, grad_diag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. both embeddings of sum_i g_i * cos(z_I_i, z_T_i)."""
    u, _ = _unit_rows(batch.image_embeddings, "image")
    v, _ = _unit_rows(batch.text_embeddings, "text")
    gi = _backprop_normalize(batch.image_embeddings, grad_diag[:, None] * v)
    gt = _backprop_normalize(batch.text_embeddings, grad_diag[:, None] * u)
    return gi, gt


def fairclip_loss(batch: EmbeddingBatch, group_batches: Mapping[int, EmbeddingBatch],
                  cfg: FairClipConfig, temperature: float = DEFAULT_TEMPERATURE) -> FairClipResult:
    """CLIP loss on ``batch`` plus ``lambda * sum_level W(D_batch, D_group)``.

    Group batches contribute only their paired similarities to the Sinkhorn
    terms; their own contrastive loss is not added. Terms are summed in sorted
    level order so the result does not depend on mapping order.
    """
    M = similarity(batch, temperature)
    clip_value, grad_logits = clip_loss(M)
    grad_cos = grad_logits / temperature

    u, _ = _unit_rows(batch.image_embeddings, "image")
    v, _ = _unit_rows(batch.text_embeddings, "text")
    grad_u = grad_cos @ v
    grad_v = grad_cos.T @ u

    overall = diagonal_distribution(M)
    terms: dict[int, float] = {}
    group_image: dict[int, np.ndarray] = {}
    group_text: dict[int, np.ndarray] = {}
    main_diag_grad = np.zeros(len(batch))
    for level in sorted(group_batches):
        gb = group_batches[level]
        if len(gb) == 0:
            log.warning("group %s is empty; skipping its Sinkhorn term", level)
            continue
        group_dist = diagonal_distribution(similarity(gb, temperature))
        if cfg.lambda_fair == 0:
            terms[level] = sinkhorn_distance(overall, group_dist, cfg.sinkhorn)
            group_image[level] = np.zeros_like(gb.image_embeddings)
            group_text[level] = np.zeros_like(gb.text_embeddings)
            continue
        terms[level], gp, gq = sinkhorn_value_and_grad(overall, group_dist, cfg.sinkhorn)
        main_diag_grad += cfg.lambda_fair * gp
        group_image[level], group_text[level] = _diag_cos_grad(gb, cfg.lambda_fair * gq)

    grad_u += main_diag_grad[:, None] * v
    grad_v += main_diag_grad[:, None] * u
    gi = _backprop_normalize(batch.image_embeddings, grad_u)
    gt = _backprop_normalize(batch.text_embeddings, grad_v)
    total = clip_value + cfg.lambda_fair * sum(terms[k] for k in sorted(terms))
    return FairClipResult(
        loss=float(total),
        clip_loss=clip_value,
        sinkhorn_terms=terms,
        grads=FairClipGradients(gi, gt, group_image, group_text),
    )
