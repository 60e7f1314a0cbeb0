"""Pre-training loop (CLIP / FairCLIP), linear probing and zero-shot evaluation."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .config import RunConfig
from .contrastive import EmbeddingBatch, clip_loss, fairclip_loss, similarity
from .data import Dataset, make_rng, partition_by_attribute, sample_batch, sample_group_batch
from .encoders import (Checkpoint, EncoderParams, OptimizerState, backward, forward,
                       init_encoder, optimizer_step)
from .metrics import EvaluationReport, Predictions, evaluate

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[dict] = field(default_factory=list)
    periodic: dict[int, Checkpoint] = field(default_factory=dict)

    def epoch_records(self) -> list[dict]:
        return [r for r in self.records if r.get("kind") == "epoch"]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    # separate streams so FairCLIP's group draws never perturb the main batches
    init, batch, group = np.random.SeedSequence(seed).spawn(3)
    return {"init": make_rng(init), "batch": make_rng(batch), "group": make_rng(group)}


def init_models(cfg: RunConfig, image_dim: int, text_dim: int, rng) -> tuple[EncoderParams, EncoderParams]:
    m = cfg.model
    img = init_encoder(m.kind, image_dim, m.embed_dim, rng, m.hidden_dim)
    txt = init_encoder(m.kind, text_dim, m.embed_dim, rng, m.hidden_dim)
    return img, txt


def _sum_grads(acc: list[np.ndarray], extra: list[np.ndarray]) -> list[np.ndarray]:
    return [a + b for a, b in zip(acc, extra)]


def mean_clip_loss(ds: Dataset, img: EncoderParams, txt: EncoderParams, batch_size: int,
                   temperature: float) -> float:
    """Average CLIP loss over consecutive fixed batches of ``ds`` (a trailing singleton is dropped)."""
    losses = []
    for start in range(0, len(ds), batch_size):
        idx = list(range(start, min(start + batch_size, len(ds))))
        if len(idx) < 2:
            continue
        batch = EmbeddingBatch(forward(img, ds.image_matrix(idx)), forward(txt, ds.text_matrix(idx)))
        losses.append(clip_loss(similarity(batch, temperature))[0])
    return float(np.mean(losses)) if losses else float("nan")


def train(train_ds: Dataset, cfg: RunConfig, val_ds: Dataset | None = None,
          timestamps: bool = True, on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Run pre-training. Labels are never read.

    Each step samples a uniform batch, and in fairclip mode one batch per
    non-empty group of ``cfg.data.attribute``; group batches only feed the
    Sinkhorn terms.
    """
    streams = _streams(cfg.seed)
    img, txt = init_models(cfg, train_ds.image_dim, train_ds.text_dim, streams["init"])
    beta1, beta2 = cfg.betas
    opt = OptimizerState.fresh(img.arrays() + txt.arrays(), learning_rate=cfg.train.learning_rate,
                               beta1=beta1, beta2=beta2, weight_decay=cfg.train.weight_decay)
    spec = cfg.batch_spec()
    fair_cfg = cfg.fairclip_config()
    tau = cfg.model.temperature
    fair_mode = cfg.train.mode == "fairclip"
    part = partition_by_attribute(train_ds, cfg.data.attribute)
    levels = train_ds.schema.levels(cfg.data.attribute)
    active = part.non_empty_levels()
    if fair_mode:
        for lv in sorted(set(part.groups) - set(active)):
            log.warning("group %r of %r is empty in the training set; its Sinkhorn term is skipped",
                        levels[lv], cfg.data.attribute)

    X_img = train_ds.image_matrix()
    X_txt = train_ds.text_matrix()
    steps_per_epoch = -(-len(train_ds) // spec.batch_size)
    result = TrainResult(checkpoint=None)  # type: ignore[arg-type]

    def emit(rec):
        if timestamps:
            rec["time"] = time.time()
        result.records.append(rec)
        if on_record:
            on_record(rec)

    n_img = len(img.arrays())
    step = 0
    for epoch in range(cfg.train.epochs):
        clip_sum, fair_sum = 0.0, 0.0
        for _ in range(steps_per_epoch):
            idx = sample_batch(train_ds, spec, streams["batch"])
            zi = forward(img, X_img[idx])
            zt = forward(txt, X_txt[idx])
            groups, group_idx = {}, {}
            if fair_mode:
                for lv in active:
                    gidx = sample_group_batch(part, lv, spec.group_batch_size, streams["group"])
                    group_idx[lv] = gidx
                    groups[lv] = EmbeddingBatch(forward(img, X_img[gidx]), forward(txt, X_txt[gidx]))
            res = fairclip_loss(EmbeddingBatch(zi, zt), groups, fair_cfg, tau)
            if not np.isfinite(res.loss):
                raise NumericalError(f"non-finite loss at step {step}")

            gi, _ = backward(img, X_img[idx], res.grads.image)
            gt, _ = backward(txt, X_txt[idx], res.grads.text)
            grads = gi.arrays() + gt.arrays()
            if fair_cfg.lambda_fair > 0:
                for lv, gidx in group_idx.items():
                    ggi, _ = backward(img, X_img[gidx], res.grads.group_image[lv])
                    ggt, _ = backward(txt, X_txt[gidx], res.grads.group_text[lv])
                    grads = _sum_grads(grads, ggi.arrays() + ggt.arrays())
            try:
                params, opt = optimizer_step(img.arrays() + txt.arrays(), grads, opt)
            except FloatingPointError as exc:
                raise NumericalError(f"step {step}: {exc}") from exc
            img = EncoderParams.from_arrays(img.kind, params[:n_img])
            txt = EncoderParams.from_arrays(txt.kind, params[n_img:])

            terms = {levels[lv]: v for lv, v in res.sinkhorn_terms.items()}
            emit({"kind": "step", "step": step, "epoch": epoch, "clip_loss": res.clip_loss,
                  "sinkhorn_terms": terms, "total": res.loss})
            clip_sum += res.clip_loss
            fair_sum += sum(res.sinkhorn_terms.values())
            step += 1

        rec = {"kind": "epoch", "epoch": epoch, "mean_clip_loss": clip_sum / steps_per_epoch,
               "mean_sinkhorn_sum": fair_sum / steps_per_epoch}
        every = cfg.train.eval_every
        if val_ds is not None and len(val_ds) >= 2 and every and (epoch + 1) % every == 0:
            rec["val_clip_loss"] = mean_clip_loss(val_ds, img, txt, spec.batch_size, tau)
        emit(rec)
        if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            result.periodic[epoch + 1] = _checkpoint(img, txt, opt, cfg, streams, epoch + 1)

    result.checkpoint = _checkpoint(img, txt, opt, cfg, streams, cfg.train.epochs)
    return result


def _checkpoint(img, txt, opt, cfg, streams, epoch) -> Checkpoint:
    rng_state = {name: g.bit_generator.state for name, g in streams.items()}
    return Checkpoint(img, txt, opt, cfg.config_hash(), rng_state, epoch)


# ---------------------------------------------------------------- evaluation


def _unit(z: np.ndarray) -> np.ndarray:
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def fit_logistic_probe(features: np.ndarray, labels: np.ndarray, epochs: int, learning_rate: float,
                       l2: float) -> tuple[np.ndarray, float]:
    """Full-batch logistic regression trained with Adam from a zero init."""
    n, d = features.shape
    params = [np.zeros(d), np.zeros(1)]
    state = OptimizerState.fresh(params, learning_rate=learning_rate, weight_decay=0.0)
    y = labels.astype(np.float64)
    for _ in range(epochs):
        p = expit(features @ params[0] + params[1][0])
        err = (p - y) / n
        grads = [features.T @ err + l2 * params[0], np.array([err.sum()])]
        params, state = optimizer_step(params, grads, state)
    return params[0], float(params[1][0])


def linear_probe(ckpt: Checkpoint, train_ds: Dataset, test_ds: Dataset, cfg: RunConfig) -> EvaluationReport:
    p = cfg.probe
    train_feat = _unit(forward(ckpt.image_encoder, train_ds.image_matrix()))
    test_feat = _unit(forward(ckpt.image_encoder, test_ds.image_matrix()))
    w, b = fit_logistic_probe(train_feat, train_ds.labels(), p.epochs, p.learning_rate, p.l2)
    scores = expit(test_feat @ w + b)
    attr = cfg.data.attribute
    preds = Predictions(scores, test_ds.labels(), test_ds.attribute_array(attr), p.threshold)
    return evaluate(preds, attr, test_ds.schema.levels(attr), model=cfg.report.model or cfg.train.mode)


def zeroshot_scores(image_embeddings: np.ndarray, class_embeddings: np.ndarray,
                    temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class probability and argmax prediction per sample.

    ``class_embeddings`` rows are (negative, positive).
    """
    if class_embeddings.shape[0] != 2:
        raise ValueError("zero-shot evaluation needs exactly 2 class prompts")
    logits = _unit(image_embeddings) @ _unit(class_embeddings).T / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    return prob[:, 1], np.argmax(logits, axis=1)


def zeroshot(ckpt: Checkpoint, test_ds: Dataset, prompt_features: np.ndarray,
             cfg: RunConfig) -> EvaluationReport:
    prompts = np.asarray(prompt_features, dtype=np.float64)
    class_emb = forward(ckpt.text_encoder, prompts)
    if np.allclose(class_emb[0], class_emb[1]):
        warnings.warn("class prompts are identical; every score is 0.5 and AUC is chance", stacklevel=2)
    img_emb = forward(ckpt.image_encoder, test_ds.image_matrix())
    scores, _ = zeroshot_scores(img_emb, class_emb, cfg.model.temperature)
    attr = cfg.data.attribute
    preds = Predictions(scores, test_ds.labels(), test_ds.attribute_array(attr), cfg.probe.threshold)
    return evaluate(preds, attr, test_ds.schema.levels(attr), model=cfg.report.model or cfg.train.mode)


def class_mean_prompts(ds: Dataset) -> np.ndarray:
    """Mean text features of each class, rows (negative, positive)."""
    y = ds.labels()
    txt = ds.text_matrix()
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("need both classes to derive prompts")
    return np.stack([txt[y == 0].mean(axis=0), txt[y == 1].mean(axis=0)])
