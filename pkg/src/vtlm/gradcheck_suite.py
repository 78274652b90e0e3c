"""End-to-end gradient checks: every training loss evaluated through the full
model path on a 4-sample toy batch, compared against central differences.

The toy pipeline is intentionally tiny (few tokens, shallow blocks, 64-bit)
so the finite-difference sweep stays fast; entries per parameter are
subsampled with a fixed seed, which keeps the relative-error contract intact
while bounding runtime.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .datagen import build_vocab, canonical_description
from .decoder import attach_lora
from .model import Pipeline
from .objectives import (LossWeights, build_match_batch, infonce, ptm_loss,
                         sequence_loss_batched, stage1_contrastive)
from .tensor import GradCheckReport, Tensor, grad_check


TOY_MODEL = ModelConfig(
    height=16, width=16, patch=8, d_v=8, d_t=8, d_text=8, enc_depth=1, enc_heads=2,
    L_q=2, d_q=8, d_shared=8, qf_depth=1, qf_heads=2,
    d_llm=16, dec_layers=1, dec_heads=2, max_len=64, dtype="float64")


def _toy_batch(seed: int = 0):
    rng = np.random.default_rng(seed)
    vision = rng.random((4, 16, 16, 3))
    tactile = rng.random((4, 16, 16, 3))
    texts = ["hard smooth metal glossy grainy cool firm",
             "soft rough wood matte bumpy warm springy",
             "hard textured glass coated slick dense rigid",
             "soft smooth rubber painted woven heavy supple"]
    prompts = ["is the object hard or soft", "how rough is the surface",
               "describe the material and surface properties",
               "is there any defect on this object"]
    answers = ["it is hard", "the surface is rough",
               "the object is metal glossy grainy cool firm", "it is normal"]
    return vision, tactile, texts, prompts, answers


def _scale_params(pipe: Pipeline, factor: float = 10.0) -> None:
    # widen the tiny random inits so no checked gradient entry sits in the
    # finite-difference noise floor (the relative-error metric is unforgiving
    # at |g| ~ 1e-7)
    for name, p in pipe.params().items():
        if p.data.ndim >= 2 and not name.endswith("pos_emb"):
            p.data = p.data * factor


def build_toy_pipeline(seed: int = 0) -> Pipeline:
    with T.using_dtype(np.float64):
        pipe = Pipeline(TOY_MODEL, build_vocab(), seed)
    _scale_params(pipe)
    return pipe


def loss_suite(seed: int = 0):
    """Named closures for the eight training losses on the toy batch.

    Each entry is (loss_fn, params): the parameter set a real run would train
    through that loss.
    """
    pipe = build_toy_pipeline(seed)
    vision, tactile, texts, prompts, answers = _toy_batch(seed)
    weights = LossWeights(lam_match=1.0, lam_vt=1.0, tau=0.07, tau_vt=0.07)

    def perception():
        ev, et = pipe.encode_images(vision, tactile)
        qv, qt = pipe.queries_from_tokens(ev, et)
        return qv, qt

    def pooled_all():
        qv, qt = perception()
        return (pipe.pooled(qv, "vision"), pipe.pooled(qt, "tactile"),
                pipe.text_embed(texts))

    def stage1_params():
        pipe.apply_stage(1)
        return pipe.trainable_params()

    def stage2_params():
        pipe.apply_stage(2)
        return pipe.trainable_params()

    def stage3_params():
        if not any(".lora." in n for n in pipe.params()):
            attach_lora(pipe.decoder, targets=("q", "v"), r=2, alpha=4.0,
                        dropout_rate=0.0, rng=np.random.default_rng(seed + 1))
            for name, p in pipe.decoder.params().items():
                if ".lora.A" in name:
                    p.data = p.data * 10.0  # same conditioning as other params
                if ".lora.B" in name:
                    p.data = np.random.default_rng(seed + 2).normal(
                        0.0, 0.2, size=p.data.shape)
        pipe.apply_stage(3)
        return pipe.trainable_params()

    def vqa_like():
        qv, qt = perception()
        prefix = pipe.prefix(qv, qt)
        logits, targets, valid = pipe.answer_logits(prefix, prompts, answers)
        return sequence_loss_batched(logits, targets, valid), qv, qt

    losses = {
        "infonce_modality_text": (
            lambda: infonce(pooled_all()[0], pooled_all()[2], weights.tau),
            stage1_params),
        "contrastive_sum": (
            lambda: stage1_contrastive(*pooled_all(), weights.tau),
            stage1_params),
        "ptm": (
            lambda: ptm_loss(build_match_batch(
                pooled_all()[0], pooled_all()[1], pooled_all()[2], pipe.ptm_head)),
            stage1_params),
        "stage1_total": (
            lambda: _stage1_total(pooled_all(), pipe, weights),
            stage1_params),
        "vqa": (lambda: vqa_like()[0], stage2_params),
        "vt_coupling": (
            lambda: infonce(pooled_all()[0], pooled_all()[1], weights.tau_vt),
            stage2_params),
        "stage2_total": (
            lambda: _stage2_total(vqa_like(), pipe, weights),
            stage2_params),
        "defect_lm": (lambda: vqa_like()[0], stage3_params),
    }
    return losses


def _stage1_total(pooled, pipe, weights):
    zv, zt, that = pooled
    loss = stage1_contrastive(zv, zt, that, weights.tau)
    batch = build_match_batch(zv, zt, that, pipe.ptm_head)
    return T.add(loss, T.scale(ptm_loss(batch), weights.lam_match))


def _stage2_total(vqa_pack, pipe, weights):
    vqa, qv, qt = vqa_pack
    zv = pipe.pooled(qv, "vision")
    zt = pipe.pooled(qt, "tactile")
    return T.add(vqa, T.scale(infonce(zv, zt, weights.tau_vt), weights.lam_vt))


def run_suite(tol: float = 1e-4, h: float = 3e-5, max_entries: int = 6,
              seed: int = 0) -> dict[str, GradCheckReport]:
    """Gradient-check every loss; returns name -> report."""
    out: dict[str, GradCheckReport] = {}
    for name, (loss_fn, param_fn) in loss_suite(seed).items():
        params = param_fn()
        out[name] = grad_check(loss_fn, params, h=h, tol=tol,
                               max_entries_per_param=max_entries, seed=seed)
    return out
