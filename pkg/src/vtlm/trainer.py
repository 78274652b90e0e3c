"""Stage orchestration: batch assembly, the per-stage training loops with the
warmup-cosine AdamW schedule, per-epoch evaluation, checkpointing and reports.

Frozen submodules are exploited for speed: encoder outputs (stage 1 and the
vision branch of stage 2) and whole prefixes (stage 3) are precomputed once
per run under ``no_grad``, which changes nothing numerically because those
parameters receive no updates.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, to_flat_dict
from .datagen import (DefectTaxonomy, HARDNESS, ROUGHNESS, TASKS, canonical_description,
                      controlled_vocabulary, corpus_hash, kshot_sample, load_corpus,
                      project_label, build_vocab, instruction_text, answer_text,
                      LatentObject, DESCRIPTOR_SLOTS, SHAPES, FINE_DEFECTS)
from .decoder import attach_lora, lm_warmup
from .errors import ConfigError, DataError, DependencyError, NumericError
from .evalsuite import (DescriptorSets, HashedBagEmbedder, MetricReport, accuracy,
                        descriptor_recall, extract_descriptors, map_to_label_set,
                        mean_task_score, select_checkpoint, semantic_similarity)
from .model import Pipeline
from .nn import RunCtx
from .objectives import (LossWeights, build_match_batch, infonce, ptm_loss,
                         sequence_loss_batched, stage1_contrastive)
from .optim import AdamW, OptimConfig, lr_at  # re-exported orchestration surface
from .tensor import Tensor

__all__ = ["AdamW", "OptimConfig", "lr_at", "run_stage", "RunResult", "StagePlan",
           "eval_retrieval", "eval_properties", "eval_defect", "build_warmup_sequences"]


@dataclass(frozen=True)
class StagePlan:
    """Resolved per-stage schedule: what trains, for how long, on which loss."""

    stage: int
    steps: int
    batch_size: int
    eval_every: int
    weights: LossWeights
    ablate: str | None = None
    trainable: dict = field(default_factory=dict)


@dataclass
class RunResult:
    ckpt_dir: str
    reports: list
    csv_path: str
    report_path: str
    selected_epoch: int | None
    final: MetricReport


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def rows_by_split(rows) -> dict[str, list]:
    out = {"train": [], "val": [], "test": []}
    for r in rows:
        out[r["split"]].append(r)
    return out


def _stack_images(rows, key: str) -> np.ndarray:
    return np.stack([r[key] for r in rows])


class FrozenEncoderCache:
    """Precomputed encoder token tensors for frozen branches, keyed by row id."""

    def __init__(self, pipe: Pipeline, rows, vision: bool, tactile: bool,
                 chunk: int = 64):
        self.vision: dict[int, np.ndarray] = {}
        self.tactile: dict[int, np.ndarray] = {}
        with T.no_grad():
            for lo in range(0, len(rows), chunk):
                part = rows[lo: lo + chunk]
                if vision:
                    ev = pipe.vision_enc.encode_batch(
                        _stack_images(part, "vision").astype(pipe.dtype))
                    for r, row in enumerate(part):
                        self.vision[row["id"]] = ev.data[r]
                if tactile:
                    et = pipe.tactile_enc.encode_batch(
                        _stack_images(part, "tactile").astype(pipe.dtype))
                    for r, row in enumerate(part):
                        self.tactile[row["id"]] = et.data[r]

    def vision_tokens(self, rows) -> Tensor:
        return Tensor(np.stack([self.vision[r["id"]] for r in rows]))

    def tactile_tokens(self, rows) -> Tensor:
        return Tensor(np.stack([self.tactile[r["id"]] for r in rows]))


def build_warmup_sequences(vocab, n: int, seed: int) -> list[list[int]]:
    """Template QA text with random labels: teaches the decoder the answer
    formats (all tasks, all defect granularities) while carrying zero
    perception signal."""
    rng = np.random.default_rng(seed)
    seqs = []
    fine_pool = ("Normal",) + FINE_DEFECTS
    for _ in range(n):
        task = TASKS[rng.integers(0, len(TASKS))]
        obj = LatentObject(
            object_id=-1,
            hardness=HARDNESS[rng.integers(0, 2)],
            roughness=ROUGHNESS[rng.integers(0, 3)],
            descriptors=tuple(slot[rng.integers(0, len(slot))] for slot in DESCRIPTOR_SLOTS),
            defect=fine_pool[rng.integers(0, len(fine_pool))],
            shape=SHAPES[rng.integers(0, 2)],
        )
        granularity = (2, 3, 5)[rng.integers(0, 3)] if task == "defect" else 2
        prompt = instruction_text(task, int(rng.integers(0, 4)))
        answer = answer_text(task, obj, int(rng.integers(0, 4)), granularity)
        seqs.append([1] + vocab.encode_words(prompt) + [3] + vocab.encode_words(answer) + [2])
    return seqs


def _ensure_warmed(pipe: Pipeline, cfg: ExperimentConfig, seed: int) -> None:
    if pipe.decoder_warmed:
        return
    seqs = build_warmup_sequences(pipe.vocab, cfg.warmup_lm_sequences, seed)
    lm_warmup(pipe.decoder, seqs, steps=cfg.warmup_lm_steps,
              batch_size=cfg.stage2.batch_size, seed=seed)
    pipe.decoder_warmed = True


def _nan_abort(loss_value: float, step: int, row_ids, out_dir: str) -> None:
    if np.isfinite(loss_value):
        return
    dump = {"step": step, "batch_row_ids": [int(i) for i in row_ids],
            "loss": repr(loss_value)}
    path = os.path.join(out_dir, "nan_dump.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dump, fh, indent=2)
    raise NumericError(f"non-finite loss at step {step}; offending batch ids "
                       f"{dump['batch_row_ids']} dumped to {path}")


def _write_reports(out_dir: str, stage: int, reports, final: MetricReport,
                   cfg: ExperimentConfig, seed: int, corpus_file: str,
                   selected: int | None, extra: dict | None = None) -> tuple[str, str]:
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(MetricReport.csv_header() + "\n")
        for epoch, rep in enumerate(reports, start=1):
            fh.write(rep.csv_row(epoch) + "\n")
    report_path = os.path.join(out_dir, "report.json")
    payload = {
        "stage": stage,
        "seed": seed,
        "selected_epoch": selected,
        "final": final.to_json_dict(),
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in to_flat_dict(cfg).items()},
        "corpus_hash": corpus_hash(corpus_file),
        **(extra or {}),
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, report_path


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_retrieval(pipe: Pipeline, rows, batch: int = 64, seed: int = 0,
                   cache: FrozenEncoderCache | None = None,
                   ablate: str | None = None) -> dict[str, float]:
    """Top-1 cross-modal retrieval over one batch of validation rows. A hit
    means the retrieved row carries the same description text as the query
    (rows of one object share their text, so duplicates stay well-defined)."""
    rng = np.random.default_rng(seed)
    take = min(batch, len(rows))
    picked = [rows[i] for i in rng.choice(len(rows), size=take, replace=False)]
    texts = [canonical_description(r["labels"]) for r in picked]
    with T.no_grad():
        if cache is not None:
            ev = cache.vision_tokens(picked) if ablate != "tactile-only" else None
            et = cache.tactile_tokens(picked) if ablate != "vision-only" else None
        else:
            ev, et = pipe.encode_images(_stack_images(picked, "vision"),
                                        _stack_images(picked, "tactile"), ablate)
        qv, qt = pipe.queries_from_tokens(ev, et)
        zv = pipe.pooled(qv, "vision")
        zt = pipe.pooled(qt, "tactile")
        that = pipe.text_embed(texts).data

    out: dict[str, float] = {}
    directions = []
    if zv is not None:
        directions += [("vision2text", zv.data, that), ("text2vision", that, zv.data)]
    if zt is not None:
        directions += [("tactile2text", zt.data, that), ("text2tactile", that, zt.data)]
    for name, queries, candidates in directions:
        hits = 0
        sim = queries @ candidates.T
        top = sim.argmax(axis=1)
        for i, j in enumerate(top):
            hits += texts[i] == texts[j]
        out[name] = hits / take
    out["mean"] = float(np.mean([v for k, v in out.items()]))
    return out


def _prefix_for_rows(pipe: Pipeline, rows, ablate, cache: FrozenEncoderCache | None,
                     with_pooled: bool = False):
    if cache is not None and cache.vision and ablate != "tactile-only":
        ev = cache.vision_tokens(rows)
    elif ablate != "tactile-only":
        ev = pipe.vision_enc.encode_batch(_stack_images(rows, "vision").astype(pipe.dtype))
    else:
        ev = None
    if cache is not None and cache.tactile and ablate != "vision-only":
        et = cache.tactile_tokens(rows)
    elif ablate != "vision-only":
        et = pipe.tactile_enc.encode_batch(_stack_images(rows, "tactile").astype(pipe.dtype))
    else:
        et = None
    qv, qt = pipe.queries_from_tokens(ev, et)
    prefix = pipe.prefix(qv, qt)
    if not with_pooled:
        return prefix, None, None
    return prefix, pipe.pooled(qv, "vision"), pipe.pooled(qt, "tactile")


def eval_properties(pipe: Pipeline, rows, cfg: ExperimentConfig,
                    ablate: str | None = None,
                    cache: FrozenEncoderCache | None = None) -> MetricReport:
    """Generation-based metrics over the four task families."""
    embedder = HashedBagEmbedder()
    by_task: dict[str, list] = {t: [] for t in TASKS}
    for r in rows:
        by_task[r["task"]].append(r)
    limit_per_task = max(1, cfg.eval_max_rows // len(TASKS))

    preds: dict[str, list] = {}
    golds: dict[str, list] = {}
    texts: dict[str, list] = {}
    for task, task_rows in by_task.items():
        task_rows = task_rows[:limit_per_task]
        if not task_rows:
            continue
        with T.no_grad():
            prefix, _, _ = _prefix_for_rows(pipe, task_rows, ablate, cache)
            generated = pipe.generate_answers(prefix, [r["instruction"] for r in task_rows],
                                              max_new=cfg.generate_max_new)
        preds[task] = generated
        golds[task] = task_rows
        texts[task] = [r["answer"] for r in task_rows]

    rep = MetricReport()
    counts = {}
    if "hardness" in preds:
        mapped = [map_to_label_set(t, HARDNESS) for t in preds["hardness"]]
        rep.hardness_acc = accuracy(mapped, [r["labels"]["hardness"] for r in golds["hardness"]],
                                    HARDNESS)
        counts["hardness"] = len(mapped)
    if "roughness" in preds:
        mapped = [map_to_label_set(t, ROUGHNESS) for t in preds["roughness"]]
        rep.roughness_acc = accuracy(mapped, [r["labels"]["roughness"] for r in golds["roughness"]],
                                     ROUGHNESS)
        counts["roughness"] = len(mapped)
    if "material" in preds:
        vocab = controlled_vocabulary()
        sets = [DescriptorSets(tuple(r["labels"]["descriptors"]),
                               tuple(extract_descriptors(t, vocab)))
                for t, r in zip(preds["material"], golds["material"])]
        rep.descriptor_recall = descriptor_recall(sets)
        rep.semantic_sim = semantic_similarity(preds["material"], texts["material"], embedder)
        counts["material"] = len(sets)
    if "defect" in preds:
        tax = DefectTaxonomy(2)
        mapped = [map_to_label_set(t, tax.labels) for t in preds["defect"]]
        gold = [project_label(r["labels"]["defect"], 2) for r in golds["defect"]]
        rep.defect_acc[2] = accuracy(mapped, gold, tax.labels)
        counts["defect"] = len(mapped)
    if rep.hardness_acc is not None and rep.roughness_acc is not None \
            and rep.descriptor_recall is not None:
        rep.mean_task = mean_task_score(rep.hardness_acc, rep.roughness_acc,
                                        rep.descriptor_recall)
    rep.counts = counts
    return rep


def eval_defect(pipe: Pipeline, rows, granularity: int, cfg: ExperimentConfig,
                ablate: str | None = None,
                prefix_cache: dict | None = None) -> float:
    tax = DefectTaxonomy(granularity)
    take = rows[: cfg.eval_max_rows]
    with T.no_grad():
        if prefix_cache is not None:
            prefix = Tensor(np.stack([prefix_cache[r["id"]] for r in take]))
        else:
            prefix, _, _ = _prefix_for_rows(pipe, take, ablate, None)
        generated = pipe.generate_answers(prefix, [r["instruction"] for r in take],
                                          max_new=cfg.generate_max_new)
    mapped = [map_to_label_set(t, tax.labels) for t in generated]
    gold = [project_label(r["labels"]["defect"], granularity) for r in take]
    return accuracy(mapped, gold, tax.labels)


# ---------------------------------------------------------------------------
# stage loops
# ---------------------------------------------------------------------------

def _spawned(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def run_stage1(corpus_path: str, cfg: ExperimentConfig, seed: int, out_dir: str,
               ablate: str | None = None) -> RunResult:
    os.makedirs(out_dir, exist_ok=True)
    rows = load_corpus(corpus_path)
    splits = rows_by_split(rows)
    if not splits["train"] or not splits["val"]:
        raise DataError("stage 1 needs non-empty train and val splits")

    pipe = Pipeline(cfg.model, build_vocab(), seed)
    trainability = pipe.apply_stage(1, ablate)
    plan = StagePlan(stage=1, steps=cfg.stage1.steps, batch_size=cfg.stage1.batch_size,
                     eval_every=cfg.stage1.eval_every, weights=cfg.loss, ablate=ablate,
                     trainable=trainability)

    cache = FrozenEncoderCache(pipe, splits["train"] + splits["val"],
                               vision=(ablate != "tactile-only"),
                               tactile=(ablate != "vision-only"))
    data_rng, = _spawned(seed + 101, 1)
    opt = AdamW(cfg.optim)
    params = pipe.params()
    train_rows = splits["train"]
    reports: list[MetricReport] = []

    for step in range(plan.steps):
        picks = data_rng.integers(0, len(train_rows), size=plan.batch_size)
        batch = [train_rows[i] for i in picks]
        texts = [canonical_description(r["labels"]) for r in batch]
        ev = cache.vision_tokens(batch) if ablate != "tactile-only" else None
        et = cache.tactile_tokens(batch) if ablate != "vision-only" else None
        qv, qt = pipe.queries_from_tokens(ev, et)
        zv = pipe.pooled(qv, "vision")
        zt = pipe.pooled(qt, "tactile")
        that = pipe.text_embed(texts)

        present = [z for z in (zv, zt) if z is not None]
        loss = None
        for z in present:
            term = infonce(z, that, plan.weights.tau)
            loss = term if loss is None else T.add(loss, term)
        if plan.weights.lam_match > 0:
            fused = present[0] if len(present) == 1 else T.scale(T.add(zv, zt), 0.5)
            batch_m = build_match_batch(fused, fused, that, pipe.ptm_head) \
                if len(present) == 1 else build_match_batch(zv, zt, that, pipe.ptm_head)
            if batch_m is not None:
                loss = T.add(loss, T.scale(ptm_loss(batch_m), plan.weights.lam_match))

        _nan_abort(loss.item(), step, [r["id"] for r in batch], out_dir)
        T.zero_grads(params)
        T.backward(loss)
        opt.step(params, lr_at(step, plan.steps, cfg.optim))

        if (step + 1) % plan.eval_every == 0 or step + 1 == plan.steps:
            ret = eval_retrieval(pipe, splits["val"], batch=64, seed=seed,
                                 cache=cache, ablate=ablate)
            reports.append(MetricReport(retrieval=ret,
                                        counts={"val_rows": min(64, len(splits["val"]))}))

    final = reports[-1] if reports else MetricReport()
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    pipe.save(ckpt_dir, extra={"stage": 1, "ablate": ablate})
    csv_path, report_path = _write_reports(
        out_dir, 1, reports, final, cfg, seed, corpus_path, None,
        extra={"trainable": trainability, "ablate": ablate})
    return RunResult(ckpt_dir, reports, csv_path, report_path, None, final)


def run_stage2(corpus_path: str, cfg: ExperimentConfig, seed: int, out_dir: str,
               init_ckpt: str | None, ablate: str | None = None) -> RunResult:
    os.makedirs(out_dir, exist_ok=True)
    rows = load_corpus(corpus_path)
    splits = rows_by_split(rows)
    if not splits["train"] or not splits["val"]:
        raise DataError("stage 2 needs non-empty train and val splits")

    no_stage1 = ablate == "no-stage1"
    model_ablate = None if no_stage1 else ablate
    if init_ckpt is None:
        if not no_stage1:
            raise DependencyError(
                "stage 2 needs a stage-1 checkpoint (or --ablate no-stage1)")
        pipe = Pipeline(cfg.model, build_vocab(), seed)
    else:
        pipe = Pipeline.load(init_ckpt)

    _ensure_warmed(pipe, cfg, seed + 7)
    trainability = pipe.apply_stage(2, model_ablate)
    plan = StagePlan(stage=2, steps=cfg.stage2.steps, batch_size=cfg.stage2.batch_size,
                     eval_every=cfg.stage2.eval_every, weights=cfg.loss, ablate=ablate,
                     trainable=trainability)

    # vision encoder is frozen in stage 2; tactile trains, so only vision caches
    cache = FrozenEncoderCache(pipe, splits["train"] + splits["val"],
                               vision=(model_ablate != "tactile-only"), tactile=False)
    data_rng, = _spawned(seed + 202, 1)
    opt = AdamW(cfg.optim)
    params = pipe.params()
    train_rows = splits["train"]

    reports: list[MetricReport] = []
    best_state = None
    best_score = None

    for step in range(plan.steps):
        picks = data_rng.integers(0, len(train_rows), size=plan.batch_size)
        batch = [train_rows[i] for i in picks]
        ev = cache.vision_tokens(batch) if model_ablate != "tactile-only" else None
        et = pipe.tactile_enc.encode_batch(
            _stack_images(batch, "tactile").astype(pipe.dtype)) \
            if model_ablate != "vision-only" else None
        qv, qt = pipe.queries_from_tokens(ev, et)
        prefix = pipe.prefix(qv, qt)
        logits, targets, valid = pipe.answer_logits(
            prefix, [r["instruction"] for r in batch], [r["answer"] for r in batch])
        loss = sequence_loss_batched(logits, targets, valid)
        if plan.weights.lam_vt > 0 and qv is not None and qt is not None:
            zv = pipe.pooled(qv, "vision")
            zt = pipe.pooled(qt, "tactile")
            loss = T.add(loss, T.scale(infonce(zv, zt, plan.weights.tau_vt),
                                       plan.weights.lam_vt))

        _nan_abort(loss.item(), step, [r["id"] for r in batch], out_dir)
        T.zero_grads(params)
        T.backward(loss)
        opt.step(params, lr_at(step, plan.steps, cfg.optim))

        if (step + 1) % plan.eval_every == 0 or step + 1 == plan.steps:
            rep = eval_properties(pipe, splits["val"], cfg, ablate=model_ablate, cache=cache)
            reports.append(rep)
            if rep.mean_task is not None and (best_score is None or rep.mean_task > best_score):
                best_score = rep.mean_task
                best_state = {n: p.data.copy() for n, p in params.items()}

    selected = select_checkpoint(reports) if reports else None
    if best_state is not None:
        for n, p in params.items():
            p.data = best_state[n]
    final = reports[selected] if selected is not None else MetricReport()
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    pipe.save(ckpt_dir, extra={"stage": 2, "ablate": ablate,
                               "selected_epoch": selected})
    csv_path, report_path = _write_reports(
        out_dir, 2, reports, final, cfg, seed, corpus_path, selected,
        extra={"trainable": trainability, "ablate": ablate})
    return RunResult(ckpt_dir, reports, csv_path, report_path, selected, final)


def run_stage3(defect_corpus_path: str, cfg: ExperimentConfig, seed: int, out_dir: str,
               init_ckpt: str | None, granularity: int = 2, kshot: int | None = None,
               ablate: str | None = None) -> RunResult:
    os.makedirs(out_dir, exist_ok=True)
    if init_ckpt is None:
        raise DependencyError("stage 3 needs the stage-2 checkpoint")
    if ablate == "no-stage1":
        ablate = None  # a stage-2 concern; the checkpoint already reflects it
    rows = load_corpus(defect_corpus_path)
    splits = rows_by_split(rows)
    defect_rows = [r for r in rows if r["task"] == "defect"]
    if not defect_rows:
        raise DataError("stage 3 corpus has no defect-task rows")

    pipe = Pipeline.load(init_ckpt)
    lora_rng, data_rng = _spawned(seed + 303, 2)
    adapters = attach_lora(pipe.decoder, targets=cfg.lora.targets, r=cfg.lora.rank,
                           alpha=cfg.lora.alpha, dropout_rate=cfg.lora.dropout,
                           rng=lora_rng)
    trainability = pipe.apply_stage(3, ablate)
    plan = StagePlan(stage=3, steps=cfg.stage3.steps, batch_size=cfg.stage3.batch_size,
                     eval_every=cfg.stage3.eval_every, weights=cfg.loss, ablate=ablate,
                     trainable=trainability)

    frozen_hash_before = pipe.param_hash(lambda n: ".lora." not in n)

    k = kshot if kshot is not None else 15
    train_rows = kshot_sample(rows, granularity, k, seed)
    test_rows = [r for r in splits["test"] if r["task"] == "defect"]
    if not test_rows:
        raise DataError("stage 3 corpus has no defect test rows")

    # everything outside the adapters is frozen: prefixes are constants
    prefix_cache: dict[int, np.ndarray] = {}
    with T.no_grad():
        for lo in range(0, len(train_rows + test_rows), 64):
            part = (train_rows + test_rows)[lo: lo + 64]
            prefix, _, _ = _prefix_for_rows(pipe, part, ablate, None)
            for r, row in enumerate(part):
                prefix_cache[row["id"]] = prefix.data[r]

    params = pipe.params()
    opt = AdamW(cfg.optim)
    reports: list[MetricReport] = []
    dropout_rng, = _spawned(seed + 404, 1)

    for step in range(plan.steps):
        picks = data_rng.integers(0, len(train_rows), size=min(plan.batch_size,
                                                               len(train_rows)))
        batch = [train_rows[i] for i in picks]
        prefix = Tensor(np.stack([prefix_cache[r["id"]] for r in batch]))
        ctx = RunCtx(train=True, rng=dropout_rng)
        logits, targets, valid = pipe.answer_logits(
            prefix, [r["instruction"] for r in batch], [r["answer"] for r in batch],
            ctx=ctx)
        loss = sequence_loss_batched(logits, targets, valid)
        _nan_abort(loss.item(), step, [r["id"] for r in batch], out_dir)
        T.zero_grads(params)
        T.backward(loss)
        opt.step(params, lr_at(step, plan.steps, cfg.optim))

        if (step + 1) % plan.eval_every == 0 or step + 1 == plan.steps:
            acc = eval_defect(pipe, test_rows, granularity, cfg, ablate,
                              prefix_cache=prefix_cache)
            reports.append(MetricReport(defect_acc={granularity: acc},
                                        counts={"defect": min(len(test_rows),
                                                              cfg.eval_max_rows),
                                                "kshot": k}))

    frozen_hash_after = pipe.param_hash(lambda n: ".lora." not in n)
    final = reports[-1] if reports else MetricReport()
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    pipe.save(ckpt_dir, extra={"stage": 3, "granularity": granularity, "kshot": k,
                               "ablate": ablate, "lora_rank": cfg.lora.rank,
                               "lora_alpha": cfg.lora.alpha,
                               "lora_dropout": cfg.lora.dropout})
    csv_path, report_path = _write_reports(
        out_dir, 3, reports, final, cfg, seed, defect_corpus_path, None,
        extra={"trainable": trainability, "ablate": ablate,
               "frozen_hash_before": frozen_hash_before,
               "frozen_hash_after": frozen_hash_after,
               "frozen_params_unchanged": frozen_hash_before == frozen_hash_after,
               "n_adapters": len(adapters)})
    return RunResult(ckpt_dir, reports, csv_path, report_path, None, final)


def run_stage(stage: int, corpus_path: str, cfg: ExperimentConfig, seed: int,
              out_dir: str, init_ckpt: str | None = None, ablate: str | None = None,
              granularity: int = 2, kshot: int | None = None) -> RunResult:
    """Dispatcher; stages 2 and 3 require the prior stage's checkpoint."""
    if stage == 1:
        return run_stage1(corpus_path, cfg, seed, out_dir, ablate)
    if stage == 2:
        return run_stage2(corpus_path, cfg, seed, out_dir, init_ckpt, ablate)
    if stage == 3:
        return run_stage3(corpus_path, cfg, seed, out_dir, init_ckpt,
                          granularity=granularity, kshot=kshot, ablate=ablate)
    raise ConfigError(f"unknown stage {stage!r}")
