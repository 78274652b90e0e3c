"""Pipeline assembly: encoders, dual Q-Formers, projections, matching head and
decoder wired together, with stage-wise freeze schedules, checkpoint I/O and
the batched forward paths the trainer and evaluator share."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import BOS, EOS, PAD, SEP, Decoder, DecoderConfig, Vocab
from .encoders import (EncoderDims, PatchEncoder, TACTILE, TextEncoder, VISION,
                       apply_stage_plan)
from .errors import ConfigError, ContractError, DependencyError
from .objectives import PTMHead
from .qformer import PrefixMapper, QFormer, SharedProjections, SharedSpaceConfig, pool
from .tensor import Tensor

ABLATIONS = (None, "vision-only", "tactile-only")


class Pipeline:
    """All trainable components of the vision-tactile-language stack."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int):
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        self.dtype = np.float32 if cfg.dtype == "float32" else np.float64
        seeds = np.random.SeedSequence(seed).spawn(9)
        rngs = [np.random.default_rng(s) for s in seeds]

        dims = EncoderDims(patch=cfg.patch, d_v=cfg.d_v, d_t=cfg.d_t, d_text=cfg.d_text,
                           depth=cfg.enc_depth, heads=cfg.enc_heads, max_text_len=cfg.max_len)
        qcfg = SharedSpaceConfig(L_q=cfg.L_q, d_q=cfg.d_q, d=cfg.d_shared,
                                 d_llm=cfg.d_llm, depth=cfg.qf_depth, heads=cfg.qf_heads)
        dcfg = DecoderConfig(d_llm=cfg.d_llm, layers=cfg.dec_layers, heads=cfg.dec_heads,
                             vocab_size=len(vocab), max_len=cfg.max_len)

        with T.using_dtype(self.dtype):
            self.vision_enc = PatchEncoder(VISION, dims, cfg.d_v, rngs[0])
            self.tactile_enc = PatchEncoder(TACTILE, dims, cfg.d_t, rngs[1])
            self.text_enc = TextEncoder(len(vocab), dims, rngs[2])
            self.qformer_v = QFormer(VISION, qcfg, cfg.d_v, rngs[3])
            self.qformer_t = QFormer(TACTILE, qcfg, cfg.d_t, rngs[4])
            self.projections = SharedProjections(qcfg, cfg.d_text, rngs[5])
            self.prefix_mapper = PrefixMapper(qcfg, rngs[6])
            self.ptm_head = PTMHead(cfg.d_shared, rngs[7])
            self.decoder = Decoder(dcfg, vocab, rngs[8])
        self.decoder_warmed = False

        self.components = {
            "vision_enc": self.vision_enc,
            "tactile_enc": self.tactile_enc,
            "text_enc": self.text_enc,
            "qformer_v": self.qformer_v,
            "qformer_t": self.qformer_t,
            "projections": self.projections,
            "prefix_mapper": self.prefix_mapper,
            "ptm_head": self.ptm_head,
            "decoder": self.decoder,
        }

    # -- parameters ----------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, comp in self.components.items():
            out.update(comp.params(name + "."))
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params().items() if p.requires_grad}

    def param_hash(self, predicate=None) -> str:
        """sha256 over (name, bytes) of parameters selected by ``predicate``."""
        h = hashlib.sha256()
        for name in sorted(self.params()):
            if predicate is not None and not predicate(name):
                continue
            p = self.params()[name]
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    # -- stage schedule --------------------------------------------------------

    def apply_stage(self, stage: int, ablate: str | None = None) -> dict[str, str]:
        """Freeze/train schedule per stage. Stage 1 trains Q-Formers,
        shared projections, matching head and the text encoder; stage 2 adds
        the tactile encoder and decoder-prefix maps but freezes text; stage 3
        trains LoRA adapter parameters only (attach them first)."""
        if ablate not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablate!r}; expected one of {ABLATIONS}")
        report = apply_stage_plan(stage, self.vision_enc, self.tactile_enc, self.text_enc)

        for comp in ("qformer_v", "qformer_t", "projections", "prefix_mapper",
                     "ptm_head", "decoder"):
            self.components[comp].set_trainable(False)

        if stage == 1:
            self.qformer_v.set_trainable(True)
            self.qformer_t.set_trainable(True)
            self.projections.set_trainable(True)
            self.ptm_head.set_trainable(True)
        elif stage == 2:
            self.qformer_v.set_trainable(True)
            self.qformer_t.set_trainable(True)
            self.projections.w_v.set_trainable(True)
            self.projections.w_t.set_trainable(True)
            self.prefix_mapper.set_trainable(True)
        elif stage == 3:
            for name, p in self.decoder.params().items():
                p.requires_grad = ".lora." in name
            report["lora"] = "trainable"

        # an ablated branch is dead weight: freeze it entirely
        if ablate == "vision-only":
            self.tactile_enc.set_trainable(False)
            self.qformer_t.set_trainable(False)
            self.projections.w_t.set_trainable(False)
        elif ablate == "tactile-only":
            self.vision_enc.set_trainable(False)
            self.qformer_v.set_trainable(False)
            self.projections.w_v.set_trainable(False)

        for name, comp in self.components.items():
            if name not in ("vision_enc", "tactile_enc", "text_enc"):
                state = "trainable" if any(
                    p.requires_grad for p in comp.params().values()) else "frozen"
                report[name] = state
        return report

    # -- forward paths ------------------------------------------------------------

    def encode_images(self, vision: np.ndarray | None, tactile: np.ndarray | None,
                      ablate: str | None = None):
        ev = et = None
        if ablate != "tactile-only" and vision is not None:
            ev = self.vision_enc.encode_batch(np.asarray(vision, dtype=self.dtype))
        if ablate != "vision-only" and tactile is not None:
            et = self.tactile_enc.encode_batch(np.asarray(tactile, dtype=self.dtype))
        return ev, et

    def queries_from_tokens(self, ev: Tensor | None, et: Tensor | None):
        qv = self.qformer_v.extract_batch(ev) if ev is not None else None
        qt = self.qformer_t.extract_batch(et) if et is not None else None
        return qv, qt

    def pooled(self, queries: Tensor | None, modality: str) -> Tensor | None:
        if queries is None:
            return None
        unit = self.projections.project_normalize(queries, modality)
        return pool(unit, renormalize=self.cfg.pool_renormalize)

    def text_embed(self, texts: list[str]) -> Tensor:
        ids = [np.asarray(self.vocab.encode_words(t), dtype=np.int64) for t in texts]
        return self.projections.project_text(self.text_enc.encode_batch(ids))

    def prefix(self, qv: Tensor | None, qt: Tensor | None) -> Tensor:
        return self.prefix_mapper.to_prefix(qv, qt).tokens

    # -- QA sequences ----------------------------------------------------------------

    def qa_batch(self, prompts: list[str], answers: list[str]):
        """Teacher-forcing arrays: inputs, shifted targets, and the valid mask
        covering answer tokens plus EOS (prompt positions carry no loss)."""
        seqs, loss_from = [], []
        for prompt, answer in zip(prompts, answers):
            p = self.vocab.encode_words(prompt)
            a = self.vocab.encode_words(answer)
            seq = [BOS] + p + [SEP] + a + [EOS]
            seqs.append(seq)
            loss_from.append(len(p) + 1)  # index of SEP in seq
        lmax = max(len(s) for s in seqs)
        ids = np.full((len(seqs), lmax), PAD, dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = s
        inputs, targets = ids[:, :-1], ids[:, 1:]
        valid = np.zeros_like(targets, dtype=bool)
        for r, s in enumerate(seqs):
            valid[r, loss_from[r]: len(s) - 1] = True
        return inputs, targets, valid

    def answer_logits(self, prefix_rows: Tensor, prompts: list[str],
                      answers: list[str], ctx=None):
        inputs, targets, valid = self.qa_batch(prompts, answers)
        logits = self.decoder.forward_batch(prefix_rows, inputs, ctx=ctx)
        return logits, targets, valid

    def generate_answers(self, prefix_rows: Tensor | None, prompts: list[str],
                         max_new: int = 12) -> list[str]:
        prompt_ids = [[BOS] + self.vocab.encode_words(p) + [SEP] for p in prompts]
        return self.decoder.generate_batch(prefix_rows, prompt_ids, max_new)

    # -- checkpoints --------------------------------------------------------------------

    def save(self, ckpt_dir: str, extra: dict | None = None) -> None:
        os.makedirs(ckpt_dir, exist_ok=True)
        arrays = {n: p.data for n, p in self.params().items()}
        np.savez(os.path.join(ckpt_dir, "params.npz"), **arrays)
        self.vocab.save(os.path.join(ckpt_dir, "vocab.txt"))
        manifest = {
            "model": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in self.cfg.__dict__.items()},
            "seed": self.seed,
            "decoder_warmed": self.decoder_warmed,
            "lora": sorted(n for n in self.params() if ".lora." in n),
            "extra": extra or {},
        }
        with open(os.path.join(ckpt_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, ckpt_dir: str) -> "Pipeline":
        manifest_file = os.path.join(ckpt_dir, "manifest.json")
        if not os.path.exists(manifest_file):
            raise DependencyError(f"checkpoint not found at {ckpt_dir}")
        with open(manifest_file, encoding="utf-8") as fh:
            manifest = json.load(fh)
        cfg = ModelConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                             for k, v in manifest["model"].items()})
        vocab = Vocab.load(os.path.join(ckpt_dir, "vocab.txt"))
        pipe = cls(cfg, vocab, manifest["seed"])
        if manifest["lora"]:
            from .decoder import attach_lora
            targets = sorted({n.split(".attn.w")[1].split(".")[0] for n in manifest["lora"]})
            ranks = manifest["extra"].get("lora_rank", 16)
            alpha = manifest["extra"].get("lora_alpha", 32.0)
            drop = manifest["extra"].get("lora_dropout", 0.1)
            attach_lora(pipe.decoder, targets=tuple(targets), r=ranks, alpha=alpha,
                        dropout_rate=drop, rng=np.random.default_rng(0))
        state = np.load(os.path.join(ckpt_dir, "params.npz"))
        params = pipe.params()
        missing = set(params) - set(state.files)
        extra_keys = set(state.files) - set(params)
        if missing or extra_keys:
            raise ContractError(
                f"checkpoint mismatch: missing={sorted(missing)[:4]} extra={sorted(extra_keys)[:4]}")
        for name, p in params.items():
            p.data = np.asarray(state[name], dtype=p.data.dtype).copy()
        pipe.decoder_warmed = manifest.get("decoder_warmed", False)
        pipe.decoder.frozen = pipe.decoder_warmed
        return pipe

    def manifest_extra(self, ckpt_dir: str) -> dict:
        with open(os.path.join(ckpt_dir, "manifest.json"), encoding="utf-8") as fh:
            return json.load(fh).get("extra", {})
