"""Dual modality-specific Q-Formers and the shared-space / decoder projections.

Each Q-Former owns an independent learnable query bank and distills encoder
tokens through per-block self-attention + cross-attention. Query outputs are
(a) projected into the shared space and unit-normalized for the contrastive
losses, and (b) mapped into the decoder width and stacked vision-first as
prefix tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import TACTILE, VISION, TokenSeq
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Module, TransformerBlock
from .tensor import Tensor


@dataclass(frozen=True)
class SharedSpaceConfig:
    L_q: int = 8        # queries per modality; the full-scale reference uses 32
    d_q: int = 64
    d: int = 64         # shared contrastive space
    d_llm: int = 128
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.L_q < 1:
            raise ConfigError("L_q must be >= 1")
        for name in ("d_q", "d", "d_llm", "depth", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"SharedSpaceConfig.{name} must be positive")


@dataclass
class PrefixTokens:
    """Decoder prefix: vision rows first, tactile rows second, 2*L_q total."""

    tokens: Tensor  # [2*L_q, d_llm] or [B, 2*L_q, d_llm]
    L_q: int

    def __post_init__(self):
        if self.tokens.shape[-2] != 2 * self.L_q:
            raise ShapeError(
                f"prefix has {self.tokens.shape[-2]} rows, expected {2 * self.L_q}")


class QFormer(Module):
    """One modality's query former: fixed-length summary of encoder tokens."""

    def __init__(self, modality: str, cfg: SharedSpaceConfig, enc_width: int,
                 rng: np.random.Generator):
        super().__init__()
        if modality not in (VISION, TACTILE):
            raise ConfigError(f"QFormer modality must be vision or tactile, got {modality!r}")
        self.modality = modality
        self.cfg = cfg
        self.queries = self.register("queries", Tensor(
            rng.normal(0.0, 0.02, size=(cfg.L_q, cfg.d_q)).astype(T.default_dtype())))
        self.blocks = [
            self.register(f"block{i}", TransformerBlock(
                cfg.d_q, cfg.heads, rng, cross=True, kv_dim=enc_width))
            for i in range(cfg.depth)
        ]
        self.ln_f = self.register("ln_f", LayerNorm(cfg.d_q))

    def _run(self, enc_tokens: Tensor) -> Tensor:
        if enc_tokens.ndim == 3:
            b = enc_tokens.shape[0]
            x = T.add(Tensor(np.zeros((b, self.cfg.L_q, self.cfg.d_q))),
                      T.reshape(self.queries, (1, self.cfg.L_q, self.cfg.d_q)))
        else:
            x = T.add(self.queries, Tensor(np.zeros_like(self.queries.data)))
        for block in self.blocks:
            x = block(x, kv=enc_tokens)
        return self.ln_f(x)

    def extract(self, seq: TokenSeq) -> Tensor:
        """Final query states after attending into ``seq`` ([L_q, d_q])."""
        if seq.modality != self.modality:
            raise ContractError(
                f"{self.modality} Q-Former fed {seq.modality} tokens")
        return self._run(seq.tokens)

    def extract_batch(self, enc_tokens: Tensor) -> Tensor:
        return self._run(enc_tokens)


class SharedProjections(Module):
    """Pure linear maps into the shared space (Eq.-style, no bias) plus the
    text-summary projection."""

    def __init__(self, cfg: SharedSpaceConfig, d_text: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.w_v = self.register("w_v", Linear(cfg.d_q, cfg.d, rng, bias=False))
        self.w_t = self.register("w_t", Linear(cfg.d_q, cfg.d, rng, bias=False))
        self.w_text = self.register("w_text", Linear(d_text, cfg.d, rng, bias=False))

    def project_normalize(self, queries: Tensor, modality: str) -> Tensor:
        """Shared-space projection with unit rows (norm 1 within 1e-6)."""
        if modality == VISION:
            proj = self.w_v(queries)
        elif modality == TACTILE:
            proj = self.w_t(queries)
        else:
            raise ConfigError(f"unknown modality {modality!r}")
        return T.l2_normalize_rows(proj)

    def project_text(self, cls: Tensor) -> Tensor:
        """Unit-normalized text summary; accepts [d_text] or [B, d_text]."""
        single = cls.ndim == 1
        x = T.reshape(cls, (1, cls.shape[-1])) if single else cls
        out = T.l2_normalize_rows(self.w_text(x))
        return T.reshape(out, (self.cfg.d,)) if single else out


def pool(qhat: Tensor, renormalize: bool = False) -> Tensor:
    """Average the (unit) query rows; NOT re-normalized unless asked.

    The raw mean keeps pooled norms <= 1 (convexity), which the contrastive
    losses consume directly; ``renormalize`` exists for ablation only.
    """
    if qhat.shape[-2] == 0:
        raise ContractError("pool of an empty query set")
    out = T.mean_rows(qhat)
    return T.l2_normalize_rows(out) if renormalize else out


class PrefixMapper(Module):
    """Affine per-modality maps into decoder width plus learned placeholder
    banks for single-modality ablations (prefix layout stays 2*L_q rows)."""

    def __init__(self, cfg: SharedSpaceConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.to_llm_v = self.register("to_llm_v", Linear(cfg.d_q, cfg.d_llm, rng))
        self.to_llm_t = self.register("to_llm_t", Linear(cfg.d_q, cfg.d_llm, rng))
        self.placeholder_v = self.register("placeholder_v", Tensor(
            rng.normal(0.0, 0.02, size=(cfg.L_q, cfg.d_q)).astype(T.default_dtype())))
        self.placeholder_t = self.register("placeholder_t", Tensor(
            rng.normal(0.0, 0.02, size=(cfg.L_q, cfg.d_q)).astype(T.default_dtype())))

    def _bank(self, queries: Tensor | None, placeholder: Tensor, like: Tensor | None) -> Tensor:
        if queries is not None:
            return queries
        if like is not None and like.ndim == 3:
            b = like.shape[0]
            return T.add(Tensor(np.zeros((b,) + placeholder.shape)),
                         T.reshape(placeholder, (1,) + placeholder.shape))
        return placeholder

    def to_prefix(self, q_vision: Tensor | None, q_tactile: Tensor | None) -> PrefixTokens:
        """[Q^v; Q^t] mapped to decoder width; a missing side uses its
        placeholder bank so the prefix shape never changes."""
        if q_vision is None and q_tactile is None:
            raise ContractError("to_prefix needs at least one modality")
        qv = self._bank(q_vision, self.placeholder_v, q_tactile)
        qt = self._bank(q_tactile, self.placeholder_t, q_vision)
        if qv.shape[-1] != self.cfg.d_q or qt.shape[-1] != self.cfg.d_q:
            raise ShapeError(
                f"query width {qv.shape} / {qt.shape} does not match d_q={self.cfg.d_q}")
        rows = T.concat_rows([self.to_llm_v(qv), self.to_llm_t(qt)])
        return PrefixTokens(tokens=rows, L_q=self.cfg.L_q)
