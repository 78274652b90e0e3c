"""Toy vision / tactile / text encoders.

Each image encoder is patchify + linear projection + sinusoidal positions +
pre-norm transformer blocks; the text encoder prepends a learned class token
to word embeddings. These stand in for the large pretrained backbones, which
are out of scope at desk scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Module, TransformerBlock, sinusoidal_positions
from .tensor import Tensor

NEG_INF = -1e9

VISION, TACTILE, TEXT = "vision", "tactile", "text"


@dataclass(frozen=True)
class EncoderDims:
    patch: int = 8
    d_v: int = 64
    d_t: int = 64
    d_text: int = 64
    depth: int = 2
    heads: int = 4
    max_text_len: int = 512

    def __post_init__(self):
        for name in ("patch", "d_v", "d_t", "d_text", "depth", "heads", "max_text_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"EncoderDims.{name} must be positive")


@dataclass
class ImageObs:
    """H x W x 3 float observation with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"ImageObs expects [H, W, 3], got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("ImageObs values must be finite and within [0, 1]")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class TokenSeq:
    tokens: Tensor  # [L, d] (or [B, L, d] for batched paths)
    modality: str


def patchify(values: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W, 3] -> [..., (H/p)*(W/p), p*p*3] in row-major patch order."""
    *lead, h, w, c = values.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = values.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, patch, patch, c]
    return x.reshape(*lead, gh * gw, patch * patch * c)


class PatchEncoder(Module):
    """Image-token encoder for one modality.

    The blocks are initialized near identity (small ``block_std``): these toy
    backbones run frozen with random weights, and small random blocks keep
    patch content linearly recoverable downstream, which is the useful analog
    of a pretrained feature extractor at this scale.
    """

    def __init__(self, modality: str, dims: EncoderDims, width: int,
                 rng: np.random.Generator, block_std: float = 0.02):
        super().__init__()
        self.modality = modality
        self.dims = dims
        self.width = width
        self.proj = self.register("proj", Linear(dims.patch * dims.patch * 3, width, rng))
        self.blocks = [
            self.register(f"block{i}", TransformerBlock(width, dims.heads, rng,
                                                        std=block_std))
            for i in range(dims.depth)
        ]
        self.ln_f = self.register("ln_f", LayerNorm(width))
        self._pos_cache: dict[int, np.ndarray] = {}

    def _positions(self, length: int) -> np.ndarray:
        if length not in self._pos_cache:
            self._pos_cache[length] = sinusoidal_positions(length, self.width)
        return self._pos_cache[length].astype(T.default_dtype())

    def _forward(self, patches: np.ndarray) -> Tensor:
        x = self.proj(Tensor(patches))
        x = T.add(x, Tensor(self._positions(x.shape[-2])))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def encode(self, obs: ImageObs) -> TokenSeq:
        return TokenSeq(self._forward(patchify(obs.values, self.dims.patch)), self.modality)

    def encode_batch(self, values: np.ndarray) -> Tensor:
        """[B, H, W, 3] -> [B, L, width] token tensor."""
        return self._forward(patchify(values, self.dims.patch))

    def token_count(self, height: int, width: int) -> int:
        if height % self.dims.patch or width % self.dims.patch:
            raise ShapeError(f"image {height}x{width} not divisible by patch {self.dims.patch}")
        return (height // self.dims.patch) * (width // self.dims.patch)


class TextEncoder(Module):
    """Word-id encoder; a learned class token is prepended, its final state
    is the sentence summary."""

    def __init__(self, vocab_size: int, dims: EncoderDims, rng: np.random.Generator):
        super().__init__()
        self.dims = dims
        self.width = dims.d_text
        self.max_len = dims.max_text_len
        self.emb = self.register("emb", Tensor(
            rng.normal(0.0, 0.02, size=(vocab_size, self.width)).astype(T.default_dtype())))
        self.cls = self.register("cls", Tensor(
            rng.normal(0.0, 0.02, size=(1, self.width)).astype(T.default_dtype())))
        self.blocks = [
            self.register(f"block{i}", TransformerBlock(self.width, dims.heads, rng))
            for i in range(dims.depth)
        ]
        self.ln_f = self.register("ln_f", LayerNorm(self.width))

    def _truncate(self, ids: np.ndarray) -> np.ndarray:
        limit = self.max_len - 1  # class token occupies one slot
        if ids.shape[-1] > limit:
            warnings.warn(
                f"text of {ids.shape[-1]} tokens truncated to {limit}", stacklevel=3)
            ids = ids[..., :limit]
        return ids

    def encode(self, ids) -> tuple[TokenSeq, Tensor]:
        ids = self._truncate(np.atleast_1d(np.asarray(ids, dtype=np.int64)))
        tok = T.embedding_lookup(self.emb, ids) if ids.size else None
        cls_row = self.cls
        x = T.concat_rows([cls_row, tok]) if tok is not None else cls_row
        x = T.add(x, Tensor(sinusoidal_positions(x.shape[-2], self.width)))
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        states = TokenSeq(x, TEXT)
        cls = T.reshape(T.slice_rows(x, 0, 1), (self.width,))
        return states, cls

    def encode_batch(self, ids_list: list[np.ndarray], pad_id: int = 0) -> Tensor:
        """Pad, mask and encode a batch; returns the [B, width] class states."""
        ids_list = [self._truncate(np.asarray(i, dtype=np.int64)) for i in ids_list]
        b = len(ids_list)
        lmax = max((len(i) for i in ids_list), default=0)
        ids = np.full((b, lmax), pad_id, dtype=np.int64)
        pad_mask = np.zeros((b, 1, lmax + 1), dtype=T.default_dtype())
        for r, row in enumerate(ids_list):
            ids[r, : len(row)] = row
            pad_mask[r, 0, 1 + len(row):] = NEG_INF  # +1: class token is never padding
        # broadcast the class token to [B, 1, width] (grads sum back through add)
        cls_rows = T.add(Tensor(np.zeros((b, 1, self.width))),
                         T.reshape(self.cls, (1, 1, self.width)))
        x = T.concat_rows([cls_rows, T.embedding_lookup(self.emb, ids)]) if lmax else cls_rows
        x = T.add(x, Tensor(sinusoidal_positions(x.shape[-2], self.width)))
        for block in self.blocks:
            x = block(x, mask=pad_mask)
        x = self.ln_f(x)
        return T.reshape(T.slice_rows(x, 0, 1), (b, self.width))


def apply_stage_plan(stage: int, vision: PatchEncoder, tactile: PatchEncoder,
                     text: TextEncoder) -> dict[str, str]:
    """Set encoder trainability for a stage and report it.

    Vision stays frozen in every stage; tactile is fine-tuned only in stage 2;
    the text encoder carries the stage-1 alignment target and is frozen after.
    """
    plans = {
        1: {"vision": False, "tactile": False, "text": True},
        2: {"vision": False, "tactile": True, "text": False},
        3: {"vision": False, "tactile": False, "text": False},
    }
    if stage not in plans:
        raise ConfigError(f"unknown stage {stage!r}; expected 1, 2 or 3")
    plan = plans[stage]
    vision.set_trainable(plan["vision"])
    tactile.set_trainable(plan["tactile"])
    text.set_trainable(plan["text"])
    return {k: ("trainable" if v else "frozen") for k, v in plan.items()}
