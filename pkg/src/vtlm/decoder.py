"""Toy autoregressive decoder with prefix-token conditioning and LoRA.

The decoder stands in for a frozen multi-billion-parameter language model:
it is warmed up on answer-template text, then frozen, so later stages train
only the perception-side prefix producers (stage 2) or low-rank adapters on
the attention projections (stage 3).

Prefix rows carry no positional encoding and attend only among themselves;
text positions start at 0 after the prefix and attend to the full prefix plus
earlier text. Logits at text positions are therefore invariant to permuting
prefix rows.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Module, RunCtx, TransformerBlock
from .objectives import sequence_loss_batched
from .optim import AdamW, OptimConfig, lr_at
from .qformer import PrefixTokens
from .tensor import Tensor

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
NEG_INF = -1e9

_PUNCT_TO_SPACE = str.maketrans({c: " " for c in string.punctuation})


def words_of(text: str) -> list[str]:
    """Lowercase, punctuation-to-space, whitespace-split word stream."""
    return text.lower().translate(_PUNCT_TO_SPACE).split()


class Vocab:
    """Word-level vocabulary. Non-special ids follow file line order; the
    file holds one token per line and never lists the specials."""

    def __init__(self, vocabulary):
        seen = []
        for w in vocabulary:
            if w in SPECIAL_TOKENS:
                raise ConfigError(f"vocabulary must not contain special token {w!r}")
            if w not in seen:
                seen.append(w)
        self._words = list(SPECIAL_TOKENS) + seen
        self._ids = {w: i for i, w in enumerate(self._words)}

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        vocab = sorted({w for t in texts for w in words_of(t)})
        return cls(vocab)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def word_of(self, idx: int) -> str:
        return self._words[idx]

    def encode_words(self, text: str) -> list[int]:
        """Word ids without BOS/EOS framing; unknown words map to UNK."""
        return [self.id_of(w) for w in words_of(text)]

    def tokenize(self, text: str) -> list[int]:
        """[BOS, *word ids, EOS]; unknown words map to UNK."""
        return [BOS] + self.encode_words(text) + [EOS]

    def detokenize(self, ids) -> str:
        return " ".join(self._words[i] for i in ids
                        if 0 <= i < len(self._words) and i >= len(SPECIAL_TOKENS))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for w in self._words[len(SPECIAL_TOKENS):]:
                fh.write(w + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass(frozen=True)
class DecoderConfig:
    d_llm: int = 128
    layers: int = 2
    heads: int = 4
    vocab_size: int = 0
    max_len: int = 512

    def __post_init__(self):
        if self.d_llm % self.heads:
            raise ConfigError(f"d_llm {self.d_llm} not divisible by {self.heads} heads")
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigError("decoder vocab_size smaller than the special-token set")
        if self.max_len <= 0:
            raise ConfigError("max_len must be positive")


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, vocab: Vocab, rng: np.random.Generator):
        super().__init__()
        if len(vocab) != cfg.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} entries, config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.frozen = False
        self.tok_emb = self.register("tok_emb", Tensor(
            rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_llm)).astype(T.default_dtype())))
        self.pos_emb = self.register("pos_emb", Tensor(
            rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d_llm)).astype(T.default_dtype())))
        self.blocks = [
            self.register(f"block{i}", TransformerBlock(cfg.d_llm, cfg.heads, rng))
            for i in range(cfg.layers)
        ]
        self.ln_f = self.register("ln_f", LayerNorm(cfg.d_llm))
        self.head = self.register("head", Linear(cfg.d_llm, cfg.vocab_size, rng))
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- masking ------------------------------------------------------------

    def _mask(self, prefix_len: int, text_len: int) -> np.ndarray:
        key = (prefix_len, text_len)
        cached = self._mask_cache.get(key)
        if cached is None or cached.dtype != T.default_dtype():
            total = prefix_len + text_len
            m = np.full((total, total), NEG_INF, dtype=T.default_dtype())
            m[:prefix_len, :prefix_len] = 0.0  # prefix rows see the whole prefix
            for s in range(text_len):
                m[prefix_len + s, : prefix_len + s + 1] = 0.0
            self._mask_cache[key] = cached = m
        return cached

    # -- forward ------------------------------------------------------------

    def _prefix_tensor(self, prefix) -> Tensor | None:
        if prefix is None:
            return None
        tokens = prefix.tokens if isinstance(prefix, PrefixTokens) else prefix
        if tokens.shape[-1] != self.cfg.d_llm:
            raise ShapeError(
                f"prefix width {tokens.shape} does not match decoder width {self.cfg.d_llm}")
        return tokens

    def forward_with_prefix(self, prefix, ids, ctx: RunCtx | None = None) -> Tensor:
        """Logits [L, V] for a single sequence; row s is the next-token
        distribution after ids[:s+1]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError(f"decoder needs a 1-D non-empty id sequence, got shape {ids.shape}")
        ptok = self._prefix_tensor(prefix)
        p = ptok.shape[-2] if ptok is not None else 0
        if p + ids.size > self.cfg.max_len:
            raise ContractError(
                f"sequence of {p + ids.size} rows exceeds max_len {self.cfg.max_len} "
                "(hard error; the decoder never truncates)")
        x = T.add(T.embedding_lookup(self.tok_emb, ids),
                  T.slice_rows(self.pos_emb, 0, ids.size))
        if ptok is not None:
            if ptok.ndim != 2:
                raise ShapeError(f"single-sequence forward needs a 2-D prefix, got {ptok.shape}")
            x = T.concat_rows([ptok, x])
        mask = self._mask(p, ids.size)
        for block in self.blocks:
            x = block(x, mask=mask, ctx=ctx)
        x = self.ln_f(x)
        return self.head(T.slice_rows(x, p, p + ids.size), ctx)

    def forward_batch(self, prefix_tokens: Tensor | None, ids: np.ndarray,
                      ctx: RunCtx | None = None) -> Tensor:
        """Logits [B, L, V]; pads must sit at the end of each row (the causal
        mask keeps them out of every valid position's receptive field)."""
        ids = np.asarray(ids, dtype=np.int64)
        b, length = ids.shape
        p = prefix_tokens.shape[-2] if prefix_tokens is not None else 0
        if p + length > self.cfg.max_len:
            raise ContractError(
                f"sequence of {p + length} rows exceeds max_len {self.cfg.max_len}")
        x = T.add(T.embedding_lookup(self.tok_emb, ids),
                  T.reshape(T.slice_rows(self.pos_emb, 0, length), (1, length, self.cfg.d_llm)))
        if prefix_tokens is not None:
            if prefix_tokens.ndim == 2:
                prefix_tokens = T.add(
                    Tensor(np.zeros((b,) + prefix_tokens.shape)),
                    T.reshape(prefix_tokens, (1,) + prefix_tokens.shape))
            x = T.concat_rows([prefix_tokens, x])
        mask = self._mask(p, length)
        for block in self.blocks:
            x = block(x, mask=mask, ctx=ctx)
        x = self.ln_f(x)
        return self.head(T.slice_rows(x, p, p + length), ctx)

    # -- generation ---------------------------------------------------------

    def generate(self, prefix, prompt_ids, max_new: int, greedy: bool = True,
                 rng: np.random.Generator | None = None) -> str:
        """Decode up to ``max_new`` tokens; stops at EOS or the length cap.
        Greedy by default for reproducible metrics; sampling needs an rng."""
        if max_new < 1:
            raise ContractError("max_new must be >= 1")
        if not greedy and rng is None:
            raise ContractError("sampled decoding requires an explicit rng")
        ptok = self._prefix_tensor(prefix)
        p = ptok.shape[-2] if ptok is not None else 0
        seq = list(np.asarray(prompt_ids, dtype=np.int64))
        generated: list[int] = []
        with T.no_grad():
            while len(generated) < max_new and p + len(seq) < self.cfg.max_len:
                logits = self.forward_with_prefix(prefix, seq).data[-1]
                if greedy:
                    nxt = int(logits.argmax())
                else:
                    z = logits - logits.max()
                    probs = np.exp(z) / np.exp(z).sum()
                    nxt = int(rng.choice(len(probs), p=probs))
                if nxt == EOS:
                    break
                seq.append(nxt)
                generated.append(nxt)
        return self.vocab.detokenize(generated)

    def generate_batch(self, prefix_rows, prompts, max_new: int) -> list[str]:
        """Greedy decode per sample; ``prefix_rows`` is [B, P, d] or None."""
        out = []
        for i, prompt in enumerate(prompts):
            prefix_i = None
            if prefix_rows is not None:
                prefix_i = Tensor(prefix_rows.data[i], dtype=prefix_rows.data.dtype)
            out.append(self.generate(prefix_i, prompt, max_new))
        return out


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------

class LoraAdapter(Module):
    """Low-rank delta on a frozen linear map: effective weight change is
    (alpha/r) * B @ A with B zero-initialized, so attaching is a no-op until
    training moves B."""

    def __init__(self, d_in: int, d_out: int, r: int, alpha: float,
                 dropout_rate: float, rng: np.random.Generator):
        super().__init__()
        if r < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.r, self.alpha, self.dropout_rate = r, float(alpha), float(dropout_rate)
        self.A = self.register("A", Tensor(
            rng.normal(0.0, 0.02, size=(r, d_in)).astype(T.default_dtype())))
        self.B = self.register("B", Tensor(np.zeros((d_out, r), dtype=T.default_dtype())))

    def __call__(self, x: Tensor, ctx: RunCtx | None = None) -> Tensor:
        train = bool(ctx and ctx.train)
        h = T.dropout(x, self.dropout_rate, train=train, rng=ctx.rng if ctx else None)
        return T.scale(T.matmul(T.matmul(h, T.transpose(self.A)), T.transpose(self.B)),
                       self.alpha / self.r)

    def delta(self) -> np.ndarray:
        """Dense weight delta, [d_out, d_in] orientation."""
        return (self.alpha / self.r) * (self.B.data @ self.A.data)


def _attention_linears(decoder: Decoder) -> dict[str, Linear]:
    out: dict[str, Linear] = {}
    for i, block in enumerate(decoder.blocks):
        for letter, lin in (("q", block.attn.wq), ("k", block.attn.wk),
                            ("v", block.attn.wv), ("o", block.attn.wo)):
            out[f"block{i}.attn.w{letter}"] = lin
    return out


def attach_lora(decoder: Decoder, targets=("q", "v"), r: int = 16, alpha: float = 32.0,
                dropout_rate: float = 0.1,
                rng: np.random.Generator | None = None) -> dict[str, LoraAdapter]:
    """Insert adapters on the chosen attention projections of every block."""
    bad = set(targets) - {"q", "k", "v", "o"}
    if bad:
        raise ConfigError(f"unknown LoRA targets {sorted(bad)}; valid: q, k, v, o")
    if not targets:
        raise ConfigError("attach_lora needs at least one target projection")
    rng = rng or np.random.default_rng(0)
    adapters: dict[str, LoraAdapter] = {}
    for name, lin in _attention_linears(decoder).items():
        if name.rsplit("w", 1)[-1] not in targets:
            continue
        if lin.adapter is not None:
            raise ConfigError(f"duplicate LoRA attach on {name}")
        adapter = LoraAdapter(lin.d_in, lin.d_out, r, alpha, dropout_rate, rng)
        lin.register("lora", adapter)
        lin.adapter = adapter
        adapters[name] = adapter
    return adapters


def merge_lora(decoder: Decoder) -> list[str]:
    """Fold every adapter delta into its base weight. The pre-merge weights
    are stashed so ``unmerge_lora`` restores them bitwise."""
    merged = []
    for name, lin in _attention_linears(decoder).items():
        if lin.adapter is None:
            continue
        lin._lora_base = lin.w.data.copy()
        lin._lora_stashed = lin.adapter
        lin.w.data = lin.w.data + lin.adapter.delta().T.astype(lin.w.data.dtype)
        lin.adapter = None
        merged.append(name)
    return merged


def unmerge_lora(decoder: Decoder) -> list[str]:
    restored = []
    for name, lin in _attention_linears(decoder).items():
        if getattr(lin, "_lora_base", None) is None:
            continue
        lin.w.data = lin._lora_base
        lin.adapter = lin._lora_stashed
        lin._lora_base = lin._lora_stashed = None
        restored.append(name)
    return restored


def lora_param_names(decoder: Decoder) -> set[str]:
    return {n for n in decoder.params() if ".lora." in n}


# ---------------------------------------------------------------------------
# warmup
# ---------------------------------------------------------------------------

def lm_warmup(decoder: Decoder, sequences: list[list[int]], steps: int,
              batch_size: int = 32, seed: int = 0,
              optim_cfg: OptimConfig | None = None) -> list[float]:
    """Plain next-token training on template text, then freeze.

    Answers in the warmup corpus carry no perception signal, so the frozen
    decoder stays property-agnostic while learning the QA format.
    """
    if steps == 0:
        decoder.frozen = True
        decoder.set_trainable(False)
        return []
    cfg = optim_cfg or OptimConfig(peak_lr=3e-3, warmup_lr=1e-4, warmup_steps=50)
    if not sequences:
        raise ContractError("lm_warmup needs a non-empty corpus")
    decoder.set_trainable(True)
    rng = np.random.default_rng(seed)
    opt = AdamW(cfg)
    params = decoder.params()
    losses: list[float] = []
    for step in range(steps):
        picks = rng.integers(0, len(sequences), size=min(batch_size, len(sequences)))
        batch = [sequences[i] for i in picks]
        lmax = max(len(s) for s in batch)
        ids = np.full((len(batch), lmax), PAD, dtype=np.int64)
        for r, s in enumerate(batch):
            ids[r, : len(s)] = s
        inputs, targets = ids[:, :-1], ids[:, 1:]
        valid = targets != PAD
        logits = decoder.forward_batch(None, inputs)
        loss = sequence_loss_batched(logits, targets, valid)
        losses.append(loss.item())
        T.zero_grads(params)
        T.backward(loss)
        opt.step(params, lr_at(step, steps, cfg))
    decoder.frozen = True
    decoder.set_trainable(False)
    return losses
