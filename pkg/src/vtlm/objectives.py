"""Training losses: bidirectional InfoNCE, perceptual-text matching with hard
negatives, teacher-forced sequence losses, and the per-stage weighted sums.

All 1/N averaging happens here; the tensor core reduces token losses by SUM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lam_match: float = 1.0
    lam_vt: float = 1.0
    tau: float = 0.07
    tau_vt: float = 0.07

    def __post_init__(self):
        if self.tau <= 0 or self.tau_vt <= 0:
            raise ConfigError(f"temperatures must be > 0, got tau={self.tau}, tau_vt={self.tau_vt}")
        if self.lam_match < 0 or self.lam_vt < 0:
            raise ConfigError("loss weights must be >= 0")


def infonce(z: Tensor, t: Tensor, tau: float) -> Tensor:
    """Symmetric bidirectional InfoNCE over matched rows of ``z`` and ``t``.

    -(1/2N) sum_i [log softmax_row(S)[i,i] + log softmax_row(S^T)[i,i]],
    S = z t^T / tau. Exactly symmetric under argument swap.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if z.ndim != 2 or t.ndim != 2:
        raise ShapeError(f"infonce expects [N, d] inputs, got {z.shape} and {t.shape}")
    if z.shape != t.shape:
        raise ShapeError(f"infonce row/width mismatch: {z.shape} vs {t.shape}")
    n = z.shape[0]
    if n == 0:
        raise ContractError("infonce over an empty batch")
    sim = T.scale(T.matmul(z, T.transpose(t)), 1.0 / tau)
    idx = np.arange(n)
    both = T.add(T.cross_entropy_logits(sim, idx),
                 T.cross_entropy_logits(T.transpose(sim), idx))
    return T.scale(both, 1.0 / (2 * n))


def stage1_contrastive(z_vision: Tensor, z_tactile: Tensor, t_text: Tensor,
                       tau: float) -> Tensor:
    """Sum of the vision-language and tactile-language InfoNCE terms."""
    return T.add(infonce(z_vision, t_text, tau), infonce(z_tactile, t_text, tau))


def mine_hard_negatives(sim) -> np.ndarray | None:
    """Per row i: argmax over j != i of sim[i, j]; ties break to the lower
    index. Returns None when the batch has no negatives (N < 2)."""
    s = sim.data if isinstance(sim, Tensor) else np.asarray(sim)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity must be square [N, N], got {s.shape}")
    n = s.shape[0]
    if n < 2:
        return None
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1)


@dataclass
class MatchBatch:
    """Perceptual-text candidate pairs with binary labels and predicted
    match probabilities (clipped into (0, 1))."""

    labels: np.ndarray   # [M] in {0, 1}
    probs: Tensor        # [M]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise ContractError("MatchBatch needs at least one labeled pair")
        if self.probs.shape != self.labels.shape:
            raise ShapeError(f"probs {self.probs.shape} vs labels {self.labels.shape}")


class PTMHead(Module):
    """Two-layer perceptron scoring (fused perception, text) pairs."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.register("fc1", Linear(2 * d, 2 * d, rng))
        self.fc2 = self.register("fc2", Linear(2 * d, 1, rng))

    def predict(self, z_fused: Tensor, t_text: Tensor) -> Tensor:
        """Match probabilities for row-aligned pairs, clipped to (0, 1)."""
        h = T.gelu(self.fc1(T.concat_cols([z_fused, t_text])))
        logits = T.reshape(self.fc2(h), (z_fused.shape[0],))
        return T.clip(T.sigmoid(logits), PROB_CLIP, 1.0 - PROB_CLIP)


def build_match_batch(z_vision: Tensor, z_tactile: Tensor, t_text: Tensor,
                      head: PTMHead) -> MatchBatch | None:
    """N positives plus one mined hard negative per row (M = 2N).

    The fused perception embedding is the average of the pooled vision and
    tactile vectors; negatives are in-batch argmax of fused->text similarity.
    Returns None for N < 2 (no negatives available, PTM skipped).
    """
    fused = T.scale(T.add(z_vision, z_tactile), 0.5)
    neg = mine_hard_negatives(fused.data @ t_text.data.T)
    if neg is None:
        return None
    n = fused.shape[0]
    z_all = T.concat_rows([fused, fused])
    t_all = T.concat_rows([t_text, T.take_rows(t_text, neg)])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    return MatchBatch(labels=labels, probs=head.predict(z_all, t_all))


def ptm_loss(batch: MatchBatch) -> Tensor:
    """Mean binary cross-entropy over the match candidates."""
    m = batch.labels.size
    y = Tensor(batch.labels)
    one_minus_p = T.add(T.scale(batch.probs, -1.0), Tensor(np.ones(m)))
    ll = T.add(T.mul(y, T.log(batch.probs)),
               T.mul(Tensor(1.0 - batch.labels), T.log(one_minus_p)))
    return T.scale(T.sum_all(ll), -1.0 / m)


def stage1_loss(z_vision: Tensor, z_tactile: Tensor, t_text: Tensor,
                head: PTMHead | None, weights: LossWeights) -> tuple[Tensor, dict]:
    """Contrastive sum plus lam_match * PTM. The PTM path is skipped entirely
    at lam_match == 0 so such runs are bitwise-identical to head-absent runs."""
    con = stage1_contrastive(z_vision, z_tactile, t_text, weights.tau)
    parts = {"contrastive": con.item(), "ptm": 0.0}
    total = con
    if weights.lam_match > 0 and head is not None:
        batch = build_match_batch(z_vision, z_tactile, t_text, head)
        if batch is not None:
            match = ptm_loss(batch)
            parts["ptm"] = match.item()
            total = T.add(con, T.scale(match, weights.lam_match))
    return total, parts


def vqa_loss(samples: list[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Teacher-forced answer loss: mean over samples of the token-SUM of
    -log p(target). ``samples`` holds (logits [L_i, V], targets [L_i]) pairs."""
    if not samples:
        raise ContractError("vqa_loss over an empty batch")
    total = None
    for logits, targets in samples:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size == 0:
            raise ContractError("vqa_loss sample has an empty target sequence")
        ce = T.cross_entropy_logits(logits, targets)
        total = ce if total is None else T.add(total, ce)
    return T.scale(total, 1.0 / len(samples))


def sequence_loss_batched(logits: Tensor, targets: np.ndarray, valid: np.ndarray) -> Tensor:
    """Same arithmetic as ``vqa_loss`` on padded batches: token-SUM within a
    sample, mean over the batch. ``valid`` marks real target positions."""
    b, length, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    if targets.shape != (b, length) or valid.shape != (b, length):
        raise ShapeError(f"targets {targets.shape} / valid {valid.shape} vs logits {logits.shape}")
    if not valid.any():
        raise ContractError("batched sequence loss with no valid target positions")
    flat = T.reshape(logits, (b * length, v))
    keep = np.flatnonzero(valid.reshape(-1))
    ce = T.cross_entropy_logits(T.take_rows(flat, keep), targets.reshape(-1)[keep])
    return T.scale(ce, 1.0 / b)


def stage2_loss(vqa_samples, z_vision: Tensor | None, z_tactile: Tensor | None,
                weights: LossWeights) -> tuple[Tensor, dict]:
    """Answer loss plus lam_vt * vision-tactile coupling (pooled InfoNCE).

    The coupling path is skipped entirely at lam_vt == 0, and contributes 0
    when either modality is ablated away."""
    if isinstance(vqa_samples, Tensor):
        vqa = vqa_samples  # already-reduced batched loss
    else:
        vqa = vqa_loss(vqa_samples)
    parts = {"vqa": vqa.item(), "coupling": 0.0}
    total = vqa
    if weights.lam_vt > 0 and z_vision is not None and z_tactile is not None:
        couple = infonce(z_vision, z_tactile, weights.tau_vt)
        parts["coupling"] = couple.item()
        total = T.add(vqa, T.scale(couple, weights.lam_vt))
    return total, parts


def defect_loss(samples) -> Tensor:
    """Stage-3 label-text loss; identical arithmetic to the answer loss."""
    return vqa_loss(samples)
