"""Metrics: task accuracies, descriptor recall, semantic similarity, mean task
score, checkpoint selection, and generated-text to label-set mapping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .decoder import words_of
from .errors import ContractError

UNMAPPED = "Unmapped"


# ---------------------------------------------------------------------------
# text -> label mapping
# ---------------------------------------------------------------------------

def _normalize(text: str) -> list[str]:
    return words_of(text)


def map_to_label_set(text: str, labels) -> str:
    """Map generated text onto a label set.

    Normalization lowercases and treats punctuation (including hyphens in
    compound labels) as spaces. Exact match wins; otherwise the label whose
    component words all appear in the text and whose label string is longest
    wins ("dent ... edge" -> Dent-Edge); otherwise Unmapped.
    """
    tokens = _normalize(text)
    joined = " ".join(tokens)
    token_set = set(tokens)
    best, best_len = None, -1
    for label in labels:
        parts = _normalize(label)
        if joined == " ".join(parts):
            return label
        if parts and all(p in token_set for p in parts):
            plen = sum(len(p) for p in parts)
            if plen > best_len:
                best, best_len = label, plen
    return best if best is not None else UNMAPPED


def map_to_taxonomy(text: str, taxonomy) -> str:
    """``taxonomy`` is any label sequence (or an object with ``.labels``)."""
    labels = getattr(taxonomy, "labels", taxonomy)
    return map_to_label_set(text, labels)


def extract_descriptors(text: str, vocabulary) -> list[str]:
    """Tokens kept if in the controlled vocabulary, deduped in first-seen order."""
    vocab = set(vocabulary)
    out: list[str] = []
    for w in _normalize(text):
        if w in vocab and w not in out:
            out.append(w)
    return out


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

@dataclass
class DescriptorSets:
    reference: tuple      # gold descriptors, fixed size 5 by schema
    predicted: tuple      # duplicate-free, vocabulary-filtered

    def __post_init__(self):
        self.reference = tuple(self.reference)
        self.predicted = tuple(dict.fromkeys(self.predicted))
        if not self.reference:
            raise ContractError("reference descriptor set must not be empty")


def accuracy(preds, golds, label_set) -> float:
    """Exact-match fraction; predictions outside the label set can never
    match a gold label, so unmappable outputs count as wrong."""
    if len(preds) != len(golds):
        raise ContractError(f"{len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ContractError("accuracy over an empty batch")
    labels = set(label_set)
    hits = sum(1 for p, g in zip(preds, golds) if p in labels and p == g)
    return hits / len(golds)


def descriptor_recall(samples) -> float:
    """Mean over samples of |P intersect G| / |G|."""
    if not samples:
        raise ContractError("descriptor_recall over an empty batch")
    total = 0.0
    for s in samples:
        total += len(set(s.predicted) & set(s.reference)) / len(set(s.reference))
    return total / len(samples)


class HashedBagEmbedder:
    """Deterministic bag-of-words embedder: each token hashes to a signed
    coordinate. A constant bias coordinate keeps embeddings nonzero so
    identical texts always have cosine 1."""

    def __init__(self, dim: int = 64):
        if dim < 2:
            raise ContractError("embedder needs dim >= 2")
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        vec[0] = 1.0
        for w in _normalize(text):
            h = hashlib.sha1(w.encode("utf-8")).digest()
            idx = 1 + int.from_bytes(h[:4], "big") % (self.dim - 1)
            sign = 1.0 if h[4] % 2 == 0 else -1.0
            vec[idx] += sign
        return vec


def semantic_similarity(pred_texts, gold_texts, embedder) -> float:
    """Mean cosine similarity of unit-normalized embeddings."""
    if len(pred_texts) != len(gold_texts):
        raise ContractError(f"{len(pred_texts)} predictions vs {len(gold_texts)} golds")
    if not gold_texts:
        raise ContractError("semantic_similarity over an empty batch")
    total = 0.0
    for p, g in zip(pred_texts, gold_texts):
        zp = np.asarray(embedder(p), dtype=np.float64)
        zg = np.asarray(embedder(g), dtype=np.float64)
        np_, ng = np.linalg.norm(zp), np.linalg.norm(zg)
        if np_ > 0:
            zp = zp / np_
        if ng > 0:
            zg = zg / ng
        total += float(zp @ zg)
    return total / len(gold_texts)


def mean_task_score(hardness_acc: float, roughness_acc: float,
                    descriptor_recall_value: float) -> float:
    """Equal-weight mean of the three property-task metrics."""
    for v in (hardness_acc, roughness_acc, descriptor_recall_value):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"metric {v} outside [0, 1]")
    return (hardness_acc + roughness_acc + descriptor_recall_value) / 3.0


# ---------------------------------------------------------------------------
# reports / checkpoint selection
# ---------------------------------------------------------------------------

CSV_FIELDS = (
    "epoch", "hardness_acc", "roughness_acc", "descriptor_recall", "semantic_sim",
    "mean_task", "defect_acc_2", "defect_acc_3", "defect_acc_5",
    "ret_vision2text", "ret_text2vision", "ret_tactile2text", "ret_text2tactile",
    "ret_mean", "n_hardness", "n_roughness", "n_material", "n_defect",
)


@dataclass
class MetricReport:
    hardness_acc: float | None = None
    roughness_acc: float | None = None
    descriptor_recall: float | None = None
    semantic_sim: float | None = None
    mean_task: float | None = None
    defect_acc: dict = field(default_factory=dict)     # granularity -> fraction
    retrieval: dict = field(default_factory=dict)      # direction tag -> fraction
    counts: dict = field(default_factory=dict)         # task -> n

    def __post_init__(self):
        for name in ("hardness_acc", "roughness_acc", "descriptor_recall", "mean_task"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        for g, v in self.defect_acc.items():
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"defect_acc[{g}]={v} outside [0, 1]")

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                v = {str(k): val for k, val in v.items()}
            out[f.name] = v
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["defect_acc"] = {int(k): v for k, v in d.get("defect_acc", {}).items()}
        return cls(**d)

    def csv_row(self, epoch: int) -> str:
        def cell(v):
            return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

        vals = {
            "epoch": epoch,
            "hardness_acc": self.hardness_acc,
            "roughness_acc": self.roughness_acc,
            "descriptor_recall": self.descriptor_recall,
            "semantic_sim": self.semantic_sim,
            "mean_task": self.mean_task,
            "defect_acc_2": self.defect_acc.get(2),
            "defect_acc_3": self.defect_acc.get(3),
            "defect_acc_5": self.defect_acc.get(5),
            "ret_vision2text": self.retrieval.get("vision2text"),
            "ret_text2vision": self.retrieval.get("text2vision"),
            "ret_tactile2text": self.retrieval.get("tactile2text"),
            "ret_text2tactile": self.retrieval.get("text2tactile"),
            "ret_mean": self.retrieval.get("mean"),
            "n_hardness": self.counts.get("hardness"),
            "n_roughness": self.counts.get("roughness"),
            "n_material": self.counts.get("material"),
            "n_defect": self.counts.get("defect"),
        }
        return ",".join(cell(vals[k]) for k in CSV_FIELDS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_FIELDS)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def select_checkpoint(reports) -> int:
    """Index of the highest mean task score; ties break to the earliest epoch."""
    if not reports:
        raise ContractError("select_checkpoint over an empty report list")
    best_idx, best = 0, None
    for i, r in enumerate(reports):
        score = r.mean_task if hasattr(r, "mean_task") else float(r)
        if score is None:
            raise ContractError(f"report {i} lacks a mean task score")
        if best is None or score > best:
            best_idx, best = i, score
    return best_idx
