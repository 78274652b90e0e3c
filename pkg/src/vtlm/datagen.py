"""Synthetic corpus generator: latent objects rendered into paired vision and
tactile observations with instruction/answer rows for four tasks.

Construction principles
-----------------------
* Modality split. Vision renders the material hue, finish and texture
  descriptor slots plus the object shape; tactile renders hardness,
  roughness and the feel/firmness descriptor slots. Defect cues appear in
  vision with probability ``p_vis`` and in tactile with ``p_tac``
  (tactile-dominant by default), so some defects are visually silent.
* Identifiability. The per-modality latent tuples are kept unique across
  objects (rejection sampling while the space allows), so object-level
  cross-modal retrieval has a clean optimum.
* Determinism. Latents come from the corpus seed sequentially; every
  observation is rendered from a per-object spawned generator, and rows are
  written in id order, so re-runs are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .decoder import Vocab, words_of
from .errors import AvailabilityError, ConfigError, DataError
from .evalsuite import extract_descriptors, map_to_label_set

HARDNESS = ("Hard", "Soft")
ROUGHNESS = ("Smooth", "Textured", "Rough")
TASKS = ("hardness", "roughness", "material", "defect")
SPLITS = ("train", "val", "test")

# five descriptor slots, six words each; slots 0-2 render in vision,
# slots 3-4 in tactile
DESCRIPTOR_SLOTS = (
    ("metal", "plastic", "rubber", "wood", "ceramic", "glass"),
    ("glossy", "matte", "polished", "brushed", "painted", "coated"),
    ("grainy", "ridged", "bumpy", "slick", "woven", "pitted"),
    ("cool", "warm", "dense", "hollow", "light", "heavy"),
    ("firm", "springy", "rigid", "pliable", "stiff", "supple"),
)
VISION_SLOTS = (0, 1, 2)
TACTILE_SLOTS = (3, 4)

FINE_DEFECTS = ("Scratch-Surface", "Scratch-Edge", "Dent-Surface", "Dent-Edge")
SHAPES = ("circle", "square")


def controlled_vocabulary() -> tuple[str, ...]:
    """The 30 descriptor words (invalid-word filtering keeps only these)."""
    return tuple(w for slot in DESCRIPTOR_SLOTS for w in slot)


@dataclass(frozen=True)
class DefectTaxonomy:
    granularity: int

    def __post_init__(self):
        if self.granularity not in (2, 3, 5):
            raise ConfigError(f"granularity must be 2, 3 or 5, got {self.granularity}")

    @property
    def labels(self) -> tuple[str, ...]:
        if self.granularity == 2:
            return ("Normal", "Defect")
        if self.granularity == 3:
            return ("Normal", "Scratch", "Dent")
        return ("Normal",) + FINE_DEFECTS


def project_label(label: str, granularity: int) -> str:
    """Project a defect label to a coarser granularity. Normal is a fixed
    point; 5 -> 3 drops the location, 3 -> 2 collapses types to Defect."""
    taxonomy = DefectTaxonomy(granularity)
    if label == "Normal":
        return "Normal"
    known = {"Defect"} | {"Scratch", "Dent"} | set(FINE_DEFECTS)
    if label not in known:
        raise DataError(f"unknown defect label {label!r}")
    level = 2 if label == "Defect" else (3 if label in ("Scratch", "Dent") else 5)
    if granularity > level:
        raise DataError(f"cannot refine {label!r} (level {level}) to granularity {granularity}")
    if granularity == 2:
        return "Defect"
    if granularity == 3:
        return label.split("-")[0] if level == 5 else label
    return label  # granularity 5, label already fine


@dataclass(frozen=True)
class LatentObject:
    object_id: int
    hardness: str
    roughness: str
    descriptors: tuple[str, ...]   # exactly 5, one per slot
    defect: str                    # finest-granularity label or Normal
    shape: str

    def labels_dict(self) -> dict:
        return {"hardness": self.hardness, "roughness": self.roughness,
                "descriptors": list(self.descriptors), "defect": self.defect}


@dataclass(frozen=True)
class GenConfig:
    n_objects: int = 64
    samples_per_object: int = 4     # observations per object per task
    height: int = 32
    width: int = 32
    p_vis: float = 0.6
    p_tac: float = 0.95
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    unique_latents: bool = True
    tasks: tuple[str, ...] = TASKS  # restrict for single-purpose corpora

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios {self.split_ratios} do not sum to 1")
        if any(r < 0 for r in self.split_ratios):
            raise ConfigError("split ratios must be nonnegative")
        if self.n_objects < 1 or self.samples_per_object < 1:
            raise ConfigError("need at least one object and one sample per object")
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of {TASKS}")
        for p, name in ((self.p_vis, "p_vis"), (self.p_tac, "p_tac")):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

INSTRUCTION_TEMPLATES = {
    "hardness": (
        "is the object hard or soft",
        "how does the object feel in terms of hardness",
        "tell me the hardness of this object",
        "does this object feel hard or soft",
    ),
    "roughness": (
        "how rough is the surface",
        "is the surface smooth textured or rough",
        "describe the roughness of the surface",
        "what is the surface roughness level",
    ),
    "material": (
        "describe the material and surface properties",
        "what does the material of this object feel like",
        "give five words describing this material",
        "characterize the material and its surface",
    ),
    "defect": (
        "is there any defect on this object",
        "check the object for defects",
        "does the part have a defect report it",
        "inspect the surface and name any defect",
    ),
}

ANSWER_TEMPLATES = {
    "hardness": ("it is {}", "the object is {}", "it feels {}", "{}"),
    "roughness": ("it is {}", "the surface is {}", "it feels {}", "{}"),
    "material": ("the object is {}", "it feels {}", "the surface is {}",
                 "this material is {}"),
    "defect": ("it is {}", "the part is {}", "inspection shows {}", "{}"),
}


def label_text(label: str) -> str:
    """Text form of a label (compound labels become two words)."""
    return label.lower().replace("-", " ")


def answer_text(task: str, obj: LatentObject, template_idx: int,
                granularity: int = 2) -> str:
    tpl = ANSWER_TEMPLATES[task][template_idx % len(ANSWER_TEMPLATES[task])]
    if task == "hardness":
        return tpl.format(obj.hardness.lower())
    if task == "roughness":
        return tpl.format(obj.roughness.lower())
    if task == "material":
        return tpl.format(" ".join(obj.descriptors))
    if task == "defect":
        return tpl.format(label_text(project_label(obj.defect, granularity)))
    raise ConfigError(f"unknown task {task!r}")


def instruction_text(task: str, template_idx: int) -> str:
    return INSTRUCTION_TEMPLATES[task][template_idx % len(INSTRUCTION_TEMPLATES[task])]


def canonical_description(labels: dict) -> str:
    """Object-level alignment text: hardness + roughness + the 5 descriptors."""
    return " ".join([labels["hardness"].lower(), labels["roughness"].lower(),
                     *labels["descriptors"]])


def build_vocab() -> Vocab:
    """Word vocabulary covering every template, label and descriptor word."""
    texts = []
    for task in TASKS:
        texts.extend(INSTRUCTION_TEMPLATES[task])
        texts.extend(t.format("") for t in ANSWER_TEMPLATES[task])
    texts.extend(w.lower() for w in HARDNESS + ROUGHNESS)
    texts.extend(controlled_vocabulary())
    texts.extend(label_text(l) for l in DefectTaxonomy(5).labels + DefectTaxonomy(2).labels)
    return Vocab.from_texts(texts)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# saturated, affinely extreme hues (every color a vertex of the hull, so a
# linear readout separates them); magenta is reserved for the defect cue
MATERIAL_COLORS = {
    "metal": (0.08, 0.85, 0.90), "plastic": (0.90, 0.10, 0.08),
    "rubber": (0.06, 0.06, 0.06), "wood": (0.92, 0.88, 0.10),
    "ceramic": (0.95, 0.95, 0.95), "glass": (0.10, 0.90, 0.12),
}

NOISE_STD = 0.02


def _grid(h, w):
    return np.meshgrid(np.arange(h), np.arange(w), indexing="ij")


def _shape_mask(shape: str, h: int, w: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = _grid(h, w)
    if shape == "circle":
        return ((yy - cy) ** 2 + (xx - cx) ** 2) <= (0.38 * min(h, w)) ** 2
    half = 0.36 * min(h, w)
    return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)


def _draw_defect(img: np.ndarray, obj: LatentObject, value, rng) -> None:
    """Scratch = thin straight line, dent = filled disk; surface cues sit in
    the center region, edge cues hug the border."""
    h, w, _ = img.shape
    kind, where = obj.defect.split("-")
    yy, xx = _grid(h, w)
    if kind == "Scratch":
        if where == "Surface":
            row = h // 2 + int(rng.integers(-3, 4))
            img[row - 1: row + 1, w // 6: 5 * w // 6, :] = value
        else:
            col = int(rng.integers(1, 4))
            side = int(rng.integers(0, 2))
            col = col if side == 0 else w - 1 - col
            img[h // 8: 7 * h // 8, max(col - 1, 0): col + 1, :] = value
    else:  # Dent
        r = max(3, h // 10)
        if where == "Surface":
            cy = h // 2 + int(rng.integers(-2, 3))
            cx = w // 2 + int(rng.integers(-2, 3))
        else:
            corner = int(rng.integers(0, 4))
            margin = r + 1
            cy = margin if corner < 2 else h - 1 - margin
            cx = margin if corner % 2 == 0 else w - 1 - margin
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r ** 2
        img[disk] = value


def _quadrants(h: int, w: int):
    """Top-left, top-right, bottom-left, bottom-right index slices."""
    return ((slice(0, h // 2), slice(0, w // 2)),
            (slice(0, h // 2), slice(w // 2, w)),
            (slice(h // 2, h), slice(0, w // 2)),
            (slice(h // 2, h), slice(w // 2, w)))


def _indicator_bar(img: np.ndarray, quad, channel: int, value: int, n: int) -> None:
    """Two-row one-hot bar at the quadrant bottom: cell ``value`` of ``n`` lit.

    Level- and variance-coded patterns are not one-vs-all linearly separable,
    so each attribute also gets this redundant positional code; it is what
    makes unseen attribute combinations exactly decodable by simple readouts.
    """
    rows, cols = quad
    qw = cols.stop - cols.start
    cell = max(1, qw // n)
    lo = cols.start + value * cell
    img[rows.stop - 2: rows.stop, lo: lo + cell, channel] = 0.95


def render_vision(obj: LatentObject, rng: np.random.Generator,
                  cfg: GenConfig) -> np.ndarray:
    """Attribute regions: material hue (TL), finish level+stripes (TR),
    texture frequency (BL), shape glyph (BR); defect cue drawn over the full
    frame. Region separation keeps every attribute recoverable even by a
    linear readout, which is what gives unseen attribute combinations a
    clean retrieval optimum at desk scale."""
    h, w = cfg.height, cfg.width
    img = np.full((h, w, 3), 0.08)
    q_tl, q_tr, q_bl, q_br = _quadrants(h, w)

    material = DESCRIPTOR_SLOTS[0].index(obj.descriptors[0])
    color = MATERIAL_COLORS[obj.descriptors[0]]
    for c in range(3):
        img[q_tl + (c,)] = color[c]
    _indicator_bar(img, q_tl, 2, material, 6)

    finish = DESCRIPTOR_SLOTS[1].index(obj.descriptors[1])
    img[q_tr + (0,)] = 0.10 + 0.16 * finish
    xs = np.arange(w - w // 2)
    stripes = 0.5 + 0.35 * np.sin(2 * np.pi * (finish + 1) * xs / len(xs))
    img[q_tr + (2,)] = stripes[None, :]
    _indicator_bar(img, q_tr, 1, finish, 6)

    texture = DESCRIPTOR_SLOTS[2].index(obj.descriptors[2])
    yy, xx = _grid(h - h // 2, w // 2)
    img[q_bl + (1,)] = 0.5 + 0.42 * np.sin((yy + xx) * (texture + 1) * np.pi / 8.0)
    _indicator_bar(img, q_bl, 0, texture, 6)

    gh, gw = h - h // 2, w - w // 2
    gy, gx = _grid(gh, gw)
    gdist = np.sqrt((gy - gh / 2) ** 2 + (gx - gw / 2) ** 2)
    if obj.shape == "circle":
        glyph = np.abs(gdist - 0.3 * gh) < 1.6
    else:
        half = 0.3 * gh
        inside = (np.abs(gy - gh / 2) <= half) & (np.abs(gx - gw / 2) <= half)
        rim = (np.abs(gy - gh / 2) <= half - 2) & (np.abs(gx - gw / 2) <= half - 2)
        glyph = inside & ~rim
    for c in range(3):
        img[q_br + (c,)] += 0.8 * glyph
    _indicator_bar(img, q_br, 1, SHAPES.index(obj.shape), 2)

    if obj.defect != "Normal" and rng.random() < cfg.p_vis:
        # magenta marking: unambiguous against every material color
        _draw_defect(img, obj, np.array([1.0, 0.02, 1.0]), rng)

    img += rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_tactile(obj: LatentObject, rng: np.random.Generator,
                   cfg: GenConfig) -> np.ndarray:
    """Attribute regions: hardness imprint (TL), roughness band (TR), feel
    level (BL), firmness rings (BR); defect cue over the full frame with
    probability ``p_tac``."""
    h, w = cfg.height, cfg.width
    img = np.full((h, w, 3), 0.5)
    q_tl, q_tr, q_bl, q_br = _quadrants(h, w)

    # hardness: sharp deep imprint vs broad shallow one (channel 0, TL)
    gh, gw = h // 2, w // 2
    gy, gx = _grid(gh, gw)
    gdist = np.sqrt((gy - gh / 2) ** 2 + (gx - gw / 2) ** 2)
    if obj.hardness == "Hard":
        img[q_tl + (0,)] += 0.42 * (gdist <= 0.36 * gh)
    else:
        img[q_tl + (0,)] += 0.20 * np.exp(-(gdist ** 2) / (2 * (0.5 * gh) ** 2))
    _indicator_bar(img, q_tl, 1, HARDNESS.index(obj.hardness), 2)

    # roughness: frequency band in channel 1 (TR)
    if obj.roughness == "Textured":
        xs = np.arange(w - w // 2)
        img[q_tr + (1,)] += 0.22 * np.sin(2 * np.pi * 4 * xs / len(xs))[None, :]
    elif obj.roughness == "Rough":
        img[q_tr + (1,)] += rng.uniform(-0.30, 0.30, size=(h // 2, w - w // 2))
    _indicator_bar(img, q_tr, 2, ROUGHNESS.index(obj.roughness), 3)

    # feel slot: level block in channel 2 (BL)
    feel = DESCRIPTOR_SLOTS[3].index(obj.descriptors[3])
    img[q_bl + (2,)] = 0.10 + 0.16 * feel
    _indicator_bar(img, q_bl, 0, feel, 6)

    # firmness slot: concentric ring frequency in channel 0 (BR)
    firm = DESCRIPTOR_SLOTS[4].index(obj.descriptors[4])
    bh, bw = h - h // 2, w - w // 2
    by, bx = _grid(bh, bw)
    bdist = np.sqrt((by - bh / 2) ** 2 + (bx - bw / 2) ** 2)
    img[q_br + (0,)] += 0.35 * np.sin(bdist * (firm + 1) * np.pi / 5.0)
    _indicator_bar(img, q_br, 1, firm, 6)

    if obj.defect != "Normal" and rng.random() < cfg.p_tac:
        _draw_defect(img, obj, 0.02, rng)

    img += rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def _sample_latents(n: int, rng: np.random.Generator, unique: bool) -> list[LatentObject]:
    """Sequential latent draws; per-modality identity tuples are rejected on
    collision while the combinatorial space allows. Defect labels are
    balanced across the fine taxonomy (shuffled round-robin) so K-shot
    availability is predictable."""
    seen_vision: set = set()
    seen_tactile: set = set()
    defect_pool = ("Normal",) + FINE_DEFECTS
    defects = [defect_pool[i % len(defect_pool)] for i in range(n)]
    rng.shuffle(defects)
    out = []
    for oid in range(n):
        for attempt in range(1000):
            descriptors = tuple(slot[rng.integers(0, len(slot))] for slot in DESCRIPTOR_SLOTS)
            hardness = HARDNESS[rng.integers(0, 2)]
            roughness = ROUGHNESS[rng.integers(0, 3)]
            shape = SHAPES[rng.integers(0, 2)]
            vis_key = tuple(descriptors[i] for i in VISION_SLOTS)
            tac_key = (hardness, roughness) + tuple(descriptors[i] for i in TACTILE_SLOTS)
            if not unique or (vis_key not in seen_vision and tac_key not in seen_tactile):
                break
        else:
            warnings.warn("latent uniqueness space exhausted; accepting duplicates")
        seen_vision.add(vis_key)
        seen_tactile.add(tac_key)
        out.append(LatentObject(object_id=oid, hardness=hardness, roughness=roughness,
                                descriptors=descriptors, defect=defects[oid], shape=shape))
    return out


def _assign_splits(n: int, ratios, rng: np.random.Generator) -> dict[int, str]:
    order = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    # every nonzero ratio gets at least one object when possible
    if ratios[1] > 0 and n_val == 0 and n_train > 1:
        n_val, n_train = 1, n_train - 1
    if ratios[2] > 0 and n - n_train - n_val == 0 and n_train > 1:
        n_train -= 1
    out = {}
    for rank, oid in enumerate(order):
        if rank < n_train:
            out[int(oid)] = "train"
        elif rank < n_train + n_val:
            out[int(oid)] = "val"
        else:
            out[int(oid)] = "test"
    return out


def _encode_array(arr: np.ndarray) -> list:
    return np.round(arr, 3).ravel().tolist()


def gen_corpus(path: str, cfg: GenConfig, seed: int) -> dict:
    """Write the JSONL corpus and its manifest; returns the manifest dict.

    Row count = n_objects * len(TASKS) * samples_per_object; splits are
    object-disjoint; byte-identical across re-runs with equal (cfg, seed).
    """
    master = np.random.default_rng(seed)
    latents = _sample_latents(cfg.n_objects, master, cfg.unique_latents)
    split_of = _assign_splits(cfg.n_objects, cfg.split_ratios, master)
    object_seeds = np.random.SeedSequence(seed).spawn(cfg.n_objects)

    rows_written = 0
    counts = {s: 0 for s in SPLITS}
    with open(path, "w", encoding="utf-8") as fh:
        rid = 0
        for obj, seeds in zip(latents, object_seeds):
            rng = np.random.default_rng(seeds)
            for task in cfg.tasks:
                for k in range(cfg.samples_per_object):
                    vision = render_vision(obj, rng, cfg)
                    tactile = render_tactile(obj, rng, cfg)
                    tpl = int(rng.integers(0, 4))
                    row = {
                        "id": rid,
                        "object_id": obj.object_id,
                        "task": task,
                        "instruction": instruction_text(task, tpl),
                        "answer": answer_text(task, obj, tpl, granularity=2),
                        "vision": _encode_array(vision),
                        "tactile": _encode_array(tactile),
                        "labels": obj.labels_dict(),
                        "split": split_of[obj.object_id],
                    }
                    fh.write(json.dumps(row, separators=(",", ":")) + "\n")
                    counts[row["split"]] += 1
                    rid += 1
                    rows_written += 1

    manifest = {
        "rows": rows_written,
        "objects": cfg.n_objects,
        "tasks": list(cfg.tasks),
        "samples_per_object": cfg.samples_per_object,
        "height": cfg.height,
        "width": cfg.width,
        "p_vis": cfg.p_vis,
        "p_tac": cfg.p_tac,
        "split_ratios": list(cfg.split_ratios),
        "split_rows": counts,
        "seed": seed,
        "content_hash": corpus_hash(path),
        "image_paths": None,  # hook for swapping inline arrays for real files
    }
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def manifest_path(corpus_path: str) -> str:
    return str(corpus_path) + ".manifest.json"


def corpus_hash(path: str) -> str:
    """Git-blob style content hash of the corpus file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(blob))
    h.update(blob)
    return h.hexdigest()


def load_corpus(path: str, decode_arrays: bool = True):
    """Rows as dicts; arrays decoded to [H, W, 3] float ndarrays by default."""
    if not os.path.exists(path):
        raise DataError(f"corpus file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {line_no}: invalid JSON ({e})") from None
            rows.append(row)
    if decode_arrays:
        mpath = manifest_path(path)
        if os.path.exists(mpath):
            with open(mpath, encoding="utf-8") as fh:
                m = json.load(fh)
            h, w = m["height"], m["width"]
        else:
            side = int(round((len(rows[0]["vision"]) / 3) ** 0.5))
            h = w = side
        for row in rows:
            row["vision"] = np.asarray(row["vision"], dtype=np.float64).reshape(h, w, 3)
            row["tactile"] = np.asarray(row["tactile"], dtype=np.float64).reshape(h, w, 3)
    return rows


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, row_id, message: str) -> None:
        self.violations.append((row_id, message))

    def __str__(self) -> str:
        if self.ok:
            return "corpus valid (no violations)"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [f"  row {rid}: {msg}" for rid, msg in self.violations[:50]]
        return "\n".join(lines)


_SCHEMA_FIELDS = ("id", "object_id", "task", "instruction", "answer",
                  "vision", "tactile", "labels", "split")


def _answer_consistent(row) -> bool:
    labels = row["labels"]
    task = row["task"]
    answer = row["answer"]
    if task == "hardness":
        return map_to_label_set(answer, HARDNESS) == labels["hardness"]
    if task == "roughness":
        return map_to_label_set(answer, ROUGHNESS) == labels["roughness"]
    if task == "material":
        got = set(extract_descriptors(answer, controlled_vocabulary()))
        return got == set(labels["descriptors"])
    for g in (5, 3, 2):
        mapped = map_to_label_set(answer, DefectTaxonomy(g).labels)
        if mapped != "Unmapped":
            return mapped == project_label(labels["defect"], g)
    return False


def validate(path: str) -> ValidationReport:
    """Schema conformance, label/answer consistency, split disjointness."""
    report = ValidationReport()
    try:
        rows = load_corpus(path, decode_arrays=False)
    except DataError as e:
        report.add(None, str(e))
        return report

    split_objects: dict[str, set] = {s: set() for s in SPLITS}
    seen_ids = set()
    vocab = set(controlled_vocabulary())
    for row in rows:
        rid = row.get("id")
        missing = [f for f in _SCHEMA_FIELDS if f not in row]
        if missing:
            report.add(rid, f"missing fields {missing}")
            continue
        if rid in seen_ids:
            report.add(rid, "duplicate id")
        seen_ids.add(rid)
        if row["task"] not in TASKS:
            report.add(rid, f"unknown task {row['task']!r}")
            continue
        if row["split"] not in SPLITS:
            report.add(rid, f"unknown split {row['split']!r}")
            continue
        labels = row["labels"]
        if labels.get("hardness") not in HARDNESS:
            report.add(rid, f"hardness label {labels.get('hardness')!r} not in set")
        if labels.get("roughness") not in ROUGHNESS:
            report.add(rid, f"roughness label {labels.get('roughness')!r} not in set")
        desc = labels.get("descriptors", [])
        if len(desc) != 5:
            report.add(rid, f"{len(desc)} descriptors, expected exactly 5")
        elif not set(desc) <= vocab:
            report.add(rid, f"descriptors outside controlled vocabulary: {desc}")
        if labels.get("defect") not in ("Normal",) + FINE_DEFECTS:
            report.add(rid, f"defect label {labels.get('defect')!r} not in set")
        for fieldname in ("vision", "tactile"):
            arr = np.asarray(row[fieldname], dtype=np.float64)
            if arr.size % 3 != 0:
                report.add(rid, f"{fieldname} length {arr.size} not divisible by 3")
            elif not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
                report.add(rid, f"{fieldname} values outside [0, 1] or non-finite")
        if not _answer_consistent(row):
            report.add(rid, f"answer {row['answer']!r} inconsistent with labels")
        split_objects[row["split"]].add(row["object_id"])

    for a in range(len(SPLITS)):
        for b in range(a + 1, len(SPLITS)):
            shared = split_objects[SPLITS[a]] & split_objects[SPLITS[b]]
            if shared:
                report.add(None, f"objects {sorted(shared)[:5]} appear in both "
                                 f"{SPLITS[a]} and {SPLITS[b]}")
    return report


# ---------------------------------------------------------------------------
# K-shot sampling
# ---------------------------------------------------------------------------

def kshot_sample(rows, granularity: int, k: int, seed: int) -> list:
    """Exactly K defect-task train rows per category at the requested
    granularity, uniform without replacement; answers are re-templated at
    that granularity so adaptation trains on the right label text."""
    taxonomy = DefectTaxonomy(granularity)
    pools: dict[str, list] = {label: [] for label in taxonomy.labels}
    for row in rows:
        if row["task"] != "defect" or row["split"] != "train":
            continue
        label = project_label(row["labels"]["defect"], granularity)
        pools[label].append(row)

    rng = np.random.default_rng(seed)
    picked = []
    for label in taxonomy.labels:
        pool = pools[label]
        if len(pool) < k:
            raise AvailabilityError(
                f"category {label!r} has {len(pool)} train rows, need K={k}")
        idx = rng.choice(len(pool), size=k, replace=False)
        for i in sorted(int(j) for j in idx):
            row = dict(pools[label][i])
            tpl = row["id"] % len(ANSWER_TEMPLATES["defect"])
            text = label_text(project_label(row["labels"]["defect"], granularity))
            row["answer"] = ANSWER_TEMPLATES["defect"][tpl].format(text)
            picked.append(row)
    return picked
