"""Shared test fixtures: the 20-sentence taxonomy-mapping suite and its
independent rule oracle."""

from vtlm.datagen import DefectTaxonomy

# (generated text, granularity, expected label)
TAXONOMY_SENTENCES = [
    ("Normal", 2, "Normal"),
    ("  scratch ", 3, "Scratch"),
    ("there is a dent on the edge", 5, "Dent-Edge"),
    ("it is normal", 2, "Normal"),
    ("the part is defect", 2, "Defect"),
    ("inspection shows scratch surface", 5, "Scratch-Surface"),
    ("dent surface", 5, "Dent-Surface"),
    ("a long scratch runs along the edge", 5, "Scratch-Edge"),
    ("DENT", 3, "Dent"),
    ("Scratch-Edge", 5, "Scratch-Edge"),
    ("the piece looks fine", 2, "Unmapped"),
    ("totally flawless finish", 3, "Unmapped"),
    ("it is a scratch", 2, "Unmapped"),           # scratch is not a 2-way label
    ("normal surface with no issues", 5, "Normal"),
    ("dent", 5, "Unmapped"),                      # location missing at 5-way
    ("deep dent near the surface", 3, "Dent"),
    ("the scratch sits on the surface", 3, "Scratch"),
    ("edge", 5, "Unmapped"),                      # type missing at 5-way
    ("it is dent edge", 3, "Dent"),
    ("abnormal", 2, "Unmapped"),                  # no word-level label match
]


def oracle_map(text: str, granularity: int) -> str:
    """Independent restatement of the mapping rule: normalize, exact label
    match, else longest label whose words all appear, else Unmapped."""
    import re

    tokens = re.sub(r"[^a-z0-9]+", " ", text.lower()).split()
    labels = DefectTaxonomy(granularity).labels
    norm = {label: re.sub(r"[^a-z0-9]+", " ", label.lower()).split() for label in labels}
    for label, parts in norm.items():
        if tokens == parts:
            return label
    best, best_len = "Unmapped", -1
    for label, parts in norm.items():
        if all(p in tokens for p in parts):
            length = sum(len(p) for p in parts)
            if length > best_len:
                best, best_len = label, length
    return best
