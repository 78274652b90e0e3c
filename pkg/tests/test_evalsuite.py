"""Metrics: oracles, closed forms, mapping rules, report serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import TAXONOMY_SENTENCES, oracle_map
from vtlm.datagen import DefectTaxonomy
from vtlm.errors import ContractError
from vtlm.evalsuite import (UNMAPPED, DescriptorSets, HashedBagEmbedder, MetricReport,
                            accuracy, descriptor_recall, extract_descriptors,
                            map_to_label_set, map_to_taxonomy, mean_task_score,
                            select_checkpoint, semantic_similarity)


# -- accuracy ---------------------------------------------------------------

def test_accuracy_closed_forms():
    labels = ("Hard", "Soft")
    assert accuracy(["Hard", "Soft"], ["Hard", "Soft"], labels) == 1.0
    preds = ["Hard"] * 47 + ["Soft"] * 3
    golds = ["Hard"] * 50
    assert accuracy(preds, golds, labels) == pytest.approx(0.94)
    assert accuracy([UNMAPPED, "Hard"], ["Hard", "Hard"], labels) == 0.5


def test_accuracy_validation():
    with pytest.raises(ContractError):
        accuracy(["a"], [], ("a",))
    with pytest.raises(ContractError):
        accuracy([], [], ("a",))


# -- descriptor recall --------------------------------------------------------

def test_descriptor_recall_closed_forms():
    g = ("metal", "glossy", "cool", "firm", "grainy")
    assert descriptor_recall([DescriptorSets(g, g)]) == 1.0
    assert descriptor_recall([DescriptorSets(g, ("wood", "matte"))]) == 0.0
    two = DescriptorSets(g, ("metal", "glossy"))
    three = DescriptorSets(g, ("cool", "firm", "grainy"))
    assert descriptor_recall([two, three]) == pytest.approx(0.5)


def test_descriptor_recall_brute_force_1000_random():
    rng = np.random.default_rng(0)
    pool = [f"w{i}" for i in range(12)]
    samples, expected = [], []
    for _ in range(1000):
        g = tuple(rng.choice(pool, size=5, replace=False))
        p = tuple(rng.choice(pool, size=rng.integers(0, 8), replace=False))
        samples.append(DescriptorSets(g, p))
        expected.append(len(set(p) & set(g)) / len(set(g)))
    assert descriptor_recall(samples) == sum(expected) / len(expected)


def test_descriptor_sets_validation():
    with pytest.raises(ContractError):
        DescriptorSets((), ("a",))


def test_extract_descriptors_rules():
    vocab = ("smooth", "metal")
    assert extract_descriptors("smooth smooth metal xyz", vocab) == ["smooth", "metal"]
    assert extract_descriptors("", vocab) == []
    fixtures = [
        ("the metal feels smooth and warm", ("metal", "smooth", "warm"),
         ["metal", "smooth", "warm"]),
        ("Glossy, glossy surface!", ("glossy",), ["glossy"]),
        ("nothing relevant here", ("metal",), []),
    ]
    for text, vocab, want in fixtures:
        assert extract_descriptors(text, vocab) == want


# -- semantic similarity ----------------------------------------------------------

def test_semantic_similarity_closed_forms():
    emb = HashedBagEmbedder(32)
    assert semantic_similarity(["hard metal"], ["hard metal"], emb) == pytest.approx(1.0)

    calls = {"n": 0}

    def orthogonal(text):
        v = np.zeros(4)
        v[calls["n"] % 4] = 1.0
        calls["n"] += 1
        return v

    assert semantic_similarity(["a"], ["b"], orthogonal) == pytest.approx(0.0)

    def half(text):  # identical pair then orthogonal pair
        vecs = {"x": [1, 0], "y": [1, 0], "p": [1, 0], "q": [0, 1]}
        return np.array(vecs[text], dtype=float)

    assert semantic_similarity(["x", "p"], ["y", "q"], half) == pytest.approx(0.5)


def test_hashed_embedder_deterministic_and_nonzero():
    emb = HashedBagEmbedder(64)
    a, b = emb("cool dense metal"), emb("cool dense metal")
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(emb("")) > 0
    assert semantic_similarity([""], [""], emb) == pytest.approx(1.0)
    assert -1.0 <= semantic_similarity(["cool"], ["warm"], emb) <= 1.0


# -- mean task score ---------------------------------------------------------------

def test_mean_task_score_reference_point():
    score = mean_task_score(0.8889, 0.7513, 0.5481)
    assert score == pytest.approx(0.7294, abs=1e-4)
    # consistent with the reported 72.95% within 0.01 percentage points
    assert abs(score * 100 - 72.95) <= 0.01 + 1e-9


def test_mean_task_score_bounds_and_permutation():
    assert mean_task_score(1, 1, 1) == 1.0
    assert mean_task_score(0, 0, 0) == 0.0
    vals = (0.3, 0.7, 0.2)
    base = mean_task_score(*vals)
    assert mean_task_score(vals[2], vals[0], vals[1]) == pytest.approx(base, abs=1e-15)
    with pytest.raises(ContractError):
        mean_task_score(1.2, 0, 0)


# -- checkpoint selection ------------------------------------------------------------

def _report(score):
    return MetricReport(mean_task=score)


def test_select_checkpoint_rules():
    assert select_checkpoint([_report(0.4)]) == 0
    assert select_checkpoint([_report(s) for s in (0.1, 0.2, 0.9)]) == 2
    assert select_checkpoint([_report(s) for s in (0.5, 0.9, 0.9, 0.2)]) == 1  # tie -> earliest
    with pytest.raises(ContractError):
        select_checkpoint([])


def test_select_checkpoint_fig5_shaped_fixture():
    curve = [0.42, 0.55, 0.61, 0.66, 0.71, 0.7295, 0.72, 0.715, 0.73, 0.728, 0.71]
    best = max(range(len(curve)), key=lambda i: (curve[i], -i))
    assert select_checkpoint([_report(s) for s in curve]) == best == 8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=20))
def test_select_checkpoint_matches_linear_scan(scores):
    got = select_checkpoint([_report(s) for s in scores])
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    assert got == best


# -- taxonomy mapping -----------------------------------------------------------------

def test_map_examples():
    assert map_to_taxonomy("Normal", DefectTaxonomy(2)) == "Normal"
    assert map_to_taxonomy("  scratch ", DefectTaxonomy(3)) == "Scratch"
    assert map_to_taxonomy("there is a dent on the edge", DefectTaxonomy(5)) == "Dent-Edge"


def test_map_20_sentence_fixture_agrees_with_rule_oracle():
    for text, g, expected in TAXONOMY_SENTENCES:
        got = map_to_taxonomy(text, DefectTaxonomy(g))
        assert got == oracle_map(text, g) == expected, (text, g, got)


def test_map_is_idempotent():
    for g in (2, 3, 5):
        tax = DefectTaxonomy(g)
        for label in tax.labels:
            assert map_to_taxonomy(label, tax) == label
            assert map_to_taxonomy(map_to_taxonomy(label, tax), tax) == label


def test_map_prefers_longest_compound():
    tax = DefectTaxonomy(5)
    assert map_to_taxonomy("scratch and dent on the edge", tax) in ("Scratch-Edge",)
    # scratchedge (11 chars) beats dentedge (8) when both fully present


def test_map_word_level_not_substring():
    assert map_to_label_set("abnormal part", ("Normal", "Defect")) == UNMAPPED
    assert map_to_label_set("dented", ("Normal", "Scratch", "Dent")) == UNMAPPED


# -- report serialization ---------------------------------------------------------------

def test_metric_report_json_round_trip():
    r = MetricReport(hardness_acc=0.9, roughness_acc=0.8, descriptor_recall=0.5,
                     semantic_sim=0.95, mean_task=0.7333,
                     defect_acc={2: 1.0, 3: 0.9}, retrieval={"mean": 0.97},
                     counts={"hardness": 40})
    back = MetricReport.from_json_dict(
        __import__("json").loads(r.to_json()))
    assert back.defect_acc == {2: 1.0, 3: 0.9}
    assert back.hardness_acc == 0.9
    assert back.counts == {"hardness": 40}


def test_metric_report_csv_shape():
    r = MetricReport(hardness_acc=0.5, counts={"hardness": 10})
    header = MetricReport.csv_header()
    row = r.csv_row(epoch=3)
    assert len(header.split(",")) == len(row.split(","))
    assert row.split(",")[0] == "3"
    assert row.split(",")[1] == "0.500000"


def test_metric_report_rejects_out_of_range():
    with pytest.raises(ContractError):
        MetricReport(hardness_acc=1.5)
    with pytest.raises(ContractError):
        MetricReport(defect_acc={2: -0.1})
