"""Q-Former: query extraction, shared-space projection, pooling, prefix map."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import refimpl
from vtlm import tensor as T
from vtlm.encoders import TokenSeq
from vtlm.errors import ContractError, ShapeError
from vtlm.qformer import (PrefixMapper, PrefixTokens, QFormer, SharedProjections,
                          SharedSpaceConfig, pool)
from vtlm.tensor import Tensor

CFG = SharedSpaceConfig(L_q=4, d_q=32, d=16, d_llm=48, depth=2, heads=4)


def make_qformer(modality="vision", seed=99, cfg=CFG, enc_width=32):
    return QFormer(modality, cfg, enc_width, np.random.default_rng(seed))


def test_extract_output_shape():
    qf = make_qformer()
    e = TokenSeq(Tensor(np.random.default_rng(0).normal(size=(16, 32))), "vision")
    assert qf.extract(e).shape == (4, 32)


def test_extract_modality_mismatch():
    qf = make_qformer("vision")
    e = TokenSeq(Tensor(np.zeros((16, 32))), "tactile")
    with pytest.raises(ContractError):
        qf.extract(e)


def test_zero_value_weights_make_output_independent_of_encoder_tokens():
    qf = make_qformer()
    for block in qf.blocks:
        block.xattn.wv.w.data[:] = 0.0
        block.xattn.wv.b.data[:] = 0.0
    e1 = TokenSeq(Tensor(np.zeros((16, 32))), "vision")
    e2 = TokenSeq(Tensor(np.random.default_rng(1).normal(size=(16, 32))), "vision")
    out1 = qf.extract(e1).data
    out2 = qf.extract(e2).data
    np.testing.assert_allclose(out1, out2, atol=1e-12)


def test_extract_golden_vs_independent_reimpl():
    qf = make_qformer(seed=99)
    e = np.random.default_rng(3).normal(size=(16, 32))
    out = qf.extract(TokenSeq(Tensor(e), "vision")).data
    params = {k: v.data for k, v in qf.params().items()}
    np.testing.assert_allclose(out, refimpl.qformer_forward(e, params, 2, 4), atol=1e-12)
    np.testing.assert_allclose(
        out[0, :4],
        [0.1739514807894784, -0.8615264937541856, -0.8512108751384458, -0.1574090172327505],
        atol=1e-12)


def test_query_banks_are_independent_parameters():
    rng = np.random.default_rng(0)
    qv = QFormer("vision", CFG, 32, rng)
    qt = QFormer("tactile", CFG, 32, rng)
    assert not np.array_equal(qv.queries.data, qt.queries.data)
    e = np.random.default_rng(5).normal(size=(16, 32))
    out_v = qv.extract(TokenSeq(Tensor(e), "vision")).data
    out_t = qt.extract(TokenSeq(Tensor(e), "tactile")).data
    assert not np.allclose(out_v, out_t)  # swapping banks is detectable


# -- projection / normalization ----------------------------------------------

def make_projections(seed=0, cfg=CFG, d_text=32):
    return SharedProjections(cfg, d_text, np.random.default_rng(seed))


def test_project_normalize_unit_rows():
    proj = make_projections()
    q = Tensor(np.random.default_rng(1).normal(size=(4, 32)))
    out = proj.project_normalize(q, "vision")
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-6)


def test_identity_projection_passthrough():
    cfg = SharedSpaceConfig(L_q=2, d_q=8, d=8, d_llm=16, depth=1, heads=2)
    proj = make_projections(cfg=cfg, d_text=8)
    proj.w_v.w.data = np.eye(8)
    row = np.zeros((1, 8))
    row[0, 3] = 1.0  # already unit
    out = proj.project_normalize(Tensor(row), "vision")
    np.testing.assert_allclose(out.data, row, atol=1e-9)


def test_project_normalize_matches_direct_formula():
    proj = make_projections()
    q = np.random.default_rng(2).normal(size=(6, 32))
    out = proj.project_normalize(Tensor(q), "tactile").data
    raw = q @ proj.w_t.w.data
    expected = raw / (np.linalg.norm(raw, axis=-1, keepdims=True) + 1e-12)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_project_text_unit_and_formula():
    proj = make_projections()
    cls = np.random.default_rng(3).normal(size=32)
    out = proj.project_text(Tensor(cls))
    assert out.shape == (16,)
    assert np.linalg.norm(out.data) == pytest.approx(1.0, abs=1e-6)
    raw = cls @ proj.w_text.w.data
    np.testing.assert_allclose(out.data, raw / (np.linalg.norm(raw) + 1e-12), atol=1e-12)


# -- pooling -------------------------------------------------------------------

def test_pool_equal_rows_identity():
    v = np.array([0.6, 0.8, 0.0])
    out = pool(Tensor(np.tile(v, (5, 1))))
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_pool_basis_rows():
    out = pool(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)
    assert np.linalg.norm(out.data) == pytest.approx(np.sqrt(0.5), abs=1e-12)


def test_pool_random_oracle_and_no_renormalization():
    rows = np.random.default_rng(4).normal(size=(7, 5))
    rows /= np.linalg.norm(rows, axis=-1, keepdims=True)
    out = pool(Tensor(rows))
    np.testing.assert_allclose(out.data, rows.mean(axis=0), atol=1e-12)
    renorm = pool(Tensor(rows), renormalize=True)
    assert np.linalg.norm(renorm.data) == pytest.approx(1.0, abs=1e-9)


def test_pool_empty_rejected():
    with pytest.raises(ContractError):
        pool(Tensor(np.zeros((0, 4))))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=2, max_value=6),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_pool_norm_in_unit_ball(n_rows, dim, seed):
    rows = np.random.default_rng(seed).normal(size=(n_rows, dim))
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    rows = rows / np.where(norms > 0, norms, 1.0)
    out = pool(Tensor(rows))
    assert np.linalg.norm(out.data) <= 1.0 + 1e-6


# -- prefix --------------------------------------------------------------------

def test_to_prefix_row_counts():
    cfg32 = SharedSpaceConfig(L_q=32, d_q=8, d=8, d_llm=16, depth=1, heads=2)
    pm = PrefixMapper(cfg32, np.random.default_rng(0))
    q = Tensor(np.random.default_rng(1).normal(size=(32, 8)))
    assert pm.to_prefix(q, q).tokens.shape == (64, 16)

    pm4 = PrefixMapper(SharedSpaceConfig(L_q=4, d_q=8, d=8, d_llm=16, depth=1, heads=2),
                       np.random.default_rng(0))
    q4 = Tensor(np.random.default_rng(1).normal(size=(4, 8)))
    assert pm4.to_prefix(q4, q4).tokens.shape == (8, 16)


def test_to_prefix_vision_first_order():
    cfg = SharedSpaceConfig(L_q=2, d_q=4, d=4, d_llm=4, depth=1, heads=2)
    pm = PrefixMapper(cfg, np.random.default_rng(0))
    pm.to_llm_v.w.data = np.eye(4)
    pm.to_llm_v.b.data[:] = 0.0
    pm.to_llm_t.w.data = np.eye(4)
    pm.to_llm_t.b.data[:] = 0.0
    qv = Tensor(np.full((2, 4), 1.0))
    qt = Tensor(np.full((2, 4), 2.0))
    out = pm.to_prefix(qv, qt).tokens.data
    np.testing.assert_array_equal(out[:2], np.full((2, 4), 1.0))
    np.testing.assert_array_equal(out[2:], np.full((2, 4), 2.0))


def test_single_modality_ablation_uses_placeholder_bank():
    pm = PrefixMapper(CFG, np.random.default_rng(0))
    qv = Tensor(np.random.default_rng(1).normal(size=(4, 32)))
    out = pm.to_prefix(qv, None)
    assert out.tokens.shape == (8, 48)
    expected_t = pm.placeholder_t.data @ pm.to_llm_t.w.data + pm.to_llm_t.b.data
    np.testing.assert_allclose(out.tokens.data[4:], expected_t, atol=1e-12)
    with pytest.raises(ContractError):
        pm.to_prefix(None, None)


def test_prefix_width_mismatch_raises():
    pm = PrefixMapper(CFG, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        pm.to_prefix(Tensor(np.zeros((4, 16))), Tensor(np.zeros((4, 16))))


def test_prefix_row_count_validation():
    with pytest.raises(ShapeError):
        PrefixTokens(tokens=Tensor(np.zeros((7, 8))), L_q=4)


def test_retrieval_argmax_invariant_to_temperature():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(10, 8))
    t = rng.normal(size=(10, 8))
    sim = z @ t.T
    base = sim.argmax(axis=1)
    for tau in (0.01, 0.07, 1.0, 50.0):
        assert np.array_equal((sim / tau).argmax(axis=1), base)
