"""Second-stage scoring and reranking against naive loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagroute.core import TIE_LOWEST_INDEX, AlignedAdapter, RoutingError, ShapeError, TASK
from lagroute.linalg import align
from lagroute.spectral import Selection, rerank, spectr_score
from oracles import dense_svd, make_aligned, make_raw, naive_spectr, orthonormal_rows


def planes_adapter(rows, h=8, **kw):
    r = len(rows)
    A_star = np.zeros((r, h), dtype=np.float32)
    for i, axis in enumerate(rows):
        A_star[i, axis] = 1.0
    return AlignedAdapter(
        id=kw.get("id", "planes"),
        layer="layer.0",
        library_tag=TASK,
        A_star=A_star,
        B_star=np.zeros((h, r), dtype=np.float32),
        singular_values=np.linspace(2.0, 1.0, r).astype(np.float32),
    )


def test_pythagorean_score():
    adapter = planes_adapter([0, 1])
    x = np.array([3, 4, 0, 0, 0, 0, 0, 0], dtype=np.float32)
    score, projected = spectr_score(adapter, x)
    assert score == pytest.approx(5.0, abs=1e-6)
    np.testing.assert_allclose(projected, [3.0, 4.0])


def test_zero_token_scores_zero():
    adapter = make_aligned(np.random.default_rng(0), 8, 3)
    score, projected = spectr_score(adapter, np.zeros(8, dtype=np.float32))
    assert score == 0.0 and np.all(projected == 0.0)


def test_score_matches_dense_svd_projection():
    rng = np.random.default_rng(5)
    raw = make_raw(rng, 16, 16, 6)
    aligned = align(raw)
    _, _, Vt = dense_svd(raw.B, raw.A)
    x = rng.standard_normal(16).astype(np.float32)
    score, _ = spectr_score(aligned, x)
    dense = np.linalg.norm(Vt[:6] @ x.astype(np.float64))
    assert score == pytest.approx(dense, rel=1e-5)


def test_shape_mismatch_rejected():
    adapter = make_aligned(np.random.default_rng(1), 8, 2)
    with pytest.raises(ShapeError):
        spectr_score(adapter, np.zeros(9, dtype=np.float32))


def test_selection_invariants():
    adapter = planes_adapter([0, 1])
    x = np.array([3, 4, 0, 0, 0, 0, 0, 0], dtype=np.float32)
    sel = rerank([0], [adapter], x, TIE_LOWEST_INDEX)
    assert isinstance(sel, Selection)
    assert sel.projected.shape == (adapter.r_eff,)
    assert sel.spectr_score == pytest.approx(np.linalg.norm(sel.projected), abs=1e-6)
    assert not sel.projected.flags.writeable


def test_single_candidate_wins_regardless_of_score():
    rng = np.random.default_rng(2)
    adapters = [make_aligned(rng, 8, 2, id=f"a{i}") for i in range(3)]
    x = rng.standard_normal(8).astype(np.float32)
    sel = rerank([2], adapters, x, TIE_LOWEST_INDEX)
    assert sel.adapter_index == 2 and sel.adapter_id == "a2"


def test_in_span_token_wins_with_full_norm():
    rng = np.random.default_rng(3)
    h, r = 12, 3
    block = orthonormal_rows(rng, 2 * r, h)
    a = AlignedAdapter(
        id="a", layer="l", library_tag=TASK, A_star=block[:r].astype(np.float32),
        B_star=rng.standard_normal((h, r)).astype(np.float32),
        singular_values=np.array([3, 2, 1], dtype=np.float32),
    )
    b = AlignedAdapter(
        id="b", layer="l", library_tag=TASK, A_star=block[r:].astype(np.float32),
        B_star=rng.standard_normal((h, r)).astype(np.float32),
        singular_values=np.array([3, 2, 1], dtype=np.float32),
    )
    coeff = rng.standard_normal(r)
    x = (block[r:].T @ coeff).astype(np.float32)
    sel = rerank([0, 1], [a, b], x, TIE_LOWEST_INDEX)
    assert sel.adapter_index == 1
    assert sel.spectr_score == pytest.approx(np.linalg.norm(x), rel=1e-5)


def test_rerank_matches_exhaustive_loop():
    rng = np.random.default_rng(4)
    adapters = [make_aligned(rng, 16, 4, id=f"a{i}") for i in range(20)]
    for _ in range(25):
        x = rng.standard_normal(16).astype(np.float32)
        sel = rerank(range(20), adapters, x, TIE_LOWEST_INDEX)
        scores = [naive_spectr(a, x) for a in adapters]
        best = max(range(20), key=lambda i: (scores[i], -i))
        assert sel.adapter_index == best
        assert sel.spectr_score == scores[best]


def test_rerank_tie_breaks_to_lowest_index():
    rng = np.random.default_rng(6)
    a = make_aligned(rng, 8, 2, id="a")
    twin = AlignedAdapter(
        id="b", layer="layer.0", library_tag=TASK, A_star=a.A_star, B_star=a.B_star,
        singular_values=a.singular_values,
    )
    x = rng.standard_normal(8).astype(np.float32)
    assert rerank([0, 1], [a, twin], x, TIE_LOWEST_INDEX).adapter_index == 0
    assert rerank([1, 0], [a, twin], x, TIE_LOWEST_INDEX).adapter_index == 0


def test_empty_candidates_raise():
    with pytest.raises(RoutingError):
        rerank([], [], np.zeros(4, dtype=np.float32), TIE_LOWEST_INDEX)


def test_bad_candidate_index_raises():
    adapter = make_aligned(np.random.default_rng(7), 8, 2)
    with pytest.raises(RoutingError):
        rerank([3], [adapter], np.zeros(8, dtype=np.float32), TIE_LOWEST_INDEX)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 4.0, -8.0]))
def test_property_score_homogeneous_in_exact_scales(seed, c):
    rng = np.random.default_rng(seed)
    adapter = make_aligned(rng, 10, 3)
    x = rng.standard_normal(10).astype(np.float32)
    base, _ = spectr_score(adapter, x)
    scaled, _ = spectr_score(adapter, (c * x).astype(np.float32))
    assert scaled == abs(c) * base


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_property_score_bounded_by_token_norm(seed):
    rng = np.random.default_rng(seed)
    h, r = 12, 4
    adapter = make_aligned(rng, h, r)
    x = rng.standard_normal(h).astype(np.float32)
    score, _ = spectr_score(adapter, x)
    assert score <= np.linalg.norm(x.astype(np.float64)) * (1 + 1e-5)
    # In-span input attains the bound; adding an out-of-span component breaks it.
    coeff = rng.standard_normal(r)
    x_in = (adapter.A_star.astype(np.float64).T @ coeff).astype(np.float32)
    in_score, _ = spectr_score(adapter, x_in)
    assert in_score == pytest.approx(np.linalg.norm(x_in.astype(np.float64)), rel=1e-5)


def test_equality_only_in_span():
    rng = np.random.default_rng(8)
    h, r = 12, 3
    adapter = make_aligned(rng, h, r)
    basis = adapter.A_star.astype(np.float64)
    z = rng.standard_normal(h)
    out = z - basis.T @ (basis @ z)
    out /= np.linalg.norm(out)
    x = (0.6 * basis[0] + 0.8 * out).astype(np.float32)
    score, _ = spectr_score(adapter, x)
    assert score < np.linalg.norm(x) - 0.1
