import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itfr.model import (DegenerateEmbedding, EmbeddingTable, bpr_loss_and_grad, init_embeddings,
                        load_checkpoint, save_checkpoint)

from .oracles import bpr_loss_direct, fd_triple_grad, rel_err


def _table(U, V, mode="normalized", tau=1.0, l2=0.0):
    return EmbeddingTable(np.asarray(U, float), np.asarray(V, float), mode, tau, l2)


def test_init_deterministic():
    a, b = init_embeddings(5, 7, 4, seed=3), init_embeddings(5, 7, 4, seed=3)
    assert np.array_equal(a.user_embeddings, b.user_embeddings)
    assert np.array_equal(a.item_embeddings, b.item_embeddings)


def test_init_zero_scale_rejected_when_normalized():
    t = init_embeddings(2, 2, 3, scale=0.0, scorer_mode="normalized")
    assert not t.user_embeddings.any()
    with pytest.raises(DegenerateEmbedding, match="degenerate embedding"):
        t.score(0, 0)


def test_init_mean_statistics():
    t = init_embeddings(2000, 10, 64, seed=0, scale=0.1)
    x = t.user_embeddings.ravel()
    assert abs(x.mean()) < 5 * 0.1 / math.sqrt(x.size)


def test_score_collinear():
    t = _table([[1.0, 2.0]], [[2.0, 4.0]], tau=2.0)
    assert t.score(0, 0) == pytest.approx(2.0, abs=1e-15)


def test_score_orthogonal():
    assert _table([[1.0, 0.0]], [[0.0, 3.0]]).score(0, 0) == 0.0


def test_score_diagonal():
    assert _table([[1.0, 0.0]], [[1.0, 1.0]]).score(0, 0) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_dot_score():
    assert _table([[1.0, 2.0]], [[3.0, -1.0]], mode="dot").score(0, 0) == 1.0


def test_bounded_scores_exhaustive():
    rng = np.random.default_rng(0)
    t = _table(rng.normal(size=(6, 5)) * 10, rng.normal(size=(9, 5)), tau=3.0)
    assert np.all(np.abs(t.score_matrix()) <= 3.0 + 1e-12)


def test_ranking_invariant_to_user_scale():
    rng = np.random.default_rng(1)
    t = _table(rng.normal(size=(3, 4)), rng.normal(size=(12, 4)), tau=2.0)
    before = np.argsort(-t.score_matrix()[1], kind="stable")
    t.user_embeddings[1] *= 7.5
    after = np.argsort(-t.score_matrix()[1], kind="stable")
    assert np.array_equal(before, after)


def test_bpr_equal_scores_is_ln2():
    t = _table([[1.0, 0.0]], [[1.0, 1.0], [1.0, -1.0]], mode="dot")
    loss, _ = bpr_loss_and_grad(t, 0, 0, 1)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_bpr_unit_margin():
    t = _table([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], mode="dot")
    loss, _ = bpr_loss_and_grad(t, 0, 0, 1)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    assert loss == pytest.approx(0.3132617, abs=1e-7)


def test_bpr_same_item_rejected():
    t = _table([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], mode="dot")
    with pytest.raises(ValueError, match="positive equals negative"):
        bpr_loss_and_grad(t, 0, 1, 1)


@pytest.mark.parametrize("mode", ["dot", "normalized"])
@pytest.mark.parametrize("l2", [0.0, 0.01])
def test_gradient_matches_finite_differences(mode, l2):
    rng = np.random.default_rng(7)
    t = _table(rng.normal(size=(4, 4)), rng.normal(size=(6, 4)), mode=mode, tau=2.5, l2=l2)
    for _ in range(50):
        u = rng.integers(4)
        i, j = rng.choice(6, size=2, replace=False)
        loss, g = bpr_loss_and_grad(t, u, i, j)
        assert loss == pytest.approx(bpr_loss_direct(t, u, i, j), rel=1e-12)
        num = fd_triple_grad(t, u, i, j)
        assert rel_err(np.concatenate([g.user, g.pos_item, g.neg_item]), num) <= 1e-4


def test_saturated_gradient_is_zero():
    t = _table([[100.0, 0.0]], [[100.0, 0.0], [-100.0, 0.0]], mode="dot")
    loss, g = bpr_loss_and_grad(t, 0, 0, 1)
    assert loss == 0.0
    assert not g.user.any() and not g.pos_item.any() and not g.neg_item.any()


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-20, 20), delta=st.floats(0.01, 5))
def test_bpr_monotone_in_margin(a, delta):
    def loss_at(margin):
        t = _table([[1.0, 0.0]], [[margin, 0.0], [0.0, 1.0]], mode="dot")
        return bpr_loss_and_grad(t, 0, 0, 1)[0]
    assert loss_at(a + delta) < loss_at(a)


def test_checkpoint_roundtrip(tmp_path):
    t = init_embeddings(3, 5, 4, seed=2, scorer_mode="normalized", tau=4.0, l2=1e-5)
    save_checkpoint(t, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert np.array_equal(back.user_embeddings, t.user_embeddings)
    assert np.array_equal(back.item_embeddings, t.item_embeddings)
    assert (back.scorer_mode, back.tau, back.l2, back.seed) == ("normalized", 4.0, 1e-5, 2)
    raw = (tmp_path / "c.bin").read_bytes()
    body = raw[raw.index(b"\n") + 1:]
    assert np.frombuffer(body[:8], "<f8")[0] == t.user_embeddings[0, 0]
