import numpy as np
import pytest

from itfr.data import InteractionDataset
from itfr.losses import (EpochGradientAccumulator, accumulate, group_loss_and_grad,
                         group_plain_losses, partition_batch, sharp_group,
                         sharpness_aware_loss_and_grad)
from itfr.model import EmbeddingTable

from .oracles import fd_group_grad, group_loss_direct, rel_err


def _ds(n_users=6, n_items=8):
    return InteractionDataset(n_users, n_items, np.zeros((0, 2)), np.arange(n_users) % 2,
                              np.arange(n_items) % 2)


def _table(n_users=6, n_items=8, d=4, mode="normalized", seed=0, l2=0.0):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(size=(n_users, d)), rng.normal(size=(n_items, d)),
                          mode, 2.0, l2)


def _batch(rng, size, n_users=6, n_items=8):
    u = rng.integers(n_users, size=size)
    i = rng.integers(n_items, size=size)
    j = (i + 1 + rng.integers(n_items - 1, size=size)) % n_items
    return np.column_stack([u, i, j])


def test_partition_one_per_cell():
    ds = _ds()
    # users 0,1 -> groups 0,1; items 0,1 -> groups 0,1
    batch = [(0, 0, 3), (0, 1, 2), (1, 0, 5), (1, 1, 4)]
    gb = partition_batch(batch, ds)
    assert gb.counts.tolist() == [1, 1, 1, 1]
    assert gb.members(1).tolist() == [[0, 1, 2]]


def test_partition_ignores_negative_group():
    ds = _ds()
    gb = partition_batch([(0, 0, 1), (2, 2, 3), (4, 4, 7)], ds)
    assert gb.counts.tolist() == [3, 0, 0, 0]


def test_partition_sizes_sum():
    ds = _ds()
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = _batch(rng, rng.integers(1, 50))
        gb = partition_batch(batch, ds)
        assert gb.counts.sum() == len(batch)
        for g in range(4):
            m = gb.members(g)
            assert np.all(ds.cell_of(m[:, 0], m[:, 1]) == g)


def test_plain_losses_mean_and_absent():
    ds, t = _ds(), _table()
    triples = [(0, 0, 1), (2, 4, 3)]
    gb = partition_batch(triples, ds)
    losses = group_plain_losses(gb, t)
    assert losses[0] == pytest.approx(group_loss_direct(t, triples), abs=1e-12)
    assert np.isnan(losses[1:]).all()


def test_plain_losses_against_resummation():
    ds, rng = _ds(), np.random.default_rng(3)
    t = _table(mode="dot", l2=0.01)
    for _ in range(10):
        cell_triples = [tuple(x) for x in _batch(rng, 40) if ds.cell_of(x[0], x[1]) == 0][:5]
        losses = group_plain_losses(partition_batch(cell_triples, ds), t)
        assert abs(losses[0] - group_loss_direct(t, cell_triples)) <= 1e-12


@pytest.mark.parametrize("mode", ["dot", "normalized"])
def test_group_gradient_is_mean_of_triples(mode):
    t, rng = _table(mode=mode, l2=0.005), np.random.default_rng(4)
    triples = [tuple(x) for x in _batch(rng, 7)]
    _, grad = group_loss_and_grad(t, triples)
    gu, gi = fd_group_grad(t, triples)
    a = np.concatenate([grad.user_grad.ravel(), grad.item_grad.ravel()])
    n = np.concatenate([np.concatenate([gu[u] for u in grad.user_rows]),
                        np.concatenate([gi[i] for i in grad.item_rows])])
    assert rel_err(a, n) <= 1e-4


def test_rho_zero_identity():
    ds, t = _ds(), _table()
    gb = partition_batch(_batch(np.random.default_rng(5), 60), ds)
    res = sharpness_aware_loss_and_grad(gb, t, 0.0)
    for g in np.flatnonzero(res.present):
        assert res.sharp_loss[g] == res.plain_loss[g]
        assert res.grads[g] is res.plain_grads[g]


def test_ascent_step_against_oracle():
    """L_hat equals the group loss re-evaluated at theta + rho * g / |g|."""
    t, rng = _table(mode="dot"), np.random.default_rng(6)
    triples = [tuple(x) for x in _batch(rng, 6)]
    rho = 0.1
    loss, sharp, _, plain = sharp_group(t, triples, rho)
    norm = plain.norm()
    moved = t.copy()
    moved.user_embeddings[plain.user_rows] += rho * plain.user_grad / norm
    moved.item_embeddings[plain.item_rows] += rho * plain.item_grad / norm
    assert sharp == pytest.approx(group_loss_direct(moved, triples), abs=1e-12)
    assert loss == pytest.approx(group_loss_direct(t, triples), abs=1e-12)


def test_sharp_gradient_evaluated_at_perturbed_point():
    t, rng = _table(mode="normalized"), np.random.default_rng(8)
    triples = [tuple(x) for x in _batch(rng, 5)]
    rho = 0.05
    _, _, sgrad, plain = sharp_group(t, triples, rho)
    norm = plain.norm()
    moved = t.copy()
    moved.user_embeddings[plain.user_rows] += rho * plain.user_grad / norm
    moved.item_embeddings[plain.item_rows] += rho * plain.item_grad / norm
    _, at_moved = group_loss_and_grad(moved, triples)
    assert np.allclose(sgrad.user_grad, at_moved.user_grad, atol=1e-14)
    assert np.allclose(sgrad.item_grad, at_moved.item_grad, atol=1e-14)


def test_sharpness_increases_loss_mostly():
    ds = _ds(40, 60)
    up = total = 0
    for seed in range(40):
        t = _table(40, 60, d=8, mode="dot", seed=seed)
        rng = np.random.default_rng(seed)
        gb = partition_batch(_batch(rng, 200, 40, 60), ds)
        res = sharpness_aware_loss_and_grad(gb, t, 0.05)
        for g in np.flatnonzero(res.present):
            total += 1
            up += res.sharp_loss[g] >= res.plain_loss[g]
    assert up / total >= 0.99


def test_small_rho_continuity():
    t, rng = _table(mode="normalized"), np.random.default_rng(9)
    triples = [tuple(x) for x in _batch(rng, 10)]
    gaps = []
    for rho in (1e-6, 1e-4):
        loss, sharp, _, plain = sharp_group(t, triples, rho)
        gaps.append(abs(sharp - loss))
    # first order: gap ~ rho * |grad|
    c = plain.norm() * 1.01 + 1e-6
    assert gaps[0] <= c * 1e-6 and gaps[1] <= c * 1e-4
    assert gaps[0] < gaps[1]


def test_table_untouched():
    ds, t = _ds(), _table()
    U0, V0 = t.user_embeddings.tobytes(), t.item_embeddings.tobytes()
    sharpness_aware_loss_and_grad(partition_batch(_batch(np.random.default_rng(1), 80), ds), t, 0.3)
    assert t.user_embeddings.tobytes() == U0 and t.item_embeddings.tobytes() == V0


def _results(seed, ds, t, rho=0.05):
    gb = partition_batch(_batch(np.random.default_rng(seed), 50), ds)
    return sharpness_aware_loss_and_grad(gb, t, rho)


def test_accumulator_additivity_and_rollover():
    ds, t = _ds(), _table()
    acc = EpochGradientAccumulator(4, 6, 8, 4)
    acc.open_epoch()
    r1, r2 = _results(1, ds, t), _results(2, ds, t)
    accumulate(acc, 0, r1)
    accumulate(acc, 0, r2)
    g_u, g_i = r1.grads[0].to_dense(6, 8)
    h_u, h_i = r2.grads[0].to_dense(6, 8)
    assert np.abs(acc.user[0] - (g_u + h_u)).max() <= 1e-12
    assert np.abs(acc.item[0] - (g_i + h_i)).max() <= 1e-12
    acc.close_epoch()
    assert acc.has_last and not acc.user.any()
    assert np.array_equal(acc.last_user[0], g_u + h_u)
    assert acc.last_sharp_mean[0] == pytest.approx((r1.sharp_loss[0] + r2.sharp_loss[0]) / 2)
    assert np.isnan(acc.last_sharp_mean[1:]).all()
    with pytest.raises(RuntimeError, match="closed"):
        accumulate(acc, 0, r1)


def test_accumulator_scatter_oracle():
    ds, t = _ds(), _table()
    acc = EpochGradientAccumulator(4, 6, 8, 4)
    acc.open_epoch()
    expect_u, expect_i = np.zeros((4, 6, 4)), np.zeros((4, 8, 4))
    for seed in range(15):
        res = _results(seed, ds, t)
        for g in np.flatnonzero(res.present):
            accumulate(acc, g, res)
            grad = res.grads[g]
            for row, vec in zip(grad.user_rows, grad.user_grad):
                expect_u[g, row] += vec
            for row, vec in zip(grad.item_rows, grad.item_grad):
                expect_i[g, row] += vec
    assert np.abs(acc.user - expect_u).max() <= 1e-12
    assert np.abs(acc.item - expect_i).max() <= 1e-12
