import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consist_diffuse import numerics as nx
from consist_diffuse.denoiser import (
    ConditionToken,
    Denoiser,
    init_base,
    init_delta,
    load_base,
    load_delta,
    merge_delta,
    predict_noise,
    save_base,
    save_delta,
    time_embedding,
    trainable_leaves,
)
from consist_diffuse.numerics import Rng, ShapeError

from gradcheck import numeric_grad, rel_error

CLASSES = ["disc", "square", "diamond"]


def _base(hidden=32, seed=0):
    return init_base(Rng(seed), CLASSES, latent_dim=16, hidden=hidden).frozen()


def _randomised_delta(base, seed=1, rank=4, scaling=1.0):
    delta = init_delta(base, Rng(seed), rank=rank, scaling=scaling)
    rng = Rng(seed + 100)
    for b in delta.B:
        b.data = rng.normal(b.shape, 0.0, 0.1)
    return delta


def _inputs(n, seed=2, T=100):
    rng = Rng(seed)
    return nx.constant(rng.normal((n, 16))), rng.integers(1, T + 1, size=n)


def test_output_has_latent_shape():
    base = _base()
    z, t = _inputs(5)
    assert predict_noise(base, None, z, t, ConditionToken("disc")).shape == (5, 16)
    with pytest.raises(ShapeError):
        predict_noise(base, None, nx.constant(np.zeros((5, 15))), t, ConditionToken("disc"))
    with pytest.raises(KeyError):
        predict_noise(base, None, z, t, ConditionToken("cat"))


def test_zero_initialised_delta_is_bitwise_identity():
    base = _base()
    delta = init_delta(base, Rng(1))
    assert all(np.all(b.data == 0) for b in delta.B)
    z, t = _inputs(7)
    a = predict_noise(base, None, z, t, ConditionToken("square")).data
    b = predict_noise(base, delta, z, t, ConditionToken("square")).data
    np.testing.assert_array_equal(a, b)


def test_merge_of_zero_delta_equals_base():
    base = _base()
    merged = merge_delta(base, init_delta(base, Rng(1)))
    for w0, w1 in zip(base.weights, merged.weights):
        np.testing.assert_array_equal(w0.data, w1.data)


@pytest.mark.parametrize("scaling", [1.0, 0.5])
def test_merged_and_unmerged_agree(scaling):
    base = _base(hidden=64)
    delta = _randomised_delta(base, scaling=scaling)
    merged = merge_delta(base, delta)
    table = base.conditions.with_subject(rng=Rng(5))
    z, t = _inputs(100, seed=3)
    cond = ConditionToken("diamond", subject=True)
    a = predict_noise(base, delta, z, t, cond, table).data
    b = predict_noise(merged, None, z, t, cond, table).data
    assert np.max(np.abs(a - b)) < 1e-10


def test_effective_update_has_at_most_adapter_rank():
    base = _base(hidden=64)
    delta = _randomised_delta(base, rank=4)
    for i in range(len(base.weights)):
        assert np.linalg.matrix_rank(delta.delta_weight(i)) <= 4


def test_trainable_leaves_are_adapter_factors_and_subject_row():
    base = _base()
    delta = init_delta(base, Rng(1))
    table = base.conditions.with_subject()
    leaves = trainable_leaves(delta, table)
    assert len(leaves) == 2 * len(base.weights) + 1
    base_ids = {id(x) for x in base.leaves()}
    assert not base_ids & {id(x) for x in leaves}
    assert all(x.requires_grad for x in leaves)
    assert not any(x.requires_grad for x in base.leaves())


def test_adapter_gradients_match_finite_differences():
    base = _base(hidden=8)
    delta = _randomised_delta(base)
    table = base.conditions.with_subject(rng=Rng(4))
    z, t = _inputs(3)
    target = nx.constant(Rng(6).normal((3, 16)))
    cond = ConditionToken("disc", subject=True)

    def loss():
        return nx.mse(predict_noise(base, delta, z, t, cond, table), target)

    nx.backward(loss())

    def f():
        with nx.no_grad():
            return loss().item()

    for leaf in trainable_leaves(delta, table):
        assert rel_error(leaf.grad.data, numeric_grad(f, leaf)) < 1e-5


def test_base_receives_no_gradient():
    base = _base(hidden=8)
    delta = _randomised_delta(base)
    z, t = _inputs(3)
    nx.backward(nx.sum(predict_noise(base, delta, z, t, ConditionToken("disc"))))
    assert all(leaf.grad is None for leaf in base.leaves())


def test_subject_row_only_affects_subject_rows_of_mixed_batch():
    base = _base()
    table = base.conditions.with_subject(rng=Rng(9))
    conds = [ConditionToken("disc"), ConditionToken("disc", True), ConditionToken("square")]
    emb = table.embed(conds, 3).data
    rows = base.conditions.class_rows.data
    np.testing.assert_array_equal(emb[0], rows[0])
    np.testing.assert_allclose(emb[1], rows[0] + table.subject_row.data, rtol=1e-15)
    np.testing.assert_array_equal(emb[2], rows[1])
    with pytest.raises(KeyError):
        base.conditions.embed(ConditionToken("disc", True), 1)


def test_time_embedding_is_injective_over_the_schedule():
    emb = time_embedding(np.arange(1, 1001), 8, 100.0)
    assert emb.shape == (1000, 8)
    assert len({row.tobytes() for row in emb}) == 1000
    gaps = np.linalg.norm(emb[:, None] - emb[None], axis=2) + np.eye(1000)
    assert gaps.min() > 1e-3


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(CLASSES), st.booleans())
def test_condition_token_text_round_trip(cls, subject):
    tok = ConditionToken(cls, subject)
    assert ConditionToken.parse(str(tok)) == tok


def test_base_checkpoint_round_trip(tmp_path):
    base = _base()
    save_base(tmp_path / "base.ckpt", base)
    loaded = load_base(tmp_path / "base.ckpt")
    for a, b in zip(base.leaves(), loaded.leaves()):
        assert a.data.tobytes() == b.data.tobytes()
        assert not b.requires_grad
    assert loaded.conditions.names == CLASSES


def test_delta_checkpoint_round_trip(tmp_path):
    base = _base()
    delta = _randomised_delta(base)
    table = base.conditions.with_subject(rng=Rng(3))
    save_delta(tmp_path / "delta.ckpt", delta, table)
    d2, t2 = load_delta(tmp_path / "delta.ckpt", base)
    for a, b in zip(trainable_leaves(delta, table), trainable_leaves(d2, t2)):
        assert a.data.tobytes() == b.data.tobytes()
    z, t = _inputs(4)
    cond = ConditionToken("disc", True)
    a = Denoiser(base, delta, table).predict(z, t, cond).data
    b = Denoiser(base, d2, t2).predict(z, t, cond).data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_kind_and_magic_are_checked(tmp_path):
    base = _base()
    save_base(tmp_path / "base.ckpt", base)
    with pytest.raises(ValueError, match="kind"):
        load_delta(tmp_path / "base.ckpt", base)
    (tmp_path / "junk.ckpt").write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_base(tmp_path / "junk.ckpt")


def test_merge_rejects_mismatched_delta():
    small, big = _base(hidden=8), _base(hidden=16)
    with pytest.raises(ShapeError):
        merge_delta(big, _randomised_delta(small))
