import numpy as np
import pytest

from kvpacket import tensor as T
from kvpacket.tensor import NumericError, ShapeError, Tape, Tensor, TapeError

from conftest import central_diff


def _check(build, shapes, seed=0, tol=1e-6):
    """Gradient of sum(build(*xs) * probe) against central differences in float64."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    probe = None

    def value():
        nonlocal probe
        out = build(*xs).data
        if probe is None:
            probe = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float((out * probe).sum())

    value()
    with Tape() as tape:
        loss = (build(*xs) * Tensor(probe)).sum()
    tape.backward(loss)
    for x in xs:
        num = central_diff(value, x.data)
        for i, g in num.items():
            assert x.grad.reshape(-1)[i] == pytest.approx(g, abs=tol, rel=1e-5)


@pytest.mark.parametrize("build,shapes", [
    (lambda a, b: a + b, [(3, 4), (4,)]),
    (lambda a, b: a - b, [(2, 3), (2, 1)]),
    (lambda a, b: a * b, [(3, 4), (3, 4)]),
    (lambda a, b: a @ b, [(3, 4), (4, 5)]),
    (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 2)]),
    (lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    (lambda a: T.log_softmax(a, axis=-1), [(2, 6)]),
    (lambda a: T.silu(a), [(4, 3)]),
    (lambda a, s: T.rms_norm(a, s), [(3, 8), (8,)]),
    (lambda a: a.transpose(1, 0, 2).reshape(3, 8), [(2, 3, 4)]),
    (lambda a, b: T.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    (lambda a: a[1:3], [(4, 3)]),
    (lambda a: a.mean(axis=0), [(4, 3)]),
])
def test_op_gradients_match_central_differences(build, shapes):
    _check(build, shapes)


def test_division_by_scalar_only():
    _check(lambda a: a / 4.0, [(3,)])
    with pytest.raises(TypeError):
        Tensor(np.ones(3)) / Tensor(np.ones(3))


def test_rotate_pairs_gradient_is_inverse_rotation():
    rng = np.random.default_rng(3)
    ang = rng.uniform(-3, 3, size=(4, 1, 2))
    _check(lambda x: T.rotate_pairs(x, np.cos(ang), np.sin(ang)), [(4, 2, 4)])


def test_embedding_gradient_accumulates_repeated_ids():
    table = Tensor(np.zeros((5, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.embedding(table, np.array([1, 3, 1])).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1, 0])


def test_cross_entropy_matches_manual_and_gradient():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = np.array([0, 5, 2, 2])
    w = np.array([1.0, 0.0, 2.0, 1.0])
    ref = -(T.log_softmax(Tensor(logits.data)).data[np.arange(4), targets] * w).sum() / w.sum()
    assert T.cross_entropy(logits, targets, w).item() == pytest.approx(ref, rel=1e-12)
    _check(lambda x: T.cross_entropy(x, targets, w), [(4, 6)])


def test_kl_divergence_value_and_gradient():
    rng = np.random.default_rng(1)
    p = np.abs(rng.normal(size=(3, 5)))
    p[0, 2] = 0.0
    p /= p.sum(axis=1, keepdims=True)

    def build(x):
        return T.kl_divergence(p, T.softmax(x))

    x = rng.normal(size=(3, 5))
    q = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    mask = p > 0
    ref = (np.where(mask, p * (np.log(np.where(mask, p, 1)) - np.log(q)), 0)).sum() / 3
    assert build(Tensor(x)).item() == pytest.approx(ref, rel=1e-12)
    _check(build, [(3, 5)])


def test_kl_of_identical_distributions_is_zero():
    p = np.full((2, 4), 0.25)
    assert T.kl_divergence(p, Tensor(p.copy())).item() == pytest.approx(0.0, abs=1e-15)


def test_kl_rejects_zero_student_mass_on_teacher_support():
    with pytest.raises(NumericError):
        T.kl_divergence(np.array([[1.0, 0.0]]), Tensor(np.array([[0.0, 1.0]])))


def test_softmax_rejects_nan_but_allows_masked_entries():
    with pytest.raises(NumericError):
        T.softmax(Tensor(np.array([[0.0, np.nan]])))
    out = T.softmax(Tensor(np.array([[0.0, -np.inf]]))).data
    np.testing.assert_allclose(out, [[1.0, 0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_no_recording_without_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    out = a * 2.0
    assert out._node is None and not out.requires_grad


def test_leaf_gradients_accumulate_across_tapes():
    a = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (a * 3.0).sum()
        tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_backward_releases_graph():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        mid = a * 2.0
        loss = mid.sum()
    tape.backward(loss)
    assert len(tape) == 0 and mid._node is None


def test_module_backward_needs_tape_output():
    with pytest.raises(TapeError):
        T.backward(Tensor(np.array(1.0)))
    with pytest.raises(ShapeError):
        T.backward(Tensor(np.ones(2)))


def test_nested_tape_activation_is_an_error():
    tape = Tape()
    with tape:
        with pytest.raises(TapeError):
            tape.__enter__()
