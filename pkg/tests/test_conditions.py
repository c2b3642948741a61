import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abms.conditions import (
    DualAttributeTask,
    GaussianWell,
    LinearInverseTask,
    LinearLoss,
    PropertyTarget,
    PseudoHuber,
    QuadraticLoss,
    QuadraticProperty,
    RadialProperty,
    Restricted,
    block_average_matrix,
    circulant_matrix,
    lipschitz_on_box,
    operator_from_spec,
    select_matrix,
    squared_distance,
)

seeds = st.integers(0, 10**6)


def _conditions(rng, n):
    c = rng.standard_normal(n)
    Q = rng.standard_normal((n, n))
    A = rng.standard_normal((2, n))
    return [
        QuadraticLoss(Q, rng.standard_normal(n), 0.7),
        squared_distance(c, 1.5),
        LinearLoss(rng.standard_normal(n), 0.2),
        LinearInverseTask(A, rng.standard_normal(2)),
        PseudoHuber(c, 0.7),
        GaussianWell(c, 1.2, 0.8),
        PropertyTarget(RadialProperty(c, 1.3), 0.4, 2.0),
        PropertyTarget(QuadraticProperty(Q @ Q.T / n, c), 1.0, 0.5),
        Restricted(squared_distance(c[:2]), [0, n - 1], n),
    ]


def _fd_grad(f, x, h=1e-6):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])


@given(seed=seeds, n=st.integers(2, 6))
def test_gradients_match_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    for f in _conditions(rng, n):
        g = f.grad(x)
        fd = _fd_grad(f, x)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd)), type(f).__name__


@given(seed=seeds, n=st.integers(2, 5))
def test_hessians_match_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    for f in _conditions(rng, n):
        H = f.hessian(x)
        fd = np.stack([(f.grad(x + 1e-5 * e) - f.grad(x - 1e-5 * e)) / 2e-5 for e in np.eye(n)], axis=-1)
        np.testing.assert_allclose(H, fd, atol=1e-5 * max(1.0, np.abs(fd).max()))


@given(seed=seeds, n=st.integers(1, 6))
def test_quadratic_form_reproduces_values(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, n))
    for f in _conditions(rng, max(n, 2))[:4]:
        if f.quadratic_form() is None or np.shape(f.quadratic_form()[0])[0] != n:
            continue
        Q, b, c = f.quadratic_form()
        np.testing.assert_allclose(np.einsum("bi,ij,bj->b", x, Q, x) + x @ b + c, f(x), rtol=1e-10, atol=1e-10)


def test_form_matrix_convention():
    Q = np.array([[2.0, 0.0], [0.0, -3.0]])
    f = QuadraticLoss(Q)
    assert f.global_L == 6.0
    np.testing.assert_allclose(f.hessian(np.zeros(2)), 2 * Q)


@given(seed=seeds, n=st.integers(2, 4))
def test_global_constants_bound_local_ones(seed, n):
    rng = np.random.default_rng(seed)
    xs = 2 * rng.standard_normal((32, n))
    for f in _conditions(rng, n):
        if f.global_L is not None:
            eig = np.abs(np.linalg.eigvalsh(f.hessian(xs))).max()
            assert eig <= f.global_L * (1 + 1e-9) + 1e-9, type(f).__name__
        if f.global_K is not None:
            assert np.linalg.norm(f.grad(xs), axis=-1).max() <= f.global_K * (1 + 1e-9), type(f).__name__


def test_operators():
    A = select_matrix(4, [0, 2])
    np.testing.assert_array_equal(A @ np.arange(4.0), [0.0, 2.0])
    B = block_average_matrix(4, 2)
    np.testing.assert_allclose(B @ np.array([1.0, 3.0, 5.0, 7.0]), [2.0, 6.0])
    with pytest.raises(ValueError):
        block_average_matrix(5, 2)
    C = circulant_matrix(5, [0.25, 0.5, 0.25])
    np.testing.assert_allclose(C.sum(axis=1), 1.0)
    x = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_allclose(C @ np.roll(x, 1), np.roll(C @ x, 1), rtol=1e-12)
    np.testing.assert_array_equal(operator_from_spec({"kind": "select", "idx": [0, 2]}, 4), A)
    np.testing.assert_array_equal(operator_from_spec({"kind": "block_avg", "block": 2}, 4), B)
    with pytest.raises(ValueError):
        operator_from_spec({"kind": "fft"}, 4)
    with pytest.raises(ValueError):
        operator_from_spec({"kind": "dense", "A": [[1.0, 2.0]]}, 3)


def test_inverse_task_batched_measurements():
    A = select_matrix(3, [1])
    gt = np.random.default_rng(1).standard_normal((5, 3))
    task = LinearInverseTask.generate(A, gt)
    np.testing.assert_allclose(task(gt), 0.0, atol=1e-15)
    # an extra sample axis between batch and feature broadcasts per chain
    xs = np.repeat(gt[:, None], 4, axis=1)
    np.testing.assert_allclose(task(xs), 0.0, atol=1e-15)
    assert task.grad(xs).shape == xs.shape
    with pytest.raises(TypeError):
        task(np.zeros((5, 4)))
    with pytest.raises(TypeError):
        LinearInverseTask(A, np.zeros(2))


def test_noisy_measurements():
    A = np.eye(2)
    task = LinearInverseTask.generate(A, np.zeros((2000, 2)), np.random.default_rng(2), noise_std=0.3)
    assert task.y.std() == pytest.approx(0.3, rel=0.05)


def test_restricted_ignores_other_coordinates():
    f = Restricted(squared_distance(np.array([1.0])), [2], 4)
    x = np.array([5.0, -3.0, 1.0, 9.0])
    assert f(x) == 0.0
    g = f.grad(np.array([5.0, -3.0, 2.0, 9.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 2.0, 0.0])
    Q, b, c = f.quadratic_form()
    assert Q[2, 2] == 1.0 and Q.sum() == 1.0
    with pytest.raises(ValueError):
        Restricted(squared_distance(np.zeros(2)), [1, 1], 4)


def test_dual_attribute_task():
    task = DualAttributeTask.build(4, [0, 1], squared_distance(np.zeros(2)), squared_distance(np.ones(2)))
    np.testing.assert_array_equal(task.style.idx, [2, 3])
    with pytest.raises(ValueError):
        DualAttributeTask(Restricted(squared_distance(np.zeros(2)), [0, 1], 4),
                          Restricted(squared_distance(np.zeros(2)), [1, 2], 4))


def test_quadratic_lipschitz_on_box_by_brute_force():
    f = LinearInverseTask(np.array([[1.0, 2.0]]), np.array([0.5]))
    box = (np.array([-1.0, -1.0]), np.array([1.0, 2.0]))
    K, L = f.lipschitz(box)
    g = np.stack(np.meshgrid(np.linspace(-1, 1, 41), np.linspace(-1, 2, 61)), -1).reshape(-1, 2)
    assert K == pytest.approx(np.linalg.norm(f.grad(g), axis=1).max(), rel=1e-12)
    assert L == pytest.approx(10.0)


def test_smooth_lipschitz_on_box():
    f = PseudoHuber(np.zeros(2), 0.5)
    K, L = lipschitz_on_box(f, (np.full(2, -1.0), np.full(2, 1.0)))
    assert L == pytest.approx(1.0, rel=1e-6)
    assert K == pytest.approx(np.linalg.norm(f.grad(np.ones(2))), rel=1e-6)
