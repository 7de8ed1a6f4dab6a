import numpy as np
import pytest

from services.errors import GraphError, ShapeError
from services.numcore import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    cross_entropy,
    cross_entropy_from_probs,
    dense_forward,
    kd_loss,
    lr_schedule,
    relu,
    softmax,
    stable_softmax,
    tensor_mean,
)


def _numeric_grad(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    it = np.nditer(param.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param.data[idx]
        param.data[idx] = orig + h
        up = f()
        param.data[idx] = orig - h
        down = f()
        param.data[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def test_dense_relu_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 4))
    labels = np.array([0, 2, 1, 2, 0])
    W1 = Tensor(rng.standard_normal((4, 6)), requires_grad=True, name="W1")
    b1 = Tensor(rng.standard_normal(6) * 0.1, requires_grad=True, name="b1")
    W2 = Tensor(rng.standard_normal((6, 3)), requires_grad=True, name="W2")
    b2 = Tensor(np.zeros(3), requires_grad=True, name="b2")

    def loss_value() -> float:
        return cross_entropy(dense_forward(relu(dense_forward(x, W1, b1)), W2, b2), labels).item()

    loss = cross_entropy(dense_forward(relu(dense_forward(x, W1, b1)), W2, b2), labels)
    graph = backward(loss)
    assert set(graph.parameters) == {"W1", "b1", "W2", "b2"}
    for p in (W1, b1, W2, b2):
        np.testing.assert_allclose(p.grad, _numeric_grad(loss_value, p), rtol=1e-5, atol=1e-7)


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float((np.abs(analytic - numeric) / scale).max())


@pytest.mark.parametrize("seed", range(20))
def test_random_networks_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    batch, d_in, d_hidden, k = rng.integers(2, 6, size=4) + np.array([0, 0, 0, 1])
    x = rng.standard_normal((batch, d_in))
    labels = rng.integers(0, k, batch)
    params = [
        Tensor(rng.standard_normal((d_in, d_hidden)), requires_grad=True, name="W1"),
        Tensor(rng.standard_normal(d_hidden) * 0.1, requires_grad=True, name="b1"),
        Tensor(rng.standard_normal((d_hidden, k)), requires_grad=True, name="W2"),
        Tensor(rng.standard_normal(k) * 0.1, requires_grad=True, name="b2"),
    ]

    def forward():
        W1, b1, W2, b2 = params
        return cross_entropy(dense_forward(relu(dense_forward(x, W1, b1)), W2, b2), labels)

    backward(forward())
    for p in params:
        assert _max_relative_error(p.grad, _numeric_grad(lambda: forward().item(), p)) < 1e-4


def test_dense_forward_matches_a_double_loop():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 4))
    W = Tensor(rng.standard_normal((4, 2)), requires_grad=True, name="W")
    b = Tensor(rng.standard_normal(2), requires_grad=True, name="b")
    expected = np.zeros((3, 2))
    for n in range(3):
        for j in range(2):
            expected[n, j] = b.data[j] + sum(x[n, i] * W.data[i, j] for i in range(4))
    np.testing.assert_allclose(dense_forward(x, W, b).data, expected, rtol=0, atol=1e-12)


def test_kd_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    student = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="s")
    teacher = rng.standard_normal((4, 3))
    backward(kd_loss(student, teacher, temperature=2.0))
    numeric = _numeric_grad(lambda: kd_loss(student.data, teacher, 2.0).item(), student)
    np.testing.assert_allclose(student.grad, numeric, rtol=1e-5, atol=1e-8)


def test_softmax_rows_sum_to_one_and_survive_large_logits():
    out = softmax(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.25, 0.75]])


def test_cross_entropy_of_uniform_logits_is_log_k():
    assert cross_entropy(np.zeros((2, 4)), np.array([0, 3])).item() == pytest.approx(np.log(4))


def test_kd_loss_zero_when_student_matches_teacher():
    logits = np.array([[1.0, -2.0, 0.5]])
    assert kd_loss(logits, logits, temperature=3.0).item() == 0.0


def test_kd_loss_scales_with_temperature_squared():
    student = np.array([[0.0, 0.0]])
    teacher = np.array([[2.0, 0.0]])
    pt = stable_softmax(teacher / 2.0)
    expected = 4.0 * float((pt * (np.log(pt) - np.log([[0.5, 0.5]]))).sum())
    assert kd_loss(student, teacher, 2.0).item() == pytest.approx(expected)


def test_kd_loss_rejects_nonpositive_temperature():
    with pytest.raises(GraphError):
        kd_loss(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)


def test_cross_entropy_from_probs_clamps_and_counts():
    result = cross_entropy_from_probs(np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([1, 0]))
    assert result.clamped == 1
    assert result.value == pytest.approx((-np.log(1e-12) - np.log(0.5)) / 2)


def test_labels_out_of_range_raise_shape_error():
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_backward_twice_without_reset_is_an_error():
    w = Tensor(np.ones(3), requires_grad=True, name="w")
    loss = tensor_mean(w * 2.0)
    graph = backward(loss)
    with pytest.raises(GraphError):
        backward(loss)
    graph.reset()
    backward(loss)
    np.testing.assert_allclose(w.grad, np.full(3, 2.0 / 3))


def test_backward_needs_scalar():
    with pytest.raises(GraphError):
        backward(Tensor(np.ones(2), requires_grad=True) * 1.0)


def test_frozen_parameters_do_not_enter_the_graph():
    w = Tensor(np.ones((2, 2)), requires_grad=True, name="w")
    w.freeze()
    v = Tensor(np.ones((2, 2)), requires_grad=True, name="v")
    graph = backward(tensor_mean((w @ v)))
    assert list(graph.parameters) == ["v"]
    assert w.grad is None


def test_adam_first_step_moves_each_weight_by_lr():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True, name="p")
    p.grad = np.array([0.5, -2.0])
    state = AdamState(lr=0.1, eps=0.0)
    adam_step(state, [p])
    np.testing.assert_allclose(p.data, [0.9, -0.9])
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_adam_adds_l2_decay_to_the_gradient():
    p = Tensor(np.array([2.0]), requires_grad=True, name="p")
    p.grad = np.array([0.0])
    adam_step(AdamState(lr=0.1, weight_decay=0.5, eps=0.0), [p])
    assert p.data[0] == pytest.approx(1.9)


def test_adam_reset_restarts_bias_correction():
    state = AdamState(lr=0.1)
    p = Tensor(np.array([0.0]), requires_grad=True, name="p")
    for _ in range(3):
        p.grad = np.array([1.0])
        adam_step(state, [p])
    state.reset_moments()
    assert state.moment_steps == 0 and not state.first_moment
    assert state.step_count == 3


def test_lr_schedule_steps_at_milestones():
    assert lr_schedule(1.0, 0, (2, 4), 0.1) == 1.0
    assert lr_schedule(1.0, 2, (2, 4), 0.1) == pytest.approx(0.1)
    assert lr_schedule(1.0, 5, (2, 4), 0.1) == pytest.approx(0.01)


def test_adam_converges_on_a_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True, name="w")
    state = AdamState(lr=0.1)
    for _ in range(100):
        w.grad = 2.0 * (w.data - 3.0)
        adam_step(state, [w])
    assert abs(w.data[0] - 3.0) <= 0.05
