import numpy as np
import pytest

from conftest import tiny_model
from sirad.nn import (
    DEFAULT_WIDTHS,
    SirModel,
    loop_forward,
    loss_and_grads,
    reconstruction_loss,
    teacher_forward,
    training_loss,
)
from sirad.tensor import ShapeError, Tape, Tensor


def test_feature_shapes():
    model = SirModel.create(1, DEFAULT_WIDTHS, loops=2)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 64, 64)))
    f3, phi = teacher_forward(model, x)
    assert f3.shape == (2, 64, 8, 8)
    assert phi.shape == (2, 128, 4, 4)
    outs = loop_forward(model, phi)
    assert len(outs) == 2
    for f3_s, phi_s in outs:
        assert f3_s.shape == f3.shape
        assert phi_s.shape == phi.shape


def test_teacher_forward_checks_input():
    model = tiny_model()
    with pytest.raises(ShapeError):
        teacher_forward(model, Tensor(np.zeros((1, 2, 24, 24))))
    with pytest.raises(ShapeError):
        teacher_forward(model, Tensor(np.zeros((1, 3, 32, 32))))
    with pytest.raises(ShapeError):
        teacher_forward(model, Tensor(np.zeros((2, 32, 32))))


def test_parameter_set_does_not_depend_on_loops():
    shapes = lambda m: {k: v.shape for k, v in m.named_parameters().items()}
    assert shapes(tiny_model(loops=1)) == shapes(tiny_model(loops=7))


def test_teacher_is_frozen_student_trainable():
    m = tiny_model()
    assert all(not p.requires_grad for p in m.teacher.params.values())
    assert all(p.requires_grad for p in m.student.params.values())
    assert set(m.student_parameters()) == {k for k in m.named_parameters() if k.startswith("student.")}


def test_zero_loops_rejected():
    with pytest.raises(ValueError):
        tiny_model(loops=0)


def numpy_loss(outputs, f3_t, phi_t, eps=1e-8):
    def cos_dist(a, b):
        dot = (a * b).sum(1)
        na = np.maximum(np.linalg.norm(a, axis=1), eps)
        nb = np.maximum(np.linalg.norm(b, axis=1), eps)
        return (1 - np.clip(dot / (na * nb), -1, 1)).mean()

    return sum(cos_dist(f.data, f3_t.data) + cos_dist(p.data, phi_t.data) for f, p in outputs)


def test_loss_matches_numpy_oracle(rng):
    model = tiny_model(loops=3)
    x = Tensor(rng.uniform(size=(3, 2, 32, 32)))
    f3_t, phi_t = teacher_forward(model, x)
    outs = loop_forward(model, phi_t)
    assert training_loss(model, x).item() == pytest.approx(numpy_loss(outs, f3_t, phi_t), abs=1e-13)


def test_feedback_uses_student_output(rng):
    model = tiny_model(loops=2)
    x = Tensor(rng.uniform(size=(1, 2, 32, 32)))
    _, phi_t = teacher_forward(model, x)
    (f3_1, phi_1), (f3_2, _) = loop_forward(model, phi_t)
    again, _ = model.student(phi_1, model.slope)
    np.testing.assert_array_equal(again.data, f3_2.data)


def test_weighted_loss_equals_repeated_batch(rng):
    model = tiny_model(loops=2)
    x = rng.uniform(size=(3, 2, 32, 32))
    counts = np.array([1, 3, 2])
    full_loss, full_grads = loss_and_grads(model, Tensor(np.repeat(x, counts, axis=0)))
    f3_t, phi_t = teacher_forward(model, Tensor(x))
    params = model.student_parameters()
    with Tape() as tape:
        loss = reconstruction_loss(loop_forward(model, phi_t), f3_t, phi_t, model.eps, weights=counts / 6)
    grads = tape.backward(loss, params.values())
    assert loss.item() == pytest.approx(full_loss, abs=1e-13)
    for name, p in params.items():
        np.testing.assert_allclose(grads[p], full_grads[name], rtol=1e-10, atol=1e-13)


def test_spot_gradient_against_finite_difference(rng):
    model = tiny_model(loops=2)
    x = Tensor(rng.uniform(size=(2, 2, 32, 32)))
    _, grads = loss_and_grads(model, x)
    p = model.student.params["up_refine.weight"]
    base = p.data.copy()
    for idx in [(0, 0, 0, 0), (2, 1, 1, 2), (3, 3, 2, 2)]:
        h = 1e-5
        up, down = base.copy(), base.copy()
        up[idx] += h
        down[idx] -= h
        p.assign(up)
        lu = training_loss(model, x).item()
        p.assign(down)
        ld = training_loss(model, x).item()
        p.assign(base)
        assert grads["student.up_refine.weight"][idx] == pytest.approx((lu - ld) / (2 * h), rel=1e-5, abs=1e-9)


def test_teacher_gets_no_gradient(rng):
    model = tiny_model()
    x = Tensor(rng.uniform(size=(1, 2, 32, 32)))
    teacher = list(model.teacher.params.values())
    with Tape() as tape:
        loss = training_loss(model, x)
    grads = tape.backward(loss, teacher)
    assert all(not np.any(grads[t]) for t in teacher)


def test_deterministic_init():
    a, b = tiny_model(seed=4), tiny_model(seed=4)
    for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
