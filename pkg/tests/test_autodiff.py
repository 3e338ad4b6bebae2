import numpy as np
import pytest

from core import autodiff as ad
from utils.errors import ShapeError


def _param(name, value):
    p = ad.Parameter(name, np.shape(value))
    p.value = np.asarray(value, dtype=np.float64)
    return p


def test_relu_backward_at_kink_is_zero():
    tape = ad.Tape()
    x = tape.param(_param("x", [-1.0, 0.0, 2.0]))
    grads = ad.backward(tape, ad.total(tape, ad.relu(tape, x)))
    assert grads["x"].tolist() == [0.0, 0.0, 1.0]


def test_softmax_of_uniform_row():
    tape = ad.Tape()
    out = ad.softmax_rows(tape, tape.constant(np.zeros((2, 4))))
    np.testing.assert_allclose(out.value, 0.25)


def test_conv3_stride2_matches_direct_correlation(rng):
    x = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    tape = ad.Tape()
    out = ad.conv3_stride2(tape, tape.constant(x), tape.constant(w)).value
    assert out.shape == (3, 2, 2, 2)
    for o in range(3):
        for d in range(2):
            for h in range(2):
                for v in range(2):
                    patch = x[:, 2 * d:2 * d + 3, 2 * h:2 * h + 3, 2 * v:2 * v + 3]
                    assert out[o, d, h, v] == pytest.approx(np.sum(patch * w[o]))


def test_conv3_stride2_padding_shape():
    tape = ad.Tape()
    out = ad.conv3_stride2(tape, tape.constant(np.ones((1, 8, 8, 8))), tape.constant(np.ones((4, 1, 3, 3, 3))), 1)
    assert out.shape == (4, 4, 4, 4)


def test_sum_of_squares_gradient():
    w = _param("w", [1.0, -2.0, 3.0])
    tape = ad.Tape()
    node = tape.param(w)
    grads = ad.backward(tape, ad.total(tape, ad.mul(tape, node, node)))
    np.testing.assert_allclose(grads["w"], [2.0, -4.0, 6.0])


def test_matmul_gradients():
    a = _param("a", [[1.0, 2.0, 3.0]])
    b = _param("b", [[4.0], [5.0], [6.0]])
    tape = ad.Tape()
    grads = ad.backward(tape, ad.total(tape, ad.matmul(tape, tape.param(a), tape.param(b))))
    np.testing.assert_allclose(grads["a"], [[4.0, 5.0, 6.0]])
    np.testing.assert_allclose(grads["b"], [[1.0], [2.0], [3.0]])


def test_unused_parameter_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.param(_param("x", [1.0]))
    tape.param(_param("idle", [[1.0, 2.0]]))
    grads = ad.backward(tape, ad.total(tape, x))
    assert np.array_equal(grads["idle"], np.zeros((1, 2)))


def test_small_network_passes_gradcheck(rng):
    image = rng.normal(size=(1, 5, 5, 5))
    target = rng.normal(size=(27, 3))
    conv = _param("conv", rng.normal(0, 0.3, (2, 1, 3, 3, 3)))
    proj = _param("proj", rng.normal(0, 0.5, (2, 3)))

    def build(tape):
        h = ad.conv3_stride2(tape, tape.constant(image), tape.param(conv), padding=1)
        tokens = ad.reshape_flatten(tape, ad.softplus(tape, h))
        probs = ad.softmax_rows(tape, ad.matmul(tape, tokens, tape.param(proj)))
        return ad.mse(tape, probs, target)

    report = ad.gradcheck(build, [conv, proj], tolerance=1e-5)
    assert report.passed, report.max_rel_error
    assert conv.value.shape == (2, 1, 3, 3, 3)


def test_quadratic_gradcheck_is_tight():
    w = _param("w", [0.3, -1.2, 2.0])

    def build(tape):
        node = tape.param(w)
        return ad.total(tape, ad.mul(tape, node, node))

    report = ad.gradcheck(build, [w], tolerance=1e-7)
    assert report.passed
    assert report.worst_error < 1e-7


def test_wrong_backward_is_caught():
    w = _param("w", [0.5, 1.5])
    good = _param("good", [1.0, 2.0])

    def build(tape):
        node = tape.param(w)
        broken = tape.record("broken", (node,), node.value ** 2, lambda g: (g * node.value,))
        return ad.total(tape, ad.add(tape, broken, tape.param(good)))

    report = ad.gradcheck(build, [w, good], tolerance=1e-6)
    assert not report.passed
    assert report.worst == "w"
    assert report.max_rel_error["good"] < 1e-6


def test_missing_small_gradient_is_caught():
    w = _param("w", [0.7, -1.1, 0.4])

    def dropped(tape):
        node = tape.param(w)
        return ad.total(tape, tape.record("scaled_square", (node,), 2e-5 * node.value ** 2,
                                          lambda g: (np.zeros_like(node.value),)))

    def correct(tape):
        node = tape.param(w)
        return ad.total(tape, ad.scale(tape, ad.mul(tape, node, node), 2e-5))

    report = ad.gradcheck(dropped, [w], tolerance=1e-4)
    assert not report.passed
    assert report.max_rel_error["w"] == pytest.approx(1.0)
    assert ad.gradcheck(correct, [w], tolerance=1e-6).passed


def test_gradcheck_restores_parameter_values():
    w = ad.Parameter("w", (3,)).initialize(np.random.default_rng(0))
    before = w.value.copy()

    def build(tape):
        return ad.total(tape, tape.param(w))

    ad.gradcheck(build, [w])
    assert w.value.dtype == np.float32
    assert np.array_equal(w.value, before)


def test_initialization_is_deterministic():
    a = ad.Parameter("w", (4, 5), init="he").initialize(np.random.default_rng(3))
    b = ad.Parameter("w", (4, 5), init="he").initialize(np.random.default_rng(3))
    assert np.array_equal(a.value, b.value)
    assert np.all(ad.Parameter("z", (2,), init="zeros").initialize(np.random.default_rng(0)).value == 0)


def test_non_scalar_loss_is_rejected():
    tape = ad.Tape()
    x = tape.param(_param("x", [1.0, 2.0]))
    with pytest.raises(ShapeError):
        ad.backward(tape, x)


def test_shape_errors():
    tape = ad.Tape()
    with pytest.raises(ShapeError):
        ad.matmul(tape, tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(tape, tape.constant(np.ones(3)), tape.constant(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.Parameter("w", (2,), init="uniform")
    with pytest.raises(ShapeError):
        tape.param(ad.Parameter("empty", (2,)))
