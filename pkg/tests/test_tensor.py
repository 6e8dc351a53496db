import numpy as np
import pytest

from dwstrack.tensor import *
from dwstrack.tensor import broadcast_shape
from dwstrack.gradcheck import check_gradients, relative_error
from dwstrack.errors import DimensionError, ConfigurationError, InputTooShortError, StateError


def test_tensor_basics():
    t = tensor([[1, 2, 3], [4, 5, 6]])
    assert t.shape == (2, 3)
    assert t.size == 6
    assert t.dtype == np.float32
    assert not t.requires_grad
    with pytest.raises(ValueError):
        t.data[0, 0] = 10
    assert parameter([1.0]).requires_grad
    assert zeros((2,)).numpy().tolist() == [0, 0]
    assert ones((2,)).numpy().tolist() == [1, 1]


def test_double_precision():
    with double_precision():
        assert tensor([1]).dtype == np.float64
    assert tensor([1]).dtype == np.float32


def test_assign():
    p = parameter([1.0, 2.0])
    p.assign([3, 4])
    assert p.numpy().tolist() == [3, 4]
    with pytest.raises(DimensionError):
        p.assign([1, 2, 3])


def test_arithmetic():
    a, b = tensor([1, 2]), tensor([3, 5])
    assert (a + b).numpy().tolist() == [4, 7]
    assert (b - a).numpy().tolist() == [2, 3]
    assert (a * b).numpy().tolist() == [3, 10]
    assert (2 * a + 1).numpy().tolist() == [3, 5]
    assert (1 - a).numpy().tolist() == [0, -1]
    assert (-a).numpy().tolist() == [-1, -2]
    assert (b / 2).numpy().tolist() == [1.5, 2.5]
    assert a.sum().item() == 3
    assert b.mean().item() == 4


def test_broadcasting():
    a = tensor(np.ones((2, 3)))
    assert (a * tensor(np.ones((2, 1)))).shape == (2, 3)
    assert (tensor(np.ones((1, 3))) * a).shape == (2, 3)
    with pytest.raises(DimensionError):
        a * tensor(np.ones((3,)))
    with pytest.raises(DimensionError):
        a + tensor(np.ones((2, 2)))
    assert broadcast_shape((2, 1, 4), (1, 3, 4)) == (2, 3, 4)


@pytest.mark.parametrize(
    'x,weight,bias,expected',
    [
        ([3, 4], [[1, 0], [0, 1]], [0, 0], [3, 4]),
        ([2, 3], [[1, 1]], [1], [6]),
    ]
)
def test_affine(x, weight, bias, expected):
    assert affine(tensor(x), tensor(weight), tensor(bias)).numpy().tolist() == expected


def test_affine_errors():
    with pytest.raises(DimensionError) as e:
        affine(tensor([1, 2, 3]), tensor(np.ones((2, 2))))
    assert '(3,)' in str(e.value) and '(2, 2)' in str(e.value)
    with pytest.raises(DimensionError):
        affine(tensor([1, 2]), tensor(np.ones((2, 2))), tensor([1, 2, 3]))


def test_affine_linearity(rng):
    x, y = rng.uniform(-2, 2, (5, 4)), rng.uniform(-2, 2, (5, 4))
    alpha, beta = 0.7, -1.3
    with double_precision():
        w, b = tensor(rng.uniform(-2, 2, (3, 4))), tensor(rng.uniform(-2, 2, 3))
        lhs = affine(tensor(alpha * x + beta * y), w, b).numpy()
        rhs = alpha * affine(tensor(x), w, b).numpy() \
            + beta * affine(tensor(y), w, b).numpy() - (alpha + beta - 1) * b.numpy()
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_conv1d_identity_kernel(rng):
    x = tensor(rng.uniform(-2, 2, (3, 10)))
    weight = tensor(np.eye(3)[:, :, None])
    assert np.array_equal(conv1d(x, weight).numpy(), x.numpy())


def test_conv1d_example():
    out = conv1d(tensor([[1, 2, 3, 4]]), tensor([[[1, 1]]]))
    assert out.numpy().tolist() == [[3, 5, 7]]


def test_conv1d_strided_padded():
    x = tensor(np.ones((1, 2, 200)))
    weight = tensor(np.ones((4, 2, 3)))
    assert conv1d(x, weight, stride=3, padding=1).shape == (1, 4, 67)
    assert conv1d_output_length(200, 3, 3, 1) == 67


def test_conv1d_depthwise():
    x = tensor([[1, 2, 3], [10, 20, 30]])
    weight = tensor([[[0, 1, 0]], [[0, 2, 0]]])
    out = conv1d(x, weight, padding=1, groups=2)
    assert out.numpy().tolist() == [[1, 2, 3], [20, 40, 60]]


def test_conv1d_output_length_property(rng):
    for _ in range(200):
        k = int(rng.integers(1, 6))
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 3))
        length = int(rng.integers(max(k - 2 * padding, 1), 30))
        out = conv1d(tensor(np.ones((1, length))), tensor(np.ones((1, 1, k))),
                     stride=stride, padding=padding)
        assert out.shape[-1] == (length + 2 * padding - k) // stride + 1 >= 1


def test_conv1d_errors():
    with pytest.raises(ConfigurationError):
        conv1d(tensor(np.ones((3, 5))), tensor(np.ones((2, 1, 1))), groups=2)
    with pytest.raises(InputTooShortError) as e:
        conv1d(tensor(np.ones((1, 2))), tensor(np.ones((1, 1, 5))))
    assert e.value.minimum == 5
    with pytest.raises(DimensionError):
        conv1d(tensor(np.ones((3, 5))), tensor(np.ones((2, 2, 1))))


def test_batch_norm_constant_channel():
    running = RunningStats(2)
    x = tensor(np.full((2, 2, 5), 3.0))
    out = batch_norm1d(x, tensor([1, 1]), tensor([0, 0]), running, training=True)
    assert np.array_equal(out.numpy(), np.zeros((2, 2, 5)))


def test_batch_norm_gamma_zero(rng):
    out = batch_norm1d(
        tensor(rng.normal(size=(3, 2, 4))), tensor([0, 0]), tensor([0.5, -1]),
        RunningStats(2), training=True)
    assert np.allclose(out.numpy()[:, 0], 0.5)
    assert np.allclose(out.numpy()[:, 1], -1)


def test_batch_norm_moments(rng):
    with double_precision():
        x = tensor(rng.normal(3, 2, size=(8, 3, 20)))
        out = batch_norm1d(x, tensor([1, 1, 1]), tensor([0, 0, 0]), RunningStats(3), True)
    assert np.allclose(out.numpy().mean(axis=(0, 2)), 0, atol=1e-5)
    assert np.allclose(out.numpy().var(axis=(0, 2)), 1, atol=1e-5)


def test_batch_norm_running_stats(rng):
    running = RunningStats(2, momentum=0.1)
    gamma, beta = tensor([1, 1]), tensor([0, 0])
    x = rng.normal(size=(4, 2, 5))
    with pytest.raises(StateError):
        batch_norm1d(tensor(x), gamma, beta, running, training=False)
    batch_norm1d(tensor(x), gamma, beta, running, training=True)
    assert running.count == 1
    assert np.allclose(running.mean, 0.1 * x.mean(axis=(0, 2)), atol=1e-6)
    assert np.allclose(running.var, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1), atol=1e-6)
    out = batch_norm1d(tensor(x), gamma, beta, running, training=False)
    expected = (x - running.mean[None, :, None]) / np.sqrt(running.var[None, :, None] + 1e-5)
    assert np.allclose(out.numpy(), expected, atol=1e-5)
    with pytest.raises(DimensionError):
        batch_norm1d(tensor(np.ones((1, 2, 1))), gamma, beta, running, training=True)


def test_pools():
    x = tensor([[2, 2, 2], [1, 3, 5]])
    assert adaptive_avg_pool(x).numpy().tolist() == [[2], [3]]
    std = adaptive_std_pool(tensor([[2, 2, 2], [1, 3, 3]]), eps=0).numpy()
    assert std[0, 0] == 0
    assert adaptive_std_pool(tensor([[1, 3]]), eps=0).numpy().tolist() == [[1]]
    assert adaptive_std_pool(tensor([[7]]), eps=0).numpy().tolist() == [[0]]
    assert np.isclose(adaptive_std_pool(tensor([[2, 2]])).item(), np.sqrt(1e-5))
    assert global_avg_pool_time(x).numpy().tolist() == [2, 3]


def test_softmax_sigmoid():
    assert np.allclose(softmax(tensor([0, 0, 0])).numpy(), 1 / 3)
    assert np.allclose(softmax(tensor([1000, 1000])).numpy(), 0.5)
    assert sigmoid(tensor([0])).item() == 0.5
    with pytest.raises(DimensionError):
        softmax(tensor([1, 2]), axis=1)


def test_transpose_reshape():
    x = tensor(np.arange(6).reshape(2, 3))
    assert transpose(x).shape == (3, 2)
    assert transpose(tensor(np.ones((4, 2, 3)))).shape == (4, 3, 2)
    assert reshape(x, 3, 2).shape == (3, 2)
    assert x.reshape((6,)).shape == (6,)
    with pytest.raises(DimensionError):
        transpose(tensor([1, 2]))


def test_backward_examples():
    x = parameter([1, 1, 1])
    backward(x.sum())
    assert x.grad.tolist() == [1, 1, 1]

    x = parameter([1, 2])
    (x * x).sum().backward()
    assert x.grad.tolist() == [2, 4]


def test_backward_accumulates_shared_inputs():
    x = parameter([3.0])
    y = x * x + x * 2 + x
    y.sum().backward()
    assert x.grad.tolist() == [9]


def test_backward_errors():
    x = parameter([1, 2])
    with pytest.raises(DimensionError):
        backward(x * 2)
    with pytest.raises(StateError):
        backward(tensor([1]).sum())
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(StateError):
        backward(loss)


def test_no_grad():
    x = parameter([1, 2])
    with no_grad():
        assert not is_grad_enabled()
        y = (x * x).sum()
    assert is_grad_enabled()
    assert not y.requires_grad
    with pytest.raises(StateError):
        backward(y)


def test_tape():
    x = parameter([1, 2])
    loss = ((x * x) + x).sum()
    tape = ComputationTape.record(loss)
    assert tape.nodes[0] is x
    assert tape.nodes[-1] is loss
    assert len(tape) == len(set(id(n) for n in tape.nodes))


def test_determinism(rng):
    x = rng.uniform(-2, 2, (2, 4, 30))
    w = rng.uniform(-1, 1, (6, 4, 3))
    a = conv1d(tensor(x), tensor(w), padding=1).numpy()
    b = conv1d(tensor(x), tensor(w), padding=1).numpy()
    assert np.array_equal(a, b)


def test_relative_error():
    assert relative_error([1.0], [1.0]).tolist() == [0]
    assert relative_error([0.0], [1e-4]).tolist() == [1.0]
    assert relative_error([1e-4 + 5e-7], [1e-4]).tolist() == [pytest.approx(5e-7 / (1e-4 + 5e-7))]
    assert relative_error([0.0], [0.0]).tolist() == [0]


def test_check_gradients_small_gradients(mocker):
    with double_precision():
        x = parameter([1.0, 2.0, 3.0])
        scale = tensor([1e-4, 1.0, 0.0])

        def loss():
            return (x * x * scale).sum()

        assert check_gradients(loss, dict(x=x)) == dict(x=0.0)

        def skewed(value):
            backward(value)
            x.grad = x.grad + np.array([5e-7, 0.0, 0.0])

        mocker.patch('dwstrack.gradcheck.backward', side_effect=skewed)
        errors = check_gradients(loss, dict(x=x))
    assert errors['x'] == pytest.approx(5e-7 / (2e-4 + 5e-7), rel=1e-3)
    assert errors['x'] > 1e-4


@pytest.mark.parametrize(
    'name,build',
    [
        ('affine', lambda r: (
            lambda x, w, b: affine(x, w, b),
            [(4, 5), (3, 5), (3,)])),
        ('conv1d', lambda r: (
            lambda x, w, b: conv1d(x, w, b, stride=2, padding=1),
            [(2, 4, 9), (6, 4, 3), (6,)])),
        ('depthwise', lambda r: (
            lambda x, w: conv1d(x, w, padding=1, groups=4),
            [(2, 4, 7), (4, 1, 3)])),
        ('unbatched_conv1d', lambda r: (
            lambda x, w: conv1d(x, w, stride=3, padding=1),
            [(3, 11), (2, 3, 3)])),
        ('mul', lambda r: (
            lambda a, b: elementwise_mul(a, b),
            [(4, 7), (4, 7)])),
        ('broadcast_mul', lambda r: (
            lambda a, b: a * b + b,
            [(4, 7), (4, 1)])),
        ('avg_pool', lambda r: (adaptive_avg_pool, [(5, 6)])),
        ('std_pool', lambda r: (adaptive_std_pool, [(5, 6)])),
        ('softmax', lambda r: (lambda x: softmax(x, axis=0), [(5, 3)])),
        ('sigmoid', lambda r: (sigmoid, [(3, 4)])),
        ('transpose', lambda r: (lambda x: transpose(x) * transpose(x), [(3, 4)])),
        ('global_avg_pool_time', lambda r: (global_avg_pool_time, [(2, 3, 4)])),
    ]
)
def test_gradients(name, build, rng):
    fn, shapes = build(rng)
    with double_precision():
        inputs = [parameter(rng.uniform(-2, 2, s)) for s in shapes]
        weights = tensor(rng.uniform(-1, 1, fn(*inputs).shape))
        errors = check_gradients(
            lambda: (fn(*inputs) * weights).sum(),
            {str(i): t for i, t in enumerate(inputs)})
    assert max(errors.values()) <= 1e-4, name


def test_gradients_batch_norm(rng):
    with double_precision():
        x = parameter(rng.uniform(-2, 2, (3, 2, 5)))
        gamma, beta = parameter(rng.uniform(0.5, 1.5, 2)), parameter(rng.uniform(-1, 1, 2))
        running = RunningStats(2)
        weights = tensor(rng.uniform(-1, 1, (3, 2, 5)))
        errors = check_gradients(
            lambda: (batch_norm1d(x, gamma, beta, running, True) * weights).sum(),
            dict(x=x, gamma=gamma, beta=beta), h=1e-5)
        assert max(errors.values()) <= 1e-4

        errors = check_gradients(
            lambda: (batch_norm1d(x, gamma, beta, running, False) * weights).sum(),
            dict(x=x, gamma=gamma, beta=beta), h=1e-5)
    assert max(errors.values()) <= 1e-4

