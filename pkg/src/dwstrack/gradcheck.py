"""
Central finite-difference checks of analytic gradients.
"""
import numpy as np

from dwstrack.tensor import backward, no_grad

__all__ = ['numerical_gradient', 'relative_error', 'check_gradients']


def relative_error(analytic, numeric, floor=1e-8):
    """
    |a - n| / max(|a|, |n|, floor), elementwise.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(loss_fn, tensor, indices, h=1e-5):
    """
    Central differences of the scalar `loss_fn()` w.r.t. `tensor` at flat `indices`.
    """
    base = np.array(tensor.data)
    grads = []
    with no_grad():
        for index in indices:
            values = []
            for step in (h, -h):
                shifted = base.copy()
                shifted.flat[index] += step
                tensor.assign(shifted)
                values.append(float(loss_fn().item()))
            grads.append((values[0] - values[1]) / (2 * h))
    tensor.assign(base)
    return np.array(grads)


def check_gradients(loss_fn, tensors, h=1e-5, samples=None, rng=None, atol=1e-8):
    """
    Compare analytic and numeric gradients of `loss_fn()`.

    Coordinates on which both agree to within `atol`, like the structurally zero gradient
    of a bias feeding a batch norm, count as exact; all others are measured by
    `relative_error`.

    :param tensors: dict mapping names to tensors requiring gradients
    :param samples: if given, number of randomly drawn coordinates checked overall
    :return: dict mapping names to the maximal relative error
    """
    for t in tensors.values():
        t.zero_grad()
    backward(loss_fn())
    analytic = {name: np.array(t.grad) for name, t in tensors.items()}

    coords = [(name, i) for name, t in tensors.items() for i in range(t.size)]
    if samples is not None and samples < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), samples, replace=False))]

    errors = {}
    for name, t in tensors.items():
        indices = [i for n, i in coords if n == name]
        if not indices:
            continue
        numeric = numerical_gradient(loss_fn, t, indices, h=h)
        a = analytic[name].flat[indices]
        error = np.where(np.abs(a - numeric) <= atol, 0.0, relative_error(a, numeric))
        errors[name] = float(error.max())
    return errors
