"""Central finite-difference checks for the tensor engine."""
import numpy as np

from .compute import Tensor, backward


def numerical_grad(f, arrays, index, eps=1e-6):
    """d f / d arrays[index] by central differences. ``f`` maps arrays to a float."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[i]
        base[i] = orig + eps
        hi = f(arrays)
        base[i] = orig - eps
        lo = f(arrays)
        base[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    """Largest elementwise gap, relative to the largest gradient magnitude."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build, arrays, eps=1e-6, wrt=None):
    """Compare autograd against finite differences.

    ``build`` takes a list of Tensors and returns a scalar Tensor. Returns
    the worst max_rel_error over the arrays listed in ``wrt`` (default all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = build(tensors)
    backward(loss)

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i in wrt:
        num = numerical_grad(f, arrays, i, eps)
        worst = max(worst, max_rel_error(tensors[i].grad, num))
    return worst
