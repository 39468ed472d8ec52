import numpy as np

from pvadv import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f at x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grad(build, *arrays, h=1e-4):
    """Compare autodiff and finite-difference gradients of build(*tensors) -> scalar.

    Returns the worst relative error across all inputs.
    """
    tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    T.backward(build(*tensors))
    worst = 0.0
    for k, t in enumerate(tensors):
        def f(v, k=k):
            args = [T.Tensor(np.array(a, dtype=np.float64)) for a in arrays]
            args[k] = T.Tensor(v)
            return build(*args).item()

        worst = max(worst, rel_err(t.grad, numeric_grad(f, arrays[k], h)))
    return worst
