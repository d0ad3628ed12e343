import numpy as np
import pytest

from unmix import diffcore as dc


def fd_param_grads(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central finite differences of loss_fn() w.r.t. every parameter entry."""
    out = {}
    for name, t in params.items():
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"]) if t.data.ndim else None
        if it is None:
            old = float(t.data)
            t.data = np.array(old + h)
            lp = loss_fn()
            t.data = np.array(old - h)
            lm = loss_fn()
            t.data = np.array(old)
            g = np.array((lp - lm) / (2 * h))
        else:
            for _ in it:
                ix = it.multi_index
                old = t.data[ix]
                t.data[ix] = old + h
                lp = loss_fn()
                t.data[ix] = old - h
                lm = loss_fn()
                t.data[ix] = old
                g[ix] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def max_rel_err(analytic: dict, numeric: dict, floor: float | None = None) -> float:
    """Largest elementwise relative error with a scale-aware floor.

    The floor defaults to 1e-6 of the largest gradient magnitude, so
    near-zero entries are judged on an absolute scale the FD oracle can
    actually resolve in double precision.
    """
    if floor is None:
        scale = max(float(np.max(np.abs(np.asarray(g)))) if np.asarray(g).size
                    else 0.0 for g in analytic.values())
        floor = max(1e-6 * scale, 1e-9)
    worst = 0.0
    for name in analytic:
        a = np.asarray(analytic[name])
        n = np.asarray(numeric[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_mlp(widths, activations, seed=0, name="net"):
    return dc.MlpParams.create(widths, activations,
                               np.random.default_rng(seed), name)


def zero_mlp(net: dc.MlpParams):
    """Zero every weight and bias in place."""
    for t in (*net.weights, *net.biases):
        t.data = np.zeros_like(t.data)
    return net
