"""Shared finite-difference utilities for the gradient tests."""

import numpy as np

from clip3d import autodiff as ad

H = 1e-5


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def numeric_grad(f, arrays, k, h=H) -> np.ndarray:
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[k]``."""
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(op, arrays, rng, h=H):
    """Max relative error between analytic and numeric gradients of ``sum(op(...) * R)``.

    A fixed random projection ``R`` makes every output element contribute.
    """
    with ad.no_grad():
        out_shape = op(*[ad.Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)

    def f(*xs):
        with ad.no_grad():
            return float((op(*[ad.Tensor(a) for a in xs]).data * proj).sum())

    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    ad.backward(ad.reduce_sum(ad.mul(out, ad.Tensor(proj))))
    return max(rel_err(t.grad, numeric_grad(f, arrays, k, h)) for k, t in enumerate(ts))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _ids(rng):
    return rng.integers(0, 6, size=(3, 4))


# name -> (op over Tensors, sampler of float64 input arrays)
PRIMITIVES = {
    "add": (ad.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "sub": (ad.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul": (ad.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "mul_scalar": (ad.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=())]),
    "scale": (lambda x: ad.scale(x, -1.7), lambda r: [r.normal(size=(3, 4))]),
    "negate": (ad.negate, lambda r: [r.normal(size=(3, 4))]),
    "exp": (ad.exp, lambda r: [r.normal(size=(3, 4))]),
    "log": (ad.log, lambda r: [r.uniform(0.2, 3.0, size=(3, 4))]),
    "relu": (ad.relu, lambda r: [_away_from_zero(r, (3, 4))]),
    "sum_all": (ad.reduce_sum, lambda r: [r.normal(size=(3, 4))]),
    "sum_axis1": (lambda x: ad.reduce_sum(x, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "mean_axis0": (lambda x: ad.reduce_mean(x, axis=0), lambda r: [r.normal(size=(3, 4))]),
    "max_axis1": (lambda x: ad.reduce_max(x, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "reshape": (lambda x: ad.reshape(x, (2, 6)), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (ad.transpose, lambda r: [r.normal(size=(3, 4))]),
    "expand": (lambda x: ad.expand(x, (3, 4)), lambda r: [r.normal(size=(4,))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))]),
    "embedding": (lambda t: ad.embedding(t, _EMB_IDS), lambda r: [r.normal(size=(6, 3))]),
    "matmul": (ad.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "linear": (ad.linear, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=(2,))]),
    "l2_normalize_rows": (ad.l2_normalize_rows, lambda r: [r.normal(size=(3, 5))]),
    "softmax_cross_entropy_rows": (ad.softmax_cross_entropy_rows, lambda r: [2 * r.normal(size=(4, 4))]),
    "conv3d": (ad.conv3d, lambda r: [r.normal(size=(2, 2, 4, 4, 4)), r.normal(size=(3, 2, 3, 3, 3)), r.normal(size=(3,))]),
    "conv_transpose3d": (
        lambda x, w, b: ad.conv_transpose3d(x, w, b, 4),
        lambda r: [r.normal(size=(1, 3, 2, 2, 2)), r.normal(size=(3, 2, 3, 3, 3)), r.normal(size=(2,))],
    ),
}

_EMB_IDS = np.array([[0, 2, 2, 5], [1, 0, 4, 4], [3, 3, 3, 0]])


class MicroEncoder:
    """Two stacked linear maps followed by row normalisation, in float64."""

    def __init__(self, rng, d_in, d, hidden=5):
        self.w1 = ad.Tensor(rng.normal(size=(d_in, hidden)), requires_grad=True)
        self.b1 = ad.Tensor(rng.normal(size=hidden), requires_grad=True)
        self.w2 = ad.Tensor(rng.normal(size=(hidden, d)), requires_grad=True)

    @property
    def params(self):
        return [self.w1, self.b1, self.w2]

    def __call__(self, x):
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, np.float64))
        return ad.l2_normalize_rows(ad.matmul(ad.linear(x, self.w1, self.b1), self.w2))


def micro_setup(seed, n, b, d, d_img=6, d_txt=7):
    rng = np.random.default_rng(seed)
    enc_i, enc_t = MicroEncoder(rng, d_img, d), MicroEncoder(rng, d_txt, d)
    xi = [rng.normal(size=(b, d_img)) for _ in range(n)]
    xt = [rng.normal(size=(b, d_txt)) for _ in range(n)]
    return enc_i, enc_t, xi, xt


def grads_of(tensors):
    return [t.grad.copy() for t in tensors]


# one "PASS/FAIL <criterion>: <detail>" line per acceptance criterion, echoed at session end
ACCEPTANCE: list[str] = []


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line
