"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from djpeg.jpeg import idct8_blocks
from djpeg.nn import (
    AvgPool, Bias, Conv, DCTFilterbank, DiffConv, InnerProduct, MaxPool, ReLU, Scale,
    Sequential, Sigmoid, SoftMax, Tensor,
)
from djpeg.nn import functional as F

GRAD_TOL = 1e-4
GRAD_H = 1e-5

# PASS/FAIL lines of the acceptance criteria, echoed in the terminal summary
ACCEPTANCE_LINES = []


def numeric_grad(f, x: np.ndarray, h: float = GRAD_H) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# histogram

def half_integer_images(rng, n, B=64, spread=60):
    """Images whose AC coefficients are k + 0.5, i.e. 0.5 away from every integer boundary."""
    coef = np.round(rng.laplace(0, 12, size=(n, B // 8, B // 8, 64))).clip(-spread, spread) + 0.5
    coef[..., 0] = rng.uniform(-200, 200, size=coef.shape[:-1])
    return np.stack([idct8_blocks(c) for c in coef]), coef


def histogram_oracle(coef, cfg):
    """Exact per-bin counts [b_i, b_{i+1}) for every configured frequency, by brute force."""
    b = cfg.bin_boundaries
    out = np.zeros((len(b) - 1, len(cfg.frequencies)))
    for j, (c1, c2) in enumerate(cfg.frequencies):
        values = coef[..., 8 * c1 + c2].ravel()
        for i in range(len(b) - 1):
            out[i, j] = np.sum((values >= b[i]) & (values < b[i + 1]))
    return out


# gradients

def check_layer(layer, in_shape, rng, x=None, batch=2):
    """Errors between analytic and numeric gradients of sum(out * R), for the input and every parameter."""
    layer.build(in_shape, rng, np.float64)
    if x is None:
        x = rng.normal(size=(batch,) + tuple(in_shape))
    xt = Tensor(x, requires_grad=True, dtype=np.float64)
    out = layer(xt)
    proj = rng.normal(size=out.shape)
    loss = F.inner_product(F.reshape(out, (1, -1)), proj.reshape(-1, 1))
    loss.backward()

    def f():
        return float(np.sum(layer(Tensor(x, dtype=np.float64)).data * proj))

    errors = {"input": max_rel_error(xt.grad, numeric_grad(f, x))}
    for name, p in layer.params.items():
        if p.requires_grad:
            errors[name] = max_rel_error(p.grad, numeric_grad(f, p.data))
    return errors


def _relu(rng):
    x = rng.normal(size=(2, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return check_layer(ReLU(), (3, 3, 2), rng, x=x)


def _bias(rng):
    layer = Bias()
    layer.build((3, 3, 2), rng, np.float64)
    layer.params["bias"].data[:] = rng.normal(size=2)
    return check_layer(layer, (3, 3, 2), rng)


def _softmax_xent(rng):
    logits = rng.normal(size=(5, 2))
    labels = rng.integers(0, 2, size=5)
    lt = Tensor(logits, requires_grad=True, dtype=np.float64)
    F.softmax_xent(lt, labels)[1].backward()
    num = numeric_grad(lambda: float(F.softmax_xent(logits, labels)[1].data), logits)
    return {"logits": max_rel_error(lt.grad, num)}


def _histogram_chain(rng):
    """Soft-count front end at gain 10, so gradients reach the bin boundaries."""
    net = Sequential([Bias(trainable=True, levels=[-0.5, 0.0, 0.7, 1.1]), Scale(10.0), Sigmoid(),
                      AvgPool(None), Scale(4.0), DiffConv(4)])
    net.build((2, 2, 3), dtype=np.float64)
    x = rng.normal(size=(2, 2, 2, 3))
    proj = rng.normal(size=(2, 3, 3, 1))
    levels = net.layers[0].params["levels"]
    out = net(Tensor(x, dtype=np.float64))
    net.backward(F.inner_product(F.reshape(out, (1, -1)), proj.reshape(-1, 1)))

    def f():
        return float(np.sum(net.run(Tensor(x, dtype=np.float64)).data * proj))

    if not np.any(levels.grad != 0):
        return {"levels": np.inf}
    return {"levels": max_rel_error(levels.grad, numeric_grad(f, levels.data))}


def _pixel_network(rng):
    """The pixel detector's layer sequence, shrunk to an 8x8 input, checked as one graph."""
    net = Sequential([Scale(0.5), Conv(3, 2), MaxPool(2, 2), Conv(1, 2), MaxPool(2, 2),
                      Conv(1, 2), MaxPool(2, 2), InnerProduct(5), ReLU(), InnerProduct(2), SoftMax()])
    net.build((8, 8, 1), seed=3, dtype=np.float64)
    x = rng.normal(size=(3, 8, 8, 1))
    labels = np.array([0, 1, 1])
    _, loss = F.softmax_xent(net.logits(x), labels)
    net.backward(loss)

    def f():
        return float(F.softmax_xent(net.logits(x), labels)[1].data)

    return {name: max_rel_error(p.grad, numeric_grad(f, p.data)) for name, p in net.trainable_params()}


GRADIENT_CASES = {
    "Conv": lambda rng: check_layer(Conv(3, 2, stride=2), (7, 7, 2), rng),
    "MaxPool": lambda rng: check_layer(MaxPool(2, 2), (5, 5, 2), rng),
    "AvgPool": lambda rng: check_layer(AvgPool(3, 2), (6, 6, 2), rng),
    "AvgPool-global": lambda rng: check_layer(AvgPool(None), (4, 4, 3), rng),
    "ReLU": _relu,
    "Sigmoid": lambda rng: check_layer(Sigmoid(), (3, 3, 2), rng),
    "Bias": _bias,
    "Bias-levels": lambda rng: check_layer(Bias(trainable=True, levels=[-1.0, 0.0, 0.5]), (2, 2, 3), rng),
    "InnerProduct": lambda rng: check_layer(InnerProduct(4), (2, 2, 3), rng),
    "SoftMax": lambda rng: check_layer(SoftMax(), (3,), rng),
    "Scale": lambda rng: check_layer(Scale(-2.5), (2, 3, 1), rng),
    "DCTFilterbank": lambda rng: check_layer(DCTFilterbank([(0, 1), (2, 3), (7, 7)]), (16, 8, 1), rng),
    "DiffConv": lambda rng: check_layer(DiffConv(4), (1, 1, 12), rng),
    "softmax-xent": _softmax_xent,
    "histogram-chain": _histogram_chain,
    "pixel-network": _pixel_network,
}


def gradient_suite(seed=1234) -> dict:
    """Worst relative error of every gradient case."""
    return {name: max(case(np.random.default_rng(seed)).values()) for name, case in GRADIENT_CASES.items()}
