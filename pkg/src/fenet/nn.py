"""Minimal dense/convolutional network engine with exact backpropagation.

Everything is float64 and deterministic. Networks are immutable during
inference (forward/gradient calls never mutate state), so concurrent
read-only evaluation is safe; training works on a private copy.

Layout conventions: images are (H, W, C) channels-last, batches prepend N.
Dense weights are (out, in); conv kernels are (out_c, in_c, kh, kw).
"""

from dataclasses import dataclass, field

import numpy as np

from .util import rng_from


class ShapeMismatchError(ValueError):
    """Input shape does not match what the network/layer expects."""


def _glorot_uniform(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def power_iteration(apply_fn, adjoint_fn, in_shape, rng, max_iter=200, tol=1e-6):
    """Largest singular value of a linear operator given by apply/adjoint callables.

    Iterates v <- A^T A v with normalization, stopping at relative change
    below `tol` or after `max_iter` rounds. The start vector is drawn from
    `rng`, so results are reproducible.
    """
    v = rng.standard_normal(in_shape)
    nv = np.linalg.norm(v)
    if nv == 0:
        v = np.ones(in_shape)
        nv = np.linalg.norm(v)
    v /= nv
    sigma_prev = 0.0
    sigma = 0.0
    for _ in range(max_iter):
        u = apply_fn(v)
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0:
            return 0.0
        w = adjoint_fn(u)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        if abs(sigma - sigma_prev) <= tol * sigma:
            break
        sigma_prev = sigma
    return sigma


class Layer:
    """Base layer: bind() fixes shapes, forward/backward run on batches."""

    kind = "Layer"

    def bind(self, in_shape):
        raise NotImplementedError

    @property
    def params(self):
        return []

    def init_params(self, rng):
        pass

    def forward(self, x):
        """Return (output, cache). x has a leading batch axis."""
        raise NotImplementedError

    def backward(self, cache, gy, need_input=True, need_params=True):
        """Return (grad_input or None, [grad per param])."""
        raise NotImplementedError

    def lipschitz_bound(self, rng):
        raise NotImplementedError

    def header(self):
        raise NotImplementedError

    def clone(self):
        raise NotImplementedError


class Dense(Layer):
    kind = "Dense"

    def __init__(self, out_features, weight=None, bias=None):
        if out_features < 1:
            raise ValueError("out_features must be positive")
        self.out_features = int(out_features)
        self.weight = None if weight is None else np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.in_shape = None
        self.out_shape = None

    def bind(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatchError(
                f"Dense expects a flat input, got shape {in_shape}; add a Flatten layer"
            )
        self.in_shape = tuple(in_shape)
        self.out_shape = (self.out_features,)
        if self.weight is not None and self.weight.shape != (self.out_features, in_shape[0]):
            raise ShapeMismatchError(
                f"Dense weight shape {self.weight.shape} != {(self.out_features, in_shape[0])}"
            )
        return self.out_shape

    @property
    def params(self):
        return [self.weight, self.bias]

    def init_params(self, rng):
        n_in = self.in_shape[0]
        if self.weight is None:
            self.weight = _glorot_uniform(rng, (self.out_features, n_in), n_in, self.out_features)
        if self.bias is None:
            self.bias = np.zeros(self.out_features)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, gy, need_input=True, need_params=True):
        x = cache
        gx = gy @ self.weight if need_input else None
        if need_params:
            return gx, [gy.T @ x, gy.sum(axis=0)]
        return gx, None

    def lipschitz_bound(self, rng):
        w = self.weight
        return power_iteration(lambda v: w @ v, lambda u: w.T @ u, self.in_shape, rng)

    def header(self):
        return {"kind": self.kind, "out_features": self.out_features}

    def clone(self):
        return Dense(self.out_features, weight=self.weight.copy(), bias=self.bias.copy())


class Conv2D(Layer):
    """2D convolution, channels-last, zero 'same' padding or 'valid'."""

    kind = "Conv2D"

    def __init__(self, out_channels, kernel, stride=1, padding="same", weight=None, bias=None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if min(kh, kw) < 1 or stride < 1:
            raise ValueError("kernel dims and stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.out_channels = int(out_channels)
        self.kh, self.kw = int(kh), int(kw)
        self.stride = int(stride)
        self.padding = padding
        self.weight = None if weight is None else np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.in_shape = None
        self.out_shape = None
        self._pads = None

    def bind(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"Conv2D expects (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        s = self.stride
        if self.padding == "same":
            oh, ow = -(-h // s), -(-w // s)
            ph = max((oh - 1) * s + self.kh - h, 0)
            pw = max((ow - 1) * s + self.kw - w, 0)
            self._pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
        else:
            if h < self.kh or w < self.kw:
                raise ShapeMismatchError(f"input {in_shape} smaller than kernel ({self.kh}, {self.kw})")
            oh, ow = (h - self.kh) // s + 1, (w - self.kw) // s + 1
            self._pads = (0, 0, 0, 0)
        self.in_shape = tuple(in_shape)
        self.out_shape = (oh, ow, self.out_channels)
        kshape = (self.out_channels, c, self.kh, self.kw)
        if self.weight is not None and self.weight.shape != kshape:
            raise ShapeMismatchError(f"Conv2D kernel shape {self.weight.shape} != {kshape}")
        return self.out_shape

    @property
    def params(self):
        return [self.weight, self.bias]

    def init_params(self, rng):
        c = self.in_shape[2]
        if self.weight is None:
            fan_in = c * self.kh * self.kw
            fan_out = self.out_channels * self.kh * self.kw
            self.weight = _glorot_uniform(
                rng, (self.out_channels, c, self.kh, self.kw), fan_in, fan_out
            )
        if self.bias is None:
            self.bias = np.zeros(self.out_channels)

    def _pad(self, x):
        pt, pb, pl, pr = self._pads
        if pt or pb or pl or pr:
            return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        return x

    def _linear(self, xp):
        oh, ow, _ = self.out_shape
        s = self.stride
        out = np.zeros((xp.shape[0], oh, ow, self.out_channels))
        for i in range(self.kh):
            for j in range(self.kw):
                sl = xp[:, i : i + s * oh : s, j : j + s * ow : s, :]
                out += sl @ self.weight[:, :, i, j].T
        return out

    def forward(self, x):
        xp = self._pad(x)
        return self._linear(xp) + self.bias, xp

    def _input_grad(self, gy, xp_shape):
        oh, ow, _ = self.out_shape
        s = self.stride
        pt, pb, pl, pr = self._pads
        gxp = np.zeros(xp_shape)
        for i in range(self.kh):
            for j in range(self.kw):
                gxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += gy @ self.weight[:, :, i, j]
        h, w = self.in_shape[:2]
        return gxp[:, pt : pt + h, pl : pl + w, :]

    def backward(self, cache, gy, need_input=True, need_params=True):
        xp = cache
        gx = self._input_grad(gy, xp.shape) if need_input else None
        if not need_params:
            return gx, None
        oh, ow, _ = self.out_shape
        s = self.stride
        gw = np.empty_like(self.weight)
        for i in range(self.kh):
            for j in range(self.kw):
                sl = xp[:, i : i + s * oh : s, j : j + s * ow : s, :]
                gw[:, :, i, j] = np.tensordot(gy, sl, axes=([0, 1, 2], [0, 1, 2]))
        return gx, [gw, gy.sum(axis=(0, 1, 2))]

    def lipschitz_bound(self, rng):
        # Spectral norm of the conv operator itself, not of the flattened kernel.
        def apply_fn(v):
            return self._linear(self._pad(v[None]))[0]

        def adjoint_fn(u):
            h, w, c = self.in_shape
            pt, pb, pl, pr = self._pads
            return self._input_grad(u[None], (1, h + pt + pb, w + pl + pr, c))[0]

        return power_iteration(apply_fn, adjoint_fn, self.in_shape, rng)

    def header(self):
        return {
            "kind": self.kind,
            "out_channels": self.out_channels,
            "kernel": [self.kh, self.kw],
            "stride": self.stride,
            "padding": self.padding,
        }

    def clone(self):
        return Conv2D(
            self.out_channels, (self.kh, self.kw), self.stride, self.padding,
            weight=self.weight.copy(), bias=self.bias.copy(),
        )


class ReLU(Layer):
    kind = "ReLU"

    def __init__(self):
        self.in_shape = None
        self.out_shape = None

    def bind(self, in_shape):
        self.in_shape = self.out_shape = tuple(in_shape)
        return self.out_shape

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache, gy, need_input=True, need_params=True):
        return (gy * cache if need_input else None), ([] if need_params else None)

    def lipschitz_bound(self, rng):
        return 1.0

    def header(self):
        return {"kind": self.kind}

    def clone(self):
        return ReLU()


class AvgPool2D(Layer):
    kind = "AvgPool2D"

    def __init__(self, pool, stride=None):
        if pool < 1:
            raise ValueError("pool must be >= 1")
        self.pool = int(pool)
        self.stride = int(stride) if stride is not None else int(pool)
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        self.in_shape = None
        self.out_shape = None

    def bind(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"AvgPool2D expects (H, W, C) input, got {in_shape}")
        h, w, c = in_shape
        k, s = self.pool, self.stride
        if h < k or w < k:
            raise ShapeMismatchError(f"input {in_shape} smaller than pool {k}")
        self.in_shape = tuple(in_shape)
        self.out_shape = ((h - k) // s + 1, (w - k) // s + 1, c)
        return self.out_shape

    def _apply(self, x):
        oh, ow, _ = self.out_shape
        k, s = self.pool, self.stride
        out = np.zeros((x.shape[0], oh, ow, x.shape[3]))
        for i in range(k):
            for j in range(k):
                out += x[:, i : i + s * oh : s, j : j + s * ow : s, :]
        return out / (k * k)

    def _adjoint(self, gy, in_hw):
        oh, ow, _ = self.out_shape
        k, s = self.pool, self.stride
        gx = np.zeros((gy.shape[0], in_hw[0], in_hw[1], gy.shape[3]))
        g = gy / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, i : i + s * oh : s, j : j + s * ow : s, :] += g
        return gx

    def forward(self, x):
        return self._apply(x), None

    def backward(self, cache, gy, need_input=True, need_params=True):
        gx = self._adjoint(gy, self.in_shape[:2]) if need_input else None
        return gx, ([] if need_params else None)

    def lipschitz_bound(self, rng):
        if self.stride == self.pool:
            # Disjoint k*k windows: operator norm is exactly 1/sqrt(k*k).
            return 1.0 / self.pool
        return power_iteration(
            lambda v: self._apply(v[None])[0],
            lambda u: self._adjoint(u[None], self.in_shape[:2])[0],
            self.in_shape,
            rng,
        )

    def header(self):
        return {"kind": self.kind, "pool": self.pool, "stride": self.stride}

    def clone(self):
        return AvgPool2D(self.pool, self.stride)


class Flatten(Layer):
    kind = "Flatten"

    def __init__(self):
        self.in_shape = None
        self.out_shape = None

    def bind(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = (int(np.prod(in_shape)),)
        return self.out_shape

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, cache, gy, need_input=True, need_params=True):
        gx = gy.reshape((gy.shape[0],) + self.in_shape) if need_input else None
        return gx, ([] if need_params else None)

    def lipschitz_bound(self, rng):
        return 1.0

    def header(self):
        return {"kind": self.kind}

    def clone(self):
        return Flatten()


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, AvgPool2D, Flatten)}


def layer_from_header(h):
    kind = h.get("kind")
    if kind == "Dense":
        return Dense(h["out_features"])
    if kind == "Conv2D":
        return Conv2D(h["out_channels"], tuple(h["kernel"]), h["stride"], h["padding"])
    if kind == "ReLU":
        return ReLU()
    if kind == "AvgPool2D":
        return AvgPool2D(h["pool"], h.get("stride"))
    if kind == "Flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class Network:
    """An ordered layer stack ending in `num_classes` raw scores.

    The loss is softmax cross-entropy over the final scores. Gradient
    methods return exact analytic derivatives.
    """

    def __init__(self, layers, input_shape, num_classes, seed=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.bind(shape)
        if shape != (self.num_classes,):
            raise ShapeMismatchError(
                f"network output shape {shape} != ({self.num_classes},); "
                "the final layer must produce one score per class"
            )
        missing = any(p is None for layer in self.layers for p in layer.params)
        if missing:
            if seed is None:
                raise ValueError("uninitialized parameters and no seed given")
            for i, layer in enumerate(self.layers):
                layer.init_params(rng_from(seed, i))

    # -- inference ---------------------------------------------------------

    def _check_batch(self, xb):
        xb = np.asarray(xb, dtype=np.float64)
        if xb.shape[1:] != self.input_shape:
            raise ShapeMismatchError(
                f"input shape {xb.shape[1:]} != expected {self.input_shape}"
            )
        return xb

    def forward_batch(self, xb):
        xb = self._check_batch(xb)
        for layer in self.layers:
            xb, _ = layer.forward(xb)
        return xb

    def forward(self, x):
        return self.forward_batch(np.asarray(x)[None])[0]

    def classify_batch(self, xb):
        # argmax takes the first maximum, i.e. ties go to the smallest index
        return np.argmax(self.forward_batch(xb), axis=1)

    def classify(self, x):
        return int(self.classify_batch(np.asarray(x)[None])[0])

    def _check_labels(self, labels):
        labels = np.asarray(labels)
        if labels.min(initial=0) < 0 or labels.max(initial=-1) >= self.num_classes:
            raise ValueError(f"label out of range [0, {self.num_classes})")
        return labels.astype(np.intp)

    def loss_batch(self, xb, labels):
        labels = self._check_labels(labels)
        z = self.forward_batch(xb)
        # log-sum-exp via log1p over the non-max terms: keeps the loss
        # strictly positive even at huge margins, where the plain form
        # rounds 1 + tiny to 1 and returns -0.0
        m = z.max(axis=1)
        ez = np.exp(z - m[:, None])
        rows = np.arange(len(labels))
        ez[rows, np.argmax(z, axis=1)] = 0.0
        return (m - z[rows, labels]) + np.log1p(ez.sum(axis=1))

    def loss(self, x, label):
        return float(self.loss_batch(np.asarray(x)[None], [label])[0])

    # -- gradients ---------------------------------------------------------

    def _forward_with_caches(self, xb):
        xb = self._check_batch(xb)
        caches = []
        for layer in self.layers:
            xb, cache = layer.forward(xb)
            caches.append(cache)
        return xb, caches

    def _backprop(self, xb, labels, need_input, need_params):
        labels = self._check_labels(labels)
        z, caches = self._forward_with_caches(xb)
        p = np.exp(_log_softmax(z))
        gz = p
        gz[np.arange(len(labels)), labels] -= 1.0
        param_grads = [None] * len(self.layers)
        g = gz
        for i in range(len(self.layers) - 1, -1, -1):
            want_input = need_input or i > 0
            g, pg = self.layers[i].backward(
                caches[i], g, need_input=want_input, need_params=need_params
            )
            param_grads[i] = pg
        return g, param_grads

    def grad_input_batch(self, xb, labels):
        """Per-example gradient of the loss w.r.t. each input."""
        g, _ = self._backprop(xb, labels, need_input=True, need_params=False)
        return g

    def grad_input(self, x, label):
        return self.grad_input_batch(np.asarray(x)[None], [label])[0]

    def grad_params(self, x, label):
        """Gradients w.r.t. every parameter tensor, summed over the batch.

        `x` may be a single input or a batch; `label` likewise.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            xb, labels = x[None], [label]
        else:
            xb, labels = x, label
        _, pgs = self._backprop(xb, labels, need_input=False, need_params=True)
        flat = []
        for pg in pgs:
            flat.extend(pg)
        return flat

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    # -- misc --------------------------------------------------------------

    def copy(self):
        return Network([l.clone() for l in self.layers], self.input_shape, self.num_classes)

    def lipschitz_upper_bound(self, seed=0):
        """Product of per-layer operator-norm bounds; a valid L2 Lipschitz bound."""
        bound = 1.0
        for i, layer in enumerate(self.layers):
            bound *= layer.lipschitz_bound(rng_from(seed, i, 0x4C49))
        return bound


@dataclass
class TrainConfig:
    learning_rates: tuple = (0.1, 0.01, 0.001)
    epochs_per_rate: int = 3
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        self.learning_rates = tuple(float(r) for r in self.learning_rates)
        if any(r <= 0 for r in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if self.epochs_per_rate < 0:
            raise ValueError("epochs_per_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _as_arrays(dataset):
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images, dtype=np.float64), np.asarray(dataset.labels)
    xs, ys = dataset
    return np.asarray(xs, dtype=np.float64), np.asarray(ys)


def train(net, dataset, cfg, augment=None):
    """Minibatch SGD over each learning rate in sequence; returns a new Network.

    `augment(net, rng, xb, yb) -> xb` may replace batch inputs before the
    gradient step (noise injection, adversarial examples). Deterministic
    for a fixed cfg.rng_seed.
    """
    xs, ys = _as_arrays(dataset)
    if len(xs) == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    rng = rng_from(cfg.rng_seed)
    n = len(xs)
    for rate in cfg.learning_rates:
        for _ in range(cfg.epochs_per_rate):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb, yb = xs[idx], ys[idx]
                if augment is not None:
                    xb = augment(net, rng, xb, yb)
                _, pgs = net._backprop(xb, yb, need_input=False, need_params=True)
                scale = rate / len(idx)
                for layer, pg in zip(net.layers, pgs):
                    for p, g in zip(layer.params, pg):
                        p -= scale * g
    return net


def train_with_log(net, dataset, cfg, augment=None):
    """Like train(), but also returns per-epoch (rate_index, rate, epoch, mean_loss)."""
    xs, ys = _as_arrays(dataset)
    if len(xs) == 0:
        raise ValueError("empty dataset")
    net = net.copy()
    rng = rng_from(cfg.rng_seed)
    n = len(xs)
    log = []
    for ri, rate in enumerate(cfg.learning_rates):
        for epoch in range(cfg.epochs_per_rate):
            order = rng.permutation(n)
            losses = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb, yb = xs[idx], ys[idx]
                if augment is not None:
                    xb = augment(net, rng, xb, yb)
                losses += float(net.loss_batch(xb, yb).sum())
                _, pgs = net._backprop(xb, yb, need_input=False, need_params=True)
                scale = rate / len(idx)
                for layer, pg in zip(net.layers, pgs):
                    for p, g in zip(layer.params, pg):
                        p -= scale * g
            log.append((ri, rate, epoch, losses / n))
    return net, log


def accuracy(net, dataset):
    xs, ys = _as_arrays(dataset)
    return float(np.mean(net.classify_batch(xs) == ys))


def build_network(arch, input_shape, num_classes, seed):
    """Construct a seeded network from a list of layer descriptors.

    A Dense descriptor with out_features=None resolves to num_classes, so
    one architecture can serve datasets with different class counts.
    """
    layers = []
    for h in arch:
        h = dict(h)
        if h.get("kind") == "Dense" and h.get("out_features") is None:
            h["out_features"] = num_classes
        layers.append(layer_from_header(h))
    return Network(layers, input_shape, num_classes, seed=seed)
