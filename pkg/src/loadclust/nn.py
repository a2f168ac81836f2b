"""Deterministic neural-network kernel on float64 numpy arrays.

Implements exactly the layer set needed for the load-curve autoencoder:
dense layers, strided same-padding 1-d convolution, zero-insertion
deconvolution, batch normalization, flatten/reshape plumbing, a
mean-squared reconstruction loss with optional quadratic weight penalty,
and SGD/Adam updates. All math is double precision and every source of
randomness is an explicit seeded generator, so identical seeds reproduce
results bitwise.
"""

from __future__ import annotations

import json

import numpy as np

ACTIVATIONS = ("linear", "elu", "tanh")


class ShapeError(ValueError):
    """Input shape inconsistent with layer parameters."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""


def _activate(z, kind):
    if kind == "linear":
        return z
    if kind == "elu":
        return np.where(z > 0.0, z, np.expm1(z))
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(z, y, kind):
    # derivative w.r.t. pre-activation z; y = activation(z) is reused
    if kind == "linear":
        return np.ones_like(z)
    if kind == "elu":
        return np.where(z > 0.0, 1.0, y + 1.0)
    if kind == "tanh":
        return 1.0 - y * y
    raise ValueError(f"unknown activation {kind!r}")


def _same_pad(length, kernel, stride):
    """Output length and left/right zero padding for 'same' convolution."""
    out = -(-length // stride)
    pad = max((out - 1) * stride + kernel - length, 0)
    return out, pad // 2, pad - pad // 2


def _fan_in_uniform(rng, shape, fan_in):
    limit = np.sqrt(1.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    """Fully connected layer: y = activation(x @ W.T + b)."""

    kind = "dense"

    def __init__(self, in_features, out_features, activation="linear", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.activation = activation
        if rng is None:
            self.weight = np.zeros((out_features, in_features))
        else:
            self.weight = _fan_in_uniform(rng, (out_features, in_features), in_features)
        self.bias = np.zeros(out_features)
        self.grads = {}
        self._cache = None

    def spec(self):
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "activation": self.activation,
        }

    def state(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def learnable(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expects (batch, {self.in_features}), got {x.shape}"
            )
        z = x @ self.weight.T + self.bias
        y = _activate(z, self.activation)
        self._cache = (x, z, y)
        return y

    def backward(self, dy):
        x, z, y = self._cache
        dz = dy * _activation_grad(z, y, self.activation)
        self.grads = {"weight": dz.T @ x, "bias": dz.sum(axis=0)}
        return dz @ self.weight


class Conv1D:
    """1-d convolution with 'same' zero padding and integer stride.

    Input (batch, in_channels, length) -> (batch, filters, ceil(length/stride)).
    """

    kind = "conv1d"

    def __init__(self, in_channels, filters, kernel_size, stride=1,
                 activation="linear", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.in_channels = int(in_channels)
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.activation = activation
        shape = (filters, in_channels, kernel_size)
        if rng is None:
            self.weight = np.zeros(shape)
        else:
            self.weight = _fan_in_uniform(rng, shape, in_channels * kernel_size)
        self.bias = np.zeros(filters)
        self.grads = {}
        self._cache = None

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "activation": self.activation,
        }

    def state(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def learnable(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv1d expects (batch, {self.in_channels}, length), got {x.shape}"
            )
        batch, _, length = x.shape
        out_len, pl, pr = _same_pad(length, self.kernel_size, self.stride)
        xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
        starts = np.arange(out_len) * self.stride
        cols = starts[:, None] + np.arange(self.kernel_size)[None, :]
        # (batch, out_len, in_channels * kernel) patch matrix, one big GEMM
        patches = xp[:, :, cols].transpose(0, 2, 1, 3).reshape(
            batch * out_len, self.in_channels * self.kernel_size
        )
        w2 = self.weight.reshape(self.filters, -1)
        z = (patches @ w2.T + self.bias).reshape(batch, out_len, self.filters)
        z = z.transpose(0, 2, 1)
        y = _activate(z, self.activation)
        self._cache = (patches, z, y, (batch, length, out_len, pl, pr, starts))
        return y

    def backward(self, dy):
        patches, z, y, (batch, length, out_len, pl, pr, starts) = self._cache
        dz = dy * _activation_grad(z, y, self.activation)
        dz2 = dz.transpose(0, 2, 1).reshape(batch * out_len, self.filters)
        w2 = self.weight.reshape(self.filters, -1)
        self.grads = {
            "weight": (dz2.T @ patches).reshape(self.weight.shape),
            "bias": dz2.sum(axis=0),
        }
        dpatches = (dz2 @ w2).reshape(
            batch, out_len, self.in_channels, self.kernel_size
        ).transpose(0, 2, 1, 3)
        dxp = np.zeros((batch, self.in_channels, length + pl + pr))
        for j in range(self.kernel_size):
            dxp[:, :, starts + j] += dpatches[:, :, :, j]
        return dxp[:, :, pl:pl + length]


class Deconv1D:
    """Upsampling 'deconvolution': zero insertion then same-padded convolution.

    Input length L becomes L * upsample; original samples sit at the even
    multiples of the upsampling factor, inserted positions are zero.
    """

    kind = "deconv1d"

    def __init__(self, in_channels, filters, kernel_size, upsample=1,
                 activation="linear", rng=None):
        if upsample < 1:
            raise ValueError("upsample must be >= 1")
        self.upsample = int(upsample)
        self.conv = Conv1D(in_channels, filters, kernel_size, stride=1,
                           activation=activation, rng=rng)

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def filters(self):
        return self.conv.filters

    @property
    def kernel_size(self):
        return self.conv.kernel_size

    @property
    def activation(self):
        return self.conv.activation

    @property
    def weight(self):
        return self.conv.weight

    @weight.setter
    def weight(self, value):
        self.conv.weight = value

    @property
    def bias(self):
        return self.conv.bias

    @bias.setter
    def bias(self, value):
        self.conv.bias = value

    @property
    def grads(self):
        return self.conv.grads

    def spec(self):
        s = self.conv.spec()
        del s["stride"]
        s["kind"] = self.kind
        s["upsample"] = self.upsample
        return s

    def state(self):
        return self.conv.state()

    def learnable(self):
        return self.conv.learnable()

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"deconv1d expects (batch, {self.in_channels}, length), got {x.shape}"
            )
        batch, channels, length = x.shape
        up = np.zeros((batch, channels, length * self.upsample))
        up[:, :, ::self.upsample] = x
        return self.conv.forward(up, train=train)

    def backward(self, dy):
        dup = self.conv.backward(dy)
        return dup[:, :, ::self.upsample]


class BatchNorm:
    """Per-feature batch normalization with running statistics.

    Accepts (batch, features) or (batch, channels, length) input; for the
    3-d case the channel axis is the feature axis and statistics pool over
    batch and length. Variance is the population (biased) estimate.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.9):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(num_features)
        self.beta = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.grads = {}
        self._cache = None

    def spec(self):
        return {
            "kind": self.kind,
            "num_features": self.num_features,
            "eps": self.eps,
            "momentum": self.momentum,
        }

    def state(self):
        return [("gamma", self.gamma), ("beta", self.beta),
                ("running_mean", self.running_mean),
                ("running_var", self.running_var)]

    def learnable(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            if x.shape[1] != self.num_features:
                raise ShapeError(f"batchnorm expects {self.num_features} features, "
                                 f"got {x.shape}")
            return (0,), (1, self.num_features)
        if x.ndim == 3:
            if x.shape[1] != self.num_features:
                raise ShapeError(f"batchnorm expects {self.num_features} channels, "
                                 f"got {x.shape}")
            return (0, 2), (1, self.num_features, 1)
        raise ShapeError(f"batchnorm expects 2-d or 3-d input, got {x.shape}")

    def forward(self, x, train=True):
        axes, pshape = self._axes_and_shape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var)
        else:
            mean = self.running_mean
            var = self.running_var
        std = np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(pshape)) / std.reshape(pshape)
        y = self.gamma.reshape(pshape) * xhat + self.beta.reshape(pshape)
        if train:
            n_eff = x.size // self.num_features
            self._cache = (xhat, std, axes, pshape, n_eff)
        return y

    def backward(self, dy):
        xhat, std, axes, pshape, n_eff = self._cache
        self.grads = {
            "gamma": (dy * xhat).sum(axis=axes),
            "beta": dy.sum(axis=axes),
        }
        dxhat = dy * self.gamma.reshape(pshape)
        s1 = dxhat.sum(axis=axes).reshape(pshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(pshape)
        return (dxhat - (s1 + xhat * s2) / n_eff) / std.reshape(pshape)


class Flatten:
    """(batch, channels, length) -> (batch, channels * length)."""

    kind = "flatten"

    def __init__(self):
        self.grads = {}
        self._shape = None

    def spec(self):
        return {"kind": self.kind}

    def state(self):
        return []

    def learnable(self):
        return []

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Reshape:
    """(batch, channels * length) -> (batch, channels, length)."""

    kind = "reshape"

    def __init__(self, channels, length):
        self.channels = int(channels)
        self.length = int(length)
        self.grads = {}

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "length": self.length}

    def state(self):
        return []

    def learnable(self):
        return []

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.channels * self.length:
            raise ShapeError(
                f"reshape expects (batch, {self.channels * self.length}), got {x.shape}"
            )
        return x.reshape(x.shape[0], self.channels, self.length)

    def backward(self, dy):
        return dy.reshape(dy.shape[0], -1)


_LAYER_KINDS = {c.kind: c for c in (Dense, Conv1D, Deconv1D, BatchNorm, Flatten, Reshape)}


def layer_from_spec(spec, rng=None):
    kind = spec["kind"]
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    kwargs = {k: v for k, v in spec.items() if k != "kind"}
    if kind in ("dense", "conv1d", "deconv1d"):
        kwargs["rng"] = rng
    return _LAYER_KINDS[kind](**kwargs)


class Network:
    """An ordered stack of layers with reverse-mode gradients."""

    def __init__(self, layers):
        self.layers = list(layers)

    def spec(self):
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_spec(cls, specs, rng=None):
        return cls([layer_from_spec(s, rng) for s in specs])

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self):
        """Learnable arrays as (layer_index, name, array), in fixed order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.learnable():
                out.append((i, name, arr))
        return out

    def gradients(self):
        """Gradient arrays aligned with :meth:`parameters`."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, _ in layer.learnable():
                out.append((i, name, layer.grads[name]))
        return out

    def penalized_weights(self):
        """Weight arrays subject to the quadratic penalty (no biases, no batchnorm)."""
        return [layer.weight for layer in self.layers
                if isinstance(layer, (Dense, Conv1D, Deconv1D))]


def loss(x, xhat, weights=(), weight_penalty=0.0):
    """Mean squared error between x and xhat plus weight_penalty * sum(w**2).

    Biases and batchnorm parameters are deliberately not in `weights`.
    """
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    if x.shape != xhat.shape:
        raise ShapeError(f"loss shapes differ: {x.shape} vs {xhat.shape}")
    value = np.mean((x - xhat) ** 2)
    if weight_penalty:
        value += weight_penalty * sum(float((w * w).sum()) for w in weights)
    return float(value)


def loss_and_gradients(network, x, target, weight_penalty=0.0, train=True):
    """Forward pass, loss value, and exact gradients for every parameter."""
    xhat = network.forward(x, train=train)
    value = loss(target, xhat, network.penalized_weights(), weight_penalty)
    network.backward(2.0 * (xhat - target) / target.size)
    if weight_penalty:
        for layer in network.layers:
            if isinstance(layer, (Dense, Conv1D, Deconv1D)):
                layer.grads["weight"] = (layer.grads["weight"]
                                         + 2.0 * weight_penalty * layer.weight)
    return value, network.gradients()


def backward(network, x, target, weight_penalty=0.0):
    """Gradients of the penalized reconstruction loss for every parameter."""
    return loss_and_gradients(network, x, target, weight_penalty)[1]


class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    kind = "sgd"

    def __init__(self, learning_rate, weight_penalty=0.0):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if weight_penalty < 0:
            raise ValueError("weight penalty must be >= 0")
        self.learning_rate = float(learning_rate)
        self.weight_penalty = float(weight_penalty)

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


class Adam:
    """Adam with bias-corrected first/second moments."""

    kind = "adam"

    def __init__(self, learning_rate, weight_penalty=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if weight_penalty < 0:
            raise ValueError("weight penalty must be >= 0")
        self.learning_rate = float(learning_rate)
        self.weight_penalty = float(weight_penalty)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m):
            raise ShapeError("parameter count changed between optimizer steps")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, learning_rate, weight_penalty=0.0):
    if kind == "sgd":
        return SGD(learning_rate, weight_penalty)
    if kind == "adam":
        return Adam(learning_rate, weight_penalty)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def optimizer_step(state, params, grads):
    """Apply one in-place update; returns (params, state) for convenience."""
    state.step(params, grads)
    return params, state


# ---------------------------------------------------------------------------
# Functional single-call forms. These accept a single sample (1-d vector or
# channels x length matrix) or a batched array and return matching shape.

def dense_forward(x, weight, bias, activation="linear"):
    x = np.asarray(x, dtype=float)
    weight = np.asarray(weight, dtype=float)
    bias = np.asarray(bias, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    layer = Dense(weight.shape[1], weight.shape[0], activation)
    layer.weight = weight
    layer.bias = bias
    y = layer.forward(xb, train=False)
    return y[0] if single else y


def _as_conv_input(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, None, :], 1
    if x.ndim == 2:
        return x[None, :, :], 2
    if x.ndim == 3:
        return x, 3
    raise ShapeError(f"expected 1-d, 2-d or 3-d input, got {x.shape}")


def _as_kernel(weight):
    weight = np.asarray(weight, dtype=float)
    if weight.ndim == 1:
        return weight[None, None, :]
    if weight.ndim == 3:
        return weight
    raise ShapeError(f"kernel must be 1-d or (filters, channels, k), got {weight.shape}")


def conv1d_forward(x, weight, bias=0.0, stride=1, activation="linear"):
    xb, ndim = _as_conv_input(x)
    w = _as_kernel(weight)
    layer = Conv1D(w.shape[1], w.shape[0], w.shape[2], stride=stride,
                   activation=activation)
    layer.weight = w
    layer.bias = np.broadcast_to(np.asarray(bias, dtype=float), (w.shape[0],)).copy()
    y = layer.forward(xb, train=False)
    if ndim == 1:
        return y[0, 0]
    return y[0] if ndim == 2 else y


def deconv1d_forward(x, weight, bias=0.0, upsample=1, activation="linear"):
    xb, ndim = _as_conv_input(x)
    w = _as_kernel(weight)
    layer = Deconv1D(w.shape[1], w.shape[0], w.shape[2], upsample=upsample,
                     activation=activation)
    layer.weight = w
    layer.bias = np.broadcast_to(np.asarray(bias, dtype=float), (w.shape[0],)).copy()
    y = layer.forward(xb, train=False)
    if ndim == 1:
        return y[0, 0]
    return y[0] if ndim == 2 else y


def batchnorm_forward(x, gamma, beta, running_mean=None, running_var=None,
                      eps=1e-5, momentum=0.9, train=True):
    """Functional batchnorm; returns (y, running_mean, running_var)."""
    x = np.asarray(x, dtype=float)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    layer = BatchNorm(gamma.shape[0], eps=eps, momentum=momentum)
    layer.gamma = gamma
    layer.beta = np.broadcast_to(np.asarray(beta, dtype=float), gamma.shape).copy()
    if running_mean is not None:
        layer.running_mean = np.asarray(running_mean, dtype=float).copy()
    if running_var is not None:
        layer.running_var = np.asarray(running_var, dtype=float).copy()
    y = layer.forward(x, train=train)
    return y, layer.running_mean, layer.running_var


# ---------------------------------------------------------------------------
# Checkpoints: a single .npz holding the layer specs (JSON) and every state
# array in row-major float64; round-trips bitwise.

def save_checkpoint(path, network, metadata=None):
    arrays = {}
    for i, layer in enumerate(network.layers):
        for name, arr in layer.state():
            arrays[f"layer{i:03d}.{name}"] = arr
    header = {"layers": network.spec(), "metadata": metadata or {}}
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    path = str(path)
    if not path.endswith(".npz"):
        path += ".npz"
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Load a checkpoint; returns (network, metadata)."""
    path = str(path)
    if not path.endswith(".npz"):
        path += ".npz"
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        network = Network.from_spec(header["layers"])
        for i, layer in enumerate(network.layers):
            for name, _ in layer.state():
                arr = data[f"layer{i:03d}.{name}"]
                setattr(layer if not isinstance(layer, Deconv1D) else layer.conv,
                        name, arr.copy())
    return network, header["metadata"]
