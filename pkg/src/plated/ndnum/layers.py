"""Stateful layer wrappers around :mod:`plated.ndnum.ops` and the Sequential graph."""

import numpy as np

from . import ops
from .params import FLOAT, Param, ParamStore


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer. Subclasses fill ``params`` and (optionally) ``buffers``."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def config(self):
        return {}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, cin, cout, rng, size=3, init="he", l2=0.0):
        super().__init__()
        shape = (size, size, cin, cout)
        if init == "he":
            k = he_normal(rng, shape, size * size * cin)
        else:
            k = glorot_uniform(rng, shape, size * size * cin, size * size * cout)
        self.params = {"kernel": Param(k, l2=l2), "bias": Param(np.zeros(cout))}
        self.cin, self.cout, self.size = cin, cout, size

    def forward(self, x, train=False):
        out, self._cache = ops.conv2d_forward(x, self.params["kernel"].value, self.params["bias"].value)
        return out

    def backward(self, dout):
        dx, dk, db = ops.conv2d_backward(dout, self._cache)
        self.params["kernel"].grad += dk
        self.params["bias"].grad += db
        return dx

    def config(self):
        return {"cin": self.cin, "cout": self.cout, "size": self.size}


class MaxPool2(Layer):
    kind = "maxpool2"

    def forward(self, x, train=False):
        out, self._cache = ops.maxpool2_forward(x)
        return out

    def backward(self, dout):
        return ops.maxpool2_backward(dout, self._cache)


class BatchNorm(Layer):
    """Batch normalization over every axis but the last (channel-wise for images)."""

    kind = "batch_norm"

    def __init__(self, features, eps=1e-3, momentum=0.99):
        super().__init__()
        self.params = {"gamma": Param(np.ones(features)), "beta": Param(np.zeros(features))}
        self.buffers = {
            "moving_mean": np.zeros(features, dtype=FLOAT),
            "moving_var": np.ones(features, dtype=FLOAT),
        }
        self.features, self.eps, self.momentum = features, eps, momentum

    def forward(self, x, train=False):
        out, self._cache = ops.batch_norm_forward(
            x, self.params["gamma"].value, self.params["beta"].value,
            self.buffers["moving_mean"], self.buffers["moving_var"], train,
            eps=self.eps, momentum=self.momentum,
        )
        return out

    def backward(self, dout):
        dx, dg, db = ops.batch_norm_backward(dout, self._cache)
        self.params["gamma"].grad += dg
        self.params["beta"].grad += db
        return dx

    def config(self):
        return {"features": self.features}


class LayerNorm(Layer):
    kind = "layer_norm"

    def __init__(self, features, eps=1e-3):
        super().__init__()
        self.params = {"gamma": Param(np.ones(features)), "beta": Param(np.zeros(features))}
        self.features, self.eps = features, eps

    def forward(self, x, train=False):
        out, self._cache = ops.layer_norm_forward(
            x, self.params["gamma"].value, self.params["beta"].value, eps=self.eps)
        return out

    def backward(self, dout):
        dx, dg, db = ops.layer_norm_backward(dout, self._cache)
        self.params["gamma"].grad += dg
        self.params["beta"].grad += db
        return dx

    def config(self):
        return {"features": self.features}


class Dense(Layer):
    """Fully connected map over the last axis (time-distributed for 3-D input)."""

    kind = "dense"

    def __init__(self, fin, fout, rng, init="glorot", l2=0.0):
        super().__init__()
        if init == "he":
            w = he_normal(rng, (fin, fout), fin)
        else:
            w = glorot_uniform(rng, (fin, fout), fin, fout)
        self.params = {"kernel": Param(w, l2=l2), "bias": Param(np.zeros(fout))}
        self.fin, self.fout = fin, fout

    def forward(self, x, train=False):
        out, self._cache = ops.dense_forward(x, self.params["kernel"].value, self.params["bias"].value)
        return out

    def backward(self, dout):
        dx, dw, db = ops.dense_backward(dout, self._cache)
        self.params["kernel"].grad += dw
        self.params["bias"].grad += db
        return dx

    def config(self):
        return {"fin": self.fin, "fout": self.fout}


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn):
        super().__init__()
        if fn not in ops.ACTIVATIONS:
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, train=False):
        out, self._cache = ops.activation_forward(self.fn, x)
        return out

    def backward(self, dout):
        return ops.activation_backward(dout, self._cache)

    def config(self):
        return {"fn": self.fn}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate, rng):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        out, self._cache = ops.dropout_forward(x, self.rate, train, self.rng)
        return out

    def backward(self, dout):
        return ops.dropout_backward(dout, self._cache)

    def config(self):
        return {"rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Embedding(Layer):
    """Row lookup. A frozen table never receives gradient."""

    kind = "embedding"

    def __init__(self, vocab_size, dim, rng=None, table=None, frozen=False):
        super().__init__()
        if table is None:
            table = rng.uniform(-0.05, 0.05, size=(vocab_size, dim))
        table = np.asarray(table)
        if table.shape != (vocab_size, dim):
            raise ValueError(f"embedding table must be {(vocab_size, dim)}, got {table.shape}")
        self.params = {"table": Param(table, trainable=not frozen)}
        self.vocab_size, self.dim, self.frozen = vocab_size, dim, frozen

    def forward(self, x, train=False):
        out, self._cache = ops.embedding_forward(x, self.params["table"].value)
        return out

    def backward(self, dout):
        if not self.frozen:
            self.params["table"].grad += ops.embedding_backward(dout, self._cache, self.vocab_size)
        return None

    def config(self):
        return {"vocab_size": self.vocab_size, "dim": self.dim, "frozen": self.frozen}


class LSTM(Layer):
    """(Bi)directional LSTM returning the full sequence of hidden states.

    The backward direction runs over the time-reversed input and its outputs
    are flipped back so position t holds [forward_t, backward_t].
    """

    kind = "lstm"

    def __init__(self, din, units, rng, bidirectional=False, l2=0.0):
        super().__init__()
        self.din, self.units, self.bidirectional = din, units, bidirectional
        dirs = ("fw", "bw") if bidirectional else ("fw",)
        for d in dirs:
            b = np.zeros(4 * units)
            b[units:2 * units] = 1.0  # forget gate
            self.params[f"{d}_W"] = Param(glorot_uniform(rng, (din, 4 * units), din, 4 * units), l2=l2)
            self.params[f"{d}_R"] = Param(glorot_uniform(rng, (units, 4 * units), units, 4 * units), l2=l2)
            self.params[f"{d}_b"] = Param(b)
        self.directions = dirs

    @property
    def width(self):
        return self.units * len(self.directions)

    def forward(self, x, train=False):
        p = self.params
        outs, caches = [], []
        for d in self.directions:
            xin = x if d == "fw" else x[:, ::-1]
            hs, cache = ops.lstm_forward(xin, p[f"{d}_W"].value, p[f"{d}_R"].value, p[f"{d}_b"].value)
            outs.append(hs if d == "fw" else hs[:, ::-1])
            caches.append(cache)
        self._cache = caches
        return np.concatenate(outs, axis=-1) if len(outs) > 1 else outs[0]

    def backward(self, dout):
        u = self.units
        dx = None
        for k, (d, cache) in enumerate(zip(self.directions, self._cache)):
            g = dout[..., k * u:(k + 1) * u]
            if d == "bw":
                g = g[:, ::-1]
            dxi, dw, dr, db = ops.lstm_backward(np.ascontiguousarray(g), cache)
            if d == "bw":
                dxi = dxi[:, ::-1]
            self.params[f"{d}_W"].grad += dw
            self.params[f"{d}_R"].grad += dr
            self.params[f"{d}_b"].grad += db
            dx = dxi if dx is None else dx + dxi
        return dx

    def config(self):
        return {"din": self.din, "units": self.units, "bidirectional": self.bidirectional}


class Sequential:
    """Ordered layer list; the ModelGraph of both stages."""

    def __init__(self, layers, name="model", meta=None):
        self.layers = list(layers)
        self.name = name
        self.meta = dict(meta or {})

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    __call__ = forward

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout

    def params(self):
        store = ParamStore()
        for i, layer in enumerate(self.layers):
            for k, p in layer.params.items():
                store[f"{i}.{layer.kind}.{k}"] = p
        return store

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, b in layer.buffers.items():
                out[f"{i}.{layer.kind}.{k}"] = b
        return out

    def state_dict(self):
        """Copies of every parameter value and buffer."""
        state = self.params().snapshot()
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        self.params().load(state)
        for k, b in self.buffers().items():
            if k not in state:
                raise KeyError(f"missing buffer {k!r}")
            b[...] = state[k]

    def zero_grad(self):
        self.params().zero_grad()

    def reseed(self, seed):
        """Reset every dropout stream so training replays identically."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng([seed, i])

    def summary(self):
        return [(layer.kind, layer.config()) for layer in self.layers]
