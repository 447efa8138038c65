"""Functional forward/backward kernels.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache. Arrays are channels-last
(``[N, H, W, C]``) and all spatial ops are stride 1 with zero same-padding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# -- convolution -----------------------------------------------------------

def conv2d_forward(x, kernel, bias):
    """Same-padded stride-1 cross-correlation.

    x: [N, H, W, Cin]; kernel: [k, k, Cin, Cout] with odd k; bias: [Cout].
    """
    _check(x.ndim == 4, f"conv2d input must be [N,H,W,C], got rank {x.ndim}")
    kh, kw, cin, cout = kernel.shape
    _check(kh == kw and kh % 2 == 1, f"conv2d kernel must be square and odd, got {kh}x{kw}")
    _check(x.shape[3] == cin, f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {cin}")
    _check(bias.shape == (cout,), f"conv2d bias must have length {cout}, got {bias.shape}")
    n, h, w, _ = x.shape
    p = kh // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # [N, H, W, C, k, k] -> [N, H, W, k, k, C]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = win.reshape(n * h * w, kh * kw * cin)
    kmat = kernel.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias).reshape(n, h, w, cout)
    return out, (cols, x.shape, kernel)


def conv2d_backward(dout, cache):
    cols, xshape, kernel = cache
    n, h, w, cin = xshape
    kh, kw, _, cout = kernel.shape
    p = kh // 2
    g = dout.reshape(n * h * w, cout)
    dkernel = (cols.T @ g).reshape(kernel.shape)
    dbias = g.sum(axis=0)
    dcols = (g @ kernel.reshape(kh * kw * cin, cout).T).reshape(n, h, w, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w, :], dkernel, dbias


# -- pooling ---------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 non-overlapping max pool; a trailing odd row/column is dropped."""
    _check(x.ndim == 4, f"maxpool2 input must be [N,H,W,C], got rank {x.ndim}")
    n, h, w, c = x.shape
    _check(h >= 2 and w >= 2, f"maxpool2 needs H,W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    xc = x[:, :h2 * 2, :w2 * 2, :]
    # window order (0,0),(0,1),(1,0),(1,1) so argmax picks the first in row-major order
    win = xc.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    xshape, idx = cache
    n, h, w, c = xshape
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, :h2 * 2, :w2 * 2, :] = (
        dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c)
    )
    return dx


# -- normalization ---------------------------------------------------------

def batch_norm_forward(x, gamma, beta, running_mean, running_var, train,
                       eps=1e-3, momentum=0.99):
    """Normalize over every axis but the last.

    In train mode ``running_mean``/``running_var`` are updated in place.
    """
    f = x.shape[-1]
    _check(gamma.shape == (f,) and beta.shape == (f,),
           f"batch_norm feature mismatch: input has {f}, gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if train:
        m = x.size // f
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least 2 samples per feature")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    out = gamma * xhat + beta
    return out, (xhat, inv, gamma, train)


def batch_norm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def layer_norm_forward(x, gamma, beta, eps=1e-3):
    """Normalize each row (last axis) independently."""
    f = x.shape[-1]
    _check(gamma.shape == (f,) and beta.shape == (f,),
           f"layer_norm feature mismatch: input has {f}, gamma {gamma.shape}, beta {beta.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    f = dout.shape[-1]
    dx = (inv / f) * (f * dxhat - dxhat.sum(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# -- dense / activations -------------------------------------------------

def dense_forward(x, w, b):
    """``x @ w + b`` over the last axis; leading axes are batch/time."""
    _check(w.ndim == 2 and x.shape[-1] == w.shape[0],
           f"dense input width {x.shape[-1]} does not match weight rows {w.shape[0]}")
    _check(b.shape == (w.shape[1],), f"dense bias must have length {w.shape[1]}, got {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ g2, g2.sum(axis=0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax", "linear")


def activation_forward(kind, x):
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "sigmoid":
        out = sigmoid(x)
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind == "softmax":
        out = softmax(x)
    elif kind == "linear":
        out = x
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out, (kind, x, out)


def activation_backward(dout, cache):
    kind, x, out = cache
    if kind == "relu":
        return dout * (x > 0)
    if kind == "sigmoid":
        return dout * out * (1 - out)
    if kind == "tanh":
        return dout * (1 - out * out)
    if kind == "softmax":
        return out * (dout - (dout * out).sum(axis=-1, keepdims=True))
    return dout


# -- dropout ---------------------------------------------------------------

def dropout_forward(x, rate, train, rng):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# -- embedding -------------------------------------------------------------

def embedding_forward(ids, table):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].flat[0]
        raise IndexError(f"embedding id {bad} out of range [0, {v})")
    return table[ids], ids


def embedding_backward(dout, ids, vocab_size):
    dtable = np.zeros((vocab_size, dout.shape[-1]), dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return dtable


# -- LSTM ------------------------------------------------------------------

def lstm_forward(x, w, r, b):
    """Single-direction LSTM over x: [N, L, D] from a zero initial state.

    Gate blocks are ordered i, f, g, o along the last axis of w [D,4U],
    r [U,4U] and b [4U]. Returns hidden states [N, L, U].
    """
    _check(x.ndim == 3, f"lstm input must be [N,L,D], got rank {x.ndim}")
    n, length, d = x.shape
    if length == 0:
        raise ValueError("lstm sequence length must be >= 1")
    _check(w.shape[0] == d, f"lstm input width {d} does not match W rows {w.shape[0]}")
    u = r.shape[0]
    _check(w.shape[1] == 4 * u and r.shape == (u, 4 * u) and b.shape == (4 * u,),
           f"lstm gate shapes inconsistent: W {w.shape}, R {r.shape}, b {b.shape}")
    h = np.zeros((n, u), dtype=x.dtype)
    c = np.zeros((n, u), dtype=x.dtype)
    xw = x @ w + b
    hs = np.empty((n, length, u), dtype=x.dtype)
    steps = []
    for t in range(length):
        z = xw[:, t] + h @ r
        i = sigmoid(z[:, :u])
        f = sigmoid(z[:, u:2 * u])
        g = np.tanh(z[:, 2 * u:3 * u])
        o = sigmoid(z[:, 3 * u:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        steps.append((i, f, g, o, c_prev, h_prev, tc))
    return hs, (x, w, r, steps)


def lstm_backward(dhs, cache):
    x, w, r, steps = cache
    n, length, _ = x.shape
    u = r.shape[0]
    dx = np.empty_like(x)
    dw = np.zeros_like(w)
    dr = np.zeros_like(r)
    db = np.zeros(4 * u, dtype=x.dtype)
    dh_next = np.zeros((n, u), dtype=x.dtype)
    dc_next = np.zeros((n, u), dtype=x.dtype)
    dz = np.empty((n, 4 * u), dtype=x.dtype)
    for t in reversed(range(length)):
        i, f, g, o, c_prev, h_prev, tc = steps[t]
        dh = dhs[:, t] + dh_next
        dc = dh * o * (1 - tc * tc) + dc_next
        dz[:, :u] = dc * g * i * (1 - i)
        dz[:, u:2 * u] = dc * c_prev * f * (1 - f)
        dz[:, 2 * u:3 * u] = dc * i * (1 - g * g)
        dz[:, 3 * u:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dw += x[:, t].T @ dz
        dr += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ w.T
        dh_next = dz @ r.T
    return dx, dw, dr, db
