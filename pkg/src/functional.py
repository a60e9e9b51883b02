"""
Differentiable primitives used by the layer zoo: 1-D convolutions, recurrent
scans and the weighted cross-entropy loss.

Inputs are [C×T] or batched [N×C×T]; the batch axis is carried through
unchanged.
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from src.core.errors import ConfigError, DimensionError
from src.tensor import Tensor, as_tensor


def _to_batch(x: Tensor, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise DimensionError(f"{op} expects [C×T] or [N×C×T] input, got {x.shape}")


def _from_batch(array: np.ndarray, squeezed: bool) -> np.ndarray:
    return array[0] if squeezed else array


def conv_padding(kernel_size: int, dilation: int, causal: bool) -> Tuple[int, int]:
    """Left/right zero padding that keeps the sequence length."""
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ConfigError(f"Dilation must be an integer >= 1, got {dilation}")
    if kernel_size < 1:
        raise ConfigError(f"Kernel size must be positive, got {kernel_size}")
    span = (kernel_size - 1) * dilation
    if causal:
        return span, 0
    if kernel_size % 2 == 0:
        raise ConfigError(f"Same-padded convolution needs an odd kernel, got {kernel_size}")
    return span // 2, span // 2


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    dilation: int = 1,
    causal: bool = False,
) -> Tensor:
    """
    Standard 1-D convolution, weight [C_out×C_in×K].

    same-pad (causal=False): symmetric zero padding, odd K only.
    causal: left padding of (K−1)·dilation, so output[t] sees inputs <= t.
    """
    X, squeezed = _to_batch(x, "conv1d")
    W = weight.data
    if W.ndim != 3 or W.shape[1] != X.shape[1]:
        raise DimensionError(f"conv1d weight {W.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(f"conv1d bias {bias.shape} does not fit weight {W.shape}")
    K = W.shape[2]
    left, right = conv_padding(K, dilation, causal)
    T = X.shape[2]
    Xp = np.pad(X, ((0, 0), (0, 0), (left, right)))

    out = np.zeros((X.shape[0], W.shape[0], T))
    for k in range(K):
        out += np.matmul(W[:, :, k], Xp[:, :, k * dilation:k * dilation + T])
    if bias is not None:
        out += bias.data[None, :, None]

    def backward_fn(g):
        G = g[None] if squeezed else g
        gXp = np.zeros_like(Xp)
        gW = np.zeros_like(W)
        for k in range(K):
            window = Xp[:, :, k * dilation:k * dilation + T]
            gW[:, :, k] = np.einsum("not,nit->oi", G, window)
            gXp[:, :, k * dilation:k * dilation + T] += np.matmul(W[:, :, k].T, G)
        gX = _from_batch(gXp[:, :, left:left + T], squeezed)
        gb = G.sum(axis=(0, 2)) if bias is not None else None
        return gX, gW, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(_from_batch(out, squeezed), parents, "conv1d", backward_fn)


def depthwise_conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    dilation: int = 1,
    causal: bool = False,
) -> Tensor:
    """Per-channel K-tap convolution, weight [C×K]."""
    X, squeezed = _to_batch(x, "depthwise_conv1d")
    W = weight.data
    if W.ndim != 2 or W.shape[0] != X.shape[1]:
        raise DimensionError(f"depthwise weight {W.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(f"depthwise bias {bias.shape} does not fit weight {W.shape}")
    K = W.shape[1]
    left, right = conv_padding(K, dilation, causal)
    T = X.shape[2]
    Xp = np.pad(X, ((0, 0), (0, 0), (left, right)))

    out = np.zeros_like(X)
    for k in range(K):
        out += W[None, :, k, None] * Xp[:, :, k * dilation:k * dilation + T]
    if bias is not None:
        out += bias.data[None, :, None]

    def backward_fn(g):
        G = g[None] if squeezed else g
        gXp = np.zeros_like(Xp)
        gW = np.zeros_like(W)
        for k in range(K):
            window = Xp[:, :, k * dilation:k * dilation + T]
            gW[:, k] = np.sum(G * window, axis=(0, 2))
            gXp[:, :, k * dilation:k * dilation + T] += W[None, :, k, None] * G
        gX = _from_batch(gXp[:, :, left:left + T], squeezed)
        gb = G.sum(axis=(0, 2)) if bias is not None else None
        return gX, gW, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(_from_batch(out, squeezed), parents, "depthwise_conv1d", backward_fn)


def pointwise_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1×1 convolution (per-timestep linear map), weight [C_out×C_in]."""
    X, squeezed = _to_batch(x, "pointwise_conv1d")
    W = weight.data
    if W.ndim != 2 or W.shape[1] != X.shape[1]:
        raise DimensionError(f"pointwise weight {W.shape} does not fit input {x.shape}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(f"pointwise bias {bias.shape} does not fit weight {W.shape}")
    out = np.matmul(W, X)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward_fn(g):
        G = g[None] if squeezed else g
        gX = _from_batch(np.matmul(W.T, G), squeezed)
        gW = np.einsum("not,nit->oi", G, X)
        gb = G.sum(axis=(0, 2)) if bias is not None else None
        return gX, gW, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(_from_batch(out, squeezed), parents, "pointwise_conv1d", backward_fn)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_scan(projected: Tensor, recurrent: Tensor) -> Tensor:
    """
    Run an LSTM over a whole sequence.

    `projected` holds W_x·x_t + b for every step ([4U×T] or [N×4U×T], gate
    order input, forget, candidate, output); `recurrent` is W_h [4U×U].
    State starts at zero. Returns hidden states [U×T] / [N×U×T].
    """
    Z, squeezed = _to_batch(projected, "lstm_scan")
    Wh = recurrent.data
    U = Wh.shape[1]
    if Wh.shape != (4 * U, U) or Z.shape[1] != 4 * U:
        raise DimensionError(f"lstm_scan shapes {projected.shape} / {Wh.shape} disagree")
    N, _, T = Z.shape

    h = np.zeros((N, U))
    c = np.zeros((N, U))
    hs = np.zeros((N, U, T))
    cache = []
    for t in range(T):
        z = Z[:, :, t] + h @ Wh.T
        i = _sigmoid(z[:, :U])
        f = _sigmoid(z[:, U:2 * U])
        g = np.tanh(z[:, 2 * U:3 * U])
        o = _sigmoid(z[:, 3 * U:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        hs[:, :, t] = h
        cache.append((i, f, g, o, c_prev, h_prev, tanh_c))

    def backward_fn(grad):
        G = grad[None] if squeezed else grad
        dZ = np.zeros_like(Z)
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((N, U))
        dc_next = np.zeros((N, U))
        for t in range(T - 1, -1, -1):
            i, f, g, o, c_prev, h_prev, tanh_c = cache[t]
            dh = G[:, :, t] + dh_next
            do = dh * tanh_c
            dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_next
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dZ[:, :, t] = dz
            dWh += dz.T @ h_prev
            dh_next = dz @ Wh
            dc_next = dc * f
        return _from_batch(dZ, squeezed), dWh

    return Tensor.from_op(_from_batch(hs, squeezed), (projected, recurrent), "lstm_scan", backward_fn)


def gru_scan(projected: Tensor, recurrent: Tensor) -> Tensor:
    """
    Run a GRU over a whole sequence.

    `projected` holds W_x·x_t + b ([3U×T] or [N×3U×T], gate order reset,
    update, candidate); `recurrent` is W_h [3U×U]. The update gate z keeps the
    previous state: h' = (1 − z)·n + z·h.
    """
    Z, squeezed = _to_batch(projected, "gru_scan")
    Wh = recurrent.data
    U = Wh.shape[1]
    if Wh.shape != (3 * U, U) or Z.shape[1] != 3 * U:
        raise DimensionError(f"gru_scan shapes {projected.shape} / {Wh.shape} disagree")
    N, _, T = Z.shape

    h = np.zeros((N, U))
    hs = np.zeros((N, U, T))
    cache = []
    for t in range(T):
        zh = h @ Wh.T
        r = _sigmoid(Z[:, :U, t] + zh[:, :U])
        z = _sigmoid(Z[:, U:2 * U, t] + zh[:, U:2 * U])
        n = np.tanh(Z[:, 2 * U:, t] + r * zh[:, 2 * U:])
        h_prev = h
        h = n + z * (h_prev - n)
        hs[:, :, t] = h
        cache.append((r, z, n, h_prev, zh[:, 2 * U:]))

    def backward_fn(grad):
        G = grad[None] if squeezed else grad
        dZ = np.zeros_like(Z)
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((N, U))
        for t in range(T - 1, -1, -1):
            r, z, n, h_prev, zh_n = cache[t]
            dh = G[:, :, t] + dh_next
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (h_prev - n) * z * (1.0 - z)
            dr = dn * zh_n * r * (1.0 - r)
            dZ[:, :, t] = np.concatenate([dr, dz, dn], axis=1)
            dzh = np.concatenate([dr, dz, dn * r], axis=1)
            dWh += dzh.T @ h_prev
            dh_next = dh * z + dzh @ Wh
        return _from_batch(dZ, squeezed), dWh

    return Tensor.from_op(_from_batch(hs, squeezed), (projected, recurrent), "gru_scan", backward_fn)


def weighted_cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    class_weights: Sequence[float],
) -> Tensor:
    """
    Mean over timesteps of class-weighted cross-entropy on softmaxed logits.

    logits: [2×T] or [N×2×T]; labels: {0,1} of shape [T] or [N×T];
    class_weights: (no-blink weight, blink weight).
    """
    L, squeezed = _to_batch(logits, "weighted_cross_entropy")
    y = np.asarray(labels, dtype=np.int64)
    if squeezed:
        y = y[None]
    if L.shape[1] != 2 or y.shape != (L.shape[0], L.shape[2]):
        raise DimensionError(f"logits {logits.shape} do not fit labels {np.shape(labels)}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (2,):
        raise DimensionError(f"Expected two class weights, got {weights.shape}")

    shifted = L - L.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    onehot = np.stack([y == 0, y == 1], axis=1).astype(np.float64)
    w = weights[y][:, None, :]
    count = L.shape[0] * L.shape[2]
    value = -(w * onehot * log_probs).sum() / count

    def backward_fn(g):
        grad = float(g) * w * (np.exp(log_probs) - onehot) / count
        return (_from_batch(grad, squeezed),)

    return Tensor.from_op(np.asarray(value), (logits,), "weighted_cross_entropy", backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a fixed mask drawn from `rng`."""
    if rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * as_tensor(keep / (1.0 - rate))
