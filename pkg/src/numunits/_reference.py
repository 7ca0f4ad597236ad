"""Pure-NumPy LSTM recurrence kernels.

Same signatures and array layouts as the compiled ``_kernels`` module, which
is preferred when it is importable.  Layouts (all float64, C-contiguous):

    gx      (T, B, 4H)  input projection plus bias, gate blocks (i, f, g, o)
    w_h     (4H, H)     recurrent weights
    gates   (T, B, 4H)  activated gates written by the forward kernel
    c, h    (T, B, H)
"""
import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(gx, w_h, h0, c0, keep_h, keep_c, gates, c_out, h_out):
    """Run the recurrence over T steps, writing gates, cells and outputs.

    ``keep_h``/``keep_c`` are per-unit 0/1 vectors; ablated units are zeroed
    after each update, before they feed the next step or the next layer.
    """
    T = gx.shape[0]
    H = w_h.shape[1]
    h = h0
    c = c0
    for t in range(T):
        z = gx[t] + h @ w_h.T
        g = gates[t]
        g[:, :2 * H] = _sigmoid(z[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        g[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 2 * H:3 * H]
        c = c * keep_c
        h = g[:, 3 * H:] * np.tanh(c) * keep_h
        c_out[t] = c
        h_out[t] = h


def lstm_backward(dh, w_h, gates, c, c0, keep_h, keep_c, dgates, dh0, dc0):
    """Backpropagate through the recurrence.

    ``dh`` (T, B, H) holds loss gradients w.r.t. each step's output arriving
    from above (output layer or next layer).  ``dgates`` receives gradients
    w.r.t. the gate pre-activations; the gradient reaching the initial state
    is written to ``dh0``/``dc0``.
    """
    T = dh.shape[0]
    H = w_h.shape[1]
    dh_next = np.zeros_like(dh0)
    dc_next = np.zeros_like(dc0)
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        c_prev = c[t - 1] if t > 0 else c0
        tc = np.tanh(c[t])
        dht = (dh[t] + dh_next) * keep_h
        dct = (dc_next + dht * o * (1.0 - tc * tc)) * keep_c
        d = dgates[t]
        d[:, :H] = dct * gg * i * (1.0 - i)
        d[:, H:2 * H] = dct * c_prev * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dct * i * (1.0 - gg * gg)
        d[:, 3 * H:] = dht * tc * o * (1.0 - o)
        dc_next = dct * f
        dh_next = d @ w_h
    dh0[...] = dh_next
    dc0[...] = dc_next
