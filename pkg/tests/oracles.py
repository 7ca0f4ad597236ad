"""Independent reference implementations used only by the tests.

Plain Python loops over scalars, written from the LSTM equations and the
definitions of AUC and ridge regression, sharing no code with the package.
"""
import math


def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def lstm_forward_scalar(params, ids):
    """params: dict with embedding (V,E), layers [(w_x, w_h, b)], w_out, b_out as nested lists.

    Returns (logits per step, per-layer list of (h, c) per step).
    """
    layers = params["layers"]
    H = len(layers[0][1][0])
    h = [[0.0] * H for _ in layers]
    c = [[0.0] * H for _ in layers]
    logits, record = [], []
    for tok in ids:
        x = list(params["embedding"][tok])
        step = []
        for li, (w_x, w_h, b) in enumerate(layers):
            pre = []
            for r in range(4 * H):
                s = b[r]
                for k, xv in enumerate(x):
                    s += w_x[r][k] * xv
                for k, hv in enumerate(h[li]):
                    s += w_h[r][k] * hv
                pre.append(s)
            new_c, new_h = [], []
            for j in range(H):
                i = _sig(pre[j])
                f = _sig(pre[H + j])
                g = math.tanh(pre[2 * H + j])
                o = _sig(pre[3 * H + j])
                cj = f * c[li][j] + i * g
                new_c.append(cj)
                new_h.append(o * math.tanh(cj))
            c[li], h[li] = new_c, new_h
            step.append((list(new_h), list(new_c)))
            x = new_h
        record.append(step)
        out = []
        for v in range(len(params["w_out"])):
            s = params["b_out"][v]
            for k, hv in enumerate(x):
                s += params["w_out"][v][k] * hv
            out.append(s)
        logits.append(out)
    return logits, record


def auc_pairs(scores, labels):
    """Count positive-negative pairs: 1 per correctly ordered pair, 0.5 per tie."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ridge_1d(xs, ys, alpha):
    """Slope and intercept of 1-feature ridge with unpenalised intercept."""
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    w = sxy / (sxx + alpha)
    return w, my - w * mx
