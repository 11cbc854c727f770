"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the production attention or geometry code paths.
"""

import math


def layer_norm_row(x, g, b, eps=1e-5):
    n = len(x)
    mu = math.fsum(x) / n
    var = math.fsum((v - mu) ** 2 for v in x) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(x[i] - mu) * inv * g[i] + b[i] for i in range(n)]


def matvec(row, w):
    """row (d_in) times w (d_in x d_out) with explicit loops."""
    d_in, d_out = len(w), len(w[0])
    return [math.fsum(row[i] * w[i][j] for i in range(d_in)) for j in range(d_out)]


def attention_head(q, k, v, lam=1.0, masked_cols=frozenset()):
    """Causal attention for one head, three nested loops.

    Masked key columns get their exponentiated score multiplied by ``lam``.
    """
    n, dh = len(q), len(q[0])
    scale = 1.0 / math.sqrt(dh)
    probs = [[0.0] * n for _ in range(n)]
    out = [[0.0] * len(v[0]) for _ in range(n)]
    for i in range(n):
        scores = []
        for j in range(i + 1):
            scores.append(math.fsum(q[i][t] * k[j][t] for t in range(dh)) * scale)
        m = max(scores)
        weights = [math.exp(s - m) * (lam if j in masked_cols else 1.0) for j, s in enumerate(scores)]
        z = math.fsum(weights)
        for j in range(i + 1):
            probs[i][j] = weights[j] / z
        for t in range(len(v[0])):
            out[i][t] = math.fsum(probs[i][j] * v[j][t] for j in range(i + 1))
    return probs, out


def naive_forward(x, weights, lam=1.0, masked_cols=frozenset(), layer_range=None):
    """Same architecture as the production decoder, written row by row.

    ``x`` is a list of token embedding rows; returns (logits, per-layer list of per-head prob matrices).
    """
    x = [list(map(float, row)) for row in x]
    n = len(x)
    all_probs = []
    for li, layer in enumerate(weights.layers):
        active = layer_range is None or layer_range[0] <= li < layer_range[1]
        h = [layer_norm_row(row, layer.ln1_g, layer.ln1_b) for row in x]
        head_outs, layer_probs = [], []
        for hd in range(layer.w_q.shape[0]):
            wq, wk, wv = layer.w_q[hd].tolist(), layer.w_k[hd].tolist(), layer.w_v[hd].tolist()
            q = [matvec(r, wq) for r in h]
            k = [matvec(r, wk) for r in h]
            v = [matvec(r, wv) for r in h]
            p, o = attention_head(q, k, v, lam if active else 1.0, masked_cols if active else frozenset())
            layer_probs.append(p)
            head_outs.append(o)
        wo = layer.w_o.tolist()
        for i in range(n):
            concat = [val for o in head_outs for val in o[i]]
            proj = matvec(concat, wo)
            x[i] = [x[i][t] + proj[t] + layer.b_o[t] for t in range(len(x[i]))]
        w1, w2 = layer.w_ff1.tolist(), layer.w_ff2.tolist()
        for i in range(n):
            h2 = layer_norm_row(x[i], layer.ln2_g, layer.ln2_b)
            hidden = [max(a + b, 0.0) for a, b in zip(matvec(h2, w1), layer.b_ff1)]
            ff = matvec(hidden, w2)
            x[i] = [x[i][t] + ff[t] + layer.b_ff2[t] for t in range(len(x[i]))]
        all_probs.append(layer_probs)
    final = layer_norm_row(x[-1], weights.lnf_g, weights.lnf_b)
    return matvec(final, weights.unembed.tolist()), all_probs


def brute_force_mask(box, rows, cols):
    """Per-patch positive-area overlap test; zero-area boxes hit the cell holding their center."""
    x1, y1, x2, y2 = box
    bits = []
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        for r in range(rows):
            for c in range(cols):
                in_x = c / cols <= cx < (c + 1) / cols or (c == cols - 1 and cx == 1.0)
                in_y = r / rows <= cy < (r + 1) / rows or (r == rows - 1 and cy == 1.0)
                bits.append(in_x and in_y)
        return bits
    for r in range(rows):
        for c in range(cols):
            px1, py1, px2, py2 = c / cols, r / rows, (c + 1) / cols, (r + 1) / rows
            overlap_w = min(x2, px2) - max(x1, px1)
            overlap_h = min(y2, py2) - max(y1, py1)
            bits.append(overlap_w > 0 and overlap_h > 0)
    return bits
