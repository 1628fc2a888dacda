"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops, math/mpmath scalars
or plain float64 numpy, and never calls into the tensor engine.
"""

import math

import mpmath
import numpy as np

LN_EPS = 1e-5
BN_EPS = 1e-5


def mp_softmax(row, dps=50):
    with mpmath.workdps(dps):
        vals = [mpmath.mpf(float(v)) for v in row]
        m = max(vals)
        exps = [mpmath.exp(v - m) for v in vals]
        s = mpmath.fsum(exps)
        return [float(e / s) for e in exps]


def mp_cross_entropy(p, logits, dps=50):
    """-sum p * log softmax(logits) in high precision."""
    with mpmath.workdps(dps):
        z = [mpmath.mpf(float(v)) for v in logits]
        m = max(z)
        lse = m + mpmath.log(mpmath.fsum(mpmath.exp(v - m) for v in z))
        return float(-mpmath.fsum(mpmath.mpf(float(pi)) * (zi - lse) for pi, zi in zip(p, z)))


def naive_layer_norm(x, gamma, beta, eps=LN_EPS):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        d = len(row)
        mu = sum(row) / d
        var = sum((v - mu) ** 2 for v in row) / d
        out[idx] = [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)]
    return out


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    return out


def naive_channel_attention(x, p):
    """Multi-head channel attention on (n, d) tokens, no residual."""
    x = np.asarray(x, dtype=np.float64)
    f = {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}
    n, d = x.shape
    h = len(f["log_tau"])
    dh = d // h
    q = naive_matmul(x, f["wq"]) + f["bq"]
    k = naive_matmul(x, f["wk"]) + f["bk"]
    v = naive_matmul(x, f["wv"]) + f["bv"]
    heads = np.zeros((n, d))
    for hd in range(h):
        cols = range(hd * dh, (hd + 1) * dh)
        qn = {c: math.sqrt(sum(q[t, c] ** 2 for t in range(n))) for c in cols}
        kn = {c: math.sqrt(sum(k[t, c] ** 2 for t in range(n))) for c in cols}
        tau = math.exp(float(f["log_tau"][hd]))
        a = np.zeros((dh, dh))
        for i, ci in enumerate(cols):
            logits = []
            for j, cj in enumerate(cols):
                dot = sum(k[t, ci] * q[t, cj] for t in range(n))
                logits.append(dot / (max(kn[ci], 1e-12) * max(qn[cj], 1e-12)) / tau)
            a[i] = mp_softmax(logits)
        for t in range(n):
            for i in range(dh):
                heads[t, hd * dh + i] = sum(v[t, hd * dh + j] * a[i, j] for j in range(dh))
    return naive_matmul(heads, f["wout"]) + f["bout"]


def naive_cba(x, p):
    x = np.asarray(x, dtype=np.float64)
    return naive_layer_norm(naive_channel_attention(x, p) + x, p["ln1.gamma"], p["ln1.beta"])


def naive_dwconv(x, k, bias=None):
    """Same-padded 3x3 depthwise convolution with six nested loops."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    out = np.zeros((h, w, c))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += float(x[ii, jj, ch]) * float(k[di, dj, ch])
                out[i, j, ch] = acc + (0.0 if bias is None else float(bias[ch]))
    return out


def naive_bn_eval(x, gamma, beta, mean, var, eps=BN_EPS):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        c = idx[-1]
        out[idx] = (x[idx] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return out


def naive_sib(x, grid, p):
    """Eval-mode spatial interaction stage on (n, d) patch tokens."""
    x = np.asarray(x, dtype=np.float64)
    gh, gw = grid
    n, d = x.shape
    g = x.reshape(gh, gw, d)
    y = naive_dwconv(g, p["sib.conv1"], p["sib.conv1_bias"])
    y = naive_bn_eval(y, p["sib.bn.gamma"], p["sib.bn.beta"], p["sib.bn.running_mean"],
                      p["sib.bn.running_var"])
    y = np.maximum(y, 0.0)
    y = naive_dwconv(y, p["sib.conv2"], p["sib.conv2_bias"])
    return naive_layer_norm(x + y.reshape(n, d), p["ln2.gamma"], p["ln2.beta"])


def tally_confusion(labels, preds, k):
    cm = [[0] * k for _ in range(k)]
    for a, b in zip(labels, preds):
        cm[a][b] += 1
    return np.array(cm)


def tally_metrics(cm):
    """Precision, recall, F1 per class and accuracy from first principles."""
    k = len(cm)
    total = sum(sum(r) for r in cm)
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = cm[c][c]
        predicted = sum(cm[r][c] for r in range(k))
        actual = sum(cm[c])
        p = tp / predicted if predicted else 0.0
        r = tp / actual if actual else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return prec, rec, f1, sum(cm[c][c] for c in range(k)) / total
