"""Scalar-loop reference implementations, deliberately free of torch."""

import math


def softmax_row(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def softmax_rows(rows):
    return [softmax_row(z) for z in rows]


def cross_entropy(logits, labels):
    """Mean over samples of -sum_c delta(c, y) log p(c)."""
    total = 0.0
    for z, y in zip(logits, labels):
        p = softmax_row(z)
        for c in range(len(z)):
            if c == y:
                total -= math.log(p[c])
    return total / len(labels)


def classification_loss(logit_sets, labels):
    return sum(cross_entropy(z, labels) for z in logit_sets)


def kl(pt, ps, floor=1e-12):
    total = 0.0
    for rt, rs in zip(pt, ps):
        for a, b in zip(rt, rs):
            total += a * (math.log(max(a, floor)) - math.log(max(b, floor)))
    return total / len(pt)


def vanilla(p0, preds):
    return sum(kl(p0, p) for p in preds)


def full(p0, preds):
    allp = [p0] + list(preds)
    S = len(preds)
    total = 0.0
    count = 0
    for t in range(S):
        for s in range(t + 1, S + 1):
            total += kl(allp[t], allp[s])
            count += 1
    assert count == S * (S + 1) // 2
    return 2.0 / (S + 1) * total


def batchnorm_eval(x, gamma, beta, mean, var, eps):
    """x as nested lists [n][c][h][w]."""
    out = []
    for sample in x:
        chans = []
        for c, plane in enumerate(sample):
            scale = gamma[c] / math.sqrt(var[c] + eps)
            chans.append([[scale * (v - mean[c]) + beta[c] for v in row] for row in plane])
        out.append(chans)
    return out


def batch_stats(x):
    """Per-channel biased mean/variance over (n, h, w)."""
    C = len(x[0])
    means, variances, n = [], [], 0
    for c in range(C):
        vals = [v for sample in x for row in sample[c] for v in row]
        n = len(vals)
        mu = sum(vals) / n
        means.append(mu)
        variances.append(sum((v - mu) ** 2 for v in vals) / n)
    return means, variances, n


def conv_madds(k, c_in, c_out, h_out, w_out):
    return k * k * c_in * c_out * h_out * w_out


def quadrant_expectations(crop, r, split_y, split_x, margin):
    """Expected quadrant id per output pixel of an r x r resize of ``crop``.

    Pixels whose source footprint lies within ``margin`` source pixels of a
    split line are marked -1 (ambiguous under antialiased resampling).
    """
    sy, sx = crop.h / r, crop.w / r
    out = []
    for i in range(r):
        row = []
        cy = crop.y + (i + 0.5) * sy
        for j in range(r):
            jj = r - 1 - j if crop.flipped else j
            cx = crop.x + (jj + 0.5) * sx
            if abs(cy - split_y) < margin * max(sy, 1) or abs(cx - split_x) < margin * max(sx, 1):
                row.append(-1)
            else:
                row.append((2 if cy >= split_y else 0) + (1 if cx >= split_x else 0))
        out.append(row)
    return out


def quadrant_layout_ok(images, crop, resolutions, size, colours, margin=2.0):
    """Every unambiguous output pixel is nearest to its expected marker colour.

    ``images`` are (3, r, r) arrays rendered from one crop of a quadrant
    image of side ``size`` split at ``size // 2``.
    """
    import numpy as np

    colours = np.asarray(colours, dtype=np.float64)
    for img, r in zip(images, resolutions):
        expect = np.array(quadrant_expectations(crop, r, size // 2, size // 2, margin))
        pix = np.asarray(img, dtype=np.float64).transpose(1, 2, 0)
        got = ((pix[:, :, None, :] - colours) ** 2).sum(-1).argmin(-1)
        known = expect >= 0
        if not np.array_equal(got[known], expect[known]):
            return False
    return True
