"""Independent brute-force oracles used to freeze expected test values.

Everything here is deliberately written as plain loops / direct formula
evaluation, independent of the library's vectorized implementations.
"""

import numpy as np


def conv3d_loops(x, w, b=None, stride=(1, 1, 1), padding="same"):
    """Seven-deep-loop 3D cross-correlation with zero padding."""
    n, cin, d, h, ww = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    if padding == "same":
        od, oh, ow = (-(-d // sd), -(-h // sh), -(-ww // sw))
        pd = max((od - 1) * sd + kd - d, 0) // 2
        ph = max((oh - 1) * sh + kh - h, 0) // 2
        pw = max((ow - 1) * sw + kw - ww, 0) // 2
    else:
        od, oh, ow = ((d - kd) // sd + 1, (h - kh) // sh + 1,
                      (ww - kw) // sw + 1)
        pd = ph = pw = 0
    y = np.zeros((n, cout, od, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for z in range(od):
                for yy in range(oh):
                    for xx in range(ow):
                        acc = 0.0
                        for ci in range(cin):
                            for a in range(kd):
                                for bb in range(kh):
                                    for c in range(kw):
                                        iz = z * sd + a - pd
                                        iy = yy * sh + bb - ph
                                        ix = xx * sw + c - pw
                                        if 0 <= iz < d and 0 <= iy < h and 0 <= ix < ww:
                                            acc += x[ni, ci, iz, iy, ix] * w[co, ci, a, bb, c]
                        y[ni, co, z, yy, xx] = acc
            if b is not None:
                y[ni, co] += b[co]
    return y


def message_passing_loops(q, positions_weight_fn):
    """Direct windowed-sum message passing on a (L, D, H, W) belief grid.

    positions_weight_fn(pi, pj) -> kernel weight between two voxel index
    triples (0 for excluded pairs, including self).
    """
    l, d, h, w = q.shape
    out = np.zeros_like(q, dtype=np.float64)
    voxels = [(z, y, x) for z in range(d) for y in range(h) for x in range(w)]
    for lab in range(l):
        for pi in voxels:
            acc = 0.0
            for pj in voxels:
                if pi == pj:
                    continue
                acc += positions_weight_fn(pi, pj) * q[(lab,) + pj]
            out[(lab,) + pi] = acc
    return out


def gaussian_cube_weight(pi, pj, sigma, radius):
    """Truncated separable (cube-windowed) Gaussian kernel weight."""
    if any(abs(a - b) > radius for a, b in zip(pi, pj)):
        return 0.0
    d2 = sum((a - b) ** 2 for a, b in zip(pi, pj))
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def bilateral_cube_weight(pi, pj, ref, theta_alpha, theta_beta, radius):
    if any(abs(a - b) > radius for a, b in zip(pi, pj)):
        return 0.0
    d2 = sum((a - b) ** 2 for a, b in zip(pi, pj))
    di = float(ref[pi]) - float(ref[pj])
    return float(np.exp(-d2 / (2.0 * theta_alpha ** 2)
                        - di * di / (2.0 * theta_beta ** 2)))


def hausdorff_loops(a_mask, b_mask, spacing=(1.0, 1.0, 1.0)):
    """O(|A||B|) Hausdorff distance over foreground voxel centers.

    Returns 0.0 when both masks are empty and None when exactly one is.
    """
    pa = np.argwhere(a_mask)
    pb = np.argwhere(b_mask)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return None
    sp = np.asarray(spacing, dtype=np.float64)

    def directed(src, dst):
        worst = 0.0
        for p in src:
            best = None
            for qv in dst:
                d2 = float(((p - qv) * sp) @ ((p - qv) * sp))
                if best is None or d2 < best:
                    best = d2
            worst = max(worst, best)
        return worst

    return float(np.sqrt(max(directed(pa, pb), directed(pb, pa))))


def confusion_loops(pred, truth):
    tp = tn = fp = fn = 0
    for p, t in zip(pred.ravel(), truth.ravel()):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn
