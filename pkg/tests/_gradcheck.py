"""Finite-difference helpers shared by the test modules."""

import numpy as np


def numerical_grad(f, arrays, index, h=1e-6):
    """Central difference of scalar ``f()`` w.r.t. ``arrays[index]``, perturbing in place."""
    arr = arrays[index]
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def conv_oracle(x, k, b):
    """Direct six-loop same-padding convolution."""
    bsz, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    p = kk // 2
    out = np.zeros((bsz, cout, h, w), dtype=np.float64)
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(w):
                    acc = float(b[o])
                    for c in range(cin):
                        for di in range(kk):
                            for dj in range(kk):
                                y, xx = i + di - p, j + dj - p
                                if 0 <= y < h and 0 <= xx < w:
                                    acc += float(x[n, c, y, xx]) * float(k[o, c, di, dj])
                    out[n, o, i, j] = acc
    return out


def bilinear_reference(img, out_h, out_w):
    """Scalar half-pixel-centre bilinear sampler on a 2-D array."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))

    def coord(d, n_in, n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    for i in range(out_h):
        y0, y1, ty = coord(i, in_h, out_h)
        for j in range(out_w):
            x0, x1, tx = coord(j, in_w, out_w)
            top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
            bottom = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
            out[i, j] = top * (1 - ty) + bottom * ty
    return out
