"""Independent reference implementations the test suite checks the library
against. Everything here is written from the operation definitions directly
(scalar loops, finite differences) and stays free of sarunet internals.
"""

import numpy as np


def conv2d_loops(x, w, bias=None, stride=1, padding=0, groups=1):
    """Six-nested-loop convolution: batch, out channel, output row/col, then
    the kernel window. Zero padding, cross-correlation orientation."""
    n, cin, h, wth = x.shape
    cout, cin_g, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wth + 2 * padding - kw) // stride + 1
    og = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            g = o // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride + i - padding
                                xj = xx * stride + j - padding
                                if 0 <= yy < h and 0 <= xj < wth:
                                    acc += float(w[o, ci, i, j]) * \
                                        float(x[b, g * cin_g + ci, yy, xj])
                    out[b, o, y, xx] = acc + (float(bias[o]) if bias is not None else 0.0)
    return out


def depthwise_separable_loops(x, dw, pw, pb):
    """Depthwise 3x3 (pad 1) then pointwise 1x1, both via the loop oracle."""
    mid = conv2d_loops(x, dw, stride=1, padding=1, groups=x.shape[1])
    return conv2d_loops(mid, pw, bias=pb, stride=1, padding=0, groups=1)


def max_pool2_windows(x):
    """Window-scan 2x2 max pool."""
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[b, ch, y, xx] = x[b, ch, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2].max()
    return out


def bilinear_double(x):
    """Doubling bilinear resample, src = (dst+0.5)/2 - 0.5 with clamping."""
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=np.float64)
    for oy in range(2 * h):
        sy = min(max((oy + 0.5) / 2 - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for ox in range(2 * w):
            sx = min(max((ox + 0.5) / 2 - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            out[:, :, oy, ox] = ((1 - wy) * (1 - wx) * x[:, :, y0, x0]
                                 + (1 - wy) * wx * x[:, :, y0, x1]
                                 + wy * (1 - wx) * x[:, :, y1, x0]
                                 + wy * wx * x[:, :, y1, x1])
    return out


def cbam_reference(x, w1, w2, sw):
    """Descriptor-level CBAM: materialize avg/max descriptors, run the shared
    perceptron on each, sum, sigmoid, gate; then channel-avg/max maps, 7x7
    conv (loop oracle), sigmoid, gate."""
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    n, c, h, w = x.shape
    avg_desc = x.mean(axis=(2, 3))                      # [n, c]
    max_desc = x.max(axis=(2, 3))
    m1 = w1.reshape(w1.shape[0], c)                     # [hidden, c]
    m2 = w2.reshape(c, w1.shape[0])                     # [c, hidden]
    att_c = sig((m2 @ np.maximum(m1 @ avg_desc.T, 0)
                 + m2 @ np.maximum(m1 @ max_desc.T, 0)).T)   # [n, c]
    gated = x * att_c[:, :, None, None]
    cat = np.stack([gated.mean(axis=1), gated.max(axis=1)], axis=1)  # [n,2,h,w]
    k = sw.shape[2]
    att_s = sig(conv2d_loops(cat, sw, stride=1, padding=k // 2))      # [n,1,h,w]
    return gated * att_s


def finite_diff(f, arr, h=1e-4, indices=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arr``
    (mutated in place and restored). ``indices`` limits the sweep."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    idx_iter = indices if indices is not None else list(np.ndindex(*arr.shape))
    for idx in idx_iter:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_err(analytic, numeric):
    """Max absolute difference normalized by the largest gradient magnitude;
    0/0 counts as agreement."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def confusion_loops(pred, target):
    """Per-pixel confusion counting."""
    tp = tn = fp = fn = 0
    for p, t in zip(pred.ravel(), target.ravel()):
        if p == 1 and t == 1:
            tp += 1
        elif p == 0 and t == 0:
            tn += 1
        elif p == 1 and t == 0:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def windows_bruteforce(n_frames, input_frames, offsets, stride, selected):
    """Enumerate every anchor and keep windows whose targets are all selected."""
    out = []
    sel = set(selected)
    anchor = input_frames - 1
    while anchor + max(offsets) < n_frames:
        targets = [anchor + o for o in offsets]
        if all(t in sel for t in targets):
            out.append((list(range(anchor - input_frames + 1, anchor + 1)), targets))
        anchor += stride
    return out
