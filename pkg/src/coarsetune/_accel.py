"""Hot inner loops with a numba path and a pure-numpy path.

The numba kernels are used when numba is importable and the environment
variable ``COARSETUNE_DISABLE_NUMBA`` is unset (or ``0``).  Both paths expose
the same functions with the same signatures; ``benchmarks/bench_kernels.py``
compares them.
"""

import math
import os

import numpy as np

try:  # pragma: no cover - import guard
    import numba
except ImportError:  # pragma: no cover
    numba = None

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _flag_disabled():
    v = os.environ.get("COARSETUNE_DISABLE_NUMBA", "").strip().lower()
    return v not in ("", "0", "false", "no")


USE_NUMBA = numba is not None and not _flag_disabled()


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path


def _gelu_fwd_np(x):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd_np(x, t, g):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_bwd_np(g, xhat, rstd, gain):
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    gx_hat = g * gain
    h = xhat.shape[1]
    gx = (rstd[:, None] / h) * (
        h * gx_hat
        - gx_hat.sum(axis=1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, ggain, gbias


def _softmax_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _cross_entropy_np(logits, targets, ignore):
    keep = targets != ignore
    n = int(keep.sum())
    probs = _softmax_np(logits)
    if n == 0:
        return 0.0, 0, probs
    rows = np.nonzero(keep)[0]
    z = logits[rows] - logits[rows].max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), targets[rows]]
    return float(nll.sum()), n, probs


def _cross_entropy_bwd_np(probs, targets, ignore, scale):
    g = probs.copy()
    keep = targets != ignore
    rows = np.nonzero(keep)[0]
    g[rows, targets[rows]] -= 1.0
    g[~keep] = 0.0
    return g * scale


def _bm25_accumulate_np(scores, docnums, tfs, doc_len, avglen, idf, k1, b):
    tf = tfs.astype(np.float64)
    norm = k1 * (1.0 - b + b * doc_len[docnums] / avglen)
    scores[docnums] += idf * (tf * (k1 + 1.0)) / (tf + norm)


def _scatter_add_rows_np(out, rows, values):
    np.add.at(out, rows, values)


def _varint_encode_np(values):
    out = bytearray()
    for v in values.tolist():
        v = int(v)
        while v >= 0x80:
            out.append((v & 0x7F) | 0x80)
            v >>= 7
        out.append(v)
    return np.frombuffer(bytes(out), dtype=np.uint8).copy()


def _varint_decode_np(buf, count):
    out = np.empty(count, dtype=np.int64)
    data = buf.tobytes()
    pos = 0
    for i in range(count):
        shift = 0
        v = 0
        while True:
            if pos >= len(data):
                raise ValueError("truncated varint stream")
            byte = data[pos]
            pos += 1
            v |= (byte & 0x7F) << shift
            if byte < 0x80:
                break
            shift += 7
        out[i] = v
    return out, pos


# ---------------------------------------------------------------------------
# numba path

if numba is not None:
    _njit = numba.njit(cache=True, nogil=True)

    @_njit
    def _gelu_fwd_nb(x):
        n = x.size
        xf = x.ravel()
        y = np.empty(n)
        t = np.empty(n)
        for i in range(n):
            v = xf[i]
            th = math.tanh(GELU_C * (v + GELU_K * v * v * v))
            t[i] = th
            y[i] = 0.5 * v * (1.0 + th)
        return y.reshape(x.shape), t.reshape(x.shape)

    @_njit
    def _gelu_bwd_nb(x, t, g):
        n = x.size
        xf = x.ravel()
        tf = t.ravel()
        gf = g.ravel()
        out = np.empty(n)
        for i in range(n):
            v = xf[i]
            th = tf[i]
            dt = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
            out[i] = gf[i] * (0.5 * (1.0 + th) + 0.5 * v * dt)
        return out.reshape(x.shape)

    @_njit
    def _layer_norm_fwd_nb(x, gain, bias, eps):
        n, h = x.shape
        y = np.empty((n, h))
        xhat = np.empty((n, h))
        rstd = np.empty(n)
        for r in range(n):
            mu = 0.0
            for c in range(h):
                mu += x[r, c]
            mu /= h
            var = 0.0
            for c in range(h):
                d = x[r, c] - mu
                var += d * d
            var /= h
            s = 1.0 / math.sqrt(var + eps)
            rstd[r] = s
            for c in range(h):
                xh = (x[r, c] - mu) * s
                xhat[r, c] = xh
                y[r, c] = xh * gain[c] + bias[c]
        return y, xhat, rstd

    @_njit
    def _layer_norm_bwd_nb(g, xhat, rstd, gain):
        n, h = g.shape
        gx = np.empty((n, h))
        ggain = np.zeros(h)
        gbias = np.zeros(h)
        for r in range(n):
            s1 = 0.0
            s2 = 0.0
            for c in range(h):
                gh = g[r, c] * gain[c]
                s1 += gh
                s2 += gh * xhat[r, c]
                ggain[c] += g[r, c] * xhat[r, c]
                gbias[c] += g[r, c]
            k = rstd[r] / h
            for c in range(h):
                gh = g[r, c] * gain[c]
                gx[r, c] = k * (h * gh - s1 - xhat[r, c] * s2)
        return gx, ggain, gbias

    @_njit
    def _softmax_nb(x):
        n, m = x.shape
        y = np.empty((n, m))
        for r in range(n):
            mx = x[r, 0]
            for c in range(1, m):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = 0.0
            for c in range(m):
                e = math.exp(x[r, c] - mx)
                y[r, c] = e
                s += e
            for c in range(m):
                y[r, c] /= s
        return y

    @_njit
    def _softmax_bwd_nb(y, g):
        n, m = y.shape
        out = np.empty((n, m))
        for r in range(n):
            dot = 0.0
            for c in range(m):
                dot += g[r, c] * y[r, c]
            for c in range(m):
                out[r, c] = y[r, c] * (g[r, c] - dot)
        return out

    @_njit
    def _cross_entropy_nb(logits, targets, ignore):
        n, m = logits.shape
        probs = np.empty((n, m))
        total = 0.0
        count = 0
        for r in range(n):
            mx = logits[r, 0]
            for c in range(1, m):
                if logits[r, c] > mx:
                    mx = logits[r, c]
            s = 0.0
            for c in range(m):
                e = math.exp(logits[r, c] - mx)
                probs[r, c] = e
                s += e
            for c in range(m):
                probs[r, c] /= s
            t = targets[r]
            if t != ignore:
                total += math.log(s) - (logits[r, t] - mx)
                count += 1
        return total, count, probs

    @_njit
    def _cross_entropy_bwd_nb(probs, targets, ignore, scale):
        n, m = probs.shape
        g = np.zeros((n, m))
        for r in range(n):
            t = targets[r]
            if t == ignore:
                continue
            for c in range(m):
                g[r, c] = probs[r, c] * scale
            g[r, t] -= scale
        return g

    @_njit
    def _bm25_accumulate_nb(scores, docnums, tfs, doc_len, avglen, idf, k1, b):
        for i in range(docnums.size):
            d = docnums[i]
            tf = float(tfs[i])
            norm = k1 * (1.0 - b + b * doc_len[d] / avglen)
            scores[d] += idf * (tf * (k1 + 1.0)) / (tf + norm)

    @_njit
    def _scatter_add_rows_nb(out, rows, values):
        h = out.shape[1]
        for i in range(rows.size):
            r = rows[i]
            for c in range(h):
                out[r, c] += values[i, c]

    @_njit
    def _varint_encode_nb(values):
        out = np.empty(values.size * 10, dtype=np.uint8)
        pos = 0
        for i in range(values.size):
            v = values[i]
            while v >= 0x80:
                out[pos] = (v & 0x7F) | 0x80
                pos += 1
                v >>= 7
            out[pos] = v
            pos += 1
        return out[:pos].copy()

    @_njit
    def _varint_decode_nb(buf, count):
        out = np.empty(count, dtype=np.int64)
        pos = 0
        n = buf.size
        for i in range(count):
            shift = 0
            v = 0
            while True:
                if pos >= n:
                    return out, -1
                byte = np.int64(buf[pos])
                pos += 1
                v |= (byte & 0x7F) << shift
                if byte < 0x80:
                    break
                shift += 7
            out[i] = v
        return out, pos


# ---------------------------------------------------------------------------
# dispatch


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def gelu_forward(x):
    if USE_NUMBA:
        return _gelu_fwd_nb(_c(x))
    return _gelu_fwd_np(x)


def gelu_backward(x, t, g):
    if USE_NUMBA:
        return _gelu_bwd_nb(_c(x), _c(t), _c(g))
    return _gelu_bwd_np(x, t, g)


def layer_norm_forward(x2d, gain, bias, eps):
    if USE_NUMBA:
        return _layer_norm_fwd_nb(_c(x2d), _c(gain), _c(bias), float(eps))
    return _layer_norm_fwd_np(x2d, gain, bias, eps)


def layer_norm_backward(g2d, xhat, rstd, gain):
    if USE_NUMBA:
        return _layer_norm_bwd_nb(_c(g2d), _c(xhat), _c(rstd), _c(gain))
    return _layer_norm_bwd_np(g2d, xhat, rstd, gain)


def softmax_rows(x2d):
    if USE_NUMBA:
        return _softmax_nb(_c(x2d))
    return _softmax_np(x2d)


def softmax_rows_backward(y2d, g2d):
    if USE_NUMBA:
        return _softmax_bwd_nb(_c(y2d), _c(g2d))
    return _softmax_bwd_np(y2d, g2d)


def cross_entropy(logits2d, targets, ignore):
    """Return ``(sum of NLL over kept rows, kept row count, softmax probs)``."""
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if USE_NUMBA:
        total, count, probs = _cross_entropy_nb(_c(logits2d), targets, int(ignore))
        return float(total), int(count), probs
    return _cross_entropy_np(logits2d, targets, ignore)


def cross_entropy_backward(probs, targets, ignore, scale):
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if USE_NUMBA:
        return _cross_entropy_bwd_nb(_c(probs), targets, int(ignore), float(scale))
    return _cross_entropy_bwd_np(probs, targets, ignore, scale)


def scatter_add_rows(out, rows, values):
    """``out[rows[i]] += values[i]`` with repeated rows accumulating, in place."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if USE_NUMBA:
        _scatter_add_rows_nb(out, rows, _c(values))
    else:
        _scatter_add_rows_np(out, rows, values)


def bm25_accumulate(scores, docnums, tfs, doc_len, avglen, idf, k1, b):
    """Add one query term's BM25 contribution into ``scores`` in place."""
    if USE_NUMBA:
        _bm25_accumulate_nb(scores, docnums, tfs, doc_len, float(avglen),
                            float(idf), float(k1), float(b))
    else:
        _bm25_accumulate_np(scores, docnums, tfs, doc_len, avglen, idf, k1, b)


def varint_encode(values):
    values = np.ascontiguousarray(values, dtype=np.int64)
    if values.size and values.min() < 0:
        raise ValueError("varints encode non-negative integers only")
    if USE_NUMBA:
        return _varint_encode_nb(values)
    return _varint_encode_np(values)


def varint_decode(buf, count):
    """Decode ``count`` varints from a uint8 buffer; return ``(values, bytes_used)``."""
    buf = np.ascontiguousarray(buf, dtype=np.uint8)
    if USE_NUMBA:
        out, used = _varint_decode_nb(buf, int(count))
        if used < 0:
            raise ValueError("truncated varint stream")
        return out, int(used)
    return _varint_decode_np(buf, count)
