"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both backends live in ``coarsetune._accel``; the dispatcher flag is flipped
in-process so the two paths see identical inputs.  Results are also checked
for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from coarsetune import _accel


def _in_place(fn, out, *args):
    fn(out, *args)
    return out


def cases(rng):
    x = rng.normal(size=(64 * 96, 128))
    gain, bias = rng.normal(size=128), rng.normal(size=128)
    logits = rng.normal(size=(4096, 1000))
    targets = rng.integers(0, 1000, size=4096)
    targets[::7] = -100
    ids = rng.integers(0, 1000, size=6144)
    table = np.zeros((1000, 128))
    values = rng.integers(0, 5000, size=200_000).astype(np.int64)
    n_docs, n_post = 200_000, 50_000
    docnums = np.sort(rng.choice(n_docs, size=n_post, replace=False)).astype(np.int64)
    tfs = rng.integers(1, 6, size=n_post).astype(np.float64)
    doc_len = rng.integers(20, 80, size=n_docs).astype(np.float64)
    buf = _accel.varint_encode(values)
    t = np.tanh(x)
    return {
        "gelu_forward": lambda: _accel.gelu_forward(x),
        "gelu_backward": lambda: _accel.gelu_backward(x, t, x),
        "layer_norm_forward": lambda: _accel.layer_norm_forward(x, gain, bias, 1e-12),
        "softmax_rows": lambda: _accel.softmax_rows(x),
        "cross_entropy": lambda: _accel.cross_entropy(logits, targets, -100),
        "scatter_add_rows": lambda: _in_place(_accel.scatter_add_rows, table.copy(), ids, x[:6144]),
        "bm25_accumulate": lambda: _in_place(_accel.bm25_accumulate, np.zeros(n_docs), docnums, tfs, doc_len,
                                             float(doc_len.mean()), 1.3, 1.2, 0.75),
        "varint_encode": lambda: _accel.varint_encode(values),
        "varint_decode": lambda: _accel.varint_decode(buf, len(values)),
    }


def _flatten(res):
    if isinstance(res, tuple):
        return [a for r in res for a in _flatten(r)]
    if isinstance(res, (bytes, bytearray)):
        return [np.frombuffer(bytes(res), dtype=np.uint8)]
    return [np.asarray(res, dtype=float)]


def run(repeat):
    if _accel.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    fns = cases(np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in fns.items():
        times, outs = {}, {}
        for flag in (False, True):
            _accel.USE_NUMBA = flag
            outs[flag] = fn()  # also warms up the jit
            times[flag] = min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3
        for a, b in zip(_flatten(outs[False]), _flatten(outs[True])):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        print(f"{name:<22}{times[False]:>10.2f}{times[True]:>10.2f}{times[False] / times[True]:>8.1f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    run(ap.parse_args().repeat)
