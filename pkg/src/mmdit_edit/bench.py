"""Streaming versus quadrant-materialising joint attention: agreement and timing.

Both paths use numpy's BLAS-backed ``@``; what differs is memory traffic.  The
streaming path walks key blocks with an online softmax and never holds more
than one ``(block_q, block_k)`` tile of weights.  The materialising path
builds all four logit quadrants, normalises them into explicit weight
matrices and assembles the output from the quadrant products.
"""

import statistics
import time

import numpy as np

from .errors import ShapeError

PRODUCTION_SHAPE = (4096, 333, 64)
TOY_SHAPE = (64, 16, 8)
DEFAULT_SHAPES = (TOY_SHAPE, (1024, 128, 64), PRODUCTION_SHAPE)
AGREEMENT_TOL = 1e-10


def streaming_attention(q, k, v, scale, block_q=256, block_k=1024):
    n, d = q.shape
    out = np.empty((n, v.shape[1]))
    for i in range(0, n, block_q):
        qb = q[i : i + block_q] * scale
        rows = qb.shape[0]
        m = np.full((rows, 1), -np.inf)
        denom = np.zeros((rows, 1))
        acc = np.zeros((rows, v.shape[1]))
        for j in range(0, k.shape[0], block_k):
            s = qb @ k[j : j + block_k].T
            m_new = np.maximum(m, s.max(axis=1, keepdims=True))
            p = np.exp(s - m_new)
            corr = np.exp(m - m_new)
            denom = denom * corr + p.sum(axis=1, keepdims=True)
            acc = acc * corr + p @ v[j : j + block_k]
            m = m_new
        out[i : i + rows] = acc / denom
    return out


def materialized_attention(q_i, k_i, v_i, q_t, k_t, v_t, scale):
    """Explicit I2I/T2I/I2T/T2T weights, then ``[W_I2I v_i + W_T2I v_t; W_I2T v_i + W_T2T v_t]``."""
    i2i, t2i = q_i @ k_i.T, q_i @ k_t.T
    i2t, t2t = q_t @ k_i.T, q_t @ k_t.T
    m_img = np.maximum(i2i.max(axis=1, keepdims=True), t2i.max(axis=1, keepdims=True))
    m_txt = np.maximum(i2t.max(axis=1, keepdims=True), t2t.max(axis=1, keepdims=True))
    i2i, t2i = np.exp((i2i - m_img) * scale), np.exp((t2i - m_img) * scale)
    i2t, t2t = np.exp((i2t - m_txt) * scale), np.exp((t2t - m_txt) * scale)
    z_img = i2i.sum(axis=1, keepdims=True) + t2i.sum(axis=1, keepdims=True)
    z_txt = i2t.sum(axis=1, keepdims=True) + t2t.sum(axis=1, keepdims=True)
    i2i /= z_img
    t2i /= z_img
    i2t /= z_txt
    t2t /= z_txt
    return np.concatenate([i2i @ v_i + t2i @ v_t, i2t @ v_i + t2t @ v_t])


def _inputs(shape, seed):
    n_i, n_t, d = shape
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, d)) for n in (n_i, n_i, n_i, n_t, n_t, n_t)]


def _median_time(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def check_agreement(shape, seed=0):
    """Largest elementwise difference between the two paths (image-first layout)."""
    q_i, k_i, v_i, q_t, k_t, v_t = _inputs(shape, seed)
    scale = 1.0 / np.sqrt(shape[2])
    a = streaming_attention(np.vstack([q_i, q_t]), np.vstack([k_i, k_t]), np.vstack([v_i, v_t]), scale)
    b = materialized_attention(q_i, k_i, v_i, q_t, k_t, v_t, scale)
    return float(np.abs(a - b).max())


def bench_attention(shapes=DEFAULT_SHAPES, repeats=5, warmup=1, seed=0):
    """Time both paths per shape.

    Returns ``{"results": [...], "timing": [...]}``; ``results`` is a pure
    function of the inputs, ``timing`` is not.  Raises if the paths disagree
    beyond ``AGREEMENT_TOL``.
    """
    shapes = [tuple(int(v) for v in s) for s in shapes]
    if not shapes:
        raise ShapeError("no shapes to benchmark")
    if repeats < 5:
        raise ValueError("use at least 5 timed repeats")
    results, timing = [], []
    for shape in shapes:
        if len(shape) != 3 or min(shape) < 1:
            raise ShapeError(f"shape must be (n_image, n_text, head_dim), got {shape}")
        q_i, k_i, v_i, q_t, k_t, v_t = _inputs(shape, seed)
        q, k, v = np.vstack([q_i, q_t]), np.vstack([k_i, k_t]), np.vstack([v_i, v_t])
        scale = 1.0 / np.sqrt(shape[2])
        stream = streaming_attention(q, k, v, scale)
        mat = materialized_attention(q_i, k_i, v_i, q_t, k_t, v_t, scale)
        diff = float(np.abs(stream - mat).max())
        if not diff <= AGREEMENT_TOL:
            raise AssertionError(f"attention paths disagree by {diff:.3e} at shape {shape}")
        t_stream = _median_time(lambda: streaming_attention(q, k, v, scale), repeats, warmup)
        t_mat = _median_time(lambda: materialized_attention(q_i, k_i, v_i, q_t, k_t, v_t, scale), repeats, warmup)
        key = {"n_image": shape[0], "n_text": shape[1], "head_dim": shape[2]}
        results.append({**key, "max_abs_diff": diff, "agree": True})
        timing.append({**key, "streaming_s": t_stream, "materialized_s": t_mat, "ratio": t_mat / t_stream})
    return {"results": results, "timing": timing}
