"""Joint (concatenated) image/text attention and its quadrant form.

The concatenated sequence is ``[image; text]`` for ``image_first`` and
``[text; image]`` for ``text_first``.  Quadrant names always follow the
semantic convention: I2I = image queries x image keys, T2I = image queries x
text keys, I2T = text queries x image keys, T2T = text queries x text keys.
"""

import numpy as np

from .tensor import matmul, row_softmax

IMAGE_FIRST = "image_first"
TEXT_FIRST = "text_first"
CONCAT_ORDERS = (IMAGE_FIRST, TEXT_FIRST)


def rope_angles(positions, dim, base=10000.0):
    """Rotation angles, shape ``(len(positions), dim // 2)``."""
    if dim % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {dim}")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(x, positions, base=10000.0):
    """Rotate consecutive feature pairs of ``x[..., n, d]`` by position-dependent angles."""
    x = np.asarray(x, dtype=np.float64)
    ang = rope_angles(positions, x.shape[-1], base)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def concat(image, text, order):
    """Stack image and text rows (axis -2) in concatenation order."""
    if order == IMAGE_FIRST:
        return np.concatenate([image, text], axis=-2)
    if order == TEXT_FIRST:
        return np.concatenate([text, image], axis=-2)
    raise ValueError(f"unknown concat order {order!r}")


def split(joint, n_i, order):
    """Inverse of :func:`concat`; returns ``(image, text)``."""
    if order == IMAGE_FIRST:
        return joint[..., :n_i, :], joint[..., n_i:, :]
    n_t = joint.shape[-2] - n_i
    return joint[..., n_t:, :], joint[..., :n_t, :]


def image_slice(n_i, n_t, order):
    return slice(0, n_i) if order == IMAGE_FIRST else slice(n_t, n_t + n_i)


def text_slice(n_i, n_t, order):
    return slice(n_i, n_i + n_t) if order == IMAGE_FIRST else slice(0, n_t)


def logits(q, k):
    """Unscaled attention logits ``q k^T`` over the last two axes."""
    return matmul(q, np.swapaxes(k, -1, -2))


def monolithic_attention(q, k, v, scale):
    """``softmax(scale * q k^T) v`` on the full concatenated sequence."""
    return matmul(row_softmax(logits(q, k), scale), v)


def quadrant_attention(q_i, k_i, v_i, q_t, k_t, v_t, scale):
    """Attention assembled from the four quadrants, one row group at a time.

    Image rows: ``W_I2I v_i + W_T2I v_t``; text rows: ``W_I2T v_i + W_T2T v_t``,
    where each row group is normalised jointly over its two quadrants.
    Returns ``(image_out, text_out)``.
    """

    def rows(q):
        to_img, to_txt = logits(q, k_i), logits(q, k_t)
        m = np.maximum(to_img.max(axis=-1, keepdims=True), to_txt.max(axis=-1, keepdims=True))
        e_img, e_txt = np.exp((to_img - m) * scale), np.exp((to_txt - m) * scale)
        total = e_img.sum(axis=-1, keepdims=True) + e_txt.sum(axis=-1, keepdims=True)
        return e_img / total, e_txt / total

    w_i2i, w_t2i = rows(q_i)
    w_i2t, w_t2t = rows(q_t)
    image_out = matmul(w_i2i, v_i) + matmul(w_t2i, v_t)
    text_out = matmul(w_i2t, v_i) + matmul(w_t2t, v_t)
    return image_out, text_out
