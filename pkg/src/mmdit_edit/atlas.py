"""Quadrant decomposition of joint attention, token maps and blending masks."""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as attn
from .errors import MaskError, ShapeError
from .io import write_json, write_pgm
from .tensor import gaussian_blur, minmax_normalize, pca_top_k, threshold

STAGES = ("logits", "weights")
UNION_MODES = ("both_branches", "source_only")


@dataclass
class AttentionQuadrants:
    """The four blocks of one attention matrix, named by meaning, not position.

    Arrays may carry leading (e.g. head) axes; the last two axes are the block.
    """

    i2i: np.ndarray
    t2i: np.ndarray
    i2t: np.ndarray
    t2t: np.ndarray
    stage: str = "weights"
    order: str = attn.IMAGE_FIRST

    @property
    def n_i(self):
        return self.i2i.shape[-1]

    @property
    def n_t(self):
        return self.t2t.shape[-1]

    def head(self, h):
        return AttentionQuadrants(self.i2i[h], self.t2i[h], self.i2t[h], self.t2t[h], self.stage, self.order)


def decompose(full, order, n_i, n_t, stage="weights"):
    """Split a ``(..., n_i+n_t, n_i+n_t)`` attention matrix into its quadrants."""
    full = np.asarray(full, dtype=np.float64)
    n = n_i + n_t
    if full.shape[-2:] != (n, n):
        raise ShapeError(f"expected trailing shape {(n, n)}, got {full.shape}")
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    img, txt = attn.image_slice(n_i, n_t, order), attn.text_slice(n_i, n_t, order)
    return AttentionQuadrants(
        i2i=full[..., img, img],
        t2i=full[..., img, txt],
        i2t=full[..., txt, img],
        t2t=full[..., txt, txt],
        stage=stage,
        order=order,
    )


def reassemble(quads):
    """Inverse of :func:`decompose`."""
    rows_img = np.concatenate(
        [quads.i2i, quads.t2i] if quads.order == attn.IMAGE_FIRST else [quads.t2i, quads.i2i], axis=-1
    )
    rows_txt = np.concatenate(
        [quads.i2t, quads.t2t] if quads.order == attn.IMAGE_FIRST else [quads.t2t, quads.i2t], axis=-1
    )
    return attn.concat(rows_img, rows_txt, quads.order)


def token_map(quads, token, grid):
    """Column ``token`` of T2I reshaped row-major to the image grid."""
    if quads.stage != "weights":
        raise ValueError("token maps are read from attention weights, not logits")
    if quads.t2i.ndim != 2:
        raise ShapeError("token_map expects a single head; use AttentionQuadrants.head()")
    if not 0 <= token < quads.n_t:
        raise IndexError(f"token {token} outside [0, {quads.n_t})")
    h, w = grid
    if h * w != quads.n_i:
        raise ShapeError(f"grid {grid} does not hold {quads.n_i} image tokens")
    return quads.t2i[:, token].reshape(h, w).copy()


def i2t_map(quads, token, grid):
    """Row ``token`` of I2T reshaped to the grid (the row-normalised alternative to T2I)."""
    if not 0 <= token < quads.n_t:
        raise IndexError(f"token {token} outside [0, {quads.n_t})")
    return quads.i2t[token, :].reshape(grid).copy()


# ------------------------------------------------------------------ stacks


@dataclass
class MapEntry:
    block: int
    head: int
    step: int
    token_range: tuple
    map: np.ndarray
    label: str = ""


@dataclass
class MaskStack:
    """Spatial maps keyed by (block, head, step, token range) with provenance labels."""

    entries: list = field(default_factory=list)

    def add(self, entry):
        if self.entries and entry.map.shape != self.entries[0].map.shape:
            raise ShapeError(f"map shape {entry.map.shape} differs from stack shape {self.entries[0].map.shape}")
        self.entries.append(entry)

    def extend(self, entries):
        for e in entries:
            self.add(e)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, tokens=None, blocks=None):
        """Entries whose token range intersects ``tokens`` and whose block is in ``blocks``."""
        tokens = None if tokens is None else set(tokens)
        blocks = None if blocks is None else set(blocks)
        out = MaskStack()
        for e in self.entries:
            if blocks is not None and e.block not in blocks:
                continue
            if tokens is not None and not tokens.intersection(range(*e.token_range)):
                continue
            out.entries.append(e)
        return out

    def write(self, directory, prefix="map"):
        """Dump every map as a 16-bit PGM plus ``manifest.json``; returns the manifest records."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        for i, e in enumerate(self.entries):
            name = f"{prefix}_{i:05d}.pgm"
            peak = float(e.map.max())
            write_pgm(directory / name, e.map, peak if peak > 0 else 1.0)
            records.append(
                {
                    "block": e.block,
                    "head": e.head,
                    "step": e.step,
                    "token_range": list(e.token_range),
                    "label": e.label,
                    "max": peak,
                    "file": name,
                }
            )
        write_json(directory / "manifest.json", records)
        return records


def collect_token_maps(activations, tokens, grid, order, step, blocks=None, label="", own=True):
    """Build stack entries from captured block activations.

    ``own=True`` reads each block's un-injected attention weights.
    """
    n_i = grid[0] * grid[1]
    entries = []
    for act in activations:
        if blocks is not None and act.block_index not in blocks:
            continue
        weights = act.own_weights if own else act.weights
        if weights is None:
            continue
        quads = decompose(weights, order, n_i, weights.shape[-1] - n_i, "weights")
        for h in range(weights.shape[0]):
            qh = quads.head(h)
            for tok in sorted(tokens):
                entries.append(MapEntry(act.block_index, h, step, (tok, tok + 1), token_map(qh, tok, grid), label))
    return entries


def aggregate(stack, reduce="mean"):
    """Elementwise mean over every map in the stack."""
    entries = list(stack)
    if not entries:
        raise MaskError("cannot aggregate an empty stack")
    if reduce != "mean":
        raise ValueError(f"unsupported reduction {reduce!r}")
    total = np.zeros_like(entries[0].map)
    for e in entries:
        total += e.map
    return total / len(entries)


def _branch_mask(stack, tokens, sigma, theta):
    selected = stack.select(tokens)
    if not len(selected):
        return None
    normed = MaskStack([MapEntry(e.block, e.head, e.step, e.token_range, minmax_normalize(e.map)) for e in selected])
    return threshold(gaussian_blur(aggregate(normed), sigma), theta)


def build_blend_mask(src_stack, tgt_stack, tokens, sigma, theta, union_mode="both_branches", tgt_tokens=None):
    """Binary blending mask from thresholded, smoothed T2I maps.

    Each map is min-max normalised, the maps for ``tokens`` are averaged per
    branch, blurred and thresholded strictly at ``theta``.  ``both_branches``
    takes the union of the source and target masks; ``source_only`` uses the
    source term alone.  ``tgt_tokens`` selects different token positions in
    the target branch (defaults to ``tokens``).
    """
    if union_mode not in UNION_MODES:
        raise ValueError(f"union_mode must be one of {UNION_MODES}")
    tokens = set(tokens)
    tgt_tokens = tokens if tgt_tokens is None else set(tgt_tokens)
    if union_mode == "source_only":
        if not tokens:
            raise MaskError("empty token set")
        mask = _branch_mask(src_stack, tokens, sigma, theta)
        if mask is None:
            raise MaskError("no source maps for the requested tokens")
        return mask
    if not tokens and not tgt_tokens:
        raise MaskError("empty token set")
    parts = [m for m in (_branch_mask(src_stack, tokens, sigma, theta), _branch_mask(tgt_stack, tgt_tokens, sigma, theta)) if m is not None]
    if not parts:
        raise MaskError("no maps for the requested tokens in either branch")
    return np.maximum.reduce(parts)


def changed_tokens(src_prompt, tgt_prompt):
    """Token positions of words present in only one prompt: ``(src_positions, tgt_positions)``."""
    src_words, tgt_words = set(src_prompt.word_spans), set(tgt_prompt.word_spans)

    def positions(spans, words):
        return {i for w in words for start, stop in spans[w] for i in range(start, stop)}

    return (
        positions(src_prompt.word_spans, src_words - tgt_words),
        positions(tgt_prompt.word_spans, tgt_words - src_words),
    )


# ---------------------------------------------------------------- analysis


def t2t_diagonality(quads):
    """Share of T2T mass on the diagonal, in [0, 1]."""
    if quads.stage != "weights":
        raise ValueError("diagonality is defined on attention weights")
    t2t = quads.t2t
    total = t2t.sum(axis=(-2, -1))
    diag = np.trace(t2t, axis1=-2, axis2=-1)
    return diag / total


def i2i_pca(quads_list, k, grid):
    """Principal components of the mean I2I block, each reshaped to the grid.

    Rows of the averaged I2I matrix (one per image query) are the samples.
    """
    if not quads_list:
        raise ValueError("need at least one attention capture")
    mats = []
    for q in quads_list:
        if q.stage != "weights":
            raise ValueError("i2i_pca expects attention weights")
        i2i = q.i2i if q.i2i.ndim == 2 else q.i2i.reshape(-1, q.n_i, q.n_i).mean(axis=0)
        mats.append(i2i)
    mean = np.mean(mats, axis=0)
    if k > mean.shape[0]:
        raise ShapeError(f"k={k} exceeds N_i={mean.shape[0]}")
    comps, variances = pca_top_k(mean, k)
    return [c.reshape(grid) for c in comps], variances


def blocks_or_all(mask_blocks, depth):
    """Mask blocks to use; an empty selection falls back to every block with a warning."""
    if mask_blocks:
        return list(mask_blocks)
    warnings.warn("no mask blocks selected; using all blocks for blending masks", stacklevel=2)
    return list(range(depth))
