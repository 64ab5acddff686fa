"""Scoring transformer blocks' attention maps against ground-truth masks.

Blocks are scored with BCE, soft mIoU and MSE, ranked per metric, and ordered
by the mean of their three ranks.  The best ``k`` become the mask blocks used
for local blending.
"""

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .atlas import decompose, token_map
from .errors import ConfigError, ShapeError
from .flow import TimeGrid
from .model import HookSet
from .tensor import gaussian_blur, minmax_normalize

BCE_EPS = 1e-7

# Top-5 mask blocks reported for the production models, without and with smoothing.
PRODUCTION_TOP5 = {
    "sd3-m": {"raw": [7, 8, 5, 4, 9], "smoothed": [7, 8, 5, 4, 9]},
    "sd3.5-m": {"raw": [7, 8, 5, 9, 6], "smoothed": [7, 9, 8, 5, 10]},
    "sd3.5-l": {"raw": [18, 16, 29, 21, 14], "smoothed": [18, 21, 20, 24, 16]},
    "flux.1-dev": {"raw": [11, 50, 18, 13, 10], "smoothed": [18, 17, 12, 14, 11]},
}


@dataclass
class GroundTruthMask:
    mask: np.ndarray
    token_range: tuple
    scene_id: int

    def __post_init__(self):
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("ground-truth masks must be binary")


@dataclass
class Scene:
    prompt: str
    gt: GroundTruthMask


@dataclass
class BlockScore:
    block: int
    bce: float
    soft_miou: float
    mse: float
    rank_bce: int = 0
    rank_miou: int = 0
    rank_mse: int = 0
    avg_rank: float = 0.0

    def to_dict(self):
        return asdict(self)


def score_block(pred, gt):
    """``(bce, soft_miou, mse)`` of a [0, 1] prediction against a binary mask."""
    mask = gt.mask if isinstance(gt, GroundTruthMask) else np.asarray(gt, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if p.shape != mask.shape:
        raise ShapeError(f"prediction {p.shape} and mask {mask.shape} differ")
    bce = -np.mean(mask * np.log(p + BCE_EPS) + (1 - mask) * np.log(1 - p + BCE_EPS))
    den = np.maximum(p, mask).sum()
    miou = 1.0 if den == 0 else np.minimum(p, mask).sum() / den
    mse = np.mean((p - mask) ** 2)
    return float(bce), float(miou), float(mse)


def average_scores(per_scene):
    """Mean metrics per block from ``{block: [(bce, miou, mse), ...]}``."""
    out = {}
    for block, rows in per_scene.items():
        if not rows:
            raise ValueError(f"block {block} has no scored scenes")
        out[block] = tuple(float(v) for v in np.mean(np.asarray(rows, dtype=np.float64), axis=0))
    return out


def _ranks(values, descending):
    order = sorted(values, key=lambda b: (-values[b] if descending else values[b], b))
    return {b: i + 1 for i, b in enumerate(order)}


def rank_blocks(scores):
    """Order blocks by mean per-metric rank (lower is better).

    ``scores`` maps block -> ``(bce, soft_miou, mse)`` already averaged over
    scenes.  Losses rank ascending, soft mIoU descending; ties always go to
    the lower block index.
    """
    blocks = sorted(scores)
    bce = _ranks({b: scores[b][0] for b in blocks}, False)
    miou = _ranks({b: scores[b][1] for b in blocks}, True)
    mse = _ranks({b: scores[b][2] for b in blocks}, False)
    ranked = [
        BlockScore(b, *scores[b], bce[b], miou[b], mse[b], (bce[b] + miou[b] + mse[b]) / 3.0) for b in blocks
    ]
    ranked.sort(key=lambda s: (s.avg_rank, s.block))
    return ranked


def select_top_k(ranked, k, depth=None):
    """First ``k`` block indices of a ranking."""
    depth = len(ranked) if depth is None else depth
    if k < 0 or k > depth:
        raise ConfigError(f"k={k} outside [0, {depth}]")
    return [s.block for s in ranked[:k]]


# ---------------------------------------------------------------- fixtures


def _region(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    while True:
        rh, rw = rng.integers(2, h + 1), rng.integers(2, w + 1)
        y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        if rng.random() < 0.5:
            mask = (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
            shape = "rect"
        else:
            cy, cx = y0 + (rh - 1) / 2, x0 + (rw - 1) / 2
            mask = ((yy - cy) / (rh / 2)) ** 2 + ((xx - cx) / (rw / 2)) ** 2 <= 1.0
            shape = "ellipse"
        frac = mask.mean()
        if 0.10 <= frac <= 0.60:
            return mask.astype(np.float64), shape


_NOUNS = ["cat", "dog", "house", "tree", "car", "boat", "bird", "lamp", "chair", "flower"]


def synth_fixture(seed, grid, n_scenes):
    """Synthetic scenes where one designated token owns a rectangle or ellipse.

    Prompts read ``"a <shape> <noun> scene<i>"``; the noun (token 2) is the
    designated token and its mask is exact by construction.  Region areas lie
    within 10%-60% of the grid.
    """
    rng = np.random.default_rng(seed)
    h, w = grid
    scenes = []
    for i in range(n_scenes):
        mask, shape = _region(rng, h, w)
        noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
        scenes.append(Scene(f"a {shape} {noun} scene{i}", GroundTruthMask(mask, (2, 3), i)))
    return scenes


def salt_noise(spatial, rate, rng):
    """Set a random ``rate`` fraction of pixels to the map's maximum."""
    out = np.array(spatial, dtype=np.float64)
    hit = rng.random(out.shape) < rate
    out[hit] = out.max() if out.size else 0.0
    return out


def block_noise_profile(depth):
    """Noise level per block: early and late blocks noisier, middle blocks cleaner."""
    if depth == 1:
        return np.array([0.1])
    x = np.linspace(-1.0, 1.0, depth)
    return 0.05 + 0.4 * x**2


def synth_block_maps(scenes, depth, seed):
    """Per-block, per-scene attention-like maps derived from the exact masks.

    Each map is a lightly blurred mask plus seeded Gaussian and salt noise
    whose strength follows :func:`block_noise_profile`.  Returns
    ``{block: [map per scene]}``.
    """
    rng = np.random.default_rng(seed)
    levels = block_noise_profile(depth)
    out = {b: [] for b in range(depth)}
    for scene in scenes:
        base = gaussian_blur(scene.gt.mask, 0.7)
        for b in range(depth):
            noisy = base + levels[b] * rng.standard_normal(base.shape)
            noisy = salt_noise(np.clip(noisy, 0.0, None), levels[b] * 0.2, rng)
            out[b].append(noisy)
    return out


def score_corpus(block_maps, scenes, sigma=0.0):
    """Average ``(bce, soft_miou, mse)`` per block, optionally smoothing each map first."""
    per_scene = {}
    for b, maps in block_maps.items():
        rows = []
        for m, scene in zip(maps, scenes):
            pred = minmax_normalize(gaussian_blur(m, sigma) if sigma > 0 else m)
            rows.append(score_block(pred, scene.gt))
        per_scene[b] = rows
    return average_scores(per_scene)


def model_block_maps(model, scenes, steps=4, seed=0):
    """T2I maps of each scene's designated token for every block of ``model``.

    The map for a block averages heads and the sampling steps of a plain
    Euler run from seeded noise.
    """
    cfg = model.cfg
    grid = TimeGrid.uniform(steps)
    capture_all = frozenset(range(cfg.depth))
    out = {b: [] for b in range(cfg.depth)}
    rng = np.random.default_rng(seed)
    for scene in scenes:
        prompt = model.encode(scene.prompt)
        x = rng.standard_normal((cfg.n_image, cfg.width))
        sums = {b: np.zeros(cfg.image_grid) for b in range(cfg.depth)}
        tok = scene.gt.token_range[0]
        for k in range(steps):
            t = grid.knots[k]
            v, acts = model.model_velocity(x, t, prompt, HookSet(capture=capture_all))
            for act in acts:
                quads = decompose(act.weights, cfg.concat_order, cfg.n_image, cfg.text_len)
                for h in range(cfg.heads):
                    sums[act.block_index] += token_map(quads.head(h), tok, cfg.image_grid)
            x = x + (grid.knots[k + 1] - t) * v
        for b in range(cfg.depth):
            out[b].append(sums[b] / (steps * cfg.heads))
    return out


# ----------------------------------------------------------------- reports


def selection_report(scenes, block_maps, k, sigma=1.5):
    """Score table with and without smoothing plus the chosen top-k for each."""
    depth = len(block_maps)
    report = {"n_scenes": len(scenes), "depth": depth, "k": k, "sigma": sigma}
    for label, s in (("raw", 0.0), ("smoothed", sigma)):
        ranked = rank_blocks(score_corpus(block_maps, scenes, s))
        report[label] = {
            "scores": [r.to_dict() for r in ranked],
            "top_k": select_top_k(ranked, k, depth),
        }
    return report


def report_csv(report):
    """Flatten a selection report to CSV rows for per-block bar charts."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["smoothing", "block", "bce", "soft_miou", "mse", "rank_bce", "rank_miou", "rank_mse", "avg_rank"])
    for label in ("raw", "smoothed"):
        for r in sorted(report[label]["scores"], key=lambda r: r["block"]):
            writer.writerow(
                [label, r["block"], repr(r["bce"]), repr(r["soft_miou"]), repr(r["mse"]),
                 r["rank_bce"], r["rank_miou"], r["rank_mse"], repr(r["avg_rank"])]
            )
    return buf.getvalue()
