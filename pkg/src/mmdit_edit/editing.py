"""Prompt-based editing: projection replacement, local blending, real-image path.

Two branches share one initial noise.  During the first ``tau_frac`` of the
steps the target branch's attention is tied to the source branch in the first
``replace_block_prefix`` blocks, by one of three modes:

``qk_proj``
    image-token query/key projections are taken from the source branch;
``i2i_block``
    the image-image logit quadrant is taken from the source branch;
``full_map``
    the whole logit matrix is taken from the source branch.

While ``f < blend_stop_frac`` and blending is on, the target latent is mixed
with the source latent under a binary mask built from T2I maps of the changed
words.  The source branch is never modified.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import atlas
from .errors import ConfigError
from .flow import TOWARD_DATA, conditional_velocity, guard_delta, interpolate
from .io import write_json, write_matrix, write_pgm
from .model import HookSet

log = logging.getLogger(__name__)

REPLACE_MODES = ("qk_proj", "i2i_block", "full_map")


@dataclass(frozen=True)
class EditConfig:
    tau_frac: float = 0.2
    blend_stop_frac: float = 0.5
    theta: float = None
    replace_mode: str = "qk_proj"
    # None replaces every block
    replace_block_prefix: int = None
    mask_blocks: tuple = ()
    union_mode: str = "both_branches"
    sigma: float = 1.5
    local_blend: bool = False
    # words feeding the blend mask; None means the words that differ between prompts
    blend_words: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "mask_blocks", tuple(int(b) for b in self.mask_blocks))
        if self.blend_words is not None:
            object.__setattr__(self, "blend_words", tuple(self.blend_words))
        for name in ("tau_frac", "blend_stop_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.replace_mode not in REPLACE_MODES:
            raise ConfigError(f"replace_mode must be one of {REPLACE_MODES}")
        if self.union_mode not in atlas.UNION_MODES:
            raise ConfigError(f"union_mode must be one of {atlas.UNION_MODES}")
        if self.replace_block_prefix is not None and self.replace_block_prefix < 0:
            raise ConfigError("replace_block_prefix must be >= 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.local_blend and self.theta is None:
            raise ConfigError("local blending needs an explicit theta")

    def check(self, depth):
        bad = [b for b in self.mask_blocks if not 0 <= b < depth]
        if bad:
            raise ConfigError(f"mask_blocks {bad} outside [0, {depth})")

    def prefix(self, depth):
        return depth if self.replace_block_prefix is None else min(self.replace_block_prefix, depth)

    def to_dict(self):
        d = asdict(self)
        d["mask_blocks"] = list(self.mask_blocks)
        if self.blend_words is not None:
            d["blend_words"] = list(self.blend_words)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown edit config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "default": EditConfig(),
    # few-step models: replace only a block prefix
    "flux-schnell": EditConfig(replace_block_prefix=38),
    "sd35-turbo": EditConfig(replace_block_prefix=30),
}


def replacement_active(k, steps, tau_frac):
    """Replacement runs at step ``k`` iff ``k / steps < tau_frac``."""
    return k / steps < tau_frac


@dataclass
class StepRecord:
    step: int
    t: float
    fraction: float
    replaced: bool
    blended: bool
    injected_blocks: list = field(default_factory=list)
    mask: np.ndarray = None
    mask_files: list = field(default_factory=list)
    quadrant_diff: dict = None

    def to_dict(self):
        d = {
            "step": self.step,
            "t": self.t,
            "fraction": self.fraction,
            "replaced": self.replaced,
            "blended": self.blended,
            "injected_blocks": list(self.injected_blocks),
            "mask_files": list(self.mask_files),
        }
        if self.mask is not None:
            d["mask_area"] = float(self.mask.mean())
        if self.quadrant_diff is not None:
            d["quadrant_diff"] = self.quadrant_diff
        return d


@dataclass
class EditTrace:
    config: dict
    steps: list = field(default_factory=list)
    mode: str = "synthetic"

    @property
    def replaced_steps(self):
        return [s.step for s in self.steps if s.replaced]

    @property
    def blended_steps(self):
        return [s.step for s in self.steps if s.blended]

    def to_dict(self):
        return {"mode": self.mode, "config": self.config, "steps": [s.to_dict() for s in self.steps]}


# ----------------------------------------------------------------- helpers


def _injection_hooks(src_acts, mode, prefix, order, n_i, n_t):
    hooks = HookSet()
    for act in src_acts[:prefix]:
        b = act.block_index
        if mode == "qk_proj":
            hooks.qk[b] = (act.projections.q_i, act.projections.k_i)
        elif mode == "i2i_block":
            hooks.i2i_logits[b] = atlas.decompose(act.logits, order, n_i, n_t, "logits").i2i
        else:
            hooks.full_logits[b] = act.logits
    return hooks


def _quadrant_diff(src_acts, tgt_acts, blocks, order, n_i, n_t):
    """Max-abs logit differences per injected block, used vs. own and used vs. source."""
    out = {}
    for b in blocks:
        used = atlas.decompose(tgt_acts[b].logits, order, n_i, n_t, "logits")
        own = atlas.decompose(tgt_acts[b].own_logits, order, n_i, n_t, "logits")
        src = atlas.decompose(src_acts[b].logits, order, n_i, n_t, "logits")
        out[str(b)] = {
            "t2t_vs_uninjected": float(np.abs(used.t2t - own.t2t).max()),
            "t2t_vs_source": float(np.abs(used.t2t - src.t2t).max()),
            "i2i_vs_source": float(np.abs(used.i2i - src.i2i).max()),
            "t2i_vs_uninjected": float(np.abs(used.t2i - own.t2i).max()),
            "i2t_vs_uninjected": float(np.abs(used.i2t - own.i2t).max()),
        }
    return out


def _mask_tokens(cfg, src_emb, tgt_emb):
    if cfg.blend_words is None:
        return atlas.changed_tokens(src_emb, tgt_emb)

    def positions(emb):
        return {i for w in cfg.blend_words for a, b in emb.word_spans.get(w.lower(), []) for i in range(a, b)}

    return positions(src_emb), positions(tgt_emb)


def blend(x_tgt, x_src, mask):
    """``x_tgt * M + x_src * (1 - M)`` with the grid mask broadcast over latent channels."""
    m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    return x_tgt * m + x_src * (1.0 - m)


class _Coupler:
    """Shared per-step logic: source capture, target injection, mask building."""

    def __init__(self, model, cfg, grid, src_emb, tgt_emb, diagnostics, observer):
        mc = model.cfg
        cfg.check(mc.depth)
        self.model, self.cfg, self.grid = model, cfg, grid
        self.src_emb, self.tgt_emb = src_emb, tgt_emb
        self.diagnostics, self.observer = diagnostics, observer
        self.n_i, self.n_t, self.order = mc.n_image, mc.text_len, mc.concat_order
        self.prefix = cfg.prefix(mc.depth)
        self.src_tokens, self.tgt_tokens = _mask_tokens(cfg, src_emb, tgt_emb)
        self.mask_blocks = atlas.blocks_or_all(cfg.mask_blocks, mc.depth) if cfg.local_blend else []
        self.src_stack, self.tgt_stack = atlas.MaskStack(), atlas.MaskStack()
        if cfg.local_blend and not (self.src_tokens or self.tgt_tokens):
            log.warning("no changed words between prompts; local blending is skipped")

    def step(self, k, x_src, x_tgt, target_velocity=True):
        """Evaluate both branches at step ``k``; returns ``(v_src, v_tgt, record)``."""
        cfg, grid = self.cfg, self.grid
        t = grid.knots[k]
        f = grid.fraction(k)
        replaced = replacement_active(k, grid.steps, cfg.tau_frac) and self.prefix > 0
        blending = cfg.local_blend and f < cfg.blend_stop_frac and bool(self.src_tokens or self.tgt_tokens)
        rec = StepRecord(step=k, t=t, fraction=f, replaced=replaced, blended=blending)

        src_capture = set(self.mask_blocks) if blending else set()
        tgt_capture = set(src_capture)
        if replaced and cfg.replace_mode != "qk_proj":
            src_capture |= set(range(self.prefix))
        if replaced and self.diagnostics:
            src_capture |= set(range(self.prefix))
            tgt_capture |= set(range(self.prefix))
        if self.observer is not None:
            src_capture = tgt_capture = set(range(self.model.cfg.depth))

        v_src, src_acts = self.model.model_velocity(x_src, t, self.src_emb, HookSet(capture=frozenset(src_capture)))
        hooks = HookSet(capture=frozenset(tgt_capture))
        if replaced:
            hooks = _injection_hooks(src_acts, cfg.replace_mode, self.prefix, self.order, self.n_i, self.n_t)
            hooks.capture = frozenset(tgt_capture)
            rec.injected_blocks = list(range(self.prefix))
        v_tgt, tgt_acts = None, None
        if target_velocity or tgt_capture:
            v_tgt, tgt_acts = self.model.model_velocity(x_tgt, t, self.tgt_emb, hooks)
        if replaced and self.diagnostics:
            rec.quadrant_diff = _quadrant_diff(src_acts, tgt_acts, range(self.prefix), self.order, self.n_i, self.n_t)
        if self.observer is not None:
            self.observer(k, src_acts, tgt_acts)
        if blending:
            grid_hw = self.model.cfg.image_grid
            self.src_stack.extend(
                atlas.collect_token_maps(src_acts, self.src_tokens, grid_hw, self.order, k, self.mask_blocks, "src")
            )
            self.tgt_stack.extend(
                atlas.collect_token_maps(tgt_acts, self.tgt_tokens, grid_hw, self.order, k, self.mask_blocks, "tgt")
            )
            rec.mask = atlas.build_blend_mask(
                self.src_stack, self.tgt_stack, self.src_tokens, cfg.sigma, cfg.theta, cfg.union_mode,
                tgt_tokens=self.tgt_tokens,
            )
        return v_src, v_tgt, rec


def initial_noise(seed, model):
    return np.random.default_rng(seed).standard_normal((model.cfg.n_image, model.cfg.width))


# --------------------------------------------------------------- pipelines


def edit_synthetic(src_prompt, tgt_prompt, seed, cfg, model, grid, diagnostics=False, observer=None):
    """Generate a source image and its edit from shared seeded noise.

    Returns ``(src_latent, tgt_latent, trace)``.  ``observer(k, src_acts,
    tgt_acts)`` is called every step with full attention captures.
    """
    src_emb, tgt_emb = model.encode(src_prompt), model.encode(tgt_prompt)
    coupler = _Coupler(model, cfg, grid, src_emb, tgt_emb, diagnostics, observer)
    x_src = initial_noise(seed, model)
    x_tgt = x_src.copy()
    trace = EditTrace(config=cfg.to_dict())
    for k in range(grid.steps):
        v_src, v_tgt, rec = coupler.step(k, x_src, x_tgt)
        dt = grid.knots[k + 1] - grid.knots[k]
        x_src = x_src + dt * v_src
        x_tgt = x_tgt + dt * v_tgt
        if rec.mask is not None:
            x_tgt = blend(x_tgt, x_src, rec.mask)
        trace.steps.append(rec)
    return x_src, x_tgt, trace


def edit_real(x0, x_init, tgt_prompt, cfg, model, grid, src_prompt="", eta_rev=0.0, diagnostics=False, observer=None):
    """Edit a real latent ``x0`` starting from ``x_init``.

    The source branch is the fixed straight path ``interpolate(x0, x_init, t)``;
    the model runs on it only to harvest projections and attention maps.  The
    target branch denoises from ``x_init`` with the same coupling as
    :func:`edit_synthetic`, optionally pulled toward ``x0`` by ``eta_rev``.

    Returns ``(edited_latent, trace, source_path)``.
    """
    if not 0.0 <= eta_rev <= 1.0:
        raise ConfigError(f"eta_rev must lie in [0, 1], got {eta_rev}")
    x0 = np.asarray(x0, dtype=np.float64)
    x_init = np.asarray(x_init, dtype=np.float64)
    if eta_rev > 0 and min(grid.knots[:-1]) < guard_delta(grid.steps) - 1e-15:
        raise ConfigError("grid evaluates the reference field below its singularity guard")
    src_emb, tgt_emb = model.encode(src_prompt), model.encode(tgt_prompt)
    coupler = _Coupler(model, cfg, grid, src_emb, tgt_emb, diagnostics, observer)
    x_tgt = x_init.copy()
    path = [interpolate(x0, x_init, t) for t in grid.knots]
    trace = EditTrace(config=cfg.to_dict(), mode="real")
    for k in range(grid.steps):
        t = grid.knots[k]
        _, v_model, rec = coupler.step(k, path[k], x_tgt, target_velocity=eta_rev < 1.0)
        if eta_rev == 1.0:
            v = conditional_velocity(x_tgt, t, x0, TOWARD_DATA)
        elif eta_rev == 0.0:
            v = v_model
        else:
            v = v_model + eta_rev * (conditional_velocity(x_tgt, t, x0, TOWARD_DATA) - v_model)
        x_tgt = x_tgt + (grid.knots[k + 1] - t) * v
        if rec.mask is not None:
            x_tgt = blend(x_tgt, path[k + 1], rec.mask)
        trace.steps.append(rec)
    return x_tgt, trace, path


def baseline_prompt_switch(src_prompt, tgt_prompt, switch_frac, seed, model, grid):
    """Single-branch sampling on ``src_prompt`` while ``k/T < switch_frac``, then ``tgt_prompt``.

    Returns ``(latent, switch_step)``; ``switch_step`` is the first step using the target prompt.
    """
    if not 0.0 <= switch_frac <= 1.0:
        raise ConfigError(f"switch_frac must lie in [0, 1], got {switch_frac}")
    src_emb, tgt_emb = model.encode(src_prompt), model.encode(tgt_prompt)
    x = initial_noise(seed, model)
    switch = grid.steps
    for k in range(grid.steps):
        use_src = replacement_active(k, grid.steps, switch_frac)
        if not use_src:
            switch = min(switch, k)
        v, _ = model.model_velocity(x, grid.knots[k], src_emb if use_src else tgt_emb)
        x = x + (grid.knots[k + 1] - grid.knots[k]) * v
    return x, switch


def compare_replace_modes(src_prompt, tgt_prompt, seed, cfg, model, grid):
    """Run all three replacement modes from the same seed and report logit-quadrant differences.

    Per mode and replaced step: the largest T2T difference to the target's own
    (un-injected) logits and to the source logits, block by block.  Across
    modes: I2I, T2I and I2T differences between ``qk_proj`` and ``i2i_block``.
    """
    mc = model.cfg
    n_i, n_t, order = mc.n_image, mc.text_len, mc.concat_order
    captured = {}
    report = {"modes": {}, "qk_vs_i2i": {}}
    for mode in REPLACE_MODES:
        per_step = {}

        def observer(k, src_acts, tgt_acts, per_step=per_step):
            per_step[k] = [atlas.decompose(a.logits, order, n_i, n_t, "logits") for a in tgt_acts]

        src, tgt, trace = edit_synthetic(
            src_prompt, tgt_prompt, seed, replace(cfg, replace_mode=mode), model, grid,
            diagnostics=True, observer=observer,
        )
        captured[mode] = per_step
        steps = {}
        for rec in trace.steps:
            if rec.replaced:
                diffs = rec.quadrant_diff
                steps[str(rec.step)] = {
                    "t2t_vs_uninjected": max(d["t2t_vs_uninjected"] for d in diffs.values()),
                    "t2t_vs_source": max(d["t2t_vs_source"] for d in diffs.values()),
                    "i2i_vs_source": max(d["i2i_vs_source"] for d in diffs.values()),
                    "blocks": diffs,
                }
        report["modes"][mode] = {
            "replaced_steps": trace.replaced_steps,
            "steps": steps,
            "final_tgt_vs_src": float(np.abs(tgt - src).max()),
        }
    qk, i2i = captured["qk_proj"], captured["i2i_block"]
    prefix = cfg.prefix(mc.depth)
    for k in sorted(qk):
        if not replacement_active(k, grid.steps, cfg.tau_frac) or prefix == 0:
            continue
        blocks = range(prefix)
        report["qk_vs_i2i"][str(k)] = {
            "i2i": max(float(np.abs(qk[k][b].i2i - i2i[k][b].i2i).max()) for b in blocks),
            "t2i": max(float(np.abs(qk[k][b].t2i - i2i[k][b].t2i).max()) for b in blocks),
            "i2t": max(float(np.abs(qk[k][b].i2t - i2i[k][b].i2t).max()) for b in blocks),
        }
    return report


def write_trace(trace, directory, latents=None):
    """Dump a trace as step folders (mask PGM, quadrant-diff JSON) plus ``trace.json`` and latent blobs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in trace.steps:
        if rec.mask is None and rec.quadrant_diff is None:
            continue
        sd = directory / f"step_{rec.step:04d}"
        sd.mkdir(exist_ok=True)
        rec.mask_files = []
        if rec.mask is not None:
            write_pgm(sd / "mask.pgm", rec.mask, 1.0)
            rec.mask_files.append(f"{sd.name}/mask.pgm")
        if rec.quadrant_diff is not None:
            write_json(sd / "quadrant_diff.json", rec.quadrant_diff)
    for name, m in (latents or {}).items():
        write_matrix(directory / f"{name}.bin", m)
    write_json(directory / "trace.json", trace.to_dict())
