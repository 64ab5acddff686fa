"""Acceptance criteria, one test each.

Every test prints a ``PASS``/``FAIL`` line; the lines are repeated in the
pytest terminal summary.  Run standalone with ``python3 tests/test_acceptance.py``.
"""

import itertools
import time

import numpy as np
import pytest

from mmdit_edit import atlas, bench, editing, flow, selection
from mmdit_edit import attention as attn
from mmdit_edit.editing import EditConfig
from mmdit_edit.errors import MaskError
from mmdit_edit.model import HookSet, ModelConfig, ToyMMDiT

RESULTS = {}

SRC, TGT = "a panda riding a bicycle", "a dragon riding a bicycle"


def record(number, name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {name}" + (f": {detail}" if detail else "")
    RESULTS[number] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def toy():
    return ToyMMDiT(ModelConfig())


def test_01_quadrant_oracle():
    start = time.perf_counter()
    worst = 0.0
    heads, n_i, n_t, d = 2, 64, 16, 8
    for seed in range(100):
        rng = np.random.default_rng(seed)
        q_i, k_i, v_i = (rng.standard_normal((heads, n_i, d)) for _ in range(3))
        q_t, k_t, v_t = (rng.standard_normal((heads, n_t, d)) for _ in range(3))
        img, txt = attn.quadrant_attention(q_i, k_i, v_i, q_t, k_t, v_t, 1 / np.sqrt(d))
        for order in attn.CONCAT_ORDERS:
            q, k, v = (attn.concat(a, b, order) for a, b in ((q_i, q_t), (k_i, k_t), (v_i, v_t)))
            ref_img, ref_txt = attn.split(attn.monolithic_attention(q, k, v, 1 / np.sqrt(d)), n_i, order)
            worst = max(worst, np.abs(img - ref_img).max(), np.abs(txt - ref_txt).max())
    elapsed = time.perf_counter() - start
    record(1, "quadrant oracle", worst <= 1e-10 and elapsed < 5.0, f"max diff {worst:.2e}, {elapsed:.2f}s")


def test_02_normalisation(toy):
    worst = 0.0
    seen = 0

    def observer(k, src_acts, tgt_acts):
        nonlocal worst, seen
        for act in list(src_acts) + list(tgt_acts):
            q = atlas.decompose(act.weights, toy.cfg.concat_order, toy.cfg.n_image, toy.cfg.text_len)
            mass = q.i2i.sum(axis=-1) + q.t2i.sum(axis=-1)
            worst = max(worst, float(np.abs(mass - 1.0).max()))
            seen += 1

    cfg = EditConfig(theta=0.3, local_blend=True, mask_blocks=(2, 3, 4))
    editing.edit_synthetic(SRC, TGT, 0, cfg, toy, flow.TimeGrid.uniform(28), observer=observer)
    record(2, "image-row normalisation", seen == 28 * 2 * 8 and worst <= 1e-12, f"{seen} captures, max err {worst:.2e}")


def test_03_t2t_preservation(toy):
    rep = editing.compare_replace_modes(SRC, TGT, 0, EditConfig(), toy, flow.TimeGrid.uniform(28))
    qk, full = rep["modes"]["qk_proj"]["steps"], rep["modes"]["full_map"]["steps"]
    steps_ok = sorted(int(k) for k in qk) == list(range(6)) and sorted(int(k) for k in full) == list(range(6))
    qk_ok = all(b["t2t_vs_uninjected"] == 0.0 for s in qk.values() for b in s["blocks"].values())
    full_ok = all(b["t2t_vs_source"] == 0.0 for s in full.values() for b in s["blocks"].values())
    record(3, "T2T preservation", steps_ok and qk_ok and full_ok, f"qk_proj bit-equal={qk_ok}, full_map bit-equal={full_ok}")


def test_04_identity_edit(toy):
    configs = [
        EditConfig(),
        EditConfig(replace_mode="i2i_block", replace_block_prefix=3),
        EditConfig(replace_mode="full_map", theta=0.3, local_blend=True, mask_blocks=(1, 2)),
        EditConfig(tau_frac=1.0, union_mode="source_only", theta=-1.0, local_blend=True, mask_blocks=(0,)),
    ]
    ok, slowest = True, 0.0
    for cfg in configs:
        start = time.perf_counter()
        src, tgt, _ = editing.edit_synthetic(SRC, SRC, 5, cfg, toy, flow.TimeGrid.uniform(28))
        slowest = max(slowest, time.perf_counter() - start)
        ok = ok and np.array_equal(src, tgt)
    record(4, "identity edit", ok and slowest < 2.0, f"bit-identical={ok}, slowest {slowest:.2f}s")


def test_05_flow_exactness():
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((64, 16)), rng.standard_normal((64, 16))
    hit = 0.0
    for steps in (1, 4, 28):
        traj = flow.euler_sample(
            x1, flow.TimeGrid.uniform(steps), lambda x, t: flow.conditional_velocity(x, t, x0, flow.TOWARD_DATA)
        )
        hit = max(hit, float(np.abs(traj[-1].latent - x0).max()))
    finals, errs = [], []
    for seed in (0, 1):
        m = ToyMMDiT(ModelConfig(seed=seed))
        inv = flow.invert(x0, x1, 1.0, flow.TimeGrid.inversion(28), m.velocity_fn(""))
        back = flow.guided_sample(inv[-1].latent, x0, 1.0, flow.TimeGrid.uniform(28), m.velocity_fn("a dragon"))
        finals.append((inv[-1].latent, back[-1].latent))
        errs.append(float(np.abs(back[-1].latent - x0).max()))
    same = all(np.array_equal(a, b) for a, b in zip(finals[0], finals[1]))
    ok = hit <= 1e-10 and max(errs) <= 1e-8 and same
    record(5, "flow exactness", ok, f"anchor err {hit:.1e}, round trip {max(errs):.1e}, model-independent={same}")


def test_06_step_window(toy):
    cfg28 = EditConfig(tau_frac=0.2)
    _, _, t28 = editing.edit_synthetic(SRC, TGT, 0, cfg28, toy, flow.TimeGrid.uniform(28))
    _, _, t4 = editing.edit_synthetic(SRC, TGT, 0, editing.PRESETS["flux-schnell"], toy, flow.TimeGrid.uniform(4))
    ok = t28.replaced_steps == [0, 1, 2, 3, 4, 5] and t4.replaced_steps == [0]
    record(6, "step window", ok, f"T=28 -> {t28.replaced_steps}, T=4 -> {t4.replaced_steps}")


def test_07_mask_degeneracies(toy):
    grid = flow.TimeGrid.uniform(28)
    cfg = EditConfig(theta=-1.0, local_blend=True, mask_blocks=(2, 3))
    _, tgt, trace = editing.edit_synthetic(SRC, TGT, 0, cfg, toy, grid)
    _, plain, _ = editing.edit_synthetic(SRC, TGT, 0, EditConfig(), toy, grid)
    ones = all(np.array_equal(r.mask, np.ones(toy.cfg.image_grid)) for r in trace.steps if r.blended)
    untouched = np.array_equal(tgt, plain)
    try:
        atlas.build_blend_mask(atlas.MaskStack(), atlas.MaskStack(), set(), 1.5, 0.5)
        empty_raises = False
    except MaskError:
        empty_raises = True
    scenes = selection.synth_fixture(0, (8, 8), 8)
    maps = selection.synth_block_maps(scenes, 8, 1)
    monotone = True
    for i, _ in enumerate(scenes):
        stack = atlas.MaskStack()
        for b in range(8):
            stack.add(atlas.MapEntry(b, 0, 0, (2, 3), maps[b][i]))
        masks = [atlas.build_blend_mask(stack, stack, {2}, 1.5, th) for th in np.linspace(-0.5, 1.5, 41)]
        monotone = monotone and all((b <= a).all() for a, b in zip(masks, masks[1:]))
    ok = ones and untouched and empty_raises and monotone
    record(7, "mask degeneracies", ok, f"ones={ones}, untouched={untouched}, empty raises={empty_raises}, monotone={monotone}")


def _exhaustive_order(scores):
    """Order that wins over all 8! permutations under the (mean rank, block) criterion."""
    blocks = sorted(scores)
    ranks = {b: 0 for b in blocks}
    for m, desc in ((0, False), (1, True), (2, False)):
        for b in blocks:
            ranks[b] += 1 + sum(
                1
                for c in blocks
                if (scores[c][m] > scores[b][m] if desc else scores[c][m] < scores[b][m])
                or (scores[c][m] == scores[b][m] and c < b)
            )
    keyed = {b: (ranks[b] / 3, b) for b in blocks}
    return list(min(itertools.permutations(blocks), key=lambda p: [keyed[b] for b in p]))


def test_08_block_selection():
    scenes = selection.synth_fixture(0, (8, 8), 16)
    scores = selection.score_corpus(selection.synth_block_maps(scenes, 8, 1), scenes, 0.0)
    ranked = [r.block for r in selection.rank_blocks(scores)]
    matches = ranked == _exhaustive_order(scores)
    rng = np.random.default_rng(3)
    salt = {0: [selection.salt_noise(s.gt.mask * 0.8 + 0.1, 0.15, rng) for s in scenes]}
    raw = selection.score_corpus(salt, scenes, 0.0)[0][0]
    smooth = selection.score_corpus(salt, scenes, 1.5)[0][0]
    record(8, "block selection", matches and smooth < raw, f"oracle match={matches}, BCE {raw:.4f} -> {smooth:.4f}")


def test_09_benchmark():
    rep = bench.bench_attention(bench.DEFAULT_SHAPES, repeats=5)
    agree = all(r["max_abs_diff"] <= 1e-10 for r in rep["results"])
    prod = [t for t in rep["timing"] if (t["n_image"], t["n_text"], t["head_dim"]) == bench.PRODUCTION_SHAPE][0]
    record(9, "attention benchmark", agree and prod["ratio"] > 1.0, f"agree={agree}, production ratio {prod['ratio']:.2f}")


def test_10_pca(toy):
    cfg = toy.cfg
    grid = flow.TimeGrid.uniform(28)
    x = editing.initial_noise(0, toy)
    prompt = toy.encode(SRC)
    quads = []
    for k in range(grid.steps):
        v, acts = toy.model_velocity(x, grid.knots[k], prompt, HookSet(capture=frozenset(range(cfg.depth))))
        quads += [atlas.decompose(a.weights, cfg.concat_order, cfg.n_image, cfg.text_len) for a in acts]
        x = x + (grid.knots[k + 1] - grid.knots[k]) * v
    comps, var = atlas.i2i_pca(quads, 6, cfg.image_grid)
    flat = np.array([c.ravel() for c in comps])
    err = float(np.abs(flat @ flat.T - np.eye(6)).max())
    sorted_ok = all(a >= b for a, b in zip(var, var[1:]))
    record(10, "I2I PCA", err <= 1e-8 and sorted_ok, f"orthonormality err {err:.1e}, non-increasing={sorted_ok}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
