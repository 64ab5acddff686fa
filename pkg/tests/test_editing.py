import json

import numpy as np
import pytest

from mmdit_edit import editing
from mmdit_edit.editing import EditConfig
from mmdit_edit.errors import ConfigError
from mmdit_edit.flow import TimeGrid, interpolate

pytestmark = pytest.mark.filterwarnings("ignore:no mask blocks selected")

SRC, TGT = "a panda riding a bicycle", "a dragon riding a bicycle"


def test_config_validation():
    with pytest.raises(ConfigError):
        EditConfig(tau_frac=1.5)
    with pytest.raises(ConfigError):
        EditConfig(replace_mode="swap")
    with pytest.raises(ConfigError):
        EditConfig(local_blend=True)
    with pytest.raises(ConfigError):
        EditConfig.from_dict({"tau": 0.2})
    with pytest.raises(ConfigError):
        EditConfig(mask_blocks=(9,)).check(8)
    cfg = EditConfig(mask_blocks=[1, 2], theta=0.3, local_blend=True)
    assert EditConfig.from_dict(cfg.to_dict()) == cfg


def test_presets_clamp_prefix():
    assert editing.PRESETS["flux-schnell"].prefix(57) == 38
    assert editing.PRESETS["sd35-turbo"].prefix(8) == 8
    assert editing.PRESETS["default"].prefix(8) == 8


@pytest.mark.parametrize("steps,expected", [(28, [0, 1, 2, 3, 4, 5]), (4, [0]), (10, [0, 1]), (5, [0])])
def test_replacement_window(steps, expected):
    assert [k for k in range(steps) if editing.replacement_active(k, steps, 0.2)] == expected


def test_blend_formula(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = editing.blend(a, b, m)
    assert np.array_equal(out[[0, 3]], a[[0, 3]]) and np.array_equal(out[[1, 2]], b[[1, 2]])


def test_identity_edit_is_bit_exact(small_model):
    grid = TimeGrid.uniform(6)
    for cfg in (EditConfig(), EditConfig(replace_mode="full_map", theta=0.2, local_blend=True)):
        src, tgt, _ = editing.edit_synthetic(SRC, SRC, 0, cfg, small_model, grid)
        assert np.array_equal(src, tgt)


def test_edit_trace_steps(small_model):
    grid = TimeGrid.uniform(10)
    cfg = EditConfig(theta=0.3, local_blend=True, mask_blocks=(1,), blend_stop_frac=0.5)
    src, tgt, trace = editing.edit_synthetic(SRC, TGT, 0, cfg, small_model, grid)
    assert trace.replaced_steps == [0, 1]
    assert trace.blended_steps == [0, 1, 2, 3, 4]
    assert not np.array_equal(src, tgt)
    for rec in trace.steps:
        assert (rec.mask is not None) == rec.blended


def test_source_branch_is_unaffected_by_editing(small_model):
    grid = TimeGrid.uniform(5)
    src_a, _, _ = editing.edit_synthetic(SRC, TGT, 2, EditConfig(), small_model, grid)
    src_b, _, _ = editing.edit_synthetic(SRC, "a cat", 2, EditConfig(replace_mode="full_map"), small_model, grid)
    assert np.array_equal(src_a, src_b)


def test_theta_minus_one_leaves_target_untouched(small_model):
    grid = TimeGrid.uniform(5)
    plain = editing.edit_synthetic(SRC, TGT, 1, EditConfig(), small_model, grid)[1]
    blended = editing.edit_synthetic(SRC, TGT, 1, EditConfig(theta=-1.0, local_blend=True), small_model, grid)[1]
    assert np.array_equal(plain, blended)


def test_zero_prefix_disables_replacement(small_model):
    grid = TimeGrid.uniform(5)
    _, tgt, trace = editing.edit_synthetic(SRC, TGT, 0, EditConfig(replace_block_prefix=0), small_model, grid)
    assert trace.replaced_steps == []
    base, _ = editing.baseline_prompt_switch(SRC, TGT, 0.0, 0, small_model, grid)
    assert np.array_equal(tgt, base)


def test_baseline_prompt_switch(small_model):
    _, switch = editing.baseline_prompt_switch(SRC, TGT, 0.2, 0, small_model, TimeGrid.uniform(28))
    assert switch == 6


def test_compare_replace_modes(small_model):
    rep = editing.compare_replace_modes(SRC, TGT, 0, EditConfig(), small_model, TimeGrid.uniform(5))
    assert rep["modes"]["qk_proj"]["steps"]["0"]["t2t_vs_uninjected"] == 0.0
    assert rep["modes"]["full_map"]["steps"]["0"]["t2t_vs_source"] == 0.0
    assert all(rep["modes"][m]["steps"]["0"]["i2i_vs_source"] == 0.0 for m in rep["modes"])
    d = rep["qk_vs_i2i"]["0"]
    assert d["i2i"] == 0.0 and d["t2i"] > 0 and d["i2t"] > 0


def test_edit_real_reconstructs_with_eta_one(small_model):
    rng = np.random.default_rng(0)
    shape = (small_model.cfg.n_image, small_model.cfg.width)
    x0, x1 = rng.standard_normal(shape), rng.standard_normal(shape)
    grid = TimeGrid.uniform(6)
    out, trace, path = editing.edit_real(x0, x1, TGT, EditConfig(), small_model, grid, src_prompt=SRC, eta_rev=1.0)
    np.testing.assert_allclose(out, x0, atol=1e-10)
    assert np.array_equal(path[3], interpolate(x0, x1, grid.knots[3]))
    assert trace.mode == "real"
    with pytest.raises(ConfigError):
        editing.edit_real(x0, x1, TGT, EditConfig(), small_model, grid, eta_rev=2.0)


def test_edit_real_eta_zero_follows_model(small_model):
    rng = np.random.default_rng(1)
    shape = (small_model.cfg.n_image, small_model.cfg.width)
    x0, x1 = rng.standard_normal(shape), rng.standard_normal(shape)
    out, _, _ = editing.edit_real(x0, x1, TGT, EditConfig(), small_model, TimeGrid.uniform(4), src_prompt=SRC)
    assert np.isfinite(out).all() and not np.allclose(out, x0)


def test_write_trace(tmp_path, small_model):
    cfg = EditConfig(theta=0.2, local_blend=True)
    src, tgt, trace = editing.edit_synthetic(SRC, TGT, 0, cfg, small_model, TimeGrid.uniform(4), diagnostics=True)
    editing.write_trace(trace, tmp_path, {"target": tgt})
    data = json.loads((tmp_path / "trace.json").read_text())
    assert len(data["steps"]) == 4
    assert (tmp_path / "step_0000" / "mask.pgm").exists()
    assert (tmp_path / "step_0000" / "quadrant_diff.json").exists()
    assert (tmp_path / "target.bin").exists()


def test_blend_words_override(small_model):
    cfg = EditConfig(theta=0.2, local_blend=True, blend_words=("bicycle",))
    _, _, trace = editing.edit_synthetic(SRC, SRC, 0, cfg, small_model, TimeGrid.uniform(4))
    assert trace.blended_steps == [0, 1]
