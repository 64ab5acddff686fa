"""
Which blocks give clean masks?
==============================

Blocks are scored against known region masks with three metrics and ranked
by their average rank.  Smoothing the maps first mostly helps the noisy ones.
"""

from mmdit_edit import selection

scenes = selection.synth_fixture(0, (8, 8), 24)
maps = selection.synth_block_maps(scenes, 8, 1)
report = selection.selection_report(scenes, maps, k=3)

# %%
# Per-block scores with and without a sigma=1.5 blur.

for label in ("raw", "smoothed"):
    print(label)
    for s in sorted(report[label]["scores"], key=lambda s: s["block"]):
        print(f"  block {s['block']}: bce {s['bce']:.3f}  miou {s['soft_miou']:.3f}  mse {s['mse']:.3f}  rank {s['avg_rank']:.2f}")
    print("  top-3:", report[label]["top_k"])

# %%
# For reference, the top-5 blocks reported for the large models.

for name, picks in selection.PRODUCTION_TOP5.items():
    print(f"{name:11s} raw {picks['raw']}  smoothed {picks['smoothed']}")
