"""Command-line front end.

Every command writes ``config.resolved.json`` and ``report.json`` into
``--out``.  Exit codes: 0 success, 1 runtime failure, 2 usage error; failures
print a JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import atlas, bench, editing, flow, selection
from .errors import ConfigError
from .io import read_matrix, write_json, write_matrix, write_pgm, write_trajectory
from .model import HookSet, ModelConfig, ToyMMDiT

MODE_FLAGS = {"qk": "qk_proj", "i2i": "i2i_block", "full": "full_map"}
UNION_FLAGS = {"both": "both_branches", "source": "source_only"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Contents of a ``--config`` JSON file.

    ``model`` and ``edit`` are inline objects or paths to JSON files holding them.
    """

    model: dict = field(default_factory=dict)
    edit: dict = field(default_factory=dict)
    source_prompt: str = ""
    target_prompt: str = ""
    steps: int = 28
    seed: int = 0

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key in ("model", "edit"):
            if isinstance(raw.get(key), str):
                sub = (path.parent / raw[key]).resolve()
                if not sub.is_file():
                    raise UsageError(f"{key} config not found: {sub}")
                raw[key] = json.loads(sub.read_text())
        return cls(**raw)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _shape_list(text):
    shapes = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.lower().split("x")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"shape {item!r} is not N_IxN_TxD")
        shapes.append(tuple(int(p) for p in parts))
    return shapes


def build_parser():
    p = _Parser(prog="mmdit-edit", description="Toy MM-DiT attention analysis and prompt-based editing.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--steps", type=int, help="number of Euler steps T")

    def edit_flags(sp):
        sp.add_argument("--theta", type=float, help="mask threshold; enables local blending")
        sp.add_argument("--tau-frac", type=float)
        sp.add_argument("--blend-stop-frac", type=float)
        sp.add_argument("--replace-mode", choices=sorted(MODE_FLAGS))
        sp.add_argument("--block-prefix", type=int)
        sp.add_argument("--mask-blocks", type=_int_list)
        sp.add_argument("--union", choices=sorted(UNION_FLAGS))

    common(sub.add_parser("generate", help="sample one image latent"))
    e = sub.add_parser("edit", help="edit a synthetic image (source and target prompts)")
    common(e)
    edit_flags(e)
    e.add_argument("--compare-modes", action="store_true", help="also report quadrant diffs for all replace modes")
    inv = sub.add_parser("invert", help="controlled forward ODE from a latent toward noise")
    common(inv)
    inv.add_argument("--gamma", type=float, default=1.0)
    inv.add_argument("--x0", help="latent blob to invert; default: generate one from the source prompt")
    er = sub.add_parser("edit-real", help="edit a real latent from an initial noise latent")
    common(er)
    edit_flags(er)
    er.add_argument("--x0", required=True)
    er.add_argument("--init", required=True)
    er.add_argument("--eta-rev", type=float, default=0.0)
    an = sub.add_parser("analyze-attn", help="dump quadrant maps, T2T diagonality and I2I PCA")
    common(an)
    an.add_argument("--pca-k", type=int, default=6)
    an.add_argument("--dump-quadrants", action="store_true", help="write head-averaged quadrants per block and step")
    sb = sub.add_parser("select-blocks", help="score blocks against fixture masks and pick top-k")
    common(sb, config=False)
    sb.add_argument("--config", help="model config (needed for --source model)")
    sb.add_argument("--scenes", type=int, default=32)
    sb.add_argument("--depth", type=int, default=8)
    sb.add_argument("--k", type=int, default=5)
    sb.add_argument("--sigma", type=float, default=1.5)
    sb.add_argument("--source", choices=("synthetic", "model"), default="synthetic")
    bn = sub.add_parser("bench-attention", help="streaming vs materialised attention timing")
    bn.add_argument("--out", required=True)
    bn.add_argument("--shapes", type=_shape_list, default=list(bench.DEFAULT_SHAPES))
    bn.add_argument("--repeats", type=int, default=5)
    bn.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------- commands


def _setup(args):
    run = RunConfig.load(args.config)
    if args.seed is not None:
        run.seed = args.seed
    if args.steps is not None:
        run.steps = args.steps
    model = ToyMMDiT(ModelConfig.from_dict(run.model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return run, model, out


def _edit_config(run, args):
    cfg = editing.EditConfig.from_dict(run.edit)
    overrides = {}
    if args.theta is not None:
        overrides.update(theta=args.theta, local_blend=True)
    if args.tau_frac is not None:
        overrides["tau_frac"] = args.tau_frac
    if args.blend_stop_frac is not None:
        overrides["blend_stop_frac"] = args.blend_stop_frac
    if args.replace_mode is not None:
        overrides["replace_mode"] = MODE_FLAGS[args.replace_mode]
    if args.block_prefix is not None:
        overrides["replace_block_prefix"] = args.block_prefix
    if args.mask_blocks is not None:
        overrides["mask_blocks"] = tuple(args.mask_blocks)
    if args.union is not None:
        overrides["union_mode"] = UNION_FLAGS[args.union]
    return replace(cfg, **overrides)


def _snapshot(out, command, run, extra=None):
    snap = {
        "command": command,
        "model": ModelConfig.from_dict(run.model).to_dict(),
        "source_prompt": run.source_prompt,
        "target_prompt": run.target_prompt,
        "steps": run.steps,
        "seed": run.seed,
    }
    snap.update(extra or {})
    write_json(out / "config.resolved.json", snap)


def cmd_generate(args):
    run, model, out = _setup(args)
    _snapshot(out, "generate", run)
    grid = flow.TimeGrid.uniform(run.steps)
    traj = flow.euler_sample(editing.initial_noise(run.seed, model), grid, model.velocity_fn(run.source_prompt))
    write_matrix(out / "latent.bin", traj[-1].latent)
    write_trajectory(out / "trajectory", traj, {"seed": run.seed, "prompt": run.source_prompt})
    return {"latent": "latent.bin", "steps": run.steps, "final_norm": float(np.linalg.norm(traj[-1].latent))}


def cmd_edit(args):
    run, model, out = _setup(args)
    cfg = _edit_config(run, args)
    _snapshot(out, "edit", run, {"edit": cfg.to_dict()})
    grid = flow.TimeGrid.uniform(run.steps)
    src, tgt, trace = editing.edit_synthetic(
        run.source_prompt, run.target_prompt, run.seed, cfg, model, grid, diagnostics=True
    )
    editing.write_trace(trace, out / "trace", {"source": src, "target": tgt})
    report = {
        "identical": bool(np.array_equal(src, tgt)),
        "max_abs_diff": float(np.abs(src - tgt).max()),
        "replaced_steps": trace.replaced_steps,
        "blended_steps": trace.blended_steps,
    }
    if args.compare_modes:
        report["compare_modes"] = editing.compare_replace_modes(
            run.source_prompt, run.target_prompt, run.seed, cfg, model, grid
        )
    return report


def cmd_invert(args):
    run, model, out = _setup(args)
    _snapshot(out, "invert", run, {"gamma": args.gamma})
    if args.x0:
        x0 = read_matrix(args.x0)
    else:
        traj = flow.euler_sample(
            editing.initial_noise(run.seed, model), flow.TimeGrid.uniform(run.steps), model.velocity_fn(run.source_prompt)
        )
        x0 = traj[-1].latent
    regulator = np.random.default_rng(run.seed + 1).standard_normal(x0.shape)
    traj = flow.invert(x0, regulator, args.gamma, flow.TimeGrid.inversion(run.steps), model.velocity_fn(""))
    write_matrix(out / "x0.bin", x0)
    write_matrix(out / "init.bin", traj[-1].latent)
    write_trajectory(out / "trajectory", traj, {"seed": run.seed, "regulator_seed": run.seed + 1, "gamma": args.gamma})
    return {"x0": "x0.bin", "init": "init.bin", "t_end": traj[-1].t, "gamma": args.gamma}


def cmd_edit_real(args):
    run, model, out = _setup(args)
    cfg = _edit_config(run, args)
    _snapshot(out, "edit-real", run, {"edit": cfg.to_dict(), "eta_rev": args.eta_rev})
    x0, x_init = read_matrix(args.x0), read_matrix(args.init)
    grid = flow.TimeGrid.uniform(run.steps)
    edited, trace, _ = editing.edit_real(
        x0, x_init, run.target_prompt, cfg, model, grid, src_prompt=run.source_prompt, eta_rev=args.eta_rev
    )
    editing.write_trace(trace, out / "trace", {"edited": edited})
    return {
        "reconstruction_error": float(np.abs(edited - x0).max()),
        "replaced_steps": trace.replaced_steps,
        "blended_steps": trace.blended_steps,
        "eta_rev": args.eta_rev,
    }


def _write_maps(directory, sums, count, suffix):
    directory.mkdir(exist_ok=True)
    manifest = []
    for (b, tok), total in sorted(sums.items()):
        m = total / count
        name = f"token{tok:02d}_block{b:02d}{suffix}.pgm"
        peak = float(m.max())
        write_pgm(directory / name, m, peak if peak > 0 else 1.0)
        manifest.append({"block": b, "head": "mean", "step": "mean", "token_range": [tok, tok + 1], "file": name, "max": peak})
    write_json(directory / "manifest.json", manifest)


def cmd_analyze_attn(args):
    run, model, out = _setup(args)
    _snapshot(out, "analyze-attn", run, {"pca_k": args.pca_k})
    mc = model.cfg
    grid = flow.TimeGrid.uniform(run.steps)
    prompt = model.encode(run.source_prompt)
    tokens = sorted({i for spans in prompt.word_spans.values() for a, b in spans for i in range(a, b)})
    capture = frozenset(range(mc.depth))
    t2i_sums = {(b, tok): np.zeros(mc.image_grid) for b in range(mc.depth) for tok in tokens}
    i2t_sums = {key: np.zeros(mc.image_grid) for key in t2i_sums}
    diag = []
    quads_all = []
    x = editing.initial_noise(run.seed, model)
    for k in range(grid.steps):
        t = grid.knots[k]
        v, acts = model.model_velocity(x, t, prompt, HookSet(capture=capture))
        row = []
        for act in acts:
            b = act.block_index
            q = atlas.decompose(act.weights, mc.concat_order, mc.n_image, mc.text_len)
            quads_all.append(q)
            row.append([float(d) for d in atlas.t2t_diagonality(q)])
            for h in range(mc.heads):
                qh = q.head(h)
                for tok in tokens:
                    t2i_sums[(b, tok)] += atlas.token_map(qh, tok, mc.image_grid)
                    i2t_sums[(b, tok)] += atlas.i2t_map(qh, tok, mc.image_grid)
            if args.dump_quadrants:
                qd = out / "quadrants" / f"step_{k:04d}"
                qd.mkdir(parents=True, exist_ok=True)
                for name in ("i2i", "t2i", "i2t", "t2t"):
                    write_matrix(qd / f"block{b:02d}_{name}.bin", getattr(q, name).mean(axis=0))
        diag.append(row)
        x = x + (grid.knots[k + 1] - t) * v
    count = grid.steps * mc.heads
    _write_maps(out / "token_maps", t2i_sums, count, "")
    _write_maps(out / "i2t_maps", i2t_sums, count, "_i2t")
    comps, variances = atlas.i2i_pca(quads_all, args.pca_k, mc.image_grid)
    pca_dir = out / "pca"
    pca_dir.mkdir(exist_ok=True)
    for i, c in enumerate(comps):
        # signed components are shifted to [0, 1] for display
        span = float(np.abs(c).max()) or 1.0
        write_pgm(pca_dir / f"component{i}.pgm", (c / span + 1.0) / 2.0, 1.0)
    flat = np.array([c.ravel() for c in comps])
    gram_err = float(np.abs(flat @ flat.T - np.eye(len(comps))).max()) if comps else 0.0
    return {
        "tokens": tokens,
        "map_files_per_token": mc.depth,
        "t2t_diagonality": diag,
        "pca": {
            "variances": variances,
            "orthonormality_max_error": gram_err,
            "orthonormal": gram_err < 1e-8,
            "non_increasing": all(a >= b for a, b in zip(variances, variances[1:])),
        },
    }


def cmd_select_blocks(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    if args.source == "model":
        if not args.config:
            raise UsageError("--source model needs --config")
        run = RunConfig.load(args.config)
        model = ToyMMDiT(ModelConfig.from_dict(run.model))
        depth, grid_hw = model.cfg.depth, model.cfg.image_grid
    else:
        model, depth, grid_hw = None, args.depth, (8, 8)
    scenes = selection.synth_fixture(seed, grid_hw, args.scenes)
    if model is None:
        block_maps = selection.synth_block_maps(scenes, depth, seed + 1)
    else:
        block_maps = selection.model_block_maps(model, scenes, steps=args.steps or 4, seed=seed + 1)
    report = selection.selection_report(scenes, block_maps, args.k, args.sigma)
    report.update(seed=seed, source=args.source)
    write_json(out / "config.resolved.json", {"command": "select-blocks", **{k: v for k, v in vars(args).items() if k != "func"}})
    (out / "scores.csv").write_text(selection.report_csv(report))
    return report


def cmd_bench_attention(args):
    if not args.shapes:
        raise UsageError("empty shape list")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.resolved.json", {"command": "bench-attention", "shapes": [list(s) for s in args.shapes], "repeats": args.repeats, "seed": args.seed})
    report = bench.bench_attention(args.shapes, repeats=args.repeats, seed=args.seed)
    prod = [t for t in report["timing"] if (t["n_image"], t["n_text"], t["head_dim"]) == bench.PRODUCTION_SHAPE]
    if prod:
        report["timing_summary"] = {"production_ratio": prod[0]["ratio"], "materialized_slower": prod[0]["ratio"] > 1}
    return report


COMMANDS = {
    "generate": cmd_generate,
    "edit": cmd_edit,
    "edit-real": cmd_edit_real,
    "invert": cmd_invert,
    "analyze-attn": cmd_analyze_attn,
    "select-blocks": cmd_select_blocks,
    "bench-attention": cmd_bench_attention,
}


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message)}), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        report = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail(type(exc).__name__, exc, 2)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        return _fail(type(exc).__name__, exc, 1)
    write_json(Path(args.out) / "report.json", report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
