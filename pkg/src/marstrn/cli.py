"""``marstrn`` command line: train | eval | synth | cam | report.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import PROTOCOLS, RunConfig, RunConfigError, load_run_config
from .data import (DatasetError, load_patch_dataset, read_gray, resize_bilinear, synth_landmarks,
                   synth_navigation, write_nav_sequence, write_patch_dataset)
from .evaluator import (ABLATION_SUBSETS, OracleEmbedder, ablation_driver, incremental_recall,
                        lost_in_space_eval, moon_navigation_eval, recall_at_1)
from .mars import pose_normalize
from .model import ModelEmbedder
from .trainer import CheckpointError, TrainingDivergedError, TrainState, epoch_mars_means, fit, read_checkpoint
from .transforms import TransformConfigError, TransformRanges, TransformSpec, apply_transform
from .viz import eigencam, plot_mars_curves, side_by_side

log = logging.getLogger("marstrn")

REPORT_SCHEMA = Path(__file__).with_name("schemas") / "ra_report.schema.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def write_oracle_checkpoint(path, dim: int = 4096, input_resolution: int = 64):
    """A checkpoint stand-in whose embedder is the id-oracle (for protocol checks)."""
    torch.save({"format": "marstrn-checkpoint", "kind": "oracle", "dim": dim,
                "input_resolution": input_resolution}, path)


def load_embedder(path):
    blob = read_checkpoint(path)
    if blob.get("kind") == "oracle":
        return OracleEmbedder(int(blob.get("dim", 4096))), int(blob.get("input_resolution", 64)), None
    state = TrainState.load(path)
    return ModelEmbedder(state.model), state.config.model.input_resolution, state


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def report_table(reports: list[dict]) -> str:
    head = f"{'protocol':<14} {'subset':<12} {'seed':>5} {'correct':>8} {'incorrect':>10} {'missed':>7} {'score':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        score = r["recall_at_1"] if r["protocol"] == "recall1" else r["ra"]
        lines.append(f"{r['protocol']:<14} {r['transform_subset']:<12} {r['seed']:>5} "
                     f"{r.get('correct', ''):>8} {r.get('incorrect', ''):>10} {r.get('missed', ''):>7} "
                     f"{score:>8.2f}")
    return "\n".join(lines)


def run_protocol(protocol: str, embedder, test, nav, seed: int, subset: str, ranges: TransformRanges,
                 threshold: float, ablation_base: str = "incremental", patch_res: int = 64) -> list[dict]:
    """Run one protocol and return its report dicts (four for the ablation)."""
    base = {"incremental": (incremental_recall, test), "navigation": (moon_navigation_eval, nav),
            "lost-in-space": (lost_in_space_eval, nav)}
    if protocol == "recall1":
        value = recall_at_1(embedder, test, seed, ranges.restricted(subset))
        return [{"protocol": "recall1", "seed": seed, "transform_subset": subset, "recall_at_1": value}]
    name = ablation_base if protocol == "ablation" else protocol
    fn, target = base[name]
    if target is None:
        raise DatasetError(f"protocol {name!r} needs a navigation sequence (data.nav_root)")
    kwargs = {"threshold": threshold}
    if name != "incremental":
        kwargs["patch_res"] = patch_res
    if protocol == "ablation":
        reports = ablation_driver(fn, embedder, target, seed, ranges, ABLATION_SUBSETS, **kwargs)
        return [reports[s].to_json() for s in ABLATION_SUBSETS]
    report = fn(embedder, target, seed, ranges.restricted(subset), **kwargs)
    report.transform_subset = subset
    return [report.to_json()]


def _eval_ranges(cfg: RunConfig) -> TransformRanges:
    res = cfg.data.resolution
    return replace(cfg.train.transforms, ref_resolution=(res, res))


def _mars_plot(state: TrainState, out: Path):
    m = state.config.model
    if not m.mars_enabled or not state.metrics:
        return None
    per_epoch = epoch_mars_means(state.metrics, m.num_blocks, m.gamma_ch, m.gamma_sp)
    return plot_mars_curves(per_epoch, out / "mars_curves.png")


def _parse_spec(text: str | None, res: int) -> TransformSpec:
    if text is None:
        return TransformSpec(ref_resolution=(res, res))
    p = Path(text)
    d = json.loads(p.read_text() if p.is_file() else text)
    d.setdefault("ref_resolution", [res, res])
    return TransformSpec.from_dict(d)


def _require_out(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or (cfg.out_dir if cfg is not None else None)
    if out is None:
        raise UsageError("an output directory is required (--out)")
    return Path(out)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = _require_out(args, cfg)
    if (out / "checkpoint.pt").exists() and not (args.force or args.resume):
        raise UsageError(f"{out} already holds a run; pass --force to overwrite or --resume to continue")
    cfg.out_dir = str(out)
    train, test, nav = cfg.data.splits()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")
    state = fit(cfg.train, train, out, resume_from=args.resume)
    _mars_plot(state, out)
    reports = []
    embedder = ModelEmbedder(state.model)
    for protocol in cfg.eval.protocols:
        reports += run_protocol(protocol, embedder, test, nav, cfg.eval.seed, cfg.eval.transform_subset,
                                _eval_ranges(cfg), cfg.eval.threshold, patch_res=cfg.data.resolution)
    (out / "reports.json").write_text(dump_json(reports))
    print(report_table(reports))
    print(f"artifacts written to {out}")
    return 0


def cmd_eval(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    if args.transform_subset not in ABLATION_SUBSETS:
        raise UsageError(f"unknown transform subset {args.transform_subset!r}; "
                         f"choose from {', '.join(ABLATION_SUBSETS)}")
    cfg = load_run_config(args.config) if args.config else RunConfig()
    embedder, res, _ = load_embedder(args.checkpoint)
    if args.data:
        cfg.data.root = args.data
    if args.nav:
        cfg.data.nav_root = args.nav
    if args.data:
        test = load_patch_dataset(args.data, cfg.data.resolution)
        nav = cfg.data.navigation(test)
    else:
        _, test, nav = cfg.data.splits()
    seed = cfg.eval.seed if args.seed is None else args.seed
    reports = run_protocol(args.protocol, embedder, test, nav, seed, args.transform_subset,
                           _eval_ranges(cfg), cfg.eval.threshold, args.ablation_base,
                           patch_res=cfg.data.resolution)
    payload = reports if args.protocol == "ablation" else reports[0]
    text = dump_json(payload)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ra_report_{args.protocol}.json").write_text(text)
    sys.stdout.write(text)
    print(report_table(reports))
    return 0


def cmd_synth(args) -> int:
    out = _require_out(args)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    seed = 0 if args.seed is None else args.seed
    ds = synth_landmarks(args.instances, args.resolution, seed, captures=args.captures)
    nav = synth_navigation(ds, args.frames, args.orbits, rng_seed=seed)
    write_patch_dataset(ds, out / "landmarks")
    write_nav_sequence(nav, out / "navigation")
    print(f"wrote {len(ds)} landmarks and {len(nav)} frames to {out}")
    return 0


def cmd_cam(args) -> int:
    out = _require_out(args)
    _, _, state = load_embedder(args.checkpoint)
    if state is None:
        raise CheckpointError("EigenCAM needs a trained checkpoint, not an oracle fixture")
    model = state.model.eval()
    res = state.config.model.input_resolution
    img1 = read_gray(args.image1)
    img2 = read_gray(args.image2) if args.image2 else img1
    img1, img2 = resize_bilinear(img1, (res, res)), resize_bilinear(img2, (res, res))
    t1, t2 = _parse_spec(args.t1, res), _parse_spec(args.t2, res)
    views = np.stack([apply_transform(img1, t1), apply_transform(img2, t2)]).astype(np.float32)
    with torch.no_grad():
        _, maps = model(torch.from_numpy(views)[:, None])
    out.mkdir(parents=True, exist_ok=True)
    heatmaps = {}
    for i, a in enumerate(maps):
        pair = [eigencam(pose_normalize(a[k], t), (res, res)) for k, t in enumerate((t1, t2))]
        heatmaps[f"block_{i + 1}"] = np.stack(pair)
        side_by_side(out / f"cam_block_{i + 1}.png", pair[0], pair[1], f"block {i + 1}")
    np.savez(out / "cam_heatmaps.npz", **heatmaps)
    print(f"wrote {len(maps)} heatmap pairs to {out}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    metrics, cfg_path = run / "metrics.csv", run / "run_config.json"
    if not metrics.is_file() or not cfg_path.is_file():
        raise DatasetError(f"{run} does not look like a training output directory")
    cfg = load_run_config(cfg_path)
    with open(metrics) as fh:
        rows = [{k: (int(v) if k in ("step", "epoch") else v) for k, v in r.items()} for r in csv.DictReader(fh)]
    m = cfg.train.model
    print(f"{len(rows)} steps over {rows[-1]['epoch'] if rows else 0} epochs")
    if m.mars_enabled and rows:
        per_epoch = epoch_mars_means(rows, m.num_blocks, m.gamma_ch, m.gamma_sp)
        plot_mars_curves(per_epoch, run / "mars_curves.png")
        for i in range(m.num_blocks):
            print(f"block {i + 1}: MARs loss {per_epoch[0, i]:.4f} (epoch 1) -> {per_epoch[-1, i]:.4f} (last)")
    reports = run / "reports.json"
    if reports.is_file():
        print(report_table(json.loads(reports.read_text())))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config (JSON or YAML)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="marstrn", description="MARs landmark recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a model from a run config")
    p.add_argument("--resume", help="continue from a checkpoint written by the same config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint with a TRN protocol")
    p.add_argument("checkpoint")
    p.add_argument("--protocol", default="incremental", help=f"one of: {', '.join(PROTOCOLS)}")
    p.add_argument("--transform-subset", default="all", help=f"one of: {', '.join(ABLATION_SUBSETS)}")
    p.add_argument("--ablation-base", default="incremental",
                   choices=["incremental", "navigation", "lost-in-space"])
    p.add_argument("--data", help="patch dataset root (defaults to the config's test split)")
    p.add_argument("--nav", help="navigation sequence root")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic landmark + navigation corpus")
    p.add_argument("--instances", type=int, default=60)
    p.add_argument("--captures", type=int, default=8, help="images per landmark")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--orbits", type=int, default=3)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cam", parents=[common], help="EigenCAM heatmaps of pose-normalised attention")
    p.add_argument("checkpoint")
    p.add_argument("image1")
    p.add_argument("image2", nargs="?")
    p.add_argument("--t1", help="transform spec for view 1 (JSON string or file)")
    p.add_argument("--t2", help="transform spec for view 2 (JSON string or file)")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("report", parents=[common], help="summarise a training output directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"marstrn: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, RunConfigError) as exc:
        print(f"marstrn: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, TrainingDivergedError, TransformConfigError, OSError,
            ValueError, json.JSONDecodeError) as exc:
        print(f"marstrn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
