"""Command-line entry point: ``derainfield <subcommand> [flags]``.

Subcommands: generate, train, render, derain, evaluate, analyze, ablate.
Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures (message
on standard error). Every command that writes an output directory also
writes ``manifest.txt`` with the full configuration, seed and code version.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import dataset as ds
from . import evalpost, rainsim
from .dirgrad import estimate_angles, orientation_histogram

log = logging.getLogger("derainfield")

ABLATION_ROWS = (
    ("full", {}, None),
    ("w/o rec", {"reconstruction": 0.0}, None),
    ("w/o tv", {"tv": 0.0}, None),
    ("w/o agr", {"gradient_rotation": 0.0}, None),
    ("bins 30", {}, 30),
    ("bins 90", {}, 90),
)
ABLATION_DEFAULT_ITERS = 400


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="derainfield", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        for flag in flags:
            FLAGS[flag](p)
        return p

    add("generate", "export a procedural rainy scene", "config", "out", "seed")
    add("train", "train on a scene directory", "config", "data", "out", "iters", "seed", "checkpoint", "bins",
        "k_angles")
    add("render", "render views from a checkpoint", "checkpoint", "data", "out", "views")
    add("derain", "render, predict rain and fuse per view", "checkpoint", "data", "out", "views", "threshold")
    add("evaluate", "PSNR/SSIM report against clean ground truth", "checkpoint", "data", "out", "threshold")
    add("analyze", "orientation histograms of rainy views (or residuals)", "data", "out", "views", "bins",
        "k_angles", "checkpoint")
    p = add("ablate", "loss-term and bin-count ablation table", "config", "data", "out", "iters", "seed",
            "threshold")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per configuration")
    return parser


def _views(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view indices, got {text!r}")


FLAGS = {
    "config": lambda p: p.add_argument("--config", type=Path, help="key=value configuration file"),
    "out": lambda p: p.add_argument("--out", type=Path, required=True, help="output directory"),
    "data": lambda p: p.add_argument("--data", type=Path, required=True, help="scene directory"),
    "iters": lambda p: p.add_argument("--iters", type=int, help="total training iterations"),
    "seed": lambda p: p.add_argument("--seed", type=int, help="random seed"),
    "checkpoint": lambda p: p.add_argument("--checkpoint", type=Path, help="checkpoint file"),
    "views": lambda p: p.add_argument("--views", type=_views, help="0-based view indices, e.g. 0,3,5"),
    "threshold": lambda p: p.add_argument("--threshold", type=float, help="rain-mask threshold"),
    "bins": lambda p: p.add_argument("--bins", type=int, help="orientation histogram bins"),
    "k_angles": lambda p: p.add_argument("--k-angles", dest="k_angles", type=int, help="dominant angles per patch"),
}


# ---------------------------------------------------------------------------
# helpers


def _read_config(path: Path | None) -> dict[str, str]:
    if path is None:
        return {}
    return ds.parse_key_values(Path(path).read_text())


def write_manifest(out: Path, command: str, argv: Sequence[str], config: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"version={__version__}", f"argv={' '.join(argv)}"]
    lines += [f"{k}={v}" for k, v in sorted(_flatten(config).items())]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _flatten(values: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in values.items():
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[prefix + key] = value
    return flat


def train_config(args, values: dict[str, str]):
    from .trainer import TrainConfig

    values = dict(values)
    profile = values.pop("profile", "desk")
    if profile not in ("desk", "full"):
        raise UsageError(f"unknown profile {profile!r} (expected desk or full)")
    base = TrainConfig.desk() if profile == "desk" else TrainConfig()
    try:
        config = TrainConfig.from_mapping(values, base)
    except ValueError as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc
    overrides = {}
    if getattr(args, "iters", None) is not None:
        overrides["total_iters"] = args.iters
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "bins", None) is not None:
        overrides["num_bins"] = args.bins
    if getattr(args, "k_angles", None) is not None:
        overrides["k_angles"] = args.k_angles
    return replace(config, **overrides)


def _require_checkpoint(args):
    from .checkpoint import load_checkpoint

    if args.checkpoint is None:
        raise UsageError(f"{args.command}: --checkpoint is required")
    return load_checkpoint(args.checkpoint)


def _select_views(args, dataset: ds.SceneDataset) -> list[int]:
    views = args.views if getattr(args, "views", None) is not None else list(range(dataset.n))
    bad = [v for v in views if not 0 <= v < dataset.n]
    if bad:
        raise UsageError(f"view indices {bad} out of range for {dataset.n} views")
    return views


def _fusion_config(args) -> evalpost.FusionConfig:
    if getattr(args, "threshold", None) is None:
        return evalpost.FusionConfig()
    return evalpost.FusionConfig(threshold=args.threshold)


def _name(i: int) -> str:
    return f"{i + 1:03d}"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, argv) -> None:
    values = _read_config(args.config)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    try:
        config = rainsim.RainSimConfig.from_mapping(values)
    except ValueError as exc:
        raise UsageError(f"bad generator configuration: {exc}") from exc
    data = rainsim.generate_scene(config, args.out)
    write_manifest(args.out, "generate", argv, asdict(config))
    log.info("wrote %d views of %dx%d to %s", data.n, *data.hw, args.out)


def cmd_train(args, argv) -> None:
    from .checkpoint import load_checkpoint
    from .trainer import train

    config = train_config(args, _read_config(args.config))
    dataset = ds.load_scene(args.data)
    state = None
    if args.checkpoint is not None:
        state = load_checkpoint(args.checkpoint)
        if state.config != config:
            config = state.config
            log.info("resuming with the checkpoint's configuration")
    write_manifest(args.out, "train", argv, {**config.to_dict(), "data": str(args.data)})
    state = train(config, dataset, state, out_dir=args.out, checkpoint_every=max(100, config.total_iters // 4))
    log.info("finished %d iterations; checkpoint and losses.csv in %s", state.iter, args.out)


def cmd_render(args, argv) -> None:
    from .trainer import render_view

    state = _require_checkpoint(args)
    dataset = ds.load_scene(args.data)
    views = _select_views(args, dataset)
    write_manifest(args.out, "render", argv, {**state.config.to_dict(), "checkpoint": str(args.checkpoint)})
    for i in views:
        ds.write_png(args.out / f"{_name(i)}.png", render_view(state, dataset, i))
    log.info("rendered %d views to %s", len(views), args.out)


def cmd_derain(args, argv) -> None:
    from .trainer import predict_rain_maps, render_view

    state = _require_checkpoint(args)
    dataset = ds.load_scene(args.data)
    views = _select_views(args, dataset)
    fusion = _fusion_config(args)
    rain = predict_rain_maps(state, dataset)
    write_manifest(args.out, "derain", argv, {**state.config.to_dict(), **asdict(fusion),
                                              "checkpoint": str(args.checkpoint)})
    for i in views:
        render = render_view(state, dataset, i)
        fused = evalpost.selective_fusion(dataset.images[i], render, evalpost.rain_mask(rain[i], fusion))
        d = args.out / _name(i)
        d.mkdir(parents=True, exist_ok=True)
        ds.write_png(d / "render.png", render)
        ds.write_png(d / "rain.png", np.clip(rain[i], 0.0, 1.0))
        ds.write_png(d / "fused.png", fused)
    log.info("derained %d views into %s", len(views), args.out)


def evaluate_state(state, dataset: ds.SceneDataset, fusion: evalpost.FusionConfig) -> evalpost.MetricReport:
    from .trainer import predict_rain_maps, render_view

    renders = np.stack([render_view(state, dataset, i) for i in range(dataset.n)])
    rain = predict_rain_maps(state, dataset)
    baseline = None
    if dataset.clean_images is not None:
        rainy = [(evalpost.psnr(dataset.images[i], dataset.clean_images[i]),
                  evalpost.ssim(dataset.images[i], dataset.clean_images[i])) for i in range(dataset.n)]
        baseline = {"rainy input": tuple(np.mean(rainy, axis=0))}
    return evalpost.evaluate(dataset, renders, rain, fusion, baseline)


def cmd_evaluate(args, argv) -> None:
    state = _require_checkpoint(args)
    dataset = ds.load_scene(args.data)
    fusion = _fusion_config(args)
    report = evaluate_state(state, dataset, fusion)
    write_manifest(args.out, "evaluate", argv, {**asdict(fusion), "checkpoint": str(args.checkpoint)})
    (args.out / "report.csv").write_text(report.to_csv())
    summary = report.summary()
    (args.out / "report.txt").write_text(summary)
    sys.stdout.write(summary)


def cmd_analyze(args, argv) -> None:
    dataset = ds.load_scene(args.data)
    views = _select_views(args, dataset)
    bins = args.bins or 60
    k = args.k_angles or 1
    images = dataset.images
    source = "rainy"
    if args.checkpoint is not None:
        from .checkpoint import load_checkpoint
        from .trainer import render_view

        state = load_checkpoint(args.checkpoint)
        images = np.stack([dataset.images[i] - render_view(state, dataset, i) if i in views else dataset.images[i]
                           for i in range(dataset.n)])
        source = "residual"
    write_manifest(args.out, "analyze", argv, {"bins": bins, "k_angles": k, "source": source})
    summary = ["view,theta_deg"]
    for i in views:
        hist = orientation_histogram(images[i], num_bins=bins)
        (args.out / f"hist_{_name(i)}.csv").write_text(hist.to_csv())
        angles = estimate_angles(images[i], k=k, num_bins=bins)
        summary.append(f"{i}," + ";".join(f"{np.degrees(a):.2f}" for a in angles.angles_rad))
    (args.out / "angles.csv").write_text("\n".join(summary) + "\n")
    log.info("wrote %d histograms (%s, %d bins) to %s", len(views), source, bins, args.out)


def run_ablation(config, dataset: ds.SceneDataset, seeds: Sequence[int], fusion: evalpost.FusionConfig,
                 out: Path | None = None) -> list[dict]:
    """Train every ablation row for every seed; returns one dict per (row, seed)."""
    from .trainer import train

    results = []
    for name, weight_changes, bins in ABLATION_ROWS:
        weights = replace(config.weights, **weight_changes)
        for seed in seeds:
            cfg = replace(config, weights=weights, seed=seed, num_bins=bins or config.num_bins)
            log.info("ablation %s seed %d", name, seed)
            state = train(cfg, dataset)
            report = evaluate_state(state, dataset, fusion)
            results.append({"config": name, "seed": seed, **report.means()})
    if out is not None:
        cols = ("config", "seed", *evalpost.MetricReport.COLUMNS[1:])
        lines = [",".join(cols)]
        lines += [",".join(str(r[c]) if c in ("config", "seed") else f"{r[c]:.6f}" for c in cols) for r in results]
        (out / "ablation_runs.csv").write_text("\n".join(lines) + "\n")
    return results


def ablation_table(results: list[dict]) -> str:
    lines = [f"{'Config':<12}{'PSNR':>10}{'SSIM':>10}{'PSNR+fus':>10}"]
    for name, _, _ in ABLATION_ROWS:
        rows = [r for r in results if r["config"] == name]
        lines.append(f"{name:<12}{np.mean([r['psnr_render'] for r in rows]):>10.2f}"
                     f"{np.mean([r['ssim_render'] for r in rows]):>10.3f}"
                     f"{np.mean([r['psnr_fused'] for r in rows]):>10.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args, argv) -> None:
    values = _read_config(args.config)
    config = train_config(args, values)
    if args.iters is None and "total_iters" not in values:
        config = replace(config, total_iters=ABLATION_DEFAULT_ITERS)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    dataset = ds.load_scene(args.data)
    fusion = _fusion_config(args)
    seeds = [config.seed + k for k in range(args.seeds)]
    write_manifest(args.out, "ablate", argv, {**config.to_dict(), **asdict(fusion), "seeds": seeds})
    results = run_ablation(config, dataset, seeds, fusion, args.out)
    table = ablation_table(results)
    (args.out / "ablation.txt").write_text(table)
    sys.stdout.write(table)


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "render": cmd_render, "derain": cmd_derain,
    "evaluate": cmd_evaluate, "analyze": cmd_analyze, "ablate": cmd_ablate,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not logging.getLogger().handlers and not log.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
