"""Command-line entry point: ``rgaekit <subcommand> [flags]``.

Every run writes into one directory (``--out``, default
``$RGAEKIT_OUT/<subcommand>`` with ``RGAEKIT_OUT`` defaulting to ``runs``)
and leaves a ``manifest.json`` listing the configuration, input hashes and
produced artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import compressor, gradcheck, render, rgae, traceio
from .model import ModelConfig, ProjectorConfig, ProjectorKind, ToyMLLM
from .task import SyntheticTask
from .training import evaluate, train

EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_GRADCHECK = 5
EXIT_FORMAT = 6


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"missing file: {path}", EXIT_MISSING)
    return path


def _out_dir(args) -> Path:
    root = Path(os.environ.get("RGAEKIT_OUT", "runs"))
    out = Path(args.out) if args.out else root / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


class Manifest:
    def __init__(self, out: Path, argv, config=None):
        self.out = out
        self.data = {"argv": list(argv), "config": config or {}, "inputs": {}, "artifacts": []}

    def input(self, path):
        self.data["inputs"][str(path)] = _sha256(path)

    def artifact(self, path):
        self.data["artifacts"].append(str(Path(path).relative_to(self.out)))
        return path

    def write(self):
        (self.out / "manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    if args.config:
        text = _require(args.config).read_text(encoding="utf-8")
    else:
        text = ""
    try:
        cfg = traceio.parse_run_config(text)
        model = ToyMLLM(cfg.model_config())
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from None
    if args.out is None:
        args.out = cfg.output_dir
    out = _out_dir(args)
    manifest = Manifest(out, argv, asdict(cfg))
    if args.config:
        manifest.input(args.config)
    (out / "config.txt").write_text(text, encoding="utf-8")
    manifest.artifact(out / "config.txt")

    task = SyntheticTask(cfg.patch_grid_side)
    result = train(model, task, stages=cfg.stages, steps=cfg.steps_per_stage, lr=cfg.lr,
                   batch_size=cfg.batch_size, data_seed=cfg.data_seed)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "stage", "loss"])
        for step, stage, loss in result.to_rows():
            writer.writerow([step, stage, f"{loss:.17g}"])
    manifest.artifact(out / "loss.csv")
    model.save(out / "model.rgae")
    manifest.artifact(out / "model.rgae")
    manifest.artifact(out / "model.rgae.json")
    metrics = evaluate(model, task)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest.artifact(out / "metrics.json")
    manifest.write()
    print(f"final loss {result.losses[-1]:.4f}; accuracy {metrics}; wrote {out}")
    return 0


def _load_image(args, task):
    if args.image:
        tensors = traceio.read_trace(_require(args.image))
        name = args.image_name or next(iter(tensors))
        if name not in tensors:
            raise CliError(f"invalid config: no tensor {name!r} in {args.image}", EXIT_CONFIG)
        return tensors[name]
    rng = np.random.default_rng(args.data_seed)
    image = None
    for _ in range(args.sample + 1):
        image, _ = task.sample(rng)
    return image


def cmd_explain(args, argv) -> int:
    ckpt = _require(args.checkpoint)
    _require(str(ckpt) + ".json")
    model = ToyMLLM.load(ckpt)
    out = _out_dir(args)
    manifest = Manifest(out, argv, {"model": model.config.to_dict(), "rule": args.rule, "mode": args.mode})
    manifest.input(ckpt)
    if args.image:
        manifest.input(args.image)
    task = SyntheticTask(model.config.patch_grid_side)
    image = _load_image(args, task)
    text = args.text if args.text is not None else task.describe(image)
    try:
        text_ids = task.vocab.encode(text)
        record = model.generate(image, task.prompt_ids(), max_len=args.max_len, text_ids=text_ids,
                                mode=args.mode, eos_id=task.vocab.eos_id)
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from None

    results = {"rgae": rgae.explain(record, args.rule)}
    if args.baseline == "raw-attn":
        results["raw"] = rgae.raw_attention_baseline(record)
    tensors = record.to_tensors()
    tensors["input/image/map"] = image
    for prefix, res in results.items():
        tensors.update(res.to_tensors(prefix))
        for name in ("text_to_query", "query_to_patch", "text_to_patch"):
            path = out / f"{prefix}_{name}.csv"
            traceio.export_csv(getattr(res, name), path)
            manifest.artifact(path)
        manifest.artifact(render.render_patch_map(res.text_to_patch, out / f"{prefix}_text_to_patch.pgm"))
        manifest.artifact(render.render_patch_map(res.text_to_patch, out / f"{prefix}_text_to_patch_overlay.ppm",
                                                  base=image))
        grid_dir = out / f"{prefix}_query_grid"
        if compressor_square(res.query_to_patch.shape[0]):
            for p in render.render_query_grid(res.query_to_patch, grid_dir):
                manifest.artifact(p)
    traceio.write_trace(out / "explain.rgae", tensors)
    manifest.artifact(out / "explain.rgae")
    manifest.data["text"] = text
    manifest.data["generated"] = task.vocab.decode(record.generated_ids)
    manifest.write()
    print(f"explained {record.length} steps of {manifest.data['generated']!r} with rule={args.rule}; wrote {out}")
    return 0


def compressor_square(n) -> bool:
    try:
        compressor.grid_of(n)
    except ValueError:
        return False
    return True


def cmd_pool(args, argv) -> int:
    src = _require(args.input)
    tensors = traceio.read_trace(src)
    name = args.name or next(iter(tensors), None)
    if name not in tensors:
        raise CliError(f"invalid config: no tensor {name!r} in {src}", EXIT_CONFIG)
    x = tensors[name]
    if x.ndim == 3 and x.shape[0] == x.shape[1]:
        x = x.reshape(x.shape[0] * x.shape[1], x.shape[2])
    try:
        if x.ndim != 2:
            raise ValueError(f"tensor {name!r} must be (N, d) or (side, side, d), got {x.shape}")
        plan = compressor.plan_bins(compressor.grid_of(x.shape[0]), args.out_side)
        if args.mode == "avg":
            pooled, argmax = compressor.pool_avg(x, plan), None
        else:
            pooled, argmax = compressor.pool_max(x, plan)
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from None
    out = _out_dir(args)
    manifest = Manifest(out, argv, {"mode": args.mode, "out_side": args.out_side, "tensor": name})
    manifest.input(src)
    result = {"compressor/pooled/map": pooled}
    if argmax is not None:
        result["compressor/argmax/map"] = argmax.astype(np.float64)
    traceio.write_trace(out / "pooled.rgae", result)
    manifest.artifact(out / "pooled.rgae")
    (out / "plan.txt").write_text(plan.describe() + "\n")
    manifest.artifact(out / "plan.txt")
    manifest.write()
    print(f"pooled {x.shape[0]} -> {pooled.shape[0]} rows ({args.mode}); wrote {out}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, argv, {"seed": args.seed, "h": args.h, "tolerance": args.tolerance})
    lines = []

    def emit(line):
        print(line)
        lines.append(line)

    ok = gradcheck.main_report(seed=args.seed, h=args.h, tolerance=args.tolerance, out=emit)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    manifest.artifact(out / "gradcheck.txt")
    manifest.write()
    return 0 if ok else EXIT_GRADCHECK


def compare_points(in_side: int):
    """Projector zoo at token-grid sides proportional to 24 -> {24, 20, 16, 12, 8}."""
    sides = []
    for ref in (24, 20, 16, 12, 8):
        s = max(1, round(in_side * ref / 24))
        if s not in sides:
            sides.append(s)
    points = [("linear", in_side * in_side)]
    for s in sides:
        for kind in ("avgpool", "maxpool", "resampler"):
            points.append((kind, s * s))
    return points


def cmd_compare(args, argv) -> int:
    out = _out_dir(args)
    manifest = Manifest(out, argv, {"grid_side": args.grid_side, "steps": args.steps, "seeds": args.seeds,
                                    "lr": args.lr, "stages": args.stages})
    task = SyntheticTask(args.grid_side)
    rows = []
    for kind, m in compare_points(args.grid_side):
        for seed in range(args.seeds):
            cfg = ModelConfig(patch_grid_side=args.grid_side, projector=ProjectorConfig(kind, m), seed=seed)
            model = ToyMLLM(cfg)
            res = train(model, task, stages=args.stages, steps=args.steps, lr=args.lr)
            metrics = evaluate(model, task)
            rows.append([kind, m, seed, f"{res.losses[-1]:.17g}", metrics["exact"], metrics["location"],
                         metrics["color"]])
            print(f"{kind:10s} M={m:3d} seed={seed} loss={res.losses[-1]:.4f} location={metrics['location']:.3f}")
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["projector", "tokens", "seed", "final_loss", "exact", "location", "color"])
        writer.writerows(rows)
    manifest.artifact(out / "results.csv")
    manifest.write()
    return 0


def cmd_render(args, argv) -> int:
    src = _require(args.input)
    if src.suffix == ".csv":
        values = traceio.read_csv(src)
    else:
        tensors = traceio.read_trace(src)
        name = args.name or next(iter(tensors), None)
        if name not in tensors:
            raise CliError(f"invalid config: no tensor {name!r} in {src}", EXIT_CONFIG)
        values = np.atleast_2d(tensors[name])
    out = _out_dir(args)
    manifest = Manifest(out, argv, {"cell_pixels": args.cell_pixels, "grid": args.grid})
    manifest.input(src)
    try:
        if args.grid:
            for p in render.render_query_grid(values, out / "query_grid", args.cell_pixels, args.color):
                manifest.artifact(p)
        else:
            ext = ".ppm" if args.color else ".pgm"
            manifest.artifact(render.render_patch_map(values.ravel(), out / f"map{ext}", args.cell_pixels))
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from None
    manifest.write()
    print(f"rendered {src} into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgaekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_out(p):
        p.add_argument("--out", help="run directory (default: $RGAEKIT_OUT/<subcommand>)")
        return p

    p = with_out(sub.add_parser("train", help="train a toy model from a run config"))
    p.add_argument("--config", help="key = value run configuration")

    p = with_out(sub.add_parser("explain", help="relevance maps for one image and caption"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="trace container holding the image grid")
    p.add_argument("--image-name", help="tensor name inside --image")
    p.add_argument("--sample", type=int, default=0, help="index of a synthetic sample when --image is absent")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--text", help="target caption (default: the image's own caption)")
    p.add_argument("--mode", choices=("teacher", "greedy"), default="teacher")
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--rule", choices=[r.value for r in rgae.CrossRule], default=rgae.CrossRule.NORMALIZED.value)
    p.add_argument("--baseline", choices=("raw-attn",))

    p = with_out(sub.add_parser("pool", help="adaptive pooling of a trace tensor"))
    p.add_argument("--input", required=True)
    p.add_argument("--name")
    p.add_argument("--mode", choices=("avg", "max"), default="avg")
    p.add_argument("--out-side", type=int, required=True)

    p = with_out(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=gradcheck.STEP)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)

    p = with_out(sub.add_parser("compare", help="projector-zoo sweep"))
    p.add_argument("--grid-side", type=int, default=4)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--stages", type=int, choices=(1, 2), default=1)

    p = with_out(sub.add_parser("render", help="render a CSV or trace map as PGM/PPM"))
    p.add_argument("--input", required=True)
    p.add_argument("--name")
    p.add_argument("--grid", action="store_true", help="treat the map as M x N and render a query grid")
    p.add_argument("--color", action="store_true")
    p.add_argument("--cell-pixels", type=int, default=render.CELL_PIXELS)
    return parser


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "pool": cmd_pool,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
    "render": cmd_render,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse reports unknown flags and usage errors with status 2
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as exc:
        print(f"rgaekit {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except traceio.TraceFormatError as exc:
        print(f"rgaekit {args.command}: unreadable trace: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
