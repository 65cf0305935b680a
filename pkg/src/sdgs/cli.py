"""Command-line entry point: ``sdgs {gen,train,render,eval,ablate,report}``.

Exit codes: 0 success, 1 refused (output exists, use --force), 2 missing or
unreadable input, 3 malformed config or arguments, 4 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numba
import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .imageio import write_ppm
from .synth import build_dataset, load_dataset, quantize, save_dataset, standard_scenes
from .trainer import TrainConfig, Trainer, TrainingDiverged, evaluate, region_density

EXIT_REFUSED, EXIT_MISSING, EXIT_CONFIG, EXIT_DIVERGED = 1, 2, 3, 4

DEFAULT_MATRIX = [
    ("full", {}),
    ("no-dad", {"dad": False}),
    ("no-tin", {"tin": False}),
    ("no-dx", {"use_dx": False}),
    ("no-dl", {"use_dl": False}),
    ("no-dq", {"use_dq": False}),
]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_CONFIG)


# config files ----------------------------------------------------------------

_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        return kind(raw)
    except ValueError:
        raise CliError(f"bad value for {key}: {raw!r}", EXIT_CONFIG) from None


def parse_pairs(lines, source: str = "config") -> dict:
    """Parse ``key = value`` lines (``#`` comments) into typed overrides."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kinds = {"bool": bool, "int": int, "float": float}
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{n}: expected key=value, got {line!r}", EXIT_CONFIG)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise CliError(f"{source}:{n}: unknown key {key!r}", EXIT_CONFIG)
        out[key] = _coerce(key, raw, kinds[types[key]])
    return out


def load_config(path=None, overrides=()) -> TrainConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config {p} not found", EXIT_MISSING)
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(overrides, "--set"))
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from None


def dump_config(cfg: TrainConfig) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else repr(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in dataclasses.asdict(cfg).items())


def parse_matrix(path) -> list[tuple[str, dict]]:
    """One variant per line: ``name key=value key=value ...``."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"matrix {p} not found", EXIT_MISSING)
    rows = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].split()
        if not line:
            continue
        rows.append((line[0], parse_pairs(line[1:], f"{p}:{n}")))
    if not rows:
        raise CliError(f"matrix {p} is empty", EXIT_CONFIG)
    return rows


# helpers ---------------------------------------------------------------------


def _claim(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise CliError(f"{path} exists (use --force to overwrite)", EXIT_REFUSED)
    return path


def _dataset(path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read dataset {path}: {exc}", EXIT_MISSING) from None


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, CheckpointError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}", EXIT_MISSING) from None


def _train(dataset, cfg, log_path):
    try:
        return Trainer(dataset, cfg, log_path=log_path).run()
    except TrainingDiverged as exc:
        raise CliError(f"{exc}: {json.dumps(exc.diagnostics, default=str)}", EXIT_DIVERGED) from None


def _cameras(which: str, dataset) -> list[int]:
    if which == "heldout":
        return list(dataset.heldout)
    if which == "train":
        return dataset.train_cameras
    return list(range(len(dataset.cameras)))


# commands --------------------------------------------------------------------


def cmd_gen(args) -> int:
    scenes = standard_scenes()
    if args.scene not in scenes:
        raise CliError(f"unknown scene {args.scene!r}; choose from {', '.join(scenes)}", EXIT_CONFIG)
    out = _claim(Path(args.out), args.force)
    ds = build_dataset(scenes[args.scene])
    save_dataset(ds, out)
    print(f"wrote {args.scene} to {out}: {len(ds.cameras)} cameras x {len(ds.times)} frames, "
          f"dynamic fraction {ds.dynamic_fraction():.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    ds = _dataset(args.dataset)
    out = Path(args.out)
    ckpt = _claim(out / "model.ckpt", args.force)
    log = out / "log.ndjson"
    out.mkdir(parents=True, exist_ok=True)
    log.unlink(missing_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    tr = _train(ds, cfg, log)
    tr.save(ckpt, out / "train.state")
    res = evaluate(tr.scene, ds, ds.train_cameras)
    print(f"trained {tr.step} steps: train PSNR {res['psnr']:.2f} dB, {res['anchors']} anchors -> {ckpt}")
    return 0


def cmd_render(args) -> int:
    scene = _checkpoint(args.checkpoint)
    ds = _dataset(args.dataset)
    if not 0 <= args.cam < len(ds.cameras):
        raise CliError(f"camera {args.cam} out of range (0..{len(ds.cameras) - 1})", EXIT_CONFIG)
    if args.t_sweep is not None and args.t_sweep < 1:
        raise CliError("--t-sweep needs at least one frame", EXIT_CONFIG)
    times = np.linspace(0.0, 1.0, args.t_sweep) if args.t_sweep else [args.t]
    out = Path(args.out)
    names = [out / f"cam{args.cam}_{i:04d}.ppm" for i in range(len(times))]
    for p in names:
        _claim(p, args.force)
    out.mkdir(parents=True, exist_ok=True)
    for p, t in zip(names, times):
        write_ppm(p, quantize(scene.render(ds.cameras[args.cam], float(t))))
    print(f"wrote {len(names)} frame(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    scene = _checkpoint(args.checkpoint)
    ds = _dataset(args.dataset)
    cams = _cameras(args.cameras, ds)
    if not cams:
        raise CliError(f"no {args.cameras} cameras in dataset", EXIT_CONFIG)
    res = evaluate(scene, ds, cams)
    res["density"] = region_density(scene, ds)
    print(f"PSNR {res['psnr']:.3f} dB  SSIM {res['ssim']:.4f}  anchors {res['anchors']}  "
          f"size {res['bytes'] / 1024:.1f} KiB  ({res['frames']} frames, cameras {cams})")
    if args.json:
        Path(args.json).write_text(json.dumps(res, indent=1))
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set)
    matrix = parse_matrix(args.matrix) if args.matrix else DEFAULT_MATRIX
    ds = _dataset(args.dataset)
    out = Path(args.out)
    table = _claim(out / "ablation.tsv", args.force)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, over in matrix:
        try:
            cfg = dataclasses.replace(base, **over)
        except ValueError as exc:
            raise CliError(f"variant {name}: {exc}", EXIT_CONFIG) from None
        tr = _train(ds, cfg, out / f"{name}.ndjson")
        rows.append({
            "name": name, "seed": cfg.seed, "overrides": over,
            "psnr_train": evaluate(tr.scene, ds, ds.train_cameras)["psnr"],
            "psnr_heldout": evaluate(tr.scene, ds)["psnr"],
            "anchors": len(tr.scene.model),
            "density_ratio": region_density(tr.scene, ds)["ratio"],
        })
        print(f"{name}: held-out {rows[-1]['psnr_heldout']:.2f} dB, {rows[-1]['anchors']} anchors", flush=True)
    lines = ["variant\tseed\toverrides\tpsnr_train\tpsnr_heldout\tanchors\tdensity_ratio"]
    for r in rows:
        over = " ".join(f"{k}={v}" for k, v in r["overrides"].items()) or "-"
        lines.append(f"{r['name']}\t{r['seed']}\t{over}\t{r['psnr_train']:.3f}\t{r['psnr_heldout']:.3f}\t"
                     f"{r['anchors']}\t{r['density_ratio']:.3f}")
    table.write_text("\n".join(lines) + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    seeds = {r["seed"] for r in rows}
    print("\n".join(lines))
    print(f"seed {seeds.pop()} shared by all variants" if len(seeds) == 1 else f"seeds differ: {sorted(seeds)}")
    return 0


def cmd_report(args) -> int:
    from . import report

    run = Path(args.run)
    log = run / "log.ndjson"
    if not log.is_file():
        raise CliError(f"{log} not found", EXIT_MISSING)
    out = Path(args.out)
    targets = [out / "training_curves.png", out / "anchors.png"]
    ablation = Path(args.ablation) / "ablation.json" if args.ablation else None
    if ablation is not None:
        if not ablation.is_file():
            raise CliError(f"{ablation} not found", EXIT_MISSING)
        targets.append(out / "ablation.png")
    for p in targets:
        _claim(p, args.force)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report.training_curves(report.read_log(log), targets[0])
    except (ValueError, KeyError) as exc:
        raise CliError(f"bad log {log}: {exc}", EXIT_CONFIG) from None
    report.anchor_distribution(_checkpoint(run / "model.ckpt"), _dataset(args.dataset), targets[1], t=args.t)
    if ablation is not None:
        report.ablation_chart(json.loads(ablation.read_text()), targets[2])
    print("wrote " + ", ".join(str(p) for p in targets))
    return 0


# argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="sdgs", description="Train and inspect anchor-based dynamic Gaussian scenes.",
                     epilog=__doc__.split("\n\n", 1)[1], formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=numba.config.NUMBA_NUM_THREADS,
                        help="worker threads for rendering; defaults to the hardware thread count")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, helptext, fn):
        p = sub.add_parser(name, help=helptext, description=helptext, formatter_class=fmt)
        p.set_defaults(fn=fn)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    def config_flags(p):
        p.add_argument("--config", default=None, help="flat key=value training config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable, wins over --config")

    p = command("gen", "write a standard synthetic scene to disk", cmd_gen)
    p.add_argument("scene", help="scene name: " + ", ".join(standard_scenes()))
    p.add_argument("--out", required=True, help="dataset directory to create")

    p = command("train", "coarse + fine training; writes model.ckpt, train.state, log.ndjson", cmd_train)
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    config_flags(p)

    p = command("render", "render frames from a checkpoint as PPM", cmd_render)
    p.add_argument("checkpoint", help="model checkpoint")
    p.add_argument("--dataset", required=True, help="dataset directory supplying the cameras")
    p.add_argument("--out", required=True, help="frame directory")
    p.add_argument("--cam", type=int, default=0, help="camera index")
    p.add_argument("--t", type=float, default=0.0, help="normalized time of a single frame")
    p.add_argument("--t-sweep", type=int, default=None, metavar="N",
                   help="render N frames evenly spaced over t in [0, 1] instead of one")

    p = command("eval", "PSNR/SSIM/size report for a checkpoint", cmd_eval)
    p.add_argument("checkpoint", help="model checkpoint")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--cameras", choices=("heldout", "train", "all"), default="heldout", help="which views to score")
    p.add_argument("--json", default=None, help="also write the metrics record here")

    p = command("ablate", "train every variant of a switch matrix with one seed", cmd_ablate)
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--out", required=True, help="directory for the table and per-variant logs")
    p.add_argument("--matrix", default=None,
                   help="file with one variant per line: 'name key=value ...' (default: full plus each switch off)")
    config_flags(p)

    p = command("report", "render figures for a finished run", cmd_report)
    p.add_argument("run", help="run directory written by train")
    p.add_argument("--dataset", required=True, help="dataset the run was trained on")
    p.add_argument("--ablation", default=None, help="directory written by ablate, adds a bar chart")
    p.add_argument("--out", required=True, help="figure directory")
    p.add_argument("--t", type=float, default=0.0, help="time at which anchors are plotted")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("--threads must be >= 1", EXIT_CONFIG)
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        return args.fn(args)
    except CliError as exc:
        print(f"sdgs: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
