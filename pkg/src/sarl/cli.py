"""Command-line entry point: ``sarl <subcommand> [flags]``.

Every failure prints one line ``error: <CLASS>: <message>`` on stderr and
exits with that class's code. Effective settings resolve as built-in
defaults, then ``--config``, then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__, config as cfgmod, evaluate, synthdata, trainer

EXIT_CODES = {
    "OK": 0,
    "INTERNAL": 1,
    "UNKNOWN_FLAG": 2,
    "CONFIG_ERROR": 3,
    "SCHEMA_VERSION": 4,
    "CKPT_NOT_FOUND": 5,
    "DATA_ERROR": 6,
    "GRADCHECK_FAILED": 7,
    "NONFINITE_LOSS": 8,
    "USAGE": 64,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        kind = "UNKNOWN_FLAG" if "unrecognized arguments" in message else "USAGE"
        raise CliError(kind, message)


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict | None = None
    code_version: str = __version__
    seed: int | None = None
    started: float = field(default_factory=time.time)
    finished: float | None = None
    artifacts: list = field(default_factory=list)
    exit_status: str = "OK"

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n")
        os.replace(tmp, path)
        return path


# -- config resolution ------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args, flag_overrides: dict, fallback=None) -> cfgmod.RunConfig:
    """defaults < config file < ``--set`` pairs < dedicated flags.

    ``fallback`` is a config file used when no ``--config`` is given.
    """
    try:
        path = getattr(args, "config", None) or fallback
        base = cfgmod.load(path) if path else cfgmod.RunConfig()
        overrides = {}
        for item in getattr(args, "set", None) or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise cfgmod.ConfigError(f"--set expects section.key=value, got {item!r}")
            overrides[key] = _parse_value(value)
        overrides.update({k: v for k, v in flag_overrides.items() if v is not None})
        return cfgmod.merge(base, overrides)
    except cfgmod.SchemaVersionError as e:
        raise CliError("SCHEMA_VERSION", str(e)) from e
    except (cfgmod.ConfigError, TypeError) as e:
        raise CliError("CONFIG_ERROR", str(e)) from e


def _snapshot(cfg: cfgmod.RunConfig, run_dir: Path, manifest: RunManifest):
    path = run_dir / "config.snapshot.json"
    cfgmod.dump(cfg, path)
    manifest.config = cfg.to_dict()
    manifest.artifacts.append(str(path))


def _losses(text):
    if text is None:
        return None
    if text.strip().lower() in ("", "none", "global"):
        return []
    return [t.strip() for t in text.split(",") if t.strip()]


def _modality(text):
    if text is None:
        return None
    try:
        evaluate.resolve_modality(text)
    except ValueError as e:
        raise CliError("CONFIG_ERROR", str(e)) from e
    return text


def _pool_images(cfg: cfgmod.RunConfig, data_dir):
    if data_dir:
        return _load_data(data_dir).images
    return evaluate.cached_dataset("pool", cfg.data.pool_size, cfg.data.seed,
                                   evaluate.resolve_modality(cfg.data.modality)).images


def _load_data(path) -> synthdata.Dataset:
    try:
        return synthdata.load_dataset(path)
    except (OSError, ValueError, KeyError) as e:
        raise CliError("DATA_ERROR", f"cannot load dataset {path}: {e}") from e


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args, manifest):
    mode = evaluate.resolve_modality(_modality(args.modality))
    try:
        ds = synthdata.make_dataset(args.task, args.n, args.seed, mode)
    except ValueError as e:
        raise CliError("DATA_ERROR", str(e)) from e
    out = synthdata.save_dataset(ds, args.out)
    manifest.seed = args.seed
    manifest.artifacts.append(str(out / "manifest.jsonl"))
    return Path(args.out)


def _resume_snapshot(resume):
    """Config snapshot of the run a checkpoint came from, if it is still there."""
    if not resume:
        return None
    snap = Path(resume).resolve().parent.parent / "config.snapshot.json"
    return snap if snap.is_file() else None


def cmd_pretrain(args, manifest):
    losses = _losses(args.losses)
    # a resumed run rebuilds its image pool from the original run's config
    cfg = resolve_config(args, {
        "train.losses": losses, "train.epochs": args.epochs, "train.seed": args.seed,
        "data.modality": _modality(args.modality)}, fallback=_resume_snapshot(args.resume))
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, run_dir, manifest)
    manifest.seed = cfg.train.seed
    images = _pool_images(cfg, args.data)
    resume = args.resume
    if resume and not Path(resume).is_file():
        raise CliError("CKPT_NOT_FOUND", f"checkpoint {resume} not found")
    try:
        state = trainer.pretrain(cfg.train, images, run_dir, resume=resume)
    except trainer.NonFiniteLossError as e:
        raise CliError("NONFINITE_LOSS", str(e)) from e
    manifest.artifacts += sorted(str(p) for p in (run_dir / "ckpt").glob("*.npz"))
    manifest.artifacts.append(str(run_dir / "metrics.log"))
    print(json.dumps({"steps": state.step, "epochs": state.epoch,
                      "checkpoint": str(run_dir / "ckpt" / f"epoch_{state.epoch:04d}.npz")}))
    return run_dir


def cmd_probe(args, manifest):
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise CliError("CKPT_NOT_FOUND", f"checkpoint {ckpt} not found")
    cfg = resolve_config(args, {"probe.task": args.task, "probe.seed": args.seed})
    if cfg.probe.task not in synthdata.TASK_INFO:
        raise CliError("CONFIG_ERROR", f"unknown task {cfg.probe.task!r}")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, run_dir, manifest)
    manifest.seed = cfg.probe.seed
    try:
        state = trainer.load_checkpoint(ckpt)
    except (OSError, ValueError, KeyError) as e:
        raise CliError("CKPT_NOT_FOUND", f"unreadable checkpoint {ckpt}: {e}") from e
    if args.data:
        ds = _load_data(args.data)
    else:
        mode = evaluate.resolve_modality(args.modality or state_modality(ckpt) or "fused")
        ds = synthdata.make_dataset(cfg.probe.task, cfg.probe.n_samples, cfg.probe.data_seed, mode)
    try:
        report = evaluate.linear_probe(state, cfg.probe, ds)
    except evaluate.TaskMismatchError as e:
        raise CliError("DATA_ERROR", str(e)) from e
    report.checkpoint = str(ckpt)
    out = run_dir / "metrics.json"
    tmp = out.with_name("metrics.json.tmp")
    tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out)
    manifest.artifacts.append(str(out))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "extra"}))
    return run_dir


def state_modality(ckpt: Path):
    """Modality recorded in a pretraining run's snapshot, if one sits beside the checkpoint."""
    snap = ckpt.parent.parent / "config.snapshot.json"
    if snap.is_file():
        try:
            return cfgmod.load(snap).data.modality
        except cfgmod.ConfigError:
            return None
    return None


def cmd_ablate(args, manifest):
    cfg = resolve_config(args, {"train.epochs": args.epochs})
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, run_dir, manifest)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as e:
        raise CliError("CONFIG_ERROR", f"bad --seeds {args.seeds!r}") from e
    if args.subsets == "all":
        subsets = [[l for i, l in enumerate(cfgmod.LOSS_NAMES) if mask >> i & 1]
                   for mask in range(2 ** len(cfgmod.LOSS_NAMES))]
    else:
        subsets = [_losses(s) for s in args.subsets.split(";")]
    modes = [_modality(m) for m in args.modalities.split(",")]
    try:
        evaluate.ablation_matrix(cfg, subsets, modes, seeds, run_dir, jobs=args.jobs)
    except cfgmod.ConfigError as e:
        raise CliError("CONFIG_ERROR", str(e)) from e
    manifest.artifacts += [str(run_dir / "results.csv"), str(run_dir / "results_table.txt")]
    print((run_dir / "results_table.txt").read_text(), end="")
    return run_dir


def cmd_gradcheck(args, manifest):
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate.gradcheck_suite(args.precision, args.h, args.tolerance, args.seed)
    out = run_dir / "gradcheck.json"
    tmp = out.with_name("gradcheck.json.tmp")
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out)
    manifest.seed = args.seed
    manifest.config = {"precision": args.precision, "h": args.h, "tolerance": args.tolerance}
    manifest.artifacts.append(str(out))
    for name, t in report["terms"].items():
        print(f"{name:16s} max_rel_error={t['max_rel_error']:.3e} {'PASS' if t['passed'] else 'FAIL'}")
    if not report["passed"]:
        raise CliError("GRADCHECK_FAILED", f"gradient check failed at tolerance {args.tolerance}")
    return run_dir


def cmd_report(args, manifest):
    try:
        rows = evaluate.read_results(args.input)
    except (OSError, ValueError) as e:
        raise CliError("DATA_ERROR", f"cannot read {args.input}: {e}") from e
    if args.format == "table":
        sys.stdout.write(evaluate.render_table(rows))
    else:
        import csv
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["subset", "modality", "task", "mean", "std", "n"])
        for (subset, mode), stats in sorted(evaluate.summarize(rows).items()):
            for task, (mean, std, n) in sorted(stats.items()):
                w.writerow([subset, mode, task, f"{mean:.6g}", f"{std:.6g}", n])
    return None


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sarl", description="Spatially aware self-supervised pretraining on synthetic tactile images.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a labeled synthetic dataset")
    g.add_argument("--task", required=True, choices=synthdata.TASKS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--modality", default="fused")
    g.add_argument("--out", required=True, help="output directory (also the run directory)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="self-supervised pretraining")
    t.add_argument("--config")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--losses", help="comma list from sal,ppda,ram; 'none' for global only")
    t.add_argument("--modality", help="fused | visual | marker")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="pretrain on a dataset written by gen-data")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("probe", help="linear probe of a frozen checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", required=True)
    r.add_argument("--run-dir", required=True)
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--data", help="probe on a dataset written by gen-data")
    r.add_argument("--modality", help="modality of generated probe data")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    r.set_defaults(func=cmd_probe)

    a = sub.add_parser("ablate", help="loss-subset and modality ablation matrix")
    a.add_argument("--config")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--run-dir", default="ablation")
    a.add_argument("--subsets", default="all", help="'all' or ';'-separated comma lists")
    a.add_argument("--modalities", default="fused")
    a.add_argument("--epochs", type=int)
    a.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--precision", default="float64", choices=("float64", "float32"))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--run-dir", default=".")
    c.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("report", help="render results.csv as a table or summary CSV")
    o.add_argument("--in", dest="input", required=True)
    o.add_argument("--format", choices=("csv", "table"), default="table")
    o.set_defaults(func=cmd_report)
    return p


def _run_dir_of(args):
    for name in ("run_dir", "out"):
        value = getattr(args, name, None)
        if value:
            return Path(value)
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except CliError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return EXIT_CODES[e.kind]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv)
    status = "OK"
    try:
        args.func(args, manifest)
    except CliError as e:
        status = e.kind
        print(f"error: {e.kind}: {e}", file=sys.stderr)
    except Exception as e:  # noqa: BLE001 - last-resort classification
        status = "INTERNAL"
        print(f"error: INTERNAL: {type(e).__name__}: {e}", file=sys.stderr)
    run_dir = _run_dir_of(args)
    if run_dir is not None and run_dir.is_dir():
        manifest.finished = time.time()
        manifest.exit_status = status
        manifest.write(run_dir)
    return EXIT_CODES[status]


cli_dispatch = main


if __name__ == "__main__":
    sys.exit(main())
