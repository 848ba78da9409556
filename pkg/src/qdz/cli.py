"""Command-line runner.

    qdz <command> [--config FILE] [--set key=value]... [--out DIR] [--seed N]
    qdz replay RUN_DIR [--out DIR]

Each command writes one run directory under ``--out`` holding a manifest,
the resolved config, metrics and model containers. Upstream stages are
found by their run-directory names, so a pipeline is a sequence of commands
sharing one ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, experiments, model, sizing, stats
from .data import DatasetError
from .experiments import ConfigError
from .nn import Network
from .train import DivergenceError

log = logging.getLogger("qdz")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_DIVERGENCE = 0, 2, 3, 4
EXIT_MISMATCH = 1

COMMANDS = ("train-teacher", "train-student", "quantize-pm", "quantize-distill",
            "quantize-diff", "noise-study", "report", "recipe")

RECIPE_BITS = (2, 4, 8)


class DependencyError(RuntimeError):
    pass


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def threads() -> int:
    raw = os.environ.get("QDZ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QDZ_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("QDZ_THREADS must be >= 1")
    return n


def parallel_map(fn, items: list) -> list:
    workers = min(threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- run dirs

def run_tag(command: str, cfg: dict) -> str:
    b = cfg["bits"]
    if command == "train-teacher":
        return "teacher"
    if command == "train-student":
        return "student-distilled" if cfg["distill"] else "student-plain"
    if command == "quantize-pm":
        return f"pm-{'bucket' if cfg['bucketing'] else 'nobucket'}-b{b}"
    if command == "quantize-distill":
        return f"qd-{cfg['qd_loss']}-b{b}"
    if command == "quantize-diff":
        tag = f"dq-b{b}"
        if not cfg["redistribute"]:
            tag += "-noredist"
        if cfg["dq_init"] != "quantile":
            tag += f"-{cfg['dq_init']}"
        return tag
    if command == "noise-study":
        return "noise-study"
    raise ValueError(command)


def upstream_tags(command: str, cfg: dict) -> dict[str, str]:
    if command == "train-student" and cfg["distill"]:
        return {"teacher": "teacher"}
    if command == "quantize-pm":
        src = cfg["pm_source"]
        return {"source": "teacher" if src == "teacher" else f"student-{src}"}
    if command == "quantize-distill":
        tags = {"teacher": "teacher"} if cfg["qd_loss"] == "distill" else {}
        if cfg["qd_init"] == "student":
            tags["start"] = "student-distilled" if cfg["qd_loss"] == "distill" else "student-plain"
        return tags
    if command == "quantize-diff":
        return {"source": f"student-{cfg['dq_source']}"}
    return {}


def resolve_inputs(command: str, cfg: dict, root: Path) -> dict[str, Path]:
    paths = {}
    for role, tag in upstream_tags(command, cfg).items():
        path = root / tag / "model.qdz"
        if not path.exists():
            raise DependencyError(f"{command} needs a {tag!r} run in {root} (missing {path})")
        paths[role] = path
    return paths


def load_network(path: Path) -> Network:
    try:
        net = model.load(path)
    except (OSError, sizing.ContainerError, KeyError, ValueError) as exc:
        raise DependencyError(f"cannot read {path}: {exc}") from exc
    if not isinstance(net, Network):
        raise DependencyError(f"{path} holds a quantized model, expected full precision")
    return net


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def execute(command: str, cfg: dict, inputs: dict[str, Path], run_dir: Path) -> None:
    """Run one stage and write its artifacts into ``run_dir``."""
    f = cfg["float_bits"]
    if command == "noise-study":
        cells = experiments.noise_study_cells(cfg)
        diags = parallel_map(experiments.run_noise_cell, cells)
        (run_dir / "noise_study.csv").write_text(stats.study_report(list(zip(cells, diags))))
        return

    data = experiments.load_data(cfg)
    nets = {role: load_network(p) for role, p in inputs.items()}
    metrics = None
    tag = run_tag(command, cfg)
    if command == "train-teacher":
        net, metrics = experiments.train_teacher(cfg, data)
        result = experiments.full_precision_result("teacher", net, data, f)
        model.save(run_dir / "model.qdz", net)
    elif command == "train-student":
        net, metrics = experiments.train_student(cfg, data, nets.get("teacher"))
        result = experiments.full_precision_result(tag, net, data, f)
        model.save(run_dir / "model.qdz", net)
    else:
        extra = {}
        if command == "quantize-pm":
            qm = experiments.quantize_pm(cfg, nets["source"])
        elif command == "quantize-distill":
            qm, metrics = experiments.quantize_distill(cfg, data, nets.get("teacher"), nets.get("start"))
        else:
            res, metrics = experiments.quantize_diff(cfg, data, nets["source"])
            qm = res.model
            extra = {"points_per_layer": res.points_per_layer,
                     "points": [[float(v) for v in p] for p in res.points]}
        result = experiments.quantized_result(tag.replace(f"-b{cfg['bits']}", ""), cfg["bits"], qm, data, f)
        result.extra.update(extra)
        model.save(run_dir / "model.qdz", qm, sizing.ENC_PACKED)
        model.save(run_dir / "model-huffman.qdz", qm, sizing.ENC_HUFFMAN)
    if metrics is not None:
        (run_dir / "metrics.csv").write_text(metrics.to_csv())
    write_json(run_dir / "result.json", result.as_dict())
    log.info("%s: test accuracy %.4f", tag, result.accuracy)


def run_stage(command: str, cfg: dict, out: Path, upstream_root: Path | None = None,
              inputs: dict[str, Path] | None = None) -> Path:
    """Execute ``command`` into ``out/<tag>`` and write its manifest."""
    if inputs is None:
        inputs = resolve_inputs(command, cfg, upstream_root or out)
    run_dir = out / run_tag(command, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in run_dir.iterdir():
        if stale.is_file():
            stale.unlink()
    (run_dir / "config.txt").write_text(experiments.format_config(cfg))
    execute(command, cfg, inputs, run_dir)
    outputs = {p.name: sha256(p) for p in sorted(run_dir.iterdir()) if p.name != "manifest.json"}
    write_json(run_dir / "manifest.json", {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "version": __version__,
        "inputs": {role: {"path": str(p.resolve()), "sha256": sha256(p)} for role, p in inputs.items()},
        "outputs": outputs,
    })
    return run_dir


def report(out: Path) -> str:
    rows = []
    for path in sorted(out.glob("*/result.json")):
        rows.append(json.loads(path.read_text()))
    if not rows:
        raise DependencyError(f"no completed runs under {out}")
    text = experiments.summary_csv(rows)
    (out / "summary.csv").write_text(text)
    return text


def _recipe_job(job):
    command, cfg, out = job
    run_stage(command, cfg, Path(out))
    return command


def recipe(cfg: dict, out: Path) -> str:
    """Teacher, both students, then PM (with and without buckets), quantized
    distillation and differentiable quantization at 2, 4 and 8 bits."""
    run_stage("train-teacher", cfg, out)
    parallel_map(_recipe_job, [("train-student", experiments.with_overrides(cfg, distill=d), str(out))
                               for d in (False, True)])
    jobs = []
    for b in RECIPE_BITS:
        for bucketing in (True, False):
            jobs.append(("quantize-pm", experiments.with_overrides(cfg, bits=b, bucketing=bucketing), str(out)))
        jobs.append(("quantize-distill", experiments.with_overrides(cfg, bits=b, qd_loss="distill"), str(out)))
        jobs.append(("quantize-diff", experiments.with_overrides(cfg, bits=b), str(out)))
    jobs.append(("quantize-distill", experiments.with_overrides(cfg, bits=2, qd_loss="normal"), str(out)))
    parallel_map(_recipe_job, jobs)
    return report(out)


def replay(run_dir: Path, out: Path) -> tuple[bool, list[str]]:
    """Re-run a stage from its manifest and compare output hashes."""
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise DependencyError(f"no manifest in {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    cfg = experiments.resolve(manifest["config"])
    inputs = {}
    for role, rec in manifest["inputs"].items():
        path = Path(rec["path"])
        if not path.exists() or sha256(path) != rec["sha256"]:
            raise DependencyError(f"upstream {role} at {path} is missing or changed")
        inputs[role] = path
    new_dir = run_stage(manifest["command"], cfg, out, inputs=inputs)
    fresh = json.loads((new_dir / "manifest.json").read_text())["outputs"]
    diffs = sorted(k for k in set(fresh) | set(manifest["outputs"])
                   if fresh.get(k) != manifest["outputs"].get(k))
    return not diffs, diffs


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdz", description="Quantized distillation experiments.")
    p.add_argument("command", choices=(*COMMANDS, "replay"))
    p.add_argument("run_dir", nargs="?", help="run directory to replay (replay only)")
    p.add_argument("--config", type=Path, help="flat key = value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--out", type=Path, default=None, help="output root (default: runs)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--bits", type=int, help="shorthand for --set bits=N")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> dict:
    overrides = {}
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        overrides.update(experiments.parse_config_text(text, str(args.config)))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bits is not None:
        overrides["bits"] = args.bits
    return experiments.resolve(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            if args.run_dir is None:
                raise ConfigError("replay needs a run directory")
            out = args.out or Path(tempfile.mkdtemp(prefix="qdz-replay-"))
            same, diffs = replay(Path(args.run_dir), out)
            if same:
                print(f"identical: {out}")
                return EXIT_OK
            print(f"mismatch in {', '.join(diffs)}: {out}")
            return EXIT_MISMATCH
        if args.run_dir is not None:
            raise ConfigError(f"unexpected argument {args.run_dir!r}")
        cfg = load_config(args)
        out = args.out or Path("runs")
        threads()
        if args.command == "report":
            print(report(out), end="")
        elif args.command == "recipe":
            print(recipe(cfg, out), end="")
        else:
            print(run_stage(args.command, cfg, out))
        return EXIT_OK
    except (ConfigError, DatasetError) as exc:
        print(f"qdz: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"qdz: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DivergenceError as exc:
        print(f"qdz: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
