"""Command-line entry point: ``cof run | eval | sweep | inspect``.

Settings are layered: built-in preset, then ``--config`` JSON file, then
explicit flags. ``COF_ENDPOINT`` and ``COF_TIMEOUT`` fill in the remote
endpoint and timeout when neither the file nor the flags set them.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from cof import toy_model
from cof.attention import DEFAULT_PRESET, PRESETS, CoFConfig, ReweightParams, mask_to_columns, write_attention_csv
from cof.geometry import GeometryError, PatchGrid, TokenMask
from cof.harness import (
    ConfigError, EvalRecord, JsonlSink, SyntheticTask, evaluate, generate_suite, load_task, sweep, write_sweep_csv,
)
from cof.pipeline import ALL_VARIANTS, Backend, RunVariant, StageError, ToyBackend, run_variant
from cof.remote import ENV_ENDPOINT, ENV_TIMEOUT, RemoteBackend
from cof.toy_model import GroundingNoise

log = logging.getLogger("cof")

# keys accepted in the --config file, and their built-in defaults
DEFAULTS = {
    "preset": DEFAULT_PRESET,
    "alpha": None,
    "lambda": None,
    "grid": "4x4",
    "seed": 7,
    "model_seed": 0,
    "backend": "toy",
    "endpoint": None,
    "timeout": None,
    "layers": None,
    "variants": None,
    "n_tasks": 200,
    "distractors": 3,
    "existence_fraction": 0.0,
    "workers": 1,
    "noise_dx": 0.0,
    "noise_dy": 0.0,
    "noise_scale": 1.0,
    "refusal": False,
}


class UsageError(ValueError):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _layers(text) -> tuple[int, int] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        start, stop = text
    else:
        try:
            start, stop = (int(v) for v in str(text).split(":"))
        except ValueError:
            raise UsageError(f"--layers expects START:STOP, got {text!r}")
    return int(start), int(stop)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with default settings (flags take precedence)")
    common.add_argument("--preset", choices=sorted(PRESETS), help=f"alpha/lambda preset (default {DEFAULT_PRESET})")
    common.add_argument("--alpha", type=float, help="box expansion factor (> 0)")
    common.add_argument("--lambda", dest="lambda_", type=float, help="attention boost factor (>= 1)")
    common.add_argument("--grid", help="visual patch grid, e.g. 4x4")
    common.add_argument("--seed", type=int, help="task suite seed")
    common.add_argument("--model-seed", type=int, help="toy model weight seed")
    common.add_argument("--backend", choices=("toy", "remote"))
    common.add_argument("--endpoint", help=f"remote model server URL (or ${ENV_ENDPOINT})")
    common.add_argument("--timeout", type=float, help=f"remote timeout in seconds (or ${ENV_TIMEOUT})")
    common.add_argument("--layers", help="reweight only layers START:STOP (half-open)")
    common.add_argument("--variant", dest="variants", action="append", choices=[v.value for v in RunVariant])
    common.add_argument("--distractors", type=int)
    common.add_argument("--existence-fraction", type=float)
    common.add_argument("--workers", type=int)
    common.add_argument("--noise-dx", type=float, help="grounding stub x offset")
    common.add_argument("--noise-dy", type=float, help="grounding stub y offset")
    common.add_argument("--noise-scale", type=float, help="grounding stub box scale")
    common.add_argument("--refusal", action="store_const", const=True, help="grounding stub returns no box")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="cof",
        description="Coarse-to-fine grounding and attention reweighting on a toy vision-language decoder.",
        epilog="Precedence: flags > --config file > preset. Defaults follow the llava-v1.5-7b preset (alpha=1.3, lambda=2.0).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one task and print its record(s)")
    p.add_argument("--task-index", type=int, default=0, help="which task of the seeded suite to run")
    p.add_argument("--task-file", type=Path, help="JSON task file instead of a generated task")

    p = sub.add_parser("eval", parents=[common], help="evaluate a synthetic suite")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--out", type=Path, required=True, help="JSONL record file")
    p.add_argument("--force", action="store_true", help="overwrite --out")

    p = sub.add_parser("sweep", parents=[common], help="grid over alpha and lambda, write CSV")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--alpha-grid", type=_float_list, default=None, help="e.g. 1.0,1.3")
    p.add_argument("--lambda-grid", type=_float_list, default=None, help="e.g. 1,2,4.5,22")
    p.add_argument("--out", type=Path, required=True, help="CSV output")
    p.add_argument("--records", type=Path, help="also write every record as JSONL")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("inspect", parents=[common], help="dump per-layer/per-head attention for one task")
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge preset, config file and flags, then validate everything."""
    file_settings = {}
    if args.config is not None:
        try:
            file_settings = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        unknown = set(file_settings) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")

    flags = {k: v for k, v in vars(args).items() if v is not None}
    if "lambda_" in flags:
        flags["lambda"] = flags.pop("lambda_")

    s = dict(DEFAULTS)
    s.update(file_settings)
    s.update({k: v for k, v in flags.items() if k in DEFAULTS})
    preset = s["preset"]
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    alpha, lam = PRESETS[preset]
    s["alpha"] = alpha if s["alpha"] is None else float(s["alpha"])
    s["lambda"] = lam if s["lambda"] is None else float(s["lambda"])
    s["endpoint"] = s["endpoint"] or os.environ.get(ENV_ENDPOINT)
    if s["timeout"] is None and os.environ.get(ENV_TIMEOUT):
        s["timeout"] = float(os.environ[ENV_TIMEOUT])

    if not math.isfinite(s["alpha"]) or s["alpha"] <= 0:
        raise UsageError(f"alpha must be > 0 (got {s['alpha']})")
    if not math.isfinite(s["lambda"]) or s["lambda"] < 1:
        raise UsageError(f"lambda must be >= 1 (got {s['lambda']})")
    try:
        s["grid"] = PatchGrid.parse(s["grid"]) if isinstance(s["grid"], str) else PatchGrid(*s["grid"])
    except GeometryError as exc:
        raise UsageError(str(exc))
    s["layers"] = _layers(s["layers"])
    if s["layers"] is not None and not 0 <= s["layers"][0] <= s["layers"][1]:
        raise UsageError(f"invalid layer range {s['layers']}")
    variants = s["variants"] or ([RunVariant.COF.value] if args.command in ("run", "inspect") else [v.value for v in ALL_VARIANTS])
    try:
        s["variants"] = [RunVariant(v) for v in variants]
    except ValueError as exc:
        raise UsageError(str(exc))
    if s["backend"] not in ("toy", "remote"):
        raise UsageError(f"unknown backend {s['backend']!r}")
    if s["backend"] == "remote" and not s["endpoint"]:
        raise UsageError(f"--backend remote needs --endpoint or ${ENV_ENDPOINT}")
    if s["n_tasks"] < 1:
        raise UsageError("n_tasks must be >= 1")
    if s["workers"] < 1:
        raise UsageError("workers must be >= 1")
    if not 0 <= s["existence_fraction"] <= 1:
        raise UsageError("existence fraction must lie in [0, 1]")
    if s["distractors"] < 0 or s["distractors"] + 1 > s["grid"].n_tokens:
        raise UsageError(f"grid {s['grid']} cannot hold a target and {s['distractors']} distractors")
    for key in ("alpha_grid", "lambda_grid"):
        if key in flags:
            s[key] = flags[key]
    for v in s.get("lambda_grid", []) or []:
        if v < 1:
            raise UsageError(f"lambda must be >= 1 (got {v} in --lambda-grid)")
    for v in s.get("alpha_grid", []) or []:
        if v <= 0:
            raise UsageError(f"alpha must be > 0 (got {v} in --alpha-grid)")
    return s


def make_config(s: dict) -> CoFConfig:
    return CoFConfig(alpha=s["alpha"], lam=s["lambda"], layer_range=s["layers"])


def make_backend(s: dict) -> Backend:
    if s["backend"] == "remote":
        return RemoteBackend(s["endpoint"], s["timeout"])
    noise = GroundingNoise(s["noise_dx"], s["noise_dy"], s["noise_scale"], bool(s["refusal"]))
    return ToyBackend(toy_model.build_toy_model(s["model_seed"]), noise)


def make_suite(s: dict, n_tasks: int | None = None) -> list[SyntheticTask]:
    return generate_suite(s["seed"], n_tasks or s["n_tasks"], s["grid"], s["distractors"], s["existence_fraction"])


def _pick_task(args, s) -> SyntheticTask:
    if getattr(args, "task_file", None) is not None:
        return load_task(args.task_file)
    if args.task_index < 0:
        raise UsageError("--task-index must be >= 0")
    return make_suite(s, args.task_index + 1)[args.task_index]


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _box_trace(rec: EvalRecord) -> str:
    fmt = lambda b: "-" if b is None else "(" + ", ".join(f"{v:.4f}" for v in b) + ")"
    parts = [f"[{rec.variant}] task {rec.task_id}"]
    if rec.variant == RunVariant.COF.value:
        parts.append(f"raw {fmt(rec.raw_box)} -> expanded {fmt(rec.expanded_box)} -> clamped {fmt(rec.clamped_box)}")
        if rec.fallback:
            parts.append(f"fallback: {rec.fallback}")
    parts.append(f"mask {rec.mask_cardinality if rec.mask_cardinality is not None else 0} patches")
    parts.append(f"answer {rec.answer!r} (gold {rec.gold_answer!r})")
    return " | ".join(parts)


def cmd_run(args, s) -> int:
    task = _pick_task(args, s)
    summary = evaluate([task], make_backend(s), s["variants"], make_config(s))
    for rec in summary.records:
        print(json.dumps(rec.to_json(), sort_keys=True))
        print(_box_trace(rec), file=sys.stderr)
    return 1 if summary.failures else 0


def cmd_eval(args, s) -> int:
    _check_out(args.out, args.force)
    suite = make_suite(s)
    with JsonlSink(args.out, mode="w") as sink:
        summary = evaluate(suite, make_backend(s), s["variants"], make_config(s), sink, s["workers"])
    print(summary.table())
    print(f"{sink.count} records -> {args.out}")
    return 1 if summary.failures else 0


def cmd_sweep(args, s) -> int:
    _check_out(args.out, args.force)
    alpha_grid = s.get("alpha_grid") or [s["alpha"]]
    lambda_grid = s.get("lambda_grid") or [s["lambda"]]
    suite = make_suite(s)
    sink = JsonlSink(args.records, mode="w") if args.records else None
    try:
        rows = sweep(suite, make_backend(s), alpha_grid, lambda_grid, s["variants"], make_config(s), sink, s["workers"])
    finally:
        if sink is not None:
            sink.close()
    write_sweep_csv(rows, args.out)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_inspect(args, s) -> int:
    if s["backend"] != "toy":
        raise UsageError("inspect needs the toy backend (attention maps are not exposed remotely)")
    if len(s["variants"]) != 1:
        raise UsageError("inspect takes exactly one --variant")
    if args.out.exists() and any(args.out.iterdir()) and not args.force:
        raise UsageError(f"{args.out} is not empty; pass --force to overwrite")
    args.out.mkdir(parents=True, exist_ok=True)

    task = _pick_task(args, s)
    backend = make_backend(s)
    config = make_config(s)
    outcome = run_variant(backend, task.image, task.question, s["variants"][0], config)
    mask = outcome.mask if outcome.mask is not None else TokenMask.empty(task.image.grid)

    weights = backend.weights
    prompt = task.question
    seq = toy_model.build_sequence(task.image, prompt, weights)
    reweight = None
    if outcome.mask is not None:
        reweight = ReweightParams(config.lam, mask_to_columns(outcome.mask, seq.layout))
    trace = toy_model.forward(seq, weights, reweight, config.layer_range)

    grid = task.image.grid
    labels = [f"v{r}_{c}" for r in range(grid.rows) for c in range(grid.cols)]
    labels += [f"t{i}:{weights.vocab[tid]}" for i, tid in enumerate(seq.text_ids)]
    for li, probs in enumerate(trace.attentions):
        for hi, head in enumerate(probs):
            write_attention_csv(args.out / f"layer{li}_head{hi}.csv", head, labels, labels)
    (args.out / "mask.txt").write_text(mask.to_text() + "\n")
    print(f"task {task.task_id}: answer {outcome.answer!r}, {len(trace.attentions) * weights.n_heads} attention maps -> {args.out}")
    return 0


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "sweep": cmd_sweep, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](args, settings)
    except (UsageError, ConfigError) as exc:
        print(f"cof {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"cof {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
