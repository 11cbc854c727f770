"""Synthetic benchmark suites, evaluation, sweeps and result persistence.

Records are written as JSONL (one :class:`EvalRecord` per line, tagged with
``"schema": 1``); sweep tables are CSV with the fixed header
``alpha,lambda,variant,accuracy,mean_mass,fallback_rate``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from cof.attention import CoFConfig
from cof.geometry import NormBox, PatchGrid
from cof.pipeline import ALL_VARIANTS, Backend, RunOutcome, RunVariant, mean_mass, run_variant
from cof.toy_model import COLORS, D_FEATURE, FEAT_SAL, OBJECTS, SyntheticImage, patch_feature

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SWEEP_HEADER = ("alpha", "lambda", "variant", "accuracy", "mean_mass", "fallback_rate")

ATTRIBUTE_QUERY = "attribute_query"
EXISTENCE_PROBE = "existence_probe"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    image: SyntheticImage
    question: str
    gold_answer: str
    task_kind: str = ATTRIBUTE_QUERY
    seed: int | None = None


def generate_suite(
    seed: int,
    n_tasks: int,
    grid: PatchGrid = PatchGrid(4, 4),
    distractor_count: int = 3,
    existence_fraction: float = 0.0,
) -> list[SyntheticTask]:
    """Deterministic synthetic tasks.

    Every task has one answer-bearing target patch and ``distractor_count``
    object patches whose colors differ from the target's and which tend to be
    more salient. Existence probes ask whether an object is present; when the
    gold answer is "no" the target patch is left empty.
    """
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if distractor_count < 0 or distractor_count + 1 > grid.n_tokens:
        raise ConfigError(f"a {grid} grid cannot hold a target and {distractor_count} distractors")
    if not 0.0 <= existence_fraction <= 1.0:
        raise ConfigError("existence_fraction must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n_texture = D_FEATURE - FEAT_SAL - 1
    tasks = []
    for i in range(n_tasks):
        task_id = f"s{seed}-t{i:05d}"
        cells = rng.permutation(grid.n_tokens)
        target = divmod(int(cells[0]), grid.cols)
        distractors = tuple(divmod(int(c), grid.cols) for c in cells[1 : 1 + distractor_count])
        target_color = COLORS[rng.integers(len(COLORS))]
        others = [c for c in COLORS if c != target_color]
        noun = OBJECTS[rng.integers(len(OBJECTS))]
        existence = rng.random() < existence_fraction
        present = not existence or rng.random() < 0.5

        feats = np.stack([patch_feature(None, False, 0.0, rng.normal(0.0, 1.0, n_texture)) for _ in range(grid.n_tokens)])
        t_idx = grid.index(*target)
        if present:
            feats[t_idx] = patch_feature(target_color, True, rng.uniform(0.0, 1.0), feats[t_idx, FEAT_SAL + 1 :])
        for d in distractors:
            d_idx = grid.index(*d)
            color = others[rng.integers(len(others))]
            feats[d_idx] = patch_feature(color, True, rng.uniform(0.25, 1.0), feats[d_idx, FEAT_SAL + 1 :])

        image = SyntheticImage(grid, feats, target, distractors, image_id=task_id)
        if existence:
            tasks.append(SyntheticTask(task_id, image, f"Is there a {noun} in the image?", "yes" if present else "no", EXISTENCE_PROBE, seed))
        else:
            tasks.append(SyntheticTask(task_id, image, f"What color is the {noun}?", target_color, ATTRIBUTE_QUERY, seed))
    return tasks


def task_to_json(task: SyntheticTask) -> dict:
    img = task.image
    return {
        "task_id": task.task_id,
        "question": task.question,
        "gold_answer": task.gold_answer,
        "task_kind": task.task_kind,
        "seed": task.seed,
        "grid": [img.grid.rows, img.grid.cols],
        "patch_features": img.patch_features.tolist(),
        "target_patch": list(img.target_patch),
        "distractor_patches": [list(d) for d in img.distractor_patches],
        "patch_px": img.patch_px,
    }


def task_from_json(obj: dict) -> SyntheticTask:
    try:
        image = SyntheticImage(
            PatchGrid(*obj["grid"]),
            np.asarray(obj["patch_features"], dtype=np.float64),
            tuple(obj["target_patch"]),
            tuple(tuple(d) for d in obj.get("distractor_patches", ())),
            image_id=obj["task_id"],
            patch_px=obj.get("patch_px", 84),
        )
        return SyntheticTask(
            obj["task_id"], image, obj["question"], obj["gold_answer"],
            obj.get("task_kind", ATTRIBUTE_QUERY), obj.get("seed"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad task description: {exc}") from exc


def save_task(task: SyntheticTask, path: str | Path) -> None:
    Path(path).write_text(json.dumps(task_to_json(task)))


def load_task(path: str | Path) -> SyntheticTask:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read task file {path}: {exc}") from exc
    return task_from_json(obj)


def _box(box: NormBox | None) -> list[float] | None:
    return None if box is None else box.to_json()


@dataclass
class EvalRecord:
    task_id: str
    variant: str
    alpha: float
    lam: float
    seed: int | None
    answer: str | None
    gold_answer: str
    correct: bool
    task_kind: str = ATTRIBUTE_QUERY
    raw_box: list[float] | None = None
    expanded_box: list[float] | None = None
    clamped_box: list[float] | None = None
    mask: dict | None = None
    mask_cardinality: int | None = None
    fallback: str | None = None
    attention_mass_on_target: list[float] | None = None
    wall_time: float = 0.0
    error: str | None = None
    schema: int = SCHEMA_VERSION

    @property
    def mean_mass(self) -> float | None:
        return mean_mass(self.attention_mass_on_target)

    def to_json(self) -> dict:
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        return data

    @classmethod
    def from_json(cls, data: dict) -> EvalRecord:
        data = dict(data)
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {data.get('schema')!r}")
        data["lam"] = data.pop("lambda")
        return cls(**data)

    @classmethod
    def from_outcome(cls, task: SyntheticTask, outcome: RunOutcome, config: CoFConfig, wall_time: float) -> EvalRecord:
        return cls(
            task_id=task.task_id,
            variant=outcome.variant.value,
            alpha=config.alpha,
            lam=config.lam,
            seed=task.seed,
            answer=outcome.answer,
            gold_answer=task.gold_answer,
            correct=outcome.answer == task.gold_answer,
            task_kind=task.task_kind,
            raw_box=_box(outcome.raw_box),
            expanded_box=_box(outcome.expanded_box),
            clamped_box=_box(outcome.clamped_box),
            mask=None if outcome.mask is None else outcome.mask.to_json(),
            mask_cardinality=outcome.mask_cardinality,
            fallback=outcome.fallback,
            attention_mass_on_target=outcome.attention_mass,
            wall_time=wall_time,
        )


class JsonlSink:
    """Append-only JSONL writer; safe to share between worker threads."""

    def __init__(self, target: str | Path | IO[str], mode: str = "a"):
        self._own = not hasattr(target, "write")
        self._fh = open(target, mode) if self._own else target
        self._lock = threading.Lock()
        self.count = 0

    def write(self, record: EvalRecord) -> None:
        line = json.dumps(record.to_json(), sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            self.count += 1

    def close(self) -> None:
        if self._own:
            self._fh.close()

    def __enter__(self) -> JsonlSink:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str | Path) -> list[EvalRecord]:
    with open(path) as fh:
        return [EvalRecord.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class VariantSummary:
    variant: str
    n: int
    accuracy: float
    mean_mass: float | None
    fallback_rate: float
    failures: int


@dataclass
class EvalSummary:
    rows: dict[str, VariantSummary]
    records: list[EvalRecord] = field(default_factory=list, repr=False)

    @property
    def failures(self) -> int:
        return sum(r.failures for r in self.rows.values())

    def table(self) -> str:
        lines = [f"{'variant':<16} {'n':>5} {'accuracy':>9} {'mean_mass':>10} {'fallback':>9} {'failed':>7}"]
        for row in self.rows.values():
            mass = "-" if row.mean_mass is None else f"{row.mean_mass:.4f}"
            lines.append(
                f"{row.variant:<16} {row.n:>5} {row.accuracy:>9.4f} {mass:>10} {row.fallback_rate:>9.4f} {row.failures:>7}"
            )
        return "\n".join(lines)


def summarize(records: Iterable[EvalRecord]) -> dict[str, VariantSummary]:
    """Per-variant metrics, in first-seen variant order.

    Failed runs count as incorrect; records without attention data are left
    out of the mean mass.
    """
    grouped: dict[str, list[EvalRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.variant, []).append(rec)
    rows = {}
    for variant, recs in grouped.items():
        masses = [m for m in (r.mean_mass for r in recs) if m is not None]
        rows[variant] = VariantSummary(
            variant=variant,
            n=len(recs),
            accuracy=sum(r.correct for r in recs) / len(recs),
            mean_mass=math.fsum(masses) / len(masses) if masses else None,
            fallback_rate=sum(r.fallback is not None for r in recs) / len(recs),
            failures=sum(r.error is not None for r in recs),
        )
    return rows


def _run_task(task: SyntheticTask, backend: Backend, variants: Sequence[RunVariant], config: CoFConfig) -> list[EvalRecord]:
    records = []
    for variant in variants:
        start = time.perf_counter()
        try:
            outcome = run_variant(backend, task.image, task.question, variant, config)
        except Exception as exc:  # a failing task must not abort the batch
            log.error("task %s variant %s failed: %s", task.task_id, variant.value, exc)
            records.append(
                EvalRecord(
                    task_id=task.task_id, variant=variant.value, alpha=config.alpha, lam=config.lam,
                    seed=task.seed, answer=None, gold_answer=task.gold_answer, correct=False,
                    task_kind=task.task_kind, wall_time=time.perf_counter() - start,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
            continue
        records.append(EvalRecord.from_outcome(task, outcome, config, time.perf_counter() - start))
    return records


def evaluate(
    suite: Sequence[SyntheticTask],
    backend: Backend,
    variants: Sequence[RunVariant | str],
    config: CoFConfig,
    sink: JsonlSink | None = None,
    workers: int = 1,
) -> EvalSummary:
    """Run every variant on every task; records come out in task-id order."""
    if not suite:
        raise ConfigError("suite is empty")
    if not variants:
        raise ConfigError("at least one variant is required")
    variants = [RunVariant(v) for v in variants]
    ordered = sorted(suite, key=lambda t: t.task_id)

    records: list[EvalRecord] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for batch in pool.map(lambda t: _run_task(t, backend, variants, config), ordered):
            for rec in batch:
                if sink is not None:
                    sink.write(rec)
                records.append(rec)
    return EvalSummary(summarize(records), records)


@dataclass
class SweepRow:
    alpha: float
    lam: float
    variant: str
    accuracy: float
    mean_mass: float | None
    fallback_rate: float

    def as_csv_row(self) -> list[str]:
        mass = "" if self.mean_mass is None else repr(self.mean_mass)
        return [repr(self.alpha), repr(self.lam), self.variant, repr(self.accuracy), mass, repr(self.fallback_rate)]


def sweep(
    suite: Sequence[SyntheticTask],
    backend: Backend,
    alpha_grid: Sequence[float],
    lambda_grid: Sequence[float],
    variants: Sequence[RunVariant | str] = ALL_VARIANTS,
    base_config: CoFConfig = CoFConfig(),
    sink: JsonlSink | None = None,
    workers: int = 1,
) -> list[SweepRow]:
    """Evaluate the cross product of ``alpha_grid`` and ``lambda_grid``."""
    if not alpha_grid or not lambda_grid:
        raise ConfigError("alpha and lambda grids must be nonempty")
    rows = []
    for alpha in alpha_grid:
        for lam in lambda_grid:
            config = CoFConfig(
                alpha=alpha, lam=lam, layer_range=base_config.layer_range,
                stage2_includes_grounding_prompt=base_config.stage2_includes_grounding_prompt,
            )
            summary = evaluate(suite, backend, variants, config, sink, workers)
            for s in summary.rows.values():
                rows.append(SweepRow(alpha, lam, s.variant, s.accuracy, s.mean_mass, s.fallback_rate))
    return rows


def write_sweep_csv(rows: Iterable[SweepRow], target: str | Path | IO[str]) -> None:
    own = not hasattr(target, "write")
    fh = open(target, "w", newline="") if own else target
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow(row.as_csv_row())
    finally:
        if own:
            fh.close()


def read_sweep_csv(source: str | Path | IO[str]) -> list[SweepRow]:
    own = not hasattr(source, "read")
    fh = open(source, newline="") if own else source
    try:
        return [
            SweepRow(
                float(r["alpha"]), float(r["lambda"]), r["variant"], float(r["accuracy"]),
                float(r["mean_mass"]) if r["mean_mass"] else None, float(r["fallback_rate"]),
            )
            for r in csv.DictReader(fh)
        ]
    finally:
        if own:
            fh.close()
