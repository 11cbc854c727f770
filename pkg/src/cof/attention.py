"""Attention kernels: scaled scores, row softmax and region reweighting.

Reweighting adds ``log(lam)`` to the pre-softmax scores of selected key
columns, which multiplies their exponentiated scores by exactly ``lam`` before
renormalization. Every query row is affected, text queries included.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cof.geometry import TokenMask


class ShapeError(ValueError):
    pass


class InvalidParameter(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A query row has every key position excluded."""


@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray
    d_k: int

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"score matrix must be 2-D, got shape {values.shape}")
        if np.isnan(values).any() or np.isposinf(values).any():
            raise ValueError("scores must be finite (-inf allowed as an exclusion sentinel)")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ReweightParams:
    lam: float
    column_mask: np.ndarray

    def __post_init__(self) -> None:
        if not math.isfinite(self.lam) or self.lam < 1.0:
            raise InvalidParameter(f"lambda must be finite and >= 1, got {self.lam}")
        mask = np.array(self.column_mask, dtype=bool).reshape(-1)
        mask.flags.writeable = False
        object.__setattr__(self, "column_mask", mask)

    @property
    def is_identity(self) -> bool:
        return self.lam == 1.0 or not self.column_mask.any()

    def padded(self, n_key: int) -> ReweightParams:
        """Extend the mask with unmasked columns, e.g. for freshly generated text tokens."""
        n = self.column_mask.size
        if n_key < n:
            raise ShapeError(f"cannot shrink a {n}-column mask to {n_key}")
        if n_key == n:
            return self
        return ReweightParams(self.lam, np.concatenate([self.column_mask, np.zeros(n_key - n, dtype=bool)]))


@dataclass(frozen=True)
class TokenLayout:
    """Where the visual tokens sit among the key positions.

    Visual tokens occupy ``[visual_start, visual_start + n_visual)`` in the
    patch grid's row-major order; every other position is text.
    """

    n_visual: int
    n_total: int
    visual_start: int = 0

    def __post_init__(self) -> None:
        if self.n_visual < 0 or self.visual_start < 0 or self.visual_start + self.n_visual > self.n_total:
            raise ShapeError(
                f"visual span [{self.visual_start}, {self.visual_start + self.n_visual}) "
                f"does not fit in {self.n_total} positions"
            )


@dataclass(frozen=True)
class CoFConfig:
    """Box expansion ``alpha``, attention boost ``lam`` and the layers they touch.

    ``layer_range`` is a half-open ``(start, stop)`` layer interval; ``None``
    applies reweighting to every decoder layer. All heads are treated alike.
    """

    alpha: float = 1.3
    lam: float = 2.0
    layer_range: tuple[int, int] | None = None
    head_scope: str = "all_heads"
    stage2_includes_grounding_prompt: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha <= 0:
            raise InvalidParameter(f"alpha must be positive and finite, got {self.alpha}")
        if not math.isfinite(self.lam) or self.lam < 1.0:
            raise InvalidParameter(f"lambda must be finite and >= 1, got {self.lam}")
        if self.layer_range is not None:
            start, stop = self.layer_range
            if start < 0 or stop < start:
                raise InvalidParameter(f"invalid layer range {self.layer_range}")
            object.__setattr__(self, "layer_range", (int(start), int(stop)))
        if self.head_scope != "all_heads":
            raise InvalidParameter(f"unsupported head scope {self.head_scope!r}")

    @property
    def layer_scope(self) -> str:
        return "all_layers" if self.layer_range is None else "range"

    def layer_in_scope(self, layer: int) -> bool:
        if self.layer_range is None:
            return True
        start, stop = self.layer_range
        return start <= layer < stop

    @classmethod
    def preset(cls, name: str, **overrides) -> CoFConfig:
        alpha, lam = PRESETS[name]
        return cls(alpha=alpha, lam=lam, **overrides)


# (alpha, lambda) used for the three reference model settings
PRESETS: dict[str, tuple[float, float]] = {
    "llava-v1.5-7b": (1.3, 2.0),
    "llava-v1.5-13b": (1.0, 4.5),
    "instructblip-13b": (1.0, 22.0),
}
DEFAULT_PRESET = "llava-v1.5-7b"


def scaled_scores(queries: np.ndarray, keys: np.ndarray, d_k: int | None = None) -> ScoreMatrix:
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if queries.ndim != 2 or keys.ndim != 2:
        raise ShapeError("queries and keys must be 2-D")
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(f"query dim {queries.shape[1]} != key dim {keys.shape[1]}")
    d_k = keys.shape[1] if d_k is None else d_k
    if d_k != keys.shape[1]:
        raise ShapeError(f"d_k={d_k} does not match key dimension {keys.shape[1]}")
    return ScoreMatrix(queries @ keys.T / math.sqrt(d_k), d_k)


def _as_logits(scores) -> np.ndarray:
    if isinstance(scores, ScoreMatrix):
        return scores.values
    return np.asarray(scores, dtype=np.float64)


def _softmax_logits(logits: np.ndarray) -> np.ndarray:
    row_max = logits.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DegenerateRowError("every key position is excluded for at least one query row")
    e = np.exp(logits - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def _apply_causal(logits: np.ndarray, causal_mask: np.ndarray | None) -> np.ndarray:
    if causal_mask is None:
        return logits
    causal_mask = np.asarray(causal_mask, dtype=bool)
    if causal_mask.shape != logits.shape[-2:]:
        raise ShapeError(f"causal mask shape {causal_mask.shape} != scores shape {logits.shape[-2:]}")
    return np.where(causal_mask, logits, -np.inf)


def softmax(scores, causal_mask: np.ndarray | None = None) -> np.ndarray:
    """Row softmax; ``causal_mask`` is True where a query may see a key."""
    return _softmax_logits(_apply_causal(_as_logits(scores), causal_mask))


def reweight_softmax(scores, params: ReweightParams, causal_mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax after boosting the masked key columns by ``params.lam``.

    Works on a single ``(n_query, n_key)`` matrix or a stack of them (heads).
    With ``lam == 1`` or an empty mask this is :func:`softmax` exactly.
    """
    logits = _apply_causal(_as_logits(scores), causal_mask)
    if params.column_mask.size != logits.shape[-1]:
        raise ShapeError(f"column mask has {params.column_mask.size} entries, scores have {logits.shape[-1]} keys")
    if not params.is_identity:
        logits = logits + math.log(params.lam) * params.column_mask
    return _softmax_logits(logits)


def mask_to_columns(mask: TokenMask, layout: TokenLayout) -> np.ndarray:
    if mask.grid.n_tokens != layout.n_visual:
        raise ShapeError(f"mask covers {mask.grid.n_tokens} patches, layout has {layout.n_visual} visual tokens")
    columns = np.zeros(layout.n_total, dtype=bool)
    columns[layout.visual_start : layout.visual_start + layout.n_visual] = mask.bits
    return columns


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def write_attention_csv(
    path: str | Path,
    matrix: np.ndarray,
    row_labels: Sequence[str] | None = None,
    col_labels: Sequence[str] | None = None,
) -> None:
    """Dump an attention matrix with a header row and a label column."""
    matrix = np.asarray(matrix)
    rows = row_labels or [str(i) for i in range(matrix.shape[0])]
    cols = col_labels or [str(j) for j in range(matrix.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", *cols])
        for label, row in zip(rows, matrix):
            writer.writerow([label, *(repr(float(v)) for v in row)])


def read_attention_csv(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        labels, values = [], []
        for row in reader:
            labels.append(row[0])
            values.append([float(v) for v in row[1:]])
    return labels, header[1:], np.array(values)
