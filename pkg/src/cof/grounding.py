"""Stage-1 prompt construction and bounding-box extraction from model text.

Models answer the grounding prompt in free form; the box is the first JSON
array of exactly four numbers in the text, whether bare or the value of a
``"bbox"`` / ``"bounding_box"`` key.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass

from cof.geometry import GeometryError, NormBox

GROUNDING_SENTENCE = (
    "According to the information in the image and the question, detail the bounding box "
    "of the region in the image that contains the answer in JSON format."
)
DEFAULT_TEMPLATE = "{question} " + GROUNDING_SENTENCE

# "{q}" is accepted as a short alias of "{question}"
PLACEHOLDERS = ("{question}", "{q}")


class TemplateError(ValueError):
    pass


class GroundingError(ValueError):
    """Base class for failures to obtain a usable box from a model response."""


class NoBoxFound(GroundingError):
    pass


class MalformedBox(GroundingError):
    pass


class CoordConvention(str, enum.Enum):
    NORMALIZED_UNIT = "normalized_unit"
    NORMALIZED_THOUSAND = "normalized_thousand"
    PIXEL = "pixel"


@dataclass(frozen=True)
class PromptBundle:
    question: str
    grounding_prompt: str
    combined: str


@dataclass(frozen=True)
class GroundingResponse:
    raw_text: str
    parsed_box: NormBox | None
    coord_convention: CoordConvention | None = None
    error: GroundingError | None = None

    @property
    def diagnostic(self) -> str | None:
        if self.error is None:
            return None
        return f"{type(self.error).__name__}: {self.error}"

    def require_box(self) -> NormBox:
        if self.parsed_box is None:
            raise self.error or NoBoxFound("no box parsed")
        return self.parsed_box


def build_grounding_prompt(question: str, template: str = DEFAULT_TEMPLATE) -> PromptBundle:
    """Substitute ``question`` into ``template``.

    Plain string replacement, so braces inside the question or the template
    survive untouched.
    """
    if not question or not question.strip():
        raise ValueError("question must be nonempty")
    placeholder = next((p for p in PLACEHOLDERS if p in template), None)
    if placeholder is None:
        raise TemplateError(f"template lacks a question placeholder ({' or '.join(PLACEHOLDERS)})")
    grounding_prompt = template.replace(placeholder, "").strip()
    return PromptBundle(question, grounding_prompt, template.replace(placeholder, question))


_WS = r"[ \t\n\r]*"
_NUM = r"(?:-?(?:0|[1-9][0-9]*)(?:\.[0-9]+)?(?:[eE][-+]?[0-9]+)?|NaN|-?Infinity)"
# a JSON array of exactly four numbers; matching it directly keeps the scan linear
# in the response length, unlike trial-decoding at every bracket
_FOUR = re.compile(r"\[" + _WS + (_NUM + _WS + "," + _WS) * 3 + _NUM + _WS + r"\]")


def find_box_candidate(text: str) -> list[float] | None:
    """Return the four numbers of the first JSON box candidate in ``text``.

    A ``{"bbox": [...]}`` object yields the same array as a bare one, so both
    forms are found by looking for the first four-number array.
    """
    match = _FOUR.search(text)
    if match is None:
        return None
    try:
        return [float(v) for v in json.loads(match.group())]
    except (OverflowError, ValueError):
        # integers too long to convert; reported as non-finite downstream
        return [math.inf] * 4


def infer_convention(values: list[float], image_w: int, image_h: int) -> CoordConvention:
    """Guess the coordinate convention of four finite, non-negative numbers.

    Values that all fit in ``[0, 1]`` are unit-normalized. Larger values are
    read as pixels when they fit inside the image, and otherwise as integers on
    a 0..1000 scale when possible.
    """
    if all(v <= 1.0 for v in values):
        return CoordConvention.NORMALIZED_UNIT
    xs, ys = values[0::2], values[1::2]
    if all(x <= image_w for x in xs) and all(y <= image_h for y in ys):
        return CoordConvention.PIXEL
    if all(v <= 1000 and float(v).is_integer() for v in values):
        return CoordConvention.NORMALIZED_THOUSAND
    return CoordConvention.PIXEL


def _normalize(values: list[float], convention: CoordConvention, image_w: int, image_h: int) -> list[float]:
    if convention is CoordConvention.NORMALIZED_UNIT:
        return list(values)
    if convention is CoordConvention.NORMALIZED_THOUSAND:
        return [v / 1000 for v in values]
    return [values[0] / image_w, values[1] / image_h, values[2] / image_w, values[3] / image_h]


def parse_bbox_response(
    raw: str | bytes,
    image_w: int,
    image_h: int,
    convention: CoordConvention | None = None,
) -> GroundingResponse:
    """Extract a :class:`NormBox` from a grounding response.

    Never raises on bad model output: failures come back as a response with
    ``parsed_box=None`` and ``error`` set to :class:`NoBoxFound` or
    :class:`MalformedBox`. Pass ``convention`` to skip the heuristic.
    """
    if image_w < 1 or image_h < 1:
        raise ValueError(f"image dimensions must be >= 1, got {image_w}x{image_h}")
    if isinstance(raw, (bytes, bytearray)):
        raw = raw.decode("utf-8", errors="replace")

    values = find_box_candidate(raw)
    if values is None:
        return GroundingResponse(raw, None, None, NoBoxFound("no four-number JSON group in response"))
    if not all(math.isfinite(v) for v in values):
        return GroundingResponse(raw, None, None, MalformedBox(f"non-finite coordinates {values}"))
    if any(v < 0 for v in values):
        return GroundingResponse(raw, None, None, MalformedBox(f"negative coordinates {values}"))

    conv = convention or infer_convention(values, image_w, image_h)
    x1, y1, x2, y2 = _normalize(values, conv, image_w, image_h)
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    if x2 > 1.0 or y2 > 1.0:
        return GroundingResponse(
            raw, None, conv, MalformedBox(f"coordinates {values} fall outside the image as {conv.value}")
        )
    try:
        box = NormBox(x1, y1, x2, y2)
    except GeometryError as exc:
        return GroundingResponse(raw, None, conv, MalformedBox(str(exc)))
    return GroundingResponse(raw, box, conv, None)
