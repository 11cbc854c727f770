"""Two-stage coarse-to-fine inference over a pluggable model backend.

Stage 1 asks the model where the answer is and turns its reply into a token
mask; stage 2 answers the question while the attention of every in-scope layer
is boosted on that mask. ``baseline`` and ``reweight_global`` (boost every
visual token) run alongside for ablations.
"""

from __future__ import annotations

import abc
import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from cof import toy_model
from cof.attention import CoFConfig, ReweightParams, mask_to_columns
from cof.geometry import FULL_IMAGE, NormBox, TokenMask, box_to_mask, clamp_box, expand_box
from cof.grounding import DEFAULT_TEMPLATE, CoordConvention, PromptBundle, build_grounding_prompt, parse_bbox_response
from cof.toy_model import GroundingNoise, ModelWeights, SyntheticImage


class RunVariant(str, enum.Enum):
    BASELINE = "baseline"
    REWEIGHT_GLOBAL = "reweight_global"
    COF = "cof"


ALL_VARIANTS = (RunVariant.BASELINE, RunVariant.REWEIGHT_GLOBAL, RunVariant.COF)


class StageError(RuntimeError):
    """A backend call failed; ``stage`` says which step of the run it was."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Generation:
    text: str
    # per-layer mean (over heads) attention on the image's target patch; None when unavailable
    attention_mass: list[float] | None = None


class Backend(abc.ABC):
    """A model that can ground, generate, and generate under a token mask.

    Contract: ``generate_with_mask(..., lam=1.0)`` must equal ``generate(...)``.
    """

    name = "backend"

    @abc.abstractmethod
    def config(self) -> dict: ...

    @abc.abstractmethod
    def ground(self, image: SyntheticImage, bundle: PromptBundle) -> str: ...

    @abc.abstractmethod
    def generate(self, image: SyntheticImage, prompt: str) -> Generation: ...

    @abc.abstractmethod
    def generate_with_mask(
        self,
        image: SyntheticImage,
        prompt: str,
        mask: TokenMask,
        lam: float,
        layer_range: tuple[int, int] | None = None,
    ) -> Generation: ...

    def identity(self) -> dict:
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return {"name": self.name, "config_hash": hashlib.sha256(blob).hexdigest()[:12]}


class ToyBackend(Backend):
    name = "toy"

    def __init__(
        self,
        weights: ModelWeights | None = None,
        noise: GroundingNoise = GroundingNoise(),
        max_tokens: int = 4,
    ):
        self.weights = weights if weights is not None else toy_model.build_toy_model()
        self.noise = noise
        self.max_tokens = max_tokens

    def config(self) -> dict:
        return {
            "model": self.weights.fingerprint(),
            "seed": self.weights.seed,
            "noise": [self.noise.dx, self.noise.dy, self.noise.scale, self.noise.refusal],
            "max_tokens": self.max_tokens,
        }

    def ground(self, image: SyntheticImage, bundle: PromptBundle) -> str:
        return toy_model.toy_ground_text(image, bundle.combined, self.noise)

    def generate(self, image: SyntheticImage, prompt: str) -> Generation:
        return self._run(image, prompt, None, None)

    def generate_with_mask(self, image, prompt, mask, lam, layer_range=None) -> Generation:
        return self._run(image, prompt, (mask, lam), layer_range)

    def _run(self, image, prompt, masking, layer_range) -> Generation:
        seq = toy_model.build_sequence(image, prompt, self.weights)
        reweight = None
        if masking is not None:
            mask, lam = masking
            reweight = ReweightParams(lam, mask_to_columns(mask, seq.layout))
        trace = toy_model.generate_trace(seq, self.weights, reweight, self.max_tokens, layer_range)
        target = image.target_index
        # the step that emitted the answer token, read at its last query row
        mass = [float(a[:, -1, target].mean()) for a in trace.step_attentions[0]]
        return Generation(trace.text, mass)


@dataclass
class RunOutcome:
    variant: RunVariant
    answer: str
    grounding_text: str | None = None
    raw_box: NormBox | None = None
    expanded_box: NormBox | None = None
    clamped_box: NormBox | None = None
    mask: TokenMask | None = None
    coord_convention: CoordConvention | None = None
    fallback: str | None = None
    attention_mass: list[float] | None = field(default=None)

    @property
    def mask_cardinality(self) -> int | None:
        return None if self.mask is None else self.mask.cardinality


def _call(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _stage2_prompt(question: str, bundle: PromptBundle, config: CoFConfig) -> str:
    return bundle.combined if config.stage2_includes_grounding_prompt else question


def run_cof(
    backend: Backend,
    image: SyntheticImage,
    question: str,
    config: CoFConfig,
    template: str = DEFAULT_TEMPLATE,
) -> RunOutcome:
    bundle = build_grounding_prompt(question, template)
    raw_text = _call("ground", backend.ground, image, bundle)
    response = parse_bbox_response(raw_text, image.width, image.height)

    fallback = None
    raw_box = response.parsed_box
    if raw_box is None:
        fallback = response.diagnostic
        raw_box = FULL_IMAGE
    expanded = expand_box(raw_box, config.alpha)
    clamped = clamp_box(expanded)
    mask = box_to_mask(clamped, image.grid)

    gen = _call(
        "generate", backend.generate_with_mask,
        image, _stage2_prompt(question, bundle, config), mask, config.lam, config.layer_range,
    )
    return RunOutcome(
        variant=RunVariant.COF,
        answer=gen.text,
        grounding_text=raw_text,
        raw_box=raw_box,
        expanded_box=expanded,
        clamped_box=clamped,
        mask=mask,
        coord_convention=response.coord_convention,
        fallback=fallback,
        attention_mass=gen.attention_mass,
    )


def run_variant(
    backend: Backend,
    image: SyntheticImage,
    question: str,
    variant: RunVariant | str,
    config: CoFConfig,
) -> RunOutcome:
    variant = RunVariant(variant)
    if variant is RunVariant.COF:
        return run_cof(backend, image, question, config)
    if variant is RunVariant.BASELINE:
        gen = _call("generate", backend.generate, image, question)
        return RunOutcome(variant, gen.text, attention_mass=gen.attention_mass)
    mask = TokenMask.full(image.grid)
    gen = _call("generate", backend.generate_with_mask, image, question, mask, config.lam, config.layer_range)
    return RunOutcome(variant, gen.text, mask=mask, attention_mass=gen.attention_mass)


def mean_mass(mass: list[float] | None) -> float | None:
    if not mass:
        return None
    return float(np.mean(mass))
