"""Coarse-to-fine visual question answering: ground a region, then boost attention on it.

The toy numpy decoder in :mod:`cof.toy_model` stands in for a real
vision-language model; :mod:`cof.remote` talks to an external one over HTTP.
"""

from cof.attention import DEFAULT_PRESET, PRESETS, CoFConfig, ReweightParams, reweight_softmax, softmax
from cof.geometry import FULL_IMAGE, NormBox, PatchGrid, TokenMask, box_to_mask, clamp_box, expand_box
from cof.grounding import build_grounding_prompt, parse_bbox_response
from cof.pipeline import ALL_VARIANTS, Backend, RunVariant, ToyBackend, run_cof, run_variant

__version__ = "0.1.0"

__all__ = [
    "ALL_VARIANTS", "Backend", "CoFConfig", "DEFAULT_PRESET", "FULL_IMAGE", "NormBox", "PRESETS", "PatchGrid",
    "ReweightParams", "RunVariant", "TokenMask", "ToyBackend", "box_to_mask", "build_grounding_prompt",
    "clamp_box", "expand_box", "parse_bbox_response", "reweight_softmax", "run_cof", "run_variant", "softmax",
]
