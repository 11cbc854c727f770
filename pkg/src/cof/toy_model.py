"""A tiny deterministic vision-language decoder for exercising attention reweighting.

The model is small enough that a naive loop-based forward pass can check it,
yet structured so that region reweighting has a visible effect on answers:

* each image patch carries a color, an objectness flag and a salience value;
  a linear encoder and an affine projector turn patches into visual tokens;
* layer 0, head 0 copies the question kind ("what color" vs "is there") from
  the question words to the last prompt position;
* layer 1, head 0 attends to visual tokens in proportion to their salience and
  writes the attended colors and objectness into the residual stream;
* the answer head reads those channels, so salient distractor patches can
  out-vote a faint target patch unless attention is steered towards it.

Every other weight is seeded Gaussian noise, and the designed weights are
perturbed by the same noise, so the whole model is a function of its seed.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from cof import attention
from cof.attention import ReweightParams, ShapeError, TokenLayout
from cof.geometry import NormBox, PatchGrid
from cof.grounding import GroundingResponse, build_grounding_prompt, parse_bbox_response

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
OBJECTS = ("star", "circle", "square", "triangle", "heart", "diamond")
EOS = "<eos>"
ANSWER_VOCAB = (*COLORS, "yes", "no", EOS)
TEXT_WORDS = (
    "<unk>", "what", "color", "is", "the", "there", "a", "an", "in", "image", "of", "?", *OBJECTS,
)
VOCAB = (*TEXT_WORDS, *(w for w in ANSWER_VOCAB if w not in TEXT_WORDS))

# patch feature layout
FEAT_COLOR = slice(0, len(COLORS))
FEAT_OBJ = len(COLORS)
FEAT_SAL = FEAT_OBJ + 1
D_FEATURE = 16

# residual stream channels of the structured model
CH_COLOR = slice(0, len(COLORS))
CH_OBJ, CH_SAL, CH_VIS, CH_TXT = 8, 9, 10, 11
CH_KIND_ATTR, CH_KIND_EXIST, CH_QEND, CH_ANS, CH_BIAS = 12, 13, 14, 15, 16
CH_OBJMASS, CH_ATTR_COPY, CH_EXIST_COPY = 17, 18, 19
CH_FREE = 20

LN_EPS = 1e-5


@dataclass(frozen=True)
class SyntheticImage:
    grid: PatchGrid
    patch_features: np.ndarray
    target_patch: tuple[int, int]
    distractor_patches: tuple[tuple[int, int], ...] = ()
    image_id: str = "img-0"
    patch_px: int = 84

    def __post_init__(self) -> None:
        feats = np.asarray(self.patch_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.grid.n_tokens:
            raise ShapeError(f"expected {self.grid.n_tokens} patch feature rows, got shape {feats.shape}")
        r, c = self.target_patch
        if not (0 <= r < self.grid.rows and 0 <= c < self.grid.cols):
            raise ValueError(f"target patch {self.target_patch} outside grid {self.grid}")
        distractors = tuple(tuple(d) for d in self.distractor_patches)
        if tuple(self.target_patch) in distractors:
            raise ValueError("target patch is also listed as a distractor")
        feats.flags.writeable = False
        object.__setattr__(self, "patch_features", feats)
        object.__setattr__(self, "target_patch", tuple(self.target_patch))
        object.__setattr__(self, "distractor_patches", distractors)

    @property
    def width(self) -> int:
        return self.grid.cols * self.patch_px

    @property
    def height(self) -> int:
        return self.grid.rows * self.patch_px

    @property
    def target_index(self) -> int:
        return self.grid.index(*self.target_patch)

    def target_rect(self) -> NormBox:
        return self.grid.patch_rect(*self.target_patch)


def patch_feature(color: str | None, has_object: bool, salience: float, texture: np.ndarray | None = None) -> np.ndarray:
    """Feature vector of one patch; ``color=None`` leaves the color channels empty."""
    f = np.zeros(D_FEATURE)
    if color is not None:
        f[COLORS.index(color)] = 1.0
    f[FEAT_OBJ] = 1.0 if has_object else 0.0
    f[FEAT_SAL] = salience
    if texture is not None:
        f[FEAT_SAL + 1 :] = texture
    return f


@dataclass(frozen=True)
class Projector:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> Projector:
        return cls(np.eye(dim), np.zeros(dim))


@dataclass(frozen=True)
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray  # (heads, d_model, d_head)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (heads * d_head, d_model)
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[2]


@dataclass(frozen=True)
class ModelWeights:
    seed: int
    encoder: np.ndarray  # (d_feature, d_enc)
    projector: Projector
    token_embedding: np.ndarray  # (len(vocab), d_model)
    layers: tuple[LayerWeights, ...]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    unembed: np.ndarray  # (d_model, len(answer_vocab))
    vocab: tuple[str, ...] = VOCAB
    answer_vocab: tuple[str, ...] = ANSWER_VOCAB

    @property
    def d_model(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return self.layers[0].n_heads if self.layers else 0

    def token_id(self, word: str) -> int:
        try:
            return self.vocab.index(word)
        except ValueError:
            return self.vocab.index("<unk>")

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.encoder, self.projector.weight, self.projector.bias, self.token_embedding, self.unembed):
            h.update(np.ascontiguousarray(arr).tobytes())
        for layer in self.layers:
            for arr in (layer.w_q, layer.w_k, layer.w_v, layer.w_o, layer.w_ff1, layer.w_ff2):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TokenSequence:
    """Visual tokens followed by text tokens."""

    visual_tokens: np.ndarray
    text_tokens: np.ndarray
    text_ids: tuple[int, ...] = ()

    @property
    def n_visual(self) -> int:
        return self.visual_tokens.shape[0]

    def __len__(self) -> int:
        return self.visual_tokens.shape[0] + self.text_tokens.shape[0]

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(n_visual=self.n_visual, n_total=len(self))

    def embeddings(self) -> np.ndarray:
        return np.concatenate([self.visual_tokens, self.text_tokens], axis=0)

    def append(self, token_id: int, weights: ModelWeights) -> TokenSequence:
        row = weights.token_embedding[token_id][None, :]
        return replace(
            self,
            text_tokens=np.concatenate([self.text_tokens, row], axis=0),
            text_ids=(*self.text_ids, token_id),
        )


@dataclass
class ForwardTrace:
    logits: np.ndarray
    attentions: list[np.ndarray] = field(default_factory=list)  # per layer: (heads, n, n)


@dataclass
class GenerationTrace:
    tokens: list[str]
    step_attentions: list[list[np.ndarray]]
    prompt_length: int

    @property
    def text(self) -> str:
        return " ".join(t for t in self.tokens if t != EOS)


# -- weights -----------------------------------------------------------------


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def random_weights(
    seed: int,
    n_layers: int = 2,
    n_heads: int = 4,
    d_model: int = 64,
    d_enc: int = 24,
    d_ff: int | None = None,
    scale: float = 0.3,
) -> ModelWeights:
    """Unstructured weights of arbitrary shape, for equivalence checks."""
    if d_model % n_heads:
        raise ShapeError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    rng = np.random.default_rng(seed)
    d_head = d_model // n_heads
    d_ff = d_ff or 2 * d_model

    def g(*shape, s=scale):
        return rng.normal(0.0, s, size=shape)

    layers = tuple(
        LayerWeights(
            ln1_g=1 + g(d_model, s=0.1), ln1_b=g(d_model, s=0.1),
            w_q=g(n_heads, d_model, d_head), w_k=g(n_heads, d_model, d_head), w_v=g(n_heads, d_model, d_head),
            w_o=g(n_heads * d_head, d_model), b_o=g(d_model, s=0.1),
            ln2_g=1 + g(d_model, s=0.1), ln2_b=g(d_model, s=0.1),
            w_ff1=g(d_model, d_ff), b_ff1=g(d_ff, s=0.1), w_ff2=g(d_ff, d_model), b_ff2=g(d_model, s=0.1),
        )
        for _ in range(n_layers)
    )
    return ModelWeights(
        seed=seed,
        encoder=g(D_FEATURE, d_enc),
        projector=Projector(g(d_enc, d_model), g(d_model)),
        token_embedding=g(len(VOCAB), d_model, s=1.0),
        layers=layers,
        lnf_g=1 + g(d_model, s=0.1),
        lnf_b=g(d_model, s=0.1),
        unembed=g(d_model, len(ANSWER_VOCAB)),
    )


# Designed-weight strengths; see build_toy_model.
COPY_QUERY = 4.0
PERCEPT_QUERY = 1.0
SALIENCE_KEY = 0.75
VISUAL_KEY = 0.5
OBJECT_KEY = 1.0
ANSWER_GAIN = 4.0
KIND_GAIN = 3.0
DONE_GAIN = 8.0
OBJ_GAIN = 8.0
YES_THRESHOLD = 3.6


def build_toy_model(seed: int = 0, noise: float = 0.01, n_heads: int = 4, d_model: int = 64) -> ModelWeights:
    """The structured two-layer model used by the toy backend."""
    if d_model < 32 or n_heads < 1 or d_model % n_heads:
        raise ShapeError("structured model needs d_model >= 32 divisible by n_heads")
    rng = np.random.default_rng(seed)
    d_head = d_model // n_heads
    d_enc = 24
    n_col = len(COLORS)

    def g(*shape, s=noise):
        return rng.normal(0.0, s, size=shape)

    encoder = g(D_FEATURE, d_enc)
    encoder[: FEAT_SAL + 1, : FEAT_SAL + 1] += np.eye(FEAT_SAL + 1)
    encoder[FEAT_SAL + 1 :, FEAT_SAL + 1 : D_FEATURE] += 0.2 * np.eye(D_FEATURE - FEAT_SAL - 1)

    proj_w = g(d_enc, d_model)
    proj_w[:n_col, CH_COLOR] += np.eye(n_col)
    proj_w[FEAT_OBJ, CH_OBJ] += 1.0
    proj_w[FEAT_SAL, CH_SAL] += 1.0
    proj_w[FEAT_SAL + 1 :, CH_FREE:] += g(d_enc - FEAT_SAL - 1, d_model - CH_FREE, s=0.3)
    proj_b = g(d_model)
    proj_b[CH_VIS] += 1.0
    proj_b[CH_BIAS] += 1.0

    emb = g(len(VOCAB), d_model)
    emb[:, CH_FREE:] += g(len(VOCAB), d_model - CH_FREE, s=0.15)
    emb[:, CH_TXT] += 1.0
    emb[:, CH_BIAS] += 1.0
    for word, ch in (("what", CH_KIND_ATTR), ("color", CH_KIND_ATTR), ("there", CH_KIND_EXIST), ("?", CH_QEND)):
        emb[VOCAB.index(word), ch] += 1.0
    for word in ANSWER_VOCAB:
        emb[VOCAB.index(word), CH_ANS] += 1.0

    def noisy_layer() -> dict:
        return dict(
            ln1_g=np.ones(d_model), ln1_b=np.zeros(d_model),
            w_q=g(n_heads, d_model, d_head), w_k=g(n_heads, d_model, d_head), w_v=g(n_heads, d_model, d_head),
            w_o=g(n_heads * d_head, d_model), b_o=g(d_model),
            ln2_g=np.ones(d_model), ln2_b=np.zeros(d_model),
            w_ff1=g(d_model, 2 * d_model), b_ff1=g(2 * d_model), w_ff2=g(2 * d_model, d_model), b_ff2=g(d_model),
        )

    # layer 0 / head 0: last prompt position gathers the question-kind words
    l0 = noisy_layer()
    l0["w_q"][0, CH_QEND, 0] += COPY_QUERY
    l0["w_k"][0, CH_KIND_ATTR, 0] += COPY_QUERY
    l0["w_k"][0, CH_KIND_EXIST, 0] += COPY_QUERY
    l0["w_v"][0, CH_KIND_ATTR, 1] += 1.0
    l0["w_v"][0, CH_KIND_EXIST, 2] += 1.0
    l0["w_o"][1, CH_ATTR_COPY] += 0.25
    l0["w_o"][2, CH_EXIST_COPY] += 0.25

    # layer 1 / head 0: salience-driven look at the image
    l1 = noisy_layer()
    l1["w_q"][0, CH_BIAS, 0] += PERCEPT_QUERY
    l1["w_k"][0, CH_SAL, 0] += SALIENCE_KEY
    l1["w_k"][0, CH_VIS, 0] += VISUAL_KEY
    l1["w_k"][0, CH_OBJ, 0] += OBJECT_KEY
    l1["w_v"][0, CH_COLOR, 1 : 1 + n_col] += np.eye(n_col)
    l1["w_v"][0, CH_OBJ, 1 + n_col] += 1.0
    l1["w_o"][1 : 1 + n_col, CH_COLOR] += 0.25 * np.eye(n_col)
    l1["w_o"][1 + n_col, CH_OBJMASS] += 0.25

    unembed = g(d_model, len(ANSWER_VOCAB))
    for i, color in enumerate(COLORS):
        a = ANSWER_VOCAB.index(color)
        unembed[i, a] += ANSWER_GAIN
        unembed[CH_ATTR_COPY, a] += KIND_GAIN
    yes, no, eos = (ANSWER_VOCAB.index(w) for w in ("yes", "no", EOS))
    unembed[CH_OBJMASS, yes] += OBJ_GAIN
    unembed[CH_BIAS, yes] -= YES_THRESHOLD
    unembed[CH_EXIST_COPY, [yes, no]] += KIND_GAIN
    unembed[CH_ANS, :] -= DONE_GAIN
    unembed[CH_ANS, eos] += 2 * DONE_GAIN

    return ModelWeights(
        seed=seed,
        encoder=encoder,
        projector=Projector(proj_w, proj_b),
        token_embedding=emb,
        layers=(LayerWeights(**l0), LayerWeights(**l1)),
        lnf_g=np.ones(d_model),
        lnf_b=np.zeros(d_model),
        unembed=unembed,
    )


# -- forward pass ------------------------------------------------------------


def encode_image(image: SyntheticImage, weights: ModelWeights) -> np.ndarray:
    """One embedding per patch, row-major; a bias-free linear map of the features."""
    if image.patch_features.shape[1] != weights.encoder.shape[0]:
        raise ShapeError(
            f"patch features have dim {image.patch_features.shape[1]}, encoder expects {weights.encoder.shape[0]}"
        )
    return image.patch_features @ weights.encoder


def project(patch_embeddings: np.ndarray, projector: Projector) -> np.ndarray:
    patch_embeddings = np.asarray(patch_embeddings, dtype=np.float64)
    if patch_embeddings.shape[-1] != projector.weight.shape[0]:
        raise ShapeError(f"embedding dim {patch_embeddings.shape[-1]} != projector input {projector.weight.shape[0]}")
    return patch_embeddings @ projector.weight + projector.bias


_WORD_RE = re.compile(r"[a-z]+|\?")


def tokenize(text: str, weights: ModelWeights) -> list[int]:
    return [weights.token_id(w) for w in _WORD_RE.findall(text.lower())]


def build_sequence(image: SyntheticImage, prompt: str, weights: ModelWeights) -> TokenSequence:
    ids = tokenize(prompt, weights)
    if not ids:
        raise ValueError("prompt has no tokens")
    visual = project(encode_image(image, weights), weights.projector)
    return TokenSequence(visual, weights.token_embedding[ids], tuple(ids))


def _in_scope(layer: int, layer_range: tuple[int, int] | None) -> bool:
    return layer_range is None or layer_range[0] <= layer < layer_range[1]


def forward(
    sequence: TokenSequence,
    weights: ModelWeights,
    reweight: ReweightParams | None = None,
    layer_range: tuple[int, int] | None = None,
) -> ForwardTrace:
    """Pre-norm causal decoder over the whole sequence.

    ``reweight`` (padded with unmasked columns to the sequence length) replaces
    the plain softmax in every layer inside ``layer_range``.
    """
    x = sequence.embeddings()
    n = x.shape[0]
    if n == 0:
        raise ShapeError("empty sequence")
    if x.shape[1] != weights.d_model:
        raise ShapeError(f"token dim {x.shape[1]} != model dim {weights.d_model}")
    allowed = attention.causal_mask(n)
    params = reweight.padded(n) if reweight is not None else None

    attentions = []
    for li, layer in enumerate(weights.layers):
        h = _layer_norm(x, layer.ln1_g, layer.ln1_b)
        q = np.einsum("nd,hde->hne", h, layer.w_q)
        k = np.einsum("nd,hde->hne", h, layer.w_k)
        v = np.einsum("nd,hde->hne", h, layer.w_v)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(layer.d_head)
        if params is not None and _in_scope(li, layer_range):
            probs = attention.reweight_softmax(scores, params, allowed)
        else:
            probs = attention.softmax(scores, allowed)
        heads = (probs @ v).transpose(1, 0, 2).reshape(n, -1)
        x = x + heads @ layer.w_o + layer.b_o
        h2 = _layer_norm(x, layer.ln2_g, layer.ln2_b)
        x = x + np.maximum(h2 @ layer.w_ff1 + layer.b_ff1, 0.0) @ layer.w_ff2 + layer.b_ff2
        attentions.append(probs)

    final = _layer_norm(x[-1], weights.lnf_g, weights.lnf_b)
    return ForwardTrace(final @ weights.unembed, attentions)


def decode_step(
    sequence: TokenSequence,
    weights: ModelWeights,
    reweight: ReweightParams | None = None,
    layer_range: tuple[int, int] | None = None,
) -> np.ndarray:
    """Logits over ``weights.answer_vocab`` for the next token."""
    return forward(sequence, weights, reweight, layer_range).logits


def generate_trace(
    sequence: TokenSequence,
    weights: ModelWeights,
    reweight: ReweightParams | None = None,
    max_tokens: int = 4,
    layer_range: tuple[int, int] | None = None,
) -> GenerationTrace:
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    prompt_length = len(sequence)
    tokens, step_attn = [], []
    for _ in range(max_tokens):
        trace = forward(sequence, weights, reweight, layer_range)
        step_attn.append(trace.attentions)
        word = weights.answer_vocab[int(np.argmax(trace.logits))]
        tokens.append(word)
        if word == EOS:
            break
        sequence = sequence.append(weights.vocab.index(word), weights)
    return GenerationTrace(tokens, step_attn, prompt_length)


def generate(
    sequence: TokenSequence,
    weights: ModelWeights,
    reweight: ReweightParams | None = None,
    max_tokens: int = 4,
    layer_range: tuple[int, int] | None = None,
) -> str:
    """Greedy decoding; returns the generated words without the end token."""
    return generate_trace(sequence, weights, reweight, max_tokens, layer_range).text


# -- stage-1 stub ------------------------------------------------------------


@dataclass(frozen=True)
class GroundingNoise:
    """Perturbation applied by the grounding stub to the true target rectangle."""

    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    refusal: bool = False


REFUSAL_TEXT = "I cannot determine the location of the answer in this image."


def toy_ground_text(image: SyntheticImage, prompt: str, noise: GroundingNoise = GroundingNoise()) -> str:
    """What the stub "says" in reply to a grounding prompt."""
    if noise.refusal:
        return REFUSAL_TEXT
    rect = image.target_rect()
    cx, cy = rect.center
    hw, hh = rect.width / 2 * noise.scale, rect.height / 2 * noise.scale
    coords = [cx - hw + noise.dx, cy - hh + noise.dy, cx + hw + noise.dx, cy + hh + noise.dy]
    if noise.dx == 0 and noise.dy == 0 and noise.scale == 1.0:
        coords = rect.to_json()
    coords = [min(max(v, 0.0), 1.0) for v in coords]
    return json.dumps({"bbox": coords})


def toy_ground(
    image: SyntheticImage,
    question: str,
    weights: ModelWeights | None = None,
    noise: GroundingNoise = GroundingNoise(),
) -> GroundingResponse:
    """Stand-in for a model's grounding skill, routed through the real prompt and parser."""
    bundle = build_grounding_prompt(question)
    return parse_bbox_response(toy_ground_text(image, bundle.combined, noise), image.width, image.height)
