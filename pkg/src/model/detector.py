"""
The detector: toy encoder, confidence-based top-K selection, pattern-composed
content queries and a refining decoder with per-layer prediction heads.

In baseline mode the selected encoder tokens are the content queries. In paq
mode a two-layer MLP turns them into convex weights over a small shared
pattern bank, and the queries are the resulting convex combinations, so any
gradient on any query reaches every pattern it puts weight on.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from src.autodiff import Tensor, zero_grad
from src.autodiff import functional as F
from src.config import ModelConfig
from src.constants import QueryMode
from src.errors import CheckpointError, ConfigError, ShapeError
from src.model.layers import Params, dense, inverse_sigmoid, mlp, multi_head_attention, norm
from src.model.parameters import PAQ_PREFIX, init_parameters, parameter_shapes

logger = logging.getLogger(__name__)


@dataclass
class PatternBank:
    """The m x d learnable patterns shared by every query."""

    patterns: Tensor

    @property
    def num_patterns(self) -> int:
        return self.patterns.shape[0]


@dataclass
class EncoderOutput:
    tokens: Tensor  # Z, M x d
    token_scores: Tensor  # M x C class logits
    token_anchors: np.ndarray  # M x 4 cx/cy/w/h, fixed grid


class TopKSelection(NamedTuple):
    features: Tensor  # Z_I, K x d, rows by descending score
    references: np.ndarray  # K x 4
    indices: np.ndarray  # K token indices


class Routing(NamedTuple):
    """
    The non-differentiable decisions of one forward pass: which tokens were
    selected and the (detached) reference boxes each decoder layer refined.
    Replaying them makes the forward a smooth function of the parameters.
    """

    selected_indices: np.ndarray
    layer_references: tuple[np.ndarray, ...]


@dataclass
class QuerySet:
    content: Tensor  # K x d
    references: np.ndarray  # K x 4
    selected_indices: np.ndarray  # K distinct indices into [0, M)


@dataclass
class ModelOutput:
    per_layer_logits: list[Tensor]
    per_layer_boxes: list[Tensor]
    queries: QuerySet | None = None
    encoder: EncoderOutput | None = None
    weights: Tensor | None = None  # W^D in paq mode
    selected_scores: Tensor | None = None  # encoder logits of the selected tokens
    extras: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.per_layer_logits)

    @property
    def final_logits(self) -> Tensor:
        return self.per_layer_logits[-1]

    @property
    def final_boxes(self) -> Tensor:
        return self.per_layer_boxes[-1]

    @property
    def routing(self) -> Routing:
        if self.queries is None:
            raise ValueError("routing is only recorded by a full forward pass")
        return Routing(self.queries.selected_indices.copy(), tuple(self.extras["layer_references"]))


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """3 x S x S image -> (S/p)^2 x 3p^2 rows, tokens in row-major grid order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"expected a 3 x S x S image, got shape {image.shape}")
    side = image.shape[1]
    if side % patch_size:
        raise ShapeError(f"image side {side} is not divisible by patch size {patch_size}")
    n = side // patch_size
    patches = image.reshape(3, n, patch_size, n, patch_size).transpose(1, 3, 0, 2, 4)
    return patches.reshape(n * n, 3 * patch_size * patch_size)


def grid_anchors(grid: int, size: float) -> np.ndarray:
    """Anchors at patch centers, one per token, all of width = height = `size`."""
    centers = (np.arange(grid) + 0.5) / grid
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    sizes = np.full(grid * grid, size)
    return np.stack([cx.ravel(), cy.ravel(), sizes, sizes], axis=1)


def encode(image: np.ndarray, params: Params, config: ModelConfig) -> EncoderOutput:
    """Patch embedding, one transformer encoder layer and a per-token score head."""
    patches = patchify(image, config.patch_size)
    x = dense(Tensor(patches), params, "encoder.patch_embed") + params["encoder.pos_embed"]
    x = norm(
        x + multi_head_attention(x, x, x, params, "encoder.attn", config.num_heads),
        params,
        "encoder.norm1",
    )
    x = norm(x + mlp(x, params, "encoder.ffn"), params, "encoder.norm2")
    scores = dense(x, params, "encoder.score_head")
    grid = config.image_size // config.patch_size
    return EncoderOutput(
        tokens=x,
        token_scores=scores,
        token_anchors=grid_anchors(grid, config.anchor_size),
    )


def select_topk(enc: EncoderOutput, k: int) -> TopKSelection:
    """
    Keep the K tokens with the largest max-over-classes logit.

    Ties go to the lower token index; rows come out by descending score.
    """
    num_tokens = enc.tokens.shape[0]
    if k > num_tokens:
        raise ShapeError(f"cannot select {k} queries from {num_tokens} tokens")
    best = enc.token_scores.data.max(axis=1)
    order = np.lexsort((np.arange(num_tokens), -best))
    return gather_selection(enc, order[:k])


def gather_selection(enc: EncoderOutput, indices: np.ndarray) -> TopKSelection:
    indices = np.asarray(indices, dtype=np.intp)
    return TopKSelection(
        features=F.gather_rows(enc.tokens, indices),
        references=enc.token_anchors[indices].copy(),
        indices=indices,
    )


def generate_weights(features: Tensor, params: Params) -> Tensor:
    """W^D = row-softmax(MLP(Z_I)), K x m with convex rows."""
    fc1 = params[f"{PAQ_PREFIX}wgen.fc1.weight"]
    if features.ndim != 2 or features.shape[1] != fc1.shape[0]:
        raise ShapeError(
            f"weight generator expects K x {fc1.shape[0]} features, got {features.shape}"
        )
    return F.softmax(mlp(features, params, f"{PAQ_PREFIX}wgen"))


def compose_queries(weights: Tensor, bank: PatternBank) -> Tensor:
    """Content queries as convex combinations of the patterns: W^D @ Q^P."""
    if weights.ndim != 2 or weights.shape[1] != bank.num_patterns:
        raise ShapeError(
            f"weights {weights.shape} do not match a bank of {bank.num_patterns} patterns"
        )
    return weights @ bank.patterns


def decode(
    queries: QuerySet,
    enc: EncoderOutput,
    params: Params,
    config: ModelConfig,
    layer_references: Sequence[np.ndarray] | None = None,
) -> ModelOutput:
    """
    L refinement layers: self-attention, cross-attention to Z and an FFN, each
    with residual + layer norm. Every layer emits class logits and boxes;
    boxes refine the previous layer's (detached) references in logit space.

    Args:
        layer_references: replay these per-layer references instead of the
            ones this pass would compute.
    """
    expected = (config.num_queries, config.embed_dim)
    if queries.content.shape != expected or queries.references.shape != (config.num_queries, 4):
        raise ShapeError(
            f"decoder expects content {expected} and references ({config.num_queries}, 4), "
            f"got {queries.content.shape} and {queries.references.shape}"
        )
    if enc.tokens.shape[1] != config.embed_dim:
        raise ShapeError(f"encoder tokens {enc.tokens.shape} do not have width {config.embed_dim}")

    content = queries.content
    initial_refs = queries.references
    refs = initial_refs
    if layer_references is not None and len(layer_references) != config.num_layers:
        raise ShapeError(
            f"replay needs {config.num_layers} reference sets, got {len(layer_references)}"
        )
    logits_per_layer: list[Tensor] = []
    boxes_per_layer: list[Tensor] = []
    used_refs: list[np.ndarray] = []
    for layer in range(config.num_layers):
        prefix = f"decoder.layers.{layer}"
        if layer_references is not None:
            refs = np.asarray(layer_references[layer], dtype=np.float64)
        used_refs.append(refs)
        pos_source = refs if config.refresh_position_queries else initial_refs
        pos = mlp(Tensor(pos_source), params, "decoder.query_pos")

        q = content + pos
        x = norm(
            content + multi_head_attention(q, q, content, params, f"{prefix}.self_attn", config.num_heads),
            params,
            f"{prefix}.norm1",
        )
        x = norm(
            x
            + multi_head_attention(
                x + pos, enc.tokens, enc.tokens, params, f"{prefix}.cross_attn", config.num_heads
            ),
            params,
            f"{prefix}.norm2",
        )
        x = norm(x + mlp(x, params, f"{prefix}.ffn"), params, f"{prefix}.norm3")

        logits_per_layer.append(dense(x, params, f"{prefix}.score_head"))
        boxes = F.sigmoid(mlp(x, params, f"{prefix}.box_head") + inverse_sigmoid(refs))
        boxes_per_layer.append(boxes)
        refs = boxes.data.copy()
        content = x

    return ModelOutput(
        per_layer_logits=logits_per_layer,
        per_layer_boxes=boxes_per_layer,
        extras={"layer_references": used_refs},
    )


class Detector:
    """A detector configuration bound to its parameters."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = params if params is not None else init_parameters(config)
        self._check_params(self.params)

    def _check_params(self, params: Mapping[str, Tensor]) -> None:
        expected = parameter_shapes(self.config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise CheckpointError(
                f"parameters do not fit a {self.config.mode} detector: "
                f"missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
                f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise CheckpointError(f"{name}: expected shape {shape}, got {params[name].shape}")

    @property
    def mode(self) -> QueryMode:
        return self.config.mode

    @property
    def pattern_bank(self) -> PatternBank | None:
        patterns = self.params.get(f"{PAQ_PREFIX}patterns")
        return None if patterns is None else PatternBank(patterns)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        zero_grad(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward pieces --

    def encode(self, image: np.ndarray) -> EncoderOutput:
        return encode(image, self.params, self.config)

    def select_topk(self, enc: EncoderOutput) -> TopKSelection:
        return select_topk(enc, self.config.num_queries)

    def decode(
        self, queries: QuerySet, enc: EncoderOutput, layer_references: Sequence[np.ndarray] | None = None
    ) -> ModelOutput:
        return decode(queries, enc, self.params, self.config, layer_references)

    def forward(
        self,
        image: np.ndarray,
        mode: QueryMode | str | None = None,
        routing: Routing | None = None,
    ) -> ModelOutput:
        """
        Full detection pass on one 3 x S x S image.

        Args:
            mode: override the configured query mode (paq needs a pattern bank).
            routing: replay the token selection and decoder references of an
                earlier pass (see `ModelOutput.routing`).
        """
        try:
            mode = QueryMode(mode) if mode is not None else self.config.mode
        except ValueError:
            raise ConfigError(f"unknown query mode {mode!r}") from None

        enc = self.encode(image)
        if routing is None:
            selection = self.select_topk(enc)
        else:
            selection = gather_selection(enc, routing.selected_indices)
        weights = None
        if mode == QueryMode.PAQ:
            bank = self.pattern_bank
            if bank is None:
                raise ConfigError("paq mode needs a pattern bank, but this detector was built as baseline")
            weights = generate_weights(selection.features, self.params)
            content = compose_queries(weights, bank)
        else:
            content = selection.features

        queries = QuerySet(
            content=content,
            references=selection.references,
            selected_indices=selection.indices,
        )
        output = self.decode(queries, enc, None if routing is None else routing.layer_references)
        output.queries = queries
        output.encoder = enc
        output.weights = weights
        output.selected_scores = F.gather_rows(enc.token_scores, selection.indices)
        return output

    __call__ = forward

    # -- state --

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = parameter_shapes(self.config)
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise CheckpointError(f"state is missing {len(missing)} tensor(s), e.g. {missing[0]!r}")
        extra = sorted(set(arrays) - set(expected))
        if extra:
            raise CheckpointError(f"state has {len(extra)} unexpected tensor(s), e.g. {extra[0]!r}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise CheckpointError(f"{name}: expected shape {shape}, got {tuple(arrays[name].shape)}")
        for name, tensor in self.params.items():
            tensor.data = np.array(arrays[name], dtype=np.float64)
            tensor.zero_grad()
