"""
Parameter and multiply-accumulate accounting.

Parameters are counted by enumerating every tensor the detector allocates.
FLOPs are MACs of the matrix products of one forward pass (attention
scores and attention-weighted sums included); elementwise work is ignored.
"""

import dataclasses
import math
from dataclasses import dataclass

from src.config import ModelConfig
from src.constants import QueryMode
from src.model import parameter_shapes
from src.model.parameters import PAQ_PREFIX


@dataclass(frozen=True)
class CostReport:
    mode: QueryMode
    total_params: int | None = None
    paq_params: int | None = None
    paq_param_terms: dict[str, int] | None = None
    total_flops: int | None = None
    paq_flops: int | None = None
    flops_by_part: dict[str, int] | None = None

    @property
    def paq_flop_fraction(self) -> float | None:
        if self.total_flops is None or self.paq_flops is None:
            return None
        return self.paq_flops / self.total_flops

    @property
    def paq_param_fraction(self) -> float | None:
        if self.total_params is None or self.paq_params is None:
            return None
        return self.paq_params / self.total_params

    def merge(self, other: "CostReport") -> "CostReport":
        updates = {
            f.name: getattr(other, f.name)
            for f in dataclasses.fields(other)
            if getattr(other, f.name) is not None
        }
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mode"] = str(self.mode)
        out["paq_flop_fraction"] = self.paq_flop_fraction
        out["paq_param_fraction"] = self.paq_param_fraction
        return out


def paq_param_formula(config: ModelConfig) -> dict[str, int]:
    """Closed form of the pattern bank plus weight generator: m*d + d*h + h + h*m + m."""
    if config.mode != QueryMode.PAQ:
        return {}
    d, m, h = config.embed_dim, config.num_patterns, config.wgen_hidden
    return {
        "patterns (m*d)": m * d,
        "wgen.fc1.weight (d*h)": d * h,
        "wgen.fc1.bias (h)": h,
        "wgen.fc2.weight (h*m)": h * m,
        "wgen.fc2.bias (m)": m,
    }


def count_params(config: ModelConfig) -> CostReport:
    shapes = parameter_shapes(config)
    sizes = {name: math.prod(shape) for name, shape in shapes.items()}
    return CostReport(
        mode=config.mode,
        total_params=sum(sizes.values()),
        paq_params=sum(n for name, n in sizes.items() if name.startswith(PAQ_PREFIX)),
        paq_param_terms=paq_param_formula(config),
    )


def _attention_macs(n_query: int, n_key: int, d: int) -> int:
    # q/o projections on queries, k/v on keys, scores and weighted sum over all heads
    return 2 * n_query * d * d + 2 * n_key * d * d + 2 * n_query * n_key * d


def count_flops(config: ModelConfig) -> CostReport:
    d, f, c = config.embed_dim, config.ffn_hidden, config.num_classes
    n_tok, k = config.num_tokens, config.num_queries

    encoder = (
        n_tok * 3 * config.patch_size**2 * d
        + _attention_macs(n_tok, n_tok, d)
        + 2 * n_tok * d * f
        + n_tok * d * c
    )
    per_layer = (
        k * 4 * d + k * d * d  # position queries
        + _attention_macs(k, k, d)
        + _attention_macs(k, n_tok, d)
        + 2 * k * d * f
        + k * d * c
        + k * d * d + k * d * 4  # box head
    )
    parts = {"encoder": encoder, "decoder": config.num_layers * per_layer}
    paq = 0
    if config.mode == QueryMode.PAQ:
        h, m = config.wgen_hidden, config.num_patterns
        paq = k * d * h + k * h * m + k * m * d
        parts["paq"] = paq
    return CostReport(
        mode=config.mode,
        total_flops=sum(parts.values()),
        paq_flops=paq,
        flops_by_part=parts,
    )


def cost_report(config: ModelConfig) -> CostReport:
    return count_params(config).merge(count_flops(config))
