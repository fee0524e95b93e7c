"""
Whole-model gradient check at tiny scale.

The detector's loss is only piecewise smooth: top-K selection, the detached
layer references and the Hungarian assignment are discrete. The check
replays the selection and references of the unperturbed pass and redraws any
probe whose perturbation flips an assignment, so the finite differences see
the same smooth piece the analytic gradient does.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.autodiff import GradientProbe, Tensor, backward, probe_parameter_gradients
from src.config import ModelConfig
from src.constants import QueryMode, RngStream
from src.errors import GradientCheckError
from src.matching import Criterion, GroundTruthSet, LossBreakdown, match
from src.model import Detector, ModelOutput
from src.rng import make_rng

logger = logging.getLogger(__name__)

_PARAM_JITTER = 0.05
_MAX_REDRAWS_PER_SAMPLE = 10


def tiny_model_config(mode: QueryMode | str = QueryMode.PAQ, seed: int = 0) -> ModelConfig:
    """d=8, 16 x 16 images in 4 x 4 patches (M=16), K=4, m=3, L=2, H=2, C=3."""
    return ModelConfig(
        image_size=16,
        patch_size=4,
        embed_dim=8,
        num_queries=4,
        num_patterns=3,
        num_layers=2,
        num_heads=2,
        num_classes=3,
        ffn_hidden=16,
        wgen_hidden=8,
        mode=QueryMode(mode),
        seed=seed,
    )


@dataclass
class GradcheckReport:
    probes: list[GradientProbe]
    tolerance: float
    redrawn: int = 0
    mode: QueryMode = QueryMode.PAQ
    notes: list[str] = field(default_factory=list)

    @property
    def worst(self) -> GradientProbe:
        return max(self.probes, key=lambda p: p.relative_error)

    @property
    def max_error(self) -> float:
        return self.worst.relative_error if self.probes else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def describe_worst(self) -> str:
        w = self.worst
        return (
            f"{w.tensor_name}[{w.flat_index}]: analytic {w.analytic:.6e}, "
            f"numeric {w.numeric:.6e}, relative error {w.relative_error:.3e}"
        )


def _assignment_signature(output: ModelOutput, breakdown: LossBreakdown, criterion: Criterion, gt: GroundTruthSet) -> tuple:
    encoder = match(output.selected_scores, output.queries.references, gt, criterion.cost_weights)
    return tuple(a.pairs for a in breakdown.assignments) + (encoder.pairs,)


def run_gradcheck(
    mode: QueryMode | str = QueryMode.PAQ,
    n_samples: int = 20,
    seed: int = 0,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    config: ModelConfig | None = None,
    corrupt_gradient: bool = False,
) -> GradcheckReport:
    """
    Compare backward against central differences on `n_samples` random
    parameter coordinates of the full detection loss (decoder layers plus
    the encoder selection loss).

    Args:
        corrupt_gradient: shift every analytic gradient by 1 before probing.
            A negative control: the check must then fail.
    """
    config = config or tiny_model_config(mode, seed)
    detector = Detector(config)
    rng = make_rng(RngStream.GRADCHECK, seed)
    for tensor in detector.params.values():
        tensor.data += rng.normal(0.0, _PARAM_JITTER, size=tensor.shape)

    side = config.image_size
    image = rng.uniform(0.0, 1.0, size=(3, side, side))
    num_gt = 2
    centers = rng.uniform(0.3, 0.7, size=(num_gt, 2))
    sizes = rng.uniform(0.1, 0.3, size=(num_gt, 2))
    gt = GroundTruthSet(np.hstack([centers, sizes]), rng.integers(0, config.num_classes, size=num_gt))

    criterion = Criterion()
    routing = detector.forward(image).routing

    def loss_and_signature() -> tuple[Tensor, tuple]:
        output = detector.forward(image, routing=routing)
        breakdown = criterion(output, gt)
        loss = breakdown.total + criterion.encoder_loss(output, gt)
        return loss, _assignment_signature(output, breakdown, criterion, gt)

    loss, base_signature = loss_and_signature()
    detector.zero_grad()
    backward(loss)
    for tensor in detector.params.values():
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        if corrupt_gradient:
            tensor.grad = tensor.grad + 1.0

    names = list(detector.params)
    report = GradcheckReport(probes=[], tolerance=tolerance, mode=config.mode)
    while len(report.probes) < n_samples:
        if report.redrawn > _MAX_REDRAWS_PER_SAMPLE * n_samples:
            raise GradientCheckError(
                f"matching flipped on {report.redrawn} probes; the loss is not locally smooth here"
            )
        name = names[int(rng.integers(len(names)))]
        flat_index = int(rng.integers(detector.params[name].size))
        signatures: list[tuple] = []

        def probed_loss() -> Tensor:
            value, signature = loss_and_signature()
            signatures.append(signature)
            return value

        (probe,) = probe_parameter_gradients(probed_loss, detector.params, [(name, flat_index)], eps)
        if any(s != base_signature for s in signatures):
            report.redrawn += 1
            logger.debug("assignment flipped while probing %s[%d]; redrawing", name, flat_index)
            continue
        report.probes.append(probe)

    logger.info(
        "gradcheck (%s): %d probes, %d redrawn, max relative error %.3e",
        config.mode, len(report.probes), report.redrawn, report.max_error,
    )
    return report
