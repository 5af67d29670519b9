"""Finite-difference gradient suite over the engine ops and the model blocks."""

import logging
from typing import Callable, Dict, List, Optional

import numpy as np

from fpvt_tensor import (
    DEFAULT_TOLERANCE,
    GradCheckCase,
    GradCheckResult,
    Tensor,
    check_gradients,
    default_dtype,
    no_grad,
    op_cases,
)

from .attention import AttnConfig, EncoderLayer
from .cffn import CffnConfig, ConvFeedForward
from .fdr_head import FdrConfig, FdrState, fdr_cosine, margin_softmax_loss
from .module import Module
from .patch_embed import TokenSequence
from .pyramid import ModelConfig, StageConfig, build_model

logger = logging.getLogger(__name__)

MODEL_MAX_SAMPLES = 4


def tiny_config() -> ModelConfig:
    """Two stages on 16 x 16 inputs (grids 4 and 2)."""
    return ModelConfig(
        image_size=16,
        stages=[
            StageConfig(stride=4, pad=3, channels=8, layers=1, reduction=2, heads=1, expand=2),
            StageConfig(stride=2, pad=1, channels=16, layers=1, reduction=1, heads=2, expand=2),
        ],
        embed_dim=8,
    )


def randomize(module: Module, rng: np.random.Generator) -> None:
    """Overwrite parameters with O(1) values so gradients sit well above finite-difference noise."""
    for name, param in module.named_parameters():
        low, high = (0.5, 1.5) if name.endswith("gain") else (-0.5, 0.5)
        param.data[...] = rng.uniform(low, high, size=param.shape)


def _weighted(forward: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    with no_grad():
        shape = forward().shape
    weights = rng.normal(size=shape)
    return lambda: (forward() * weights).sum()


def _module_params(prefix: str, module: Module) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": param for name, param in module.named_parameters()}


def model_cases(seed: int = 0) -> List[GradCheckCase]:
    """Encoder layer, convolutional FFN, FDR loss and the whole tiny model; build under float64."""
    rng = np.random.default_rng([seed, 7])
    cases = []

    layer = EncoderLayer(AttnConfig(channels=8, heads=2, reduction=2), CffnConfig(channels=8, expand_ratio=2), rng)
    randomize(layer, rng)
    tokens = Tensor(rng.uniform(-1.0, 1.0, size=(2, 16, 8)), requires_grad=True)
    cases.append(GradCheckCase(
        "encoder_layer",
        _weighted(lambda: layer(TokenSequence(tokens, 4, 4)).tokens, rng),
        {"x": tokens, **_module_params("layer", layer)},
    ))

    ffn = ConvFeedForward(CffnConfig(channels=4, expand_ratio=2), rng)
    randomize(ffn, rng)
    ffn_tokens = Tensor(rng.uniform(-1.0, 1.0, size=(2, 9, 4)), requires_grad=True)
    cases.append(GradCheckCase(
        "cffn",
        _weighted(lambda: ffn(TokenSequence(ffn_tokens, 3, 3)).tokens, rng),
        {"x": ffn_tokens, **_module_params("ffn", ffn)},
    ))

    for kind in ("cosine", "angular"):
        state = FdrState(FdrConfig(groups=3, seed=seed), n_identities=5, dim=4, rng=rng)
        randomize(state, rng)
        features = Tensor(rng.uniform(-1.0, 1.0, size=(6, 4)), requires_grad=True)
        identities = np.array([0, 1, 2, 3, 4, 0])
        targets = state.targets(identities)
        cases.append(GradCheckCase(
            f"fdr_{kind}_loss",
            lambda state=state, features=features, targets=targets, identities=identities, kind=kind: margin_softmax_loss(
                fdr_cosine(features, state, identities), targets, margin=0.3, scale=4.0, kind=kind
            ),
            {"features": features, "anchors": state.anchors},
        ))

    model = build_model(tiny_config(), rng_seed=seed)
    randomize(model, rng)
    head = FdrState(FdrConfig(groups=2, seed=seed), n_identities=4, dim=8, rng=rng)
    randomize(head, rng)
    images = Tensor(rng.uniform(0.0, 1.0, size=(3, 3, 16, 16)), requires_grad=True)
    model_ids = np.array([0, 1, 2])
    model_targets = head.targets(model_ids)
    cases.append(GradCheckCase(
        "tiny_model",
        lambda: margin_softmax_loss(fdr_cosine(model(images), head, model_ids), model_targets, margin=0.3, scale=4.0),
        {"images": images, **_module_params("model", model), **_module_params("head", head)},
    ))
    return cases


def run_gradcheck(
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
    max_samples: Optional[int] = MODEL_MAX_SAMPLES,
    include_ops: bool = True,
) -> List[GradCheckResult]:
    """Check every op case in full and every model case on sampled elements, in float64."""
    results = []
    with default_dtype(np.float64):
        if include_ops:
            results += [check_gradients(case, tolerance, seed=seed) for case in op_cases(seed)]
        results += [check_gradients(case, tolerance, max_samples, seed) for case in model_cases(seed)]
    failed = [r.name for r in results if not r.passed]
    logger.info(f"gradcheck: {len(results) - len(failed)}/{len(results)} cases within {tolerance:g}")
    return results
