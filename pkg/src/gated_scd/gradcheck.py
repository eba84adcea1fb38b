"""Finite-difference suite over every differentiable op and decoder module.

Each case builds a small graph with random parameters and reduces its output
to a scalar through a fixed random weighting, so every output entry carries
gradient. Inputs to relu/abs are kept away from their kinks.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from gated_scd.decoder import (
    FeatureTriplet,
    Weights,
    cagm,
    cbam,
    cg_decoder_forward,
    deep_branch,
    init_params,
    shallow_branch,
    toy_encoder,
)
from gated_scd.losses import (
    change_bce,
    cosine_map,
    semantic_ce,
    sc_loss,
    ssc_loss,
)
from gated_scd.models import DecoderConfig
from gated_scd.tensor import (
    Graph,
    Node,
    bilinear_upsample,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    finite_diff_check,
    global_avg_pool,
    global_max_pool,
    pointwise,
    softplus,
    total_sum,
)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4

Case = Callable[[np.random.Generator], tuple[Graph, Node]]

SMALL = DecoderConfig(num_classes=3, encoder_widths=(4, 4, 4, 4), decoder_width=4)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _weighted(node: Node, rng: np.random.Generator) -> Node:
    weights = node.graph.constant(rng.normal(size=node.shape))
    return total_sum(node * weights)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _param(g: Graph, name: str, rng: np.random.Generator, shape, scale: float = 1.0) -> Node:
    return g.parameter(name, scale * rng.normal(size=shape))


# =============================================================================
# Op cases
# =============================================================================


def _conv(rng):
    g = Graph()
    x = _param(g, "x", rng, (2, 3, 7, 7))
    out = conv2d(x, _param(g, "k", rng, (4, 3, 3, 3)), _param(g, "b", rng, (1, 4, 1, 1)),
                 stride=2, padding=1)
    return g, _weighted(out, rng)


def _upsample(rng):
    g = Graph()
    return g, _weighted(bilinear_upsample(_param(g, "x", rng, (2, 2, 3, 4)), 2), rng)


def _pools(rng):
    g = Graph()
    x = _param(g, "x", rng, (2, 4, 4, 4))
    pooled = concat_channels([global_avg_pool(x), global_max_pool(x)])
    per_pixel = concat_channels([channel_mean(x), channel_max(x)])
    return g, _weighted(pooled, rng) + _weighted(per_pixel, rng)


def _pointwise(kind):
    def case(rng):
        g = Graph()
        x = g.parameter("x", _away_from_zero(rng, (2, 3, 4, 4)))
        return g, _weighted(pointwise(kind, x), rng)
    return case


def _softplus(rng):
    g = Graph()
    return g, _weighted(softplus(_param(g, "x", rng, (1, 2, 4, 4), 3.0)), rng)


def _arith(rng):
    g = Graph()
    a = _param(g, "a", rng, (2, 4, 3, 3))
    b = _param(g, "b", rng, (2, 1, 3, 3))
    c = _param(g, "c", rng, (1, 4, 1, 1))
    return g, _weighted((a * b - c) + a * 0.5, rng)


def _cosine(rng):
    g = Graph()
    cos = cosine_map(_param(g, "x1", rng, (1, 4, 3, 3)), _param(g, "x2", rng, (1, 4, 3, 3)))
    return g, _weighted(cos, rng)


def _consistency(variant):
    def case(rng):
        g = Graph()
        cos = cosine_map(_param(g, "x1", rng, (2, 4, 4, 4)), _param(g, "x2", rng, (2, 4, 4, 4)))
        y = rng.choice([1, -1, 0], size=(2, 1, 4, 4), p=[0.45, 0.45, 0.1]).astype(np.int8)
        y[0, 0, 0, 0] = -1
        if variant == "sc":
            return g, sc_loss(cos, y, 0.1)
        return g, ssc_loss(cos, y, 0.1, 0.5)
    return case


def _ce(rng):
    g = Graph()
    labels = rng.integers(0, 4, size=(2, 4, 4))
    labels[0, 0, 0] = 255
    return g, semantic_ce(_param(g, "logits", rng, (2, 4, 4, 4)), labels)


def _bce(rng):
    g = Graph()
    target = rng.integers(0, 2, size=(2, 1, 4, 4)).astype(np.float64)
    return g, change_bce(_param(g, "logit", rng, (2, 1, 4, 4), 2.0), target)


# =============================================================================
# Module cases
# =============================================================================


def _cbam(rng):
    g = Graph()
    params = {
        "c.mlp1.weight": rng.normal(size=(2, 8, 1, 1)), "c.mlp1.bias": rng.normal(size=(1, 2, 1, 1)),
        "c.mlp2.weight": rng.normal(size=(8, 2, 1, 1)), "c.mlp2.bias": rng.normal(size=(1, 8, 1, 1)),
        "c.spatial.weight": rng.normal(size=(1, 2, 7, 7)) * 0.3,
        "c.spatial.bias": rng.normal(size=(1, 1, 1, 1)),
    }
    x = _param(g, "x", rng, (1, 8, 4, 4))
    return g, _weighted(cbam(x, Weights(g, params), "c"), rng)


def _block(rng):
    """One cascade block: deep branch, shallow branch and gated fusion."""
    g = Graph()
    weights = Weights(g, init_params(SMALL, rng))
    prev = FeatureTriplet(*(_param(g, f"prev{i}", rng, (1, 4, 2, 2)) for i in range(3)))
    f_a = _param(g, "F_A", rng, (1, 4, 4, 4))
    f_b = _param(g, "F_B", rng, (1, 4, 4, 4))
    deep = deep_branch(prev, weights, 1, SMALL)
    shallow = shallow_branch(f_a, f_b, weights, 3)
    out, _ = cagm(deep, shallow, weights, 1, SMALL)
    return g, _weighted(concat_channels([out.x_A, out.x_B, out.x_C]), rng)


def _end_to_end(rng):
    g = Graph()
    weights = Weights(g, init_params(SMALL, rng))
    image_a = g.constant(rng.uniform(size=(1, 3, 32, 32)))
    image_b = g.constant(rng.uniform(size=(1, 3, 32, 32)))
    pred = cg_decoder_forward(toy_encoder(image_a, image_b, weights), weights, SMALL)
    heads = concat_channels([pred.sem_logits_A, pred.sem_logits_B, pred.change_logit])
    return g, _weighted(heads, rng)


CASES: dict[str, Case] = {
    "conv2d": _conv,
    "bilinear_upsample": _upsample,
    "pooling": _pools,
    "relu": _pointwise("relu"),
    "sigmoid": _pointwise("sigmoid"),
    "abs": _pointwise("abs"),
    "softplus": _softplus,
    "arithmetic": _arith,
    "cosine_map": _cosine,
    "sc_loss": _consistency("sc"),
    "ssc_loss": _consistency("ssc"),
    "semantic_ce": _ce,
    "change_bce": _bce,
    "cbam": _cbam,
    "decoder_block": _block,
    "end_to_end": _end_to_end,
}


def run_case(name: str, seed: int = 0, eps: float = 1e-5) -> CheckResult:
    start = time.perf_counter()
    graph, loss = CASES[name](np.random.default_rng(seed))
    err = finite_diff_check(graph, loss, eps)
    result = CheckResult(name, err, time.perf_counter() - start)
    logger.info("%s: max rel error %.3e (%.1fs)", name, err, result.seconds)
    return result


def run_suite(names: list[str] | None = None, seed: int = 0) -> list[CheckResult]:
    return [run_case(name, seed) for name in (names or list(CASES))]
