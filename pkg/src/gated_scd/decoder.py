"""Toy siamese encoder and the cascaded gated decoder.

Parameters live in a flat ``name -> array`` dict (see `param_shapes`). Every
forward pass binds that dict onto a fresh `Graph` through `Weights`, so a name
used twice (the A and B paths of a shared layer) resolves to the same leaf and
receives the summed gradient.

Naming scheme::

    enc.{stem,s1,s2,s3,s4}                 strided 3x3 convs
    shallow{s}.{sem,chg}.cbam.{mlp1,mlp2,spatial}
    shallow{s}.{sem,chg}.compress          1x1 convs, s = 4 seeds the cascade
    block{k}.deep.{sem,chg}.{conv1,conv2}
    block{k}.gate.{local,global}
    block{k}.fuse.{sem,chg}
    head.{sem,chg}
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from gated_scd.errors import ParameterError, ShapeError
from gated_scd.models import DecoderConfig
from gated_scd.tensor import (
    Graph,
    Node,
    add_scalar,
    bilinear_upsample,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    global_avg_pool,
    global_max_pool,
    pointwise,
    stable_sigmoid,
)

logger = logging.getLogger(__name__)

ENCODER_STRIDE = 32
NUM_SCALES = 4


# =============================================================================
# Containers
# =============================================================================


@dataclass
class FeatureTriplet:
    """Pre-change, post-change and change features of one decoder stage."""

    x_A: Node
    x_B: Node
    x_C: Node

    def __post_init__(self) -> None:
        shapes = {self.x_A.shape, self.x_B.shape, self.x_C.shape}
        if len(shapes) != 1:
            raise ShapeError(f"triplet members disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.x_A.shape


@dataclass
class MultiScaleFeatures:
    """Encoder outputs per scale, finest (stride 4) first."""

    scales: list[tuple[Node, Node]]

    def __post_init__(self) -> None:
        if len(self.scales) != NUM_SCALES:
            raise ShapeError(f"expected {NUM_SCALES} scales, got {len(self.scales)}")
        for f_a, f_b in self.scales:
            if f_a.shape != f_b.shape:
                raise ShapeError(f"date features disagree: {f_a.shape} vs {f_b.shape}")


@dataclass
class ScdPrediction:
    sem_logits_A: Node
    sem_logits_B: Node
    change_logit: Node
    features_A: Node  # full-resolution semantic features before the classifier
    features_B: Node
    heatmaps: list[tuple[Node, Node]] = field(default_factory=list)  # (W_z, W_h) per block


class Weights:
    """Binds a parameter dict onto a graph, one leaf per name."""

    def __init__(self, graph: Graph, params: dict[str, np.ndarray]) -> None:
        self.graph = graph
        self.params = params

    def __getitem__(self, name: str) -> Node:
        try:
            values = self.params[name]
        except KeyError:
            raise ShapeError(f"missing parameter {name!r}") from None
        return self.graph.parameter(name, values)

    def conv(self, prefix: str, x: Node, stride: int = 1, padding: int = 0) -> Node:
        """conv2d with the `{prefix}.weight` and `{prefix}.bias` leaves."""
        return conv2d(x, self[f"{prefix}.weight"], self[f"{prefix}.bias"], stride, padding)


# =============================================================================
# Parameters
# =============================================================================


def _conv_shape(shapes: dict, prefix: str, c_in: int, c_out: int, k: int) -> None:
    shapes[f"{prefix}.weight"] = (c_out, c_in, k, k)
    shapes[f"{prefix}.bias"] = (1, c_out, 1, 1)


def _cbam_shape(shapes: dict, prefix: str, channels: int, reduction: int) -> None:
    hidden = max(channels // reduction, 1)
    _conv_shape(shapes, f"{prefix}.mlp1", channels, hidden, 1)
    _conv_shape(shapes, f"{prefix}.mlp2", hidden, channels, 1)
    _conv_shape(shapes, f"{prefix}.spatial", 2, 1, 7)


def _shallow_scales(config: DecoderConfig) -> list[int]:
    """Encoder scales consumed by shallow branches: the seed, then one per block."""
    return [NUM_SCALES - k for k in range(config.num_blocks + 1)]


def param_shapes(config: DecoderConfig) -> dict[str, tuple[int, ...]]:
    w = config.encoder_widths
    d = config.decoder_width
    shapes: dict[str, tuple[int, ...]] = {}
    _conv_shape(shapes, "enc.stem", 3, w[0], 3)
    _conv_shape(shapes, "enc.s1", w[0], w[0], 3)
    _conv_shape(shapes, "enc.s2", w[0], w[1], 3)
    _conv_shape(shapes, "enc.s3", w[1], w[2], 3)
    _conv_shape(shapes, "enc.s4", w[2], w[3], 3)

    for s in _shallow_scales(config):
        _cbam_shape(shapes, f"shallow{s}.sem.cbam", w[s - 1], config.cbam_reduction)
        _conv_shape(shapes, f"shallow{s}.sem.compress", w[s - 1], d, 1)
        _cbam_shape(shapes, f"shallow{s}.chg.cbam", d, config.cbam_reduction)
        _conv_shape(shapes, f"shallow{s}.chg.compress", d, d, 1)

    chg_in = 2 * d if config.tie_change_concat else 3 * d
    for k in range(1, config.num_blocks + 1):
        _conv_shape(shapes, f"block{k}.deep.sem.conv1", d, d, 3)
        _conv_shape(shapes, f"block{k}.deep.sem.conv2", d, d, 3)
        _conv_shape(shapes, f"block{k}.deep.chg.conv1", chg_in, d, 3)
        _conv_shape(shapes, f"block{k}.deep.chg.conv2", d, d, 3)
        if config.use_cagm:
            _conv_shape(shapes, f"block{k}.gate.local", 2 * d, 2, 3)
            _conv_shape(shapes, f"block{k}.gate.global", 2 * d, 2, 1)
        _conv_shape(shapes, f"block{k}.fuse.sem", d, d, 3)
        _conv_shape(shapes, f"block{k}.fuse.chg", d, d, 3)

    _conv_shape(shapes, "head.sem", d, config.num_classes, 1)
    _conv_shape(shapes, "head.chg", d, 1, 1)
    return shapes


def init_params(config: DecoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal kernels (variance 2/fan_in), zero biases."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    logger.debug("initialized %d tensors, %d values", len(params),
                 sum(p.size for p in params.values()))
    return params


# =============================================================================
# Encoder
# =============================================================================


def _encode_one(image: Node, weights: Weights) -> list[Node]:
    x = pointwise("relu", weights.conv("enc.stem", image, stride=2, padding=1))
    feats = []
    for name in ("enc.s1", "enc.s2", "enc.s3", "enc.s4"):
        x = pointwise("relu", weights.conv(name, x, stride=2, padding=1))
        feats.append(x)
    return feats


def toy_encoder(image_A: Node, image_B: Node, weights: Weights) -> MultiScaleFeatures:
    """Siamese strided conv stack with outputs at strides 4, 8, 16 and 32."""
    if image_A.shape != image_B.shape:
        raise ShapeError(f"images disagree: {image_A.shape} vs {image_B.shape}")
    n, c, h, w = image_A.shape
    if c != 3:
        raise ShapeError(f"expected 3-channel images, got {c}")
    if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
        raise ShapeError(f"image dims {h}x{w} must be divisible by {ENCODER_STRIDE}")
    feats_a = _encode_one(image_A, weights)
    feats_b = _encode_one(image_B, weights)
    return MultiScaleFeatures(list(zip(feats_a, feats_b, strict=True)))


# =============================================================================
# Decoder building blocks
# =============================================================================


def cbam(f: Node, weights: Weights, prefix: str) -> Node:
    """Channel attention then spatial attention, both sigmoid-gated."""
    hidden_avg = pointwise("relu", weights.conv(f"{prefix}.mlp1", global_avg_pool(f)))
    hidden_max = pointwise("relu", weights.conv(f"{prefix}.mlp1", global_max_pool(f)))
    channel_att = pointwise(
        "sigmoid",
        weights.conv(f"{prefix}.mlp2", hidden_avg) + weights.conv(f"{prefix}.mlp2", hidden_max),
    )
    f = f * channel_att
    pooled = concat_channels([channel_mean(f), channel_max(f)])
    spatial_att = pointwise("sigmoid", weights.conv(f"{prefix}.spatial", pooled, padding=3))
    return f * spatial_att


def feature_compress(f: Node, weights: Weights, prefix: str) -> Node:
    """CBAM followed by the 1x1 compress conv (width -> decoder_width)."""
    return weights.conv(f"{prefix}.compress", cbam(f, weights, f"{prefix}.cbam"))


def shallow_branch(F_A: Node, F_B: Node, weights: Weights, scale: int) -> FeatureTriplet:
    """Compress one encoder scale into a (z_A, z_B, z_C) triplet.

    Args:
        F_A: Pre-change encoder features at `scale`
        F_B: Post-change encoder features, same shape as F_A
        weights: Bound parameters; both dates share the `shallow{scale}.sem` leaves
        scale: Encoder scale index, 1 (stride 4) to 4 (stride 32)

    Returns:
        Triplet whose change member is compressed from |z_A - z_B|

    Raises:
        ShapeError: If F_A and F_B disagree in shape
    """
    if F_A.shape != F_B.shape:
        raise ShapeError(f"shallow branch inputs disagree: {F_A.shape} vs {F_B.shape}")
    z_a = feature_compress(F_A, weights, f"shallow{scale}.sem")
    z_b = feature_compress(F_B, weights, f"shallow{scale}.sem")
    z_c = feature_compress(pointwise("abs", z_a - z_b), weights, f"shallow{scale}.chg")
    return FeatureTriplet(z_a, z_b, z_c)


def _double_conv(x: Node, weights: Weights, prefix: str) -> Node:
    # (conv3x3, relu) x2
    x = pointwise("relu", weights.conv(f"{prefix}.conv1", x, padding=1))
    return pointwise("relu", weights.conv(f"{prefix}.conv2", x, padding=1))


def deep_branch(
    prev: FeatureTriplet, weights: Weights, block: int, config: DecoderConfig
) -> FeatureTriplet:
    """Double convs over the running triplet, then a x2 bilinear upsample.

    The change path sees Cat(x_C, h_A, h_B); both dates share the semantic
    double conv.
    """
    prefix = f"block{block}.deep"
    h_a = _double_conv(prev.x_A, weights, f"{prefix}.sem")
    h_b = _double_conv(prev.x_B, weights, f"{prefix}.sem")
    if config.tie_change_concat:
        # Cat(x_C, h_A, h_B) under a kernel whose h_A and h_B slices are tied
        chg_in = concat_channels([prev.x_C, h_a + h_b])
    else:
        chg_in = concat_channels([prev.x_C, h_a, h_b])
    h_c = _double_conv(chg_in, weights, f"{prefix}.chg")
    return FeatureTriplet(*(bilinear_upsample(h, 2) for h in (h_a, h_b, h_c)))


def _split_channel(x: Node, index: int) -> Node:
    """Select one channel as (n, 1, h, w) through a fixed 1x1 projection."""
    graph = x.graph
    c = x.shape[1]
    kernel = np.zeros((1, c, 1, 1))
    kernel[0, index, 0, 0] = 1.0
    return conv2d(x, graph.constant(kernel), graph.constant(np.zeros((1, 1, 1, 1))))


def gating_weights(deep: FeatureTriplet, shallow: FeatureTriplet, weights: Weights,
                   block: int) -> tuple[Node, Node]:
    """(1 + W_global) * W_local, split into the shallow and deep weight maps."""
    g = concat_channels([deep.x_C, shallow.x_C])
    w_local = pointwise("sigmoid", weights.conv(f"block{block}.gate.local", g, padding=1))
    w_global = pointwise(
        "sigmoid", weights.conv(f"block{block}.gate.global", global_avg_pool(g))
    )
    combined = add_scalar(w_global, 1.0) * w_local
    return _split_channel(combined, 0), _split_channel(combined, 1)


def cagm(
    deep: FeatureTriplet,
    shallow: FeatureTriplet,
    weights: Weights,
    block: int,
    config: DecoderConfig,
) -> tuple[FeatureTriplet, tuple[Node, Node] | None]:
    """Gated fusion of the upsampled deep triplet with the shallow triplet.

    With ``config.use_cagm`` off the branches are simply added before the
    fusion convolution and no weight maps are returned.
    """
    if deep.shape != shallow.shape:
        raise ShapeError(f"cagm inputs disagree: {deep.shape} vs {shallow.shape}")
    heatmap = None
    if config.use_cagm:
        w_z, w_h = gating_weights(deep, shallow, weights, block)
        heatmap = (w_z, w_h)
        mixed = [z * w_z + h * w_h for z, h in
                 ((shallow.x_A, deep.x_A), (shallow.x_B, deep.x_B), (shallow.x_C, deep.x_C))]
    else:
        mixed = [shallow.x_A + deep.x_A, shallow.x_B + deep.x_B, shallow.x_C + deep.x_C]
    out_a = weights.conv(f"block{block}.fuse.sem", mixed[0], padding=1)
    out_b = weights.conv(f"block{block}.fuse.sem", mixed[1], padding=1)
    out_c = weights.conv(f"block{block}.fuse.chg", mixed[2], padding=1)
    return FeatureTriplet(out_a, out_b, out_c), heatmap


def cg_decoder_forward(
    feats: MultiScaleFeatures, weights: Weights, config: DecoderConfig
) -> ScdPrediction:
    """Seed the cascade at stride 32, run config.num_blocks gated blocks, classify.

    Args:
        feats: Encoder outputs for both dates
        weights: Parameter binding for this graph
        config: Decoder shape and ablation switches

    Returns:
        Full-resolution logits, pre-classifier semantic features and one
        (W_z, W_h) pair per block when gating is on
    """
    seed_scale = NUM_SCALES
    f_a, f_b = feats.scales[seed_scale - 1]
    triplet = shallow_branch(f_a, f_b, weights, seed_scale)
    heatmaps = []
    for block in range(1, config.num_blocks + 1):
        scale = NUM_SCALES - block
        deep = deep_branch(triplet, weights, block, config)
        f_a, f_b = feats.scales[scale - 1]
        shallow = shallow_branch(f_a, f_b, weights, scale)
        triplet, heatmap = cagm(deep, shallow, weights, block, config)
        if heatmap is not None:
            heatmaps.append(heatmap)
        logger.debug("block %d output %s", block, triplet.shape)

    factor = 4 * 2 ** (NUM_SCALES - 1 - config.num_blocks)
    x_a = bilinear_upsample(triplet.x_A, factor)
    x_b = bilinear_upsample(triplet.x_B, factor)
    x_c = bilinear_upsample(triplet.x_C, factor)
    return ScdPrediction(
        sem_logits_A=weights.conv("head.sem", x_a),
        sem_logits_B=weights.conv("head.sem", x_b),
        change_logit=weights.conv("head.chg", x_c),
        features_A=x_a,
        features_B=x_b,
        heatmaps=heatmaps,
    )


def forward_model(
    params: dict[str, np.ndarray],
    image_A: np.ndarray,
    image_B: np.ndarray,
    config: DecoderConfig,
) -> tuple[Graph, ScdPrediction]:
    """Build a fresh graph for one batch and run encoder plus decoder."""
    graph = Graph()
    weights = Weights(graph, params)
    feats = toy_encoder(graph.constant(image_A), graph.constant(image_B), weights)
    return graph, cg_decoder_forward(feats, weights, config)


# =============================================================================
# Prediction
# =============================================================================


def predict_scd_map(
    pred: ScdPrediction, threshold: float = 0.5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label maps (n, H, W) for both dates plus the binary change mask.

    Changed pixels take the best semantic class among 1..K-1 (first index
    wins ties); unchanged pixels get the reserved class 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    change = stable_sigmoid(pred.change_logit.value[:, 0]) > threshold
    labels = []
    for logits in (pred.sem_logits_A.value, pred.sem_logits_B.value):
        best = logits[:, 1:].argmax(axis=1) + 1
        labels.append(np.where(change, best, 0).astype(np.uint8))
    return labels[0], labels[1], change.astype(np.uint8)


def check_gating_bounds(pred: ScdPrediction) -> bool:
    """True when every exported weight map lies strictly inside (0, 2)."""
    for w_z, w_h in pred.heatmaps:
        for w in (w_z.value, w_h.value):
            if not (np.all(w > 0.0) and np.all(w < 2.0)):
                return False
    return True
