"""Data contract models for the gated change detection lab.

These Pydantic models define the configuration and report schemas that
move between the modules: config file → DecoderConfig / TrainConfig →
training loop → LossBreakdown / MetricReport → CSV and workbook export.
"""

from enum import Enum
from pathlib import Path

from pydantic import BaseModel, Field, model_validator

# =============================================================================
# Enums
# =============================================================================


class LossVariant(str, Enum):
    """Which consistency term is added to the training objective."""

    NONE = "none"
    SC = "sc"  # hard hinge on the cosine margin
    SSC = "ssc"  # softplus-smoothed hinge


class Precision(str, Enum):
    """Arithmetic used for forward and backward passes."""

    FP32_REF = "fp32"  # plain double-precision path, no quantization
    FP16_EMULATED = "fp16"


IGNORE_INDEX = 255


# =============================================================================
# Model configuration
# =============================================================================


class DecoderConfig(BaseModel):
    """Shape of the toy encoder and the cascaded gated decoder."""

    num_classes: int = Field(
        5, ge=2, description="Semantic channels, channel 0 is the no-change class"
    )
    encoder_widths: tuple[int, int, int, int] = Field(
        (8, 16, 16, 16), description="Channels at strides 4, 8, 16 and 32"
    )
    decoder_width: int = Field(16, ge=1)
    num_blocks: int = Field(3, ge=1, le=3)
    cbam_reduction: int = Field(4, ge=1)
    use_cagm: bool = Field(True, description="False fuses by elementwise addition")
    tie_change_concat: bool = Field(
        True,
        description="Tie the h_A/h_B kernel slices of the change DoubleConv so "
        "swapping the dates leaves the change path bit-identical",
    )

    @model_validator(mode="after")
    def _widths_positive(self) -> "DecoderConfig":
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be >= 1")
        return self


class LossConfig(BaseModel):
    """Weights and shape of the composite training objective."""

    variant: LossVariant = LossVariant.SSC
    margin: float = Field(0.1, gt=-1.0, lt=1.0)
    tau: float = Field(0.5, description="SSC temperature")
    sc_weight: float = Field(1.0, ge=0.0)
    ignore_index: int = IGNORE_INDEX

    @model_validator(mode="after")
    def _tau_positive(self) -> "LossConfig":
        if self.variant == LossVariant.SSC and self.tau <= 0:
            raise ValueError("tau must be > 0 for the ssc variant")
        return self


class PrecisionMode(BaseModel):
    """How gradients are computed: reference doubles or emulated binary16."""

    mode: Precision = Precision.FP32_REF
    loss_scale: float = Field(1024.0, gt=0.0)
    grad_clip: float | None = Field(None, gt=0.0, description="Global L2 norm bound")

    @property
    def is_fp16(self) -> bool:
        return self.mode == Precision.FP16_EMULATED


# =============================================================================
# Experiment configuration
# =============================================================================


class InstabilityConfig(BaseModel):
    """Near-margin feature population driven by the consistency loss alone."""

    population: int = Field(4096, ge=2, description="Total feature pairs")
    changed_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    feature_dim: int = Field(16, ge=2)
    margin: float = Field(0.1, gt=-1.0, lt=1.0)
    tau: float = Field(0.5, gt=0.0)
    variant: LossVariant = LossVariant.SC
    precision: PrecisionMode = Field(
        default_factory=lambda: PrecisionMode(mode=Precision.FP16_EMULATED, loss_scale=32768.0)
    )
    lr_peak: float = Field(1.0, gt=0.0)
    lr_floor: float = Field(0.0, ge=0.0)
    warmup_fraction: float = Field(0.10, ge=0.0, lt=1.0)
    poly_power: float = Field(1.0, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.012, ge=0.0)
    steps: int = Field(200, ge=1)
    seed: int = 0

    # Initial population geometry
    initial_norm: float = Field(0.07, gt=0.0)
    changed_band: tuple[float, float] = Field(
        (0.05, 0.001), description="Changed cosines drawn in [m - hi, m - lo]"
    )
    unchanged_cosine: float = Field(0.9, gt=-1.0, lt=1.0)

    # Cliff detection
    burn_in_fraction: float = Field(0.10, ge=0.0, lt=1.0)
    ratio_jump: float = Field(0.5, gt=0.0)
    loss_mad_factor: float = Field(5.0, gt=0.0)
    loss_jump_floor: float = Field(0.1, ge=0.0)
    mad_window: int = Field(20, ge=2)

    @property
    def burn_in(self) -> int:
        return int(self.burn_in_fraction * self.steps)


class TrainConfig(BaseModel):
    """Training protocol: SGD with momentum, warmup and polynomial decay.

    Peak rate and clipping are desk-scale values for the normalization-free
    toy network.
    """

    lr_peak: float = Field(0.02, gt=0.0)
    lr_floor: float = Field(0.0, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(30, ge=1)
    warmup_fraction: float = Field(0.10, ge=0.0, lt=1.0)
    poly_power: float = Field(1.0, gt=0.0)
    seed: int = 0
    threshold: float = Field(0.5, gt=0.0, lt=1.0, description="Change probability cut")

    loss: LossConfig = Field(default_factory=LossConfig)
    precision: PrecisionMode = Field(default_factory=lambda: PrecisionMode(grad_clip=1.5))
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)

    # Data: directories written by gen-data, or an in-memory synthetic set
    train_dir: Path | None = None
    val_dir: Path | None = None
    output_dir: Path = Path("output")
    data_seed: int = Field(0, description="Seed of the synthetic training split")
    train_count: int = Field(200, ge=1)
    val_count: int = Field(50, ge=1)
    image_size: int = Field(64, ge=32)
    change_rate: float = Field(0.3, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _lr_bounds(self) -> "TrainConfig":
        if self.lr_floor > self.lr_peak:
            raise ValueError("lr_floor must not exceed lr_peak")
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by 32")
        return self


# =============================================================================
# Reports
# =============================================================================


class LossBreakdown(BaseModel):
    """Scalar components of one total_loss evaluation."""

    total: float
    ce_A: float
    ce_B: float
    change_term: float
    sc_term: float
    activation_ratio: float = Field(..., ge=0.0, le=1.0)


class MetricReport(BaseModel):
    """SCD metric suite over one evaluation stream; values in [0, 1]."""

    oa: float
    f_scd: float
    miou: float
    sek: float
    p_scd: float
    r_scd: float
    iou_changed: float
    iou_unchanged: float
    kappa: float

    @property
    def score(self) -> float:
        """SECOND-benchmark summary score."""
        return 0.3 * self.miou + 0.7 * self.sek

    def csv_row(self) -> dict[str, float]:
        """The fixed `oa,f_scd,miou,sek,p_scd,r_scd` row, ×100 with 2 decimals."""
        return {
            key: round(100.0 * getattr(self, key), 2)
            for key in ("oa", "f_scd", "miou", "sek", "p_scd", "r_scd")
        }


class StepRecord(BaseModel):
    """One optimizer step of an instability run."""

    step: int
    loss: float
    activation_ratio: float
    grad_norm: float
    nonfinite: bool = False


class StabilityTrace(BaseModel):
    """Per-step records of an instability run plus the cliff verdict."""

    records: list[StepRecord] = Field(default_factory=list)
    unstable: bool = False
    first_event_step: int | None = None
    variant: LossVariant = LossVariant.SC
    precision: Precision = Precision.FP16_EMULATED
    seed: int = 0
