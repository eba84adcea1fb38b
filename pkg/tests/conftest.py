import numpy as np
import pytest

from gated_scd.models import DecoderConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config() -> DecoderConfig:
    """Width-4 decoder small enough for finite-difference checks."""
    return DecoderConfig(num_classes=3, encoder_widths=(4, 4, 4, 4), decoder_width=4)


@pytest.fixture
def small_config() -> DecoderConfig:
    return DecoderConfig(num_classes=5, encoder_widths=(4, 8, 8, 8), decoder_width=8)
