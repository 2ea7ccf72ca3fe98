import numpy as np
import pytest
import torch

from vscd.encoder import EncoderConfig
from vscd.model import ModelConfig, VSCDNet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**kw) -> ModelConfig:
    enc = dict(patch_size=8, token_dim=16, frame_size=32, at_heads=4, vit_heads=4, vit_depth=1)
    enc.update(kw.pop("encoder", {}))
    base = dict(encoder=EncoderConfig(**enc), k=3, change_ch=8, decoder_widths=[8, 8, 8], rgb_ch=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return VSCDNet(small_config())


def toy_pair(seed: int = 0, T: int = 6, size: int = 32, pair_id: str = "toy"):
    """Query = reference plus a white square on every frame; mask marks the square."""
    from vscd.synthdata.dataset import DatasetPair, VideoClip

    g = np.random.default_rng(seed)
    ref = (g.uniform(0.2, 0.6, size=(T, size, size, 3)) * 255).astype(np.uint8)
    query = ref.copy()
    masks = np.zeros((T, size, size), np.uint8)
    for t in range(T):
        y, x = g.integers(0, size - 10, size=2)
        query[t, y : y + 10, x : x + 10] = 255
        masks[t, y : y + 10, x : x + 10] = 1
    return DatasetPair(pair_id, VideoClip(ref, "reference"), VideoClip(query, "query"), masks, {"change_count": 1})


# one line per acceptance criterion, filled by test_acceptance.py and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
