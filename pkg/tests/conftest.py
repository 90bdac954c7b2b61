import pytest
import torch
import torch.nn.functional as F

from dipwm.fr_surrogates import ARCH_IDS, partition_pool, train_surrogate
from dipwm.imaging_io import IdentityCorpus, generate_synthetic_corpus
from dipwm.watermark_codec import CodecConfig

SMALL = 16
SMALL_CODEC = CodecConfig(
    payload_bits=8, image_size=SMALL, n_stages=2, carrier_blocks=1,
    carrier_channels=4, payload_channels=4, decoder_channels=8, cbam_reduction=2,
)


@pytest.fixture(scope="session")
def small_corpus():
    """The synthetic corpus downsampled to 16x16 so trainer tests run in seconds."""
    c = generate_synthetic_corpus(8, 6, seed=2)
    images = F.interpolate(c.images, size=SMALL, mode="area")
    return IdentityCorpus(images, c.labels, c.split)


@pytest.fixture(scope="session")
def small_pool(small_corpus):
    torch.manual_seed(0)
    models = [train_surrogate(small_corpus, a, seed=i, epochs=2, embed_dim=16) for i, a in enumerate(ARCH_IDS)]
    for m in models:
        m.tau = 0.3
    return partition_pool(models, 2, 1)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict; the terminal summary prints them in order."""

    def record(number: int, checks: list[tuple[str, bool]]):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{name} [{'ok' if passed else 'miss'}]" for name, passed in checks)
        _CRITERIA[number] = (ok, detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
