import numpy as np
import pytest
import torch
from hypothesis import settings

from agerestore.denoiser import DenoiserConfig
from agerestore.diffusion import make_noise_schedule
from agerestore.model import RestorationModel

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture(scope="session")
def schedule():
    return make_noise_schedule()


@pytest.fixture
def tiny_cfg():
    return DenoiserConfig(base_channels=8, attn_dim=16, num_heads=2, id_token_count=4, id_dim=16, image_size=16)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    model = RestorationModel(tiny_cfg)
    model.trained = True
    return model.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 13


@pytest.fixture
def criterion(request):
    """Record and print one acceptance line, then assert it."""
    log = request.config.stash.setdefault(ACCEPTANCE, {})

    def report(number: int, title: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}"
        log[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(log.get(n, f"[----] {n:2d} not run or errored before reporting"))
