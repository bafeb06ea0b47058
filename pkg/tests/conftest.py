import os
from pathlib import Path

import pytest
import torch

from compinv.tensorlab import set_threads
from compinv.toygen import DatasetConfig, PretrainConfig, ToyGenerator, generate_dataset, pretrain_generator

# Pretrained generator and default dataset are expensive; they are built once
# and reused across sessions from this directory.
CACHE = Path(os.environ.get("COMPINV_TEST_CACHE", Path(__file__).resolve().parent.parent / ".test-cache"))

set_threads(1)


@pytest.fixture(autouse=True)
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def tiny_generator(seed: int = 0) -> ToyGenerator:
    """Untrained, small generator for fast structural tests."""
    cfg = PretrainConfig(resolution=8, channels=4, n_basis=4, coeff_hidden=8, decoder_hidden=(8, 8), n_samples=12)
    g = ToyGenerator(cfg)
    gen = torch.Generator().manual_seed(seed)
    g.generator.init_parameters(gen)
    g.decoder.init_normal(0.5, gen)
    return g.to(torch.get_default_dtype()).freeze()


@pytest.fixture
def tiny_gen():
    return tiny_generator()


@pytest.fixture(scope="session")
def generator_path() -> Path:
    path = CACHE / "generator.ckpt"
    if not path.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        pretrain_generator(PretrainConfig(), path)
    return path


@pytest.fixture(scope="session")
def default_dataset_path() -> Path:
    path = CACHE / "dataset"
    if not (path / "config.txt").exists():
        generate_dataset(DatasetConfig(), path)
    return path


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def report(key: str, ok: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
