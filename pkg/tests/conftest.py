import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "cyclevar",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "cyclevar"))


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def small_tokenizer():
    """Untrained default-geometry tokenizer, enough for shape and plumbing tests."""
    from cyclevar.tokenizer import Tokenizer

    torch.manual_seed(0)
    return Tokenizer().freeze()


@pytest.fixture(scope="session")
def small_translator(small_tokenizer):
    from cyclevar.generation import Translator
    from cyclevar.transformer import NextScaleTransformer

    torch.manual_seed(1)
    tr = NextScaleTransformer(16, 64, small_tokenizer.schedule.sizes, width=32, heads=2, depth=2)
    return Translator(small_tokenizer, tr).eval()


# -- expensive trained artifacts, built once per session on the default config -----------

@pytest.fixture(scope="session")
def run_cfg():
    from cyclevar.config import RunConfig

    return RunConfig().validate()


@pytest.fixture(scope="session")
def pretrained(run_cfg):
    from cyclevar import pipeline

    return pipeline.pretrain(run_cfg)


@pytest.fixture(scope="session")
def domain_clf(run_cfg):
    from cyclevar import pipeline

    return pipeline.train_classifier(run_cfg)


@pytest.fixture(scope="session")
def eval_images(run_cfg):
    from cyclevar import pipeline

    return pipeline.eval_sets(run_cfg)


# -- acceptance verdict lines -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
