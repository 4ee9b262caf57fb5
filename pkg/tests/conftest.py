import pytest
import torch

from samestage.config import TrainConfig
from samestage.dag import DagConfig
from samestage.data import ToyDomainSpec, synth_toy
from samestage.generator import GeneratorConfig

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def small_config(**overrides) -> TrainConfig:
    """A width-8 model on 32/64 px inputs; enough for wiring tests, cheap on one CPU."""
    kwargs = dict(
        epochs=1,
        generator=GeneratorConfig(base_width=8),
        disc_width=8,
        dag=DagConfig(n_patches=16),
        checkpoint_every=0,
        heads=None,
    )
    kwargs.update(overrides)
    if kwargs["heads"] is None:
        from samestage.heads import HeadConfig

        kwargs["heads"] = HeadConfig(latent_dim=32)
    return TrainConfig(**kwargs)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return synth_toy(ToyDomainSpec(size=32, n_images=6, n_test=4, seed=3), root)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
