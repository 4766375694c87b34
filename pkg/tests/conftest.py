import pytest

from mdnal.detector import NetworkConfig
from mdnal.harness import ExperimentConfig, PoolData, dump_config
from mdnal.losses import OptimizerConfig
from mdnal.scenes import DatasetSpec


def tiny_config(**kw) -> ExperimentConfig:
    base = dict(dataset=DatasetSpec(n_scenes=100, seed=4),
                network=NetworkConfig(backbone=((8, 2), (8, 2), (8, 2)), conf_floor=0.2),
                optimizer=OptimizerConfig(steps=15, batch_size=16),
                initial_labeled=20, budget=10, cycles=2, seeds=(0, 1))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tiny):
    return PoolData.build(tiny)


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    dump_config(tiny_config(), path)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
