import numpy as np
import pytest
from hypothesis import settings

from directreg.core3d import RigidTransform, random_quat

settings.register_profile("repo", max_examples=60, deadline=None)
settings.load_profile("repo")


def random_transform(rng, max_angle=np.pi, scale=1.0):
    return RigidTransform(random_quat(rng, max_angle), rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Shared desk-scale artefacts. Training the full model takes a couple of
# minutes on one core, so it happens at most once per session.

@pytest.fixture(scope="session")
def desk_dataset():
    from directreg.bench.synthetic import DatasetSpec, generate_dataset
    return generate_dataset(DatasetSpec())


@pytest.fixture(scope="session")
def bench_config():
    from directreg.bench.runner import BenchConfig
    return BenchConfig()


@pytest.fixture(scope="session")
def train_config():
    from directreg.training import TrainConfig
    return TrainConfig(epochs=20)


@pytest.fixture(scope="session")
def trained_all(desk_dataset, bench_config, train_config):
    import time
    from directreg.bench.runner import train_models
    history = []
    t0 = time.perf_counter()
    models = train_models(desk_dataset["train"], train_config, bench_config, per_pair=8,
                          progress=lambda e, l: history.append(l))
    return models, history, time.perf_counter() - t0


@pytest.fixture(scope="session")
def test_features(trained_all, desk_dataset, bench_config):
    from directreg.bench.runner import describe_pairs
    return describe_pairs(trained_all[0], desk_dataset["test"], bench_config)


@pytest.fixture(scope="session")
def bench_all(trained_all, test_features, desk_dataset, bench_config):
    from directreg.bench.runner import run_benchmark
    return run_benchmark(trained_all[0], desk_dataset["test"], bench_config, features=test_features)


# Acceptance verdicts are echoed immediately and repeated in the terminal summary.

@pytest.fixture
def verdict(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
