import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_data():
    from nern.zoo import make_bars_dataset

    return make_bars_dataset(0)


@pytest.fixture(scope="session")
def desk_net(desk_data):
    from nern.zoo import build_desk_cnn, train_original

    return train_original(build_desk_cnn(0), desk_data, 0.0, epochs=30)


@pytest.fixture(scope="session")
def short_predictor(desk_net, desk_data):
    """A predictor trained briefly on reconstruction only; good enough for plumbing tests."""
    from nern.embedding import EmbeddingConfig
    from nern.predictor import init_nern
    from nern.trainer import TrainConfig, TrainState, train_nern

    pred = init_nern(desk_net.catalog, desk_net.weight_stats(), 32, EmbeddingConfig(), seed=0)
    cfg = TrainConfig(alpha=0, beta=0, iterations=300, seed=0)
    train_nern(TrainState(pred, desk_net, desk_data, cfg))
    return pred


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
