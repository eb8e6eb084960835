import math

import pytest

from qdavpr.config import TrainConfig
from qdavpr.train import lr_at

DEFAULT = TrainConfig()


@pytest.mark.parametrize(
    "epoch, expected",
    [
        (0.0, 0.0),
        (5.0, 1.5e-4),
        (10.0, 3e-4),
        (19.9, 3e-4),
        (20.0, 3e-5),
        (29.5, 3e-5),
        (30.0, 3e-6),
        (39.0, 3e-6),
    ],
)
def test_default_schedule(epoch, expected):
    assert math.isclose(lr_at(epoch, DEFAULT), expected, rel_tol=1e-9, abs_tol=1e-15)


def test_warmup_is_monotone():
    values = [lr_at(step / 10, DEFAULT) for step in range(101)]

    assert all(a < b for a, b in zip(values, values[1:]))


def test_without_warmup():
    config = TrainConfig(warmup_epochs=0, decay_every=2, decay_factor=0.5, base_lr=1.0)

    assert [lr_at(float(epoch), config) for epoch in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]
