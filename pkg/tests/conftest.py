import os
import textwrap

import numpy as np
import pytest

from brwmf import model, pressure, rng, tree

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LOG2 = np.log(2.0)


@pytest.fixture
def binary():
    return model.ModelSpec.binary_rademacher()


@pytest.fixture
def gaussian():
    return model.ModelSpec.shifted_poisson_gaussian(1.0, [0.0], 1.0)


@pytest.fixture
def gaussian2():
    return model.ModelSpec.shifted_poisson_gaussian(1.0, [0.0, 0.0], 1.0)


@pytest.fixture
def discrete():
    return model.ModelSpec.fixed_fan_discrete(3, [-1.0, 0.0, 2.0], [0.25, 0.5, 0.25])


@pytest.fixture
def binary_run(binary):
    return tree.run_to_depth(binary, 10, rng.stream(1), mode=tree.MATERIALIZE)


@pytest.fixture
def gaussian_run(gaussian):
    return tree.run_to_depth(gaussian, 8, rng.stream(2), mode=tree.MATERIALIZE)


@pytest.fixture
def line_grid():
    def build(lower, upper, points):
        return pressure.QGrid.box([lower], [upper], [points])
    return build


@pytest.fixture
def write_config(tmp_path):
    """Writes a YAML config to tmp_path and returns its path."""
    def write(text, name="config.yml"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(text))
        return str(path)
    return write
