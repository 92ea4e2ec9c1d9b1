import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gengap import spiral_gen as sg
from gengap.spiral_gen import SpiralSpec


@pytest.mark.parametrize("u, arm, k, expected", [
    (0.0, "blue", 1, (0.0, 0.0)),
    (0.5, "blue", 1, (-0.5, 0.0)),
    (0.5, "red", 1, (0.5, 0.0)),
])
def test_arm_point_examples(u, arm, k, expected):
    assert sg.arm_point(u, arm, k) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("u, k", [(-0.1, 1), (1.5, 1), (0.5, 0)])
def test_arm_point_domain_errors(u, k):
    with pytest.raises(ValueError):
        sg.arm_point(u, "blue", k)


@given(u=st.floats(0, 1), k=st.integers(1, 5))
def test_red_arm_is_blue_rotated(u, k):
    bx, by = sg.arm_point(u, "blue", k)
    rx, ry = sg.arm_point(u, "red", k)
    assert (rx, ry) == (-bx, -by)
    assert bx * bx + by * by <= 1 + 1e-12


def test_noiseless_train_set():
    ds = sg.generate(SpiralSpec(loops=1, noise_sigma=0.0, num_train=50, data_seed=1), 50, "train")
    assert len(ds) == 50
    assert (ds.y == 1).sum() == 25 and (ds.y == -1).sum() == 25
    assert np.all(np.sum(ds.X ** 2, axis=1) <= 1 + 1e-12)


def test_generate_is_deterministic():
    spec = SpiralSpec(3, 0.15, 200, 4)
    a, b = sg.generate(spec, 200, "train"), sg.generate(spec, 200, "train")
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_train_and_test_streams_differ():
    spec = SpiralSpec(2, 0.05, 100, 3)
    train, test = sg.generate(spec, 100, "train"), sg.generate(spec, 100, "test")
    assert not np.array_equal(train.X, test.X)


def test_large_test_set_balance_and_radius():
    sigma = 0.05
    ds = sg.generate(SpiralSpec(2, sigma, 100, 3), 10_000, "test")
    assert (ds.y == 1).sum() == 5000 and (ds.y == -1).sum() == 5000
    # |noise| for isotropic 2-D Gaussian is Rayleigh: P(|noise| > 4 sigma) = exp(-8)
    tail = math.exp(-8)
    inside = np.mean(np.hypot(ds.X[:, 0], ds.X[:, 1]) <= 1 + 4 * sigma)
    assert inside >= 1 - tail - 0.005
    assert inside >= 0.99


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        sg.generate(SpiralSpec(1, 0.0, 50, 1), 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 400), k=st.integers(1, 3), seed=st.integers(0, 10))
def test_label_balance_and_unit_disk(n, k, seed):
    ds = sg.generate(SpiralSpec(k, 0.0, 50, seed), n, "train")
    assert abs(int((ds.y == 1).sum()) - int((ds.y == -1).sum())) <= 1
    assert np.all(np.sum(ds.X ** 2, axis=1) <= 1 + 1e-12)


def test_full_preset_specs():
    specs = sg.full_preset_specs()
    assert len(specs) == 135
    assert len({s.variation for s in specs}) == 27
    assert {s.data_seed for s in specs} == {1, 2, 3, 4, 5}


def test_spec_parse():
    assert SpiralSpec.parse("k=2,sigma=0.05,m=100,seed=3") == SpiralSpec(2, 0.05, 100, 3)
    with pytest.raises(ValueError):
        SpiralSpec.parse("k=2,sigma=0.05")


def test_jsonl_round_trip(tmp_path):
    ds = sg.generate(SpiralSpec(2, 0.05, 50, 1))
    path = tmp_path / "d.jsonl"
    sg.write_jsonl(ds, path)
    back = sg.read_jsonl(path)
    assert back.spec == ds.spec
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
