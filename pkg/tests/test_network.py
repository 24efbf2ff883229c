import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seslease.network import (DnScenario, NetworkError, load_network, read_feeder, voltage_profile,
                              voltage_sensitivities, write_feeder)

from conftest import chain


def test_two_bus_injection_raises_far_end():
    net = chain(2)
    v = voltage_profile(net, DnScenario(np.array([0.0, 0.1])))
    assert v[0] == pytest.approx(1.0)
    assert v[1] == pytest.approx(1.002, abs=1e-12)


def test_three_bus_chain():
    net = chain(3)
    v = voltage_profile(net, DnScenario(np.array([0.0, 0.0, 0.1])))
    assert v[1:] == pytest.approx([1.002, 1.004], abs=1e-12)


def test_zero_injection_is_flat():
    net = chain(5)
    v = voltage_profile(net, DnScenario(np.zeros(5), v_set=1.01))
    assert np.allclose(v, 1.01, atol=1e-14)


def test_sensitivity_entries():
    S = voltage_sensitivities(chain(2))
    assert S[1, 1] == pytest.approx(0.02)
    star = load_network({"buses": [{"id": i, "v_min": 0.9, "v_max": 1.1} for i in (1, 2, 3)],
                         "branches": [{"parent": 1, "child": 2, "r": 0.01, "x": 0.0},
                                      {"parent": 1, "child": 3, "r": 0.03, "x": 0.0}]})
    S = voltage_sensitivities(star)
    assert S[1, 2] == 0.0 and S[2, 1] == 0.0
    assert S[2, 2] == pytest.approx(0.06)


def test_profile_matches_sensitivity_form(case69):
    net = case69.net
    S = voltage_sensitivities(net)
    rng = np.random.default_rng(3)
    p = rng.normal(scale=0.05, size=(net.n_bus, 100))
    p[0] = 0.0
    v = voltage_profile(net, DnScenario(p, v_set=1.0))
    expect = 1.0 + S @ p + net.voltage_offset()[:, None]
    assert np.max(np.abs(v - expect)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.2, 0.2), min_size=4, max_size=4), st.lists(st.floats(-0.2, 0.2), min_size=4, max_size=4),
       st.floats(-3, 3))
def test_linear_in_injections(a, b, k):
    net = chain(5)
    pa, pb = np.r_[0.0, a], np.r_[0.0, b]
    f = lambda p: voltage_profile(net, DnScenario(p, v_set=0.0))
    assert np.allclose(f(pa + k * pb), f(pa) + k * f(pb), atol=1e-12)


def test_more_injection_never_lowers_voltage():
    net = chain(6)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = np.r_[0.0, rng.normal(size=5) * 0.1]
        bump = np.r_[0.0, rng.random(5) * 0.1]
        assert np.all(voltage_profile(net, DnScenario(p + bump)) >= voltage_profile(net, DnScenario(p)) - 1e-15)


def test_cycle_rejected():
    buses = [{"id": i, "v_min": 0.9, "v_max": 1.1} for i in (1, 2, 3)]
    br = [{"parent": 1, "child": 2, "r": 0.01, "x": 0.01}, {"parent": 2, "child": 3, "r": 0.01, "x": 0.01},
          {"parent": 3, "child": 1, "r": 0.01, "x": 0.01}]
    with pytest.raises(NetworkError, match="cycle"):
        load_network({"buses": buses, "branches": br})


def test_duplicate_branch_rejected():
    buses = [{"id": i, "v_min": 0.9, "v_max": 1.1} for i in (1, 2, 3)]
    br = [{"parent": 1, "child": 2, "r": 0.01, "x": 0.01}, {"parent": 2, "child": 1, "r": 0.02, "x": 0.01}]
    with pytest.raises(NetworkError, match="duplicate"):
        load_network({"buses": buses, "branches": br})


def test_disconnected_and_bad_bounds_rejected():
    with pytest.raises(NetworkError):
        load_network({"buses": [{"id": 1, "v_min": 0.9, "v_max": 1.1}, {"id": 2, "v_min": 0.9, "v_max": 1.1}],
                      "branches": []})
    with pytest.raises(NetworkError):
        load_network({"buses": [{"id": 1, "v_min": 1.1, "v_max": 0.9}], "branches": []})


def test_feeder69_shape(case69):
    assert case69.net.n_bus == 69
    assert len(case69.net.branches) == 68


def test_feeder_round_trip(tmp_path, case69):
    path = tmp_path / "feeder.txt"
    write_feeder(case69.net, path)
    back = read_feeder(path)
    assert back.n_bus == case69.net.n_bus
    assert np.array_equal(back.r, case69.net.r) and np.array_equal(back.parent, case69.net.parent)
    assert np.array_equal(voltage_sensitivities(back), voltage_sensitivities(case69.net))


def test_branch_orientation_normalized():
    net = load_network({"buses": [{"id": 1, "v_min": 0.9, "v_max": 1.1}, {"id": 2, "v_min": 0.9, "v_max": 1.1}],
                        "branches": [{"parent": 2, "child": 1, "r": 0.01, "x": 0.02}]})
    assert net.branches[0].parent == 1 and net.branches[0].child == 2
