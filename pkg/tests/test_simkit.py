import numpy as np
import pytest

from acbc.augment import build_product, build_safety_regions
from acbc.polyalg import parse_polynomial
from acbc.simkit import (
    GREEDY,
    RANDOM,
    export_trajectories,
    monte_carlo_reach,
    monte_carlo_safety,
    output_gap,
    simulate_pair,
    step,
    step_many,
)
from acbc.soscompile import parse_fixed_policy


def test_step_examples(vehicle, room):
    assert np.allclose(step(vehicle, [0.5, 0.0], [0.05]), [0.525, 0.05], atol=1e-15)
    assert np.allclose(step(room, [21.5, 21.0], [0.0, 0.0]), [20.220, 19.799], atol=1e-12)
    with pytest.raises(ValueError):
        step(vehicle, [0.5], [0.0])


def test_fixed_point(room):
    eq = -0.008 / (1 - 0.892 - 0.05)
    assert np.allclose(step(room, [eq, eq], [0.0, 0.0]), [eq, eq], atol=1e-14)


def test_identical_pair_has_zero_gap(vehicle_aug):
    u = np.random.default_rng(0).uniform(-0.05, 0.05, (30, 1))
    tr = simulate_pair(vehicle_aug, [0.3, 0.0], [0.3, 0.0], u, u, 30)
    assert (tr.gaps == 0).all()


def test_reevaluation_invariant(vehicle_aug):
    pol = (parse_polynomial("u1 + 0.1*(x1 - xh1)", vehicle_aug.full_space),)
    tr = simulate_pair(vehicle_aug, [0.5, 0.0], [1.2, 0.0], None, pol, 50, seed=4)
    sys_ = vehicle_aug.base
    for t in range(tr.horizon):
        assert np.array_equal(step_many(sys_, tr.states[t:t + 1], tr.inputs[t:t + 1])[0], tr.states[t + 1])
        assert np.array_equal(step_many(sys_, tr.partner_states[t:t + 1], tr.partner_inputs[t:t + 1])[0],
                              tr.partner_states[t + 1])
    assert np.array_equal(tr.gaps, output_gap(sys_, tr.states, tr.partner_states))


def test_input_echo_keeps_gap(vehicle_aug):
    pol = (parse_polynomial("u1", vehicle_aug.full_space),)
    tr = simulate_pair(vehicle_aug, [0.5, 0.0], [1.2, 0.0], None, pol, 100, seed=1)
    assert tr.gaps.max() <= 1.0


def test_room_converges_to_equilibrium(room_aug):
    z = np.zeros((200, 2))
    tr = simulate_pair(room_aug, [21.8, 21.5], [21.2, 21.5], z, z, 200)
    assert np.allclose(tr.states[-1], [-0.138, -0.138], atol=1e-3)
    assert np.allclose(tr.partner_states[-1], [-0.138, -0.138], atol=1e-3)
    assert tr.boundary_exits            # the rooms cool below the state box


def test_policy_dimension_checked(room_aug):
    pol = (parse_polynomial("0", room_aug.full_space),)
    with pytest.raises(ValueError):
        simulate_pair(room_aug, [21, 21], [21, 21], pol, None, 3)


def test_monte_carlo_safety_with_certificate(vehicle_synthesis, vehicle_aug, vehicle_regions):
    s = monte_carlo_safety(vehicle_aug, vehicle_regions, vehicle_synthesis[3], trials=200, horizon=50, seed=0)
    assert s.ru_entries == 0


def test_monte_carlo_huge_delta(vehicle, vehicle_synthesis):
    aug = build_product(vehicle.with_delta(100.0))
    regions = build_safety_regions(aug)
    s = monte_carlo_safety(aug, regions, vehicle_synthesis[3], trials=20, horizon=10)
    assert s.ru_entries == 0


def test_monte_carlo_reach_strategies(room_aug, room_reach):
    pol = parse_fixed_policy("0;0", room_aug)
    rnd = monte_carlo_reach(room_aug, room_reach, pol, RANDOM, trials=30, horizon=200, seed=3)
    grd = monte_carlo_reach(room_aug, room_reach, pol, GREEDY, trials=30, horizon=200, seed=3)
    assert grd.reach_count <= rnd.reach_count
    assert rnd.reach_count + rnd.timeouts == 30
    with pytest.raises(ValueError):
        monte_carlo_reach(room_aug, room_reach, pol, "clever", trials=2, horizon=2)


def test_reach_impossible_with_huge_delta(room):
    from acbc.augment import build_reach_regions
    aug = build_product(room.with_delta(100.0))
    regions = build_reach_regions(aug)
    r = monte_carlo_reach(aug, regions, parse_fixed_policy("0;0", aug), RANDOM, trials=10, horizon=50)
    assert r.reach_count == 0 and r.timeouts == 10 and r.median_time is None


def test_csv_export(tmp_path, vehicle_aug):
    tr = simulate_pair(vehicle_aug, [0.5, 0.0], [1.2, 0.0], None, None, 3, seed=2)
    path = tmp_path / "t.csv"
    export_trajectories([tr], path, vehicle_aug)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "trajectory,t,x1,x2,xh1,xh2,u1,uh1,gap"
    assert len(lines) == 1 + 4
    for line, t in zip(lines[1:], range(4)):
        cells = line.split(",")
        assert int(cells[1]) == t
        assert float(cells[-1]) == pytest.approx(abs(float(cells[2]) - float(cells[4])), abs=0)


def test_csv_batch_determinism(tmp_path, room_aug, room_reach):
    pol = parse_fixed_policy("0;0", room_aug)
    out = []
    for k in range(2):
        r = monte_carlo_reach(room_aug, room_reach, pol, RANDOM, trials=20, horizon=30, seed=11, keep=True)
        p = tmp_path / f"run{k}.csv"
        export_trajectories(r.trajectories, p, room_aug)
        out.append(p.read_bytes())
    assert out[0] == out[1]
    ids = {line.split(",")[0] for line in out[0].decode().splitlines()[1:]}
    assert len(ids) == 20
    assert out[0].decode().splitlines()[0].startswith("trajectory,t,T1,T2,Th1,Th2")
