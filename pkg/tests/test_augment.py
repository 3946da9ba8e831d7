import time

import numpy as np
import pytest

from acbc.augment import (
    UnsupportedSetError,
    build_product,
    build_reach_regions,
    build_safety_regions,
    check_initial_assumption,
    complement_pieces,
    partner_name,
)
from acbc.sysmodel import load_spec, sample_set


def test_partner_names():
    assert partner_name("x1") == "xh1"
    assert partner_name("T2") == "Th2"
    assert partner_name("v") == "vh"


def test_product_spaces(vehicle_aug):
    assert vehicle_aug.full_space.names == ("x1", "x2", "xh1", "xh2", "u1", "uh1")
    assert vehicle_aug.pair_space.names == ("x1", "x2", "xh1", "xh2")
    assert len(vehicle_aug.dynamics) == 4


def test_paired_dynamics_match_base(vehicle, vehicle_aug):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, xh = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
        u, uh = rng.uniform(-0.05, 0.05, 1), rng.uniform(-0.05, 0.05, 1)
        z = np.concatenate([x, xh, u, uh])
        nxt = [f.evaluate(z) for f in vehicle_aug.dynamics]
        assert np.array_equal(nxt[:2], vehicle.step(x, u))
        assert np.array_equal(nxt[2:], vehicle.step(xh, uh))


def test_vehicle_initial_region(vehicle_regions):
    R0 = vehicle_regions.R0
    assert R0.contains([0.5, 0.0, 1.2, 0.0])
    assert not R0.contains([0.5, 0.0, 1.6, 0.0])      # gap above delta
    assert not R0.contains([0.5, 0.0, 0.8, 0.0])      # partner inside the secret set
    bb = R0.bounding_box()
    assert bb[2] == (1.0, 10.0) and bb[1] == (0.0, 0.0)


def test_vehicle_unsafe_region(vehicle_regions):
    Ru = vehicle_regions.Ru
    assert Ru.contains([0.0, 0.0, 1.2, 0.0])
    assert not Ru.contains([0.0, 0.0, 1.0, 0.0])
    assert not Ru.contains([0.0, 0.0, 11.0, 0.0])     # outside X x X
    with pytest.raises(ValueError):
        build_safety_regions(build_product(load_spec_vehicle()), 0.0)


def load_spec_vehicle():
    from conftest import DATA
    return load_spec(DATA / "vehicle.json")


def test_r0_samples_respect_gap(vehicle_regions):
    pts = sample_set(vehicle_regions.R0, count=2000, seed=1)
    assert ((pts[:, 0] - pts[:, 2]) ** 2 <= 1.0 + 1e-12).all()


def test_assumption_holds_at_one(vehicle):
    rep = check_initial_assumption(vehicle)
    assert rep.holds and rep.witness is None


def test_assumption_fails_below_one(vehicle):
    t0 = time.perf_counter()
    rep = check_initial_assumption(vehicle.with_delta(0.9))
    assert time.perf_counter() - t0 < 5.0
    assert not rep.holds
    assert rep.witness[0] < 0.1 and rep.witness[1] == 0.0
    assert rep.worst_gap > 0.9


def test_assumption_vacuous(vehicle):
    sys_ = load_spec_vehicle()
    from acbc.sysmodel import system_from_dict
    doc = dict(sys_.source)
    doc["secret_set"] = {"box": [[0, 1], [0.05, 0.1]]}
    rep = check_initial_assumption(system_from_dict(doc))
    assert rep.holds and rep.vacuous


def test_complement_pieces_drop_unreachable_faces(vehicle):
    pieces = complement_pieces(vehicle.X0, vehicle.Xs)
    assert len(pieces) == 1
    assert pieces[0].box[0] == (1.0, 10.0)


def test_room_reach_regions(room_reach):
    assert len(room_reach.boundary.union) == 4
    assert room_reach.warnings == ()
    face_pins = []
    for f in room_reach.boundary.union:
        pinned = [i for i, (lo, hi) in enumerate(f.box) if lo == hi]
        face_pins.append(pinned[0])
    # faces live on the monitored output coordinate T2 and its partner Th2
    assert sorted(set(face_pins)) == [1, 3]


def test_room_first_coordinate_variant(data_dir):
    aug = build_product(load_spec(data_dir / "room_first_coordinate.json"))
    regions = build_reach_regions(aug, 0.01)
    assert len(regions.boundary.union) == 4
    assert any("T1" in w for w in regions.warnings)
    assert regions.gap.variables_used() == ("T1", "Th1")


def test_reach_needs_bounded_box(vehicle):
    from acbc.sysmodel import system_from_dict
    doc = dict(vehicle.source)
    doc["state_set"] = {"inequalities": ["10 - x1", "x1", "x2", "0.1 - x2"]}
    aug = build_product(system_from_dict(doc, check_inclusion=False))
    with pytest.raises(UnsupportedSetError):
        build_reach_regions(aug)
