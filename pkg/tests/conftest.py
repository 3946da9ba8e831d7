import sys
from pathlib import Path

import pytest

from acbc.augment import build_product, build_reach_regions, build_safety_regions
from acbc.sdpsolve import solve_feasibility
from acbc.soscompile import build_safety_program, compile_to_sdp, extract_certificate
from acbc.sysmodel import load_spec

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).resolve().parents[1] / "src" / "acbc" / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def vehicle():
    return load_spec(DATA / "vehicle.json")


@pytest.fixture(scope="session")
def room():
    return load_spec(DATA / "room.json")


@pytest.fixture(scope="session")
def vehicle_aug(vehicle):
    return build_product(vehicle)


@pytest.fixture(scope="session")
def vehicle_regions(vehicle_aug):
    return build_safety_regions(vehicle_aug, 0.01)


@pytest.fixture(scope="session")
def room_aug(room):
    return build_product(room)


@pytest.fixture(scope="session")
def room_reach(room_aug):
    return build_reach_regions(room_aug, 0.01)


@pytest.fixture(scope="session")
def vehicle_synthesis(vehicle_aug, vehicle_regions):
    """Safety program for the vehicle at the reference settings, solved once."""
    prog = build_safety_program(vehicle_aug, vehicle_regions, deg_b=2, deg_policy=1, eps_lo=1.0, eps_hi=1.001)
    sdp = compile_to_sdp(prog)
    sol = solve_feasibility(sdp)
    cert = extract_certificate(prog, sdp, sol) if sol.status == "feasible" else None
    return prog, sdp, sol, cert
