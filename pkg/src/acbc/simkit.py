"""Simulation of the system and of pair trajectories, Monte-Carlo experiments, CSV export.

Every transition goes through :func:`step_many`, so re-running it on a
stored (state, input) pair reproduces the next stored state bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import AugmentedSystem, RegionBundle
from .polyalg import Polynomial
from .sysmodel import ControlSystem, sample_set

RANDOM, GREEDY = "random", "greedy"


def step_many(sys: ControlSystem, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """One transition for each row of ``X`` (k, n) with inputs ``U`` (k, m)."""
    X = np.atleast_2d(np.asarray(X, float))
    U = np.asarray(U, float).reshape(len(X), sys.m)
    if X.shape[1] != sys.n:
        raise ValueError(f"state has {X.shape[1]} entries, system has {sys.n}")
    Z = np.concatenate([X, U], axis=1)
    return np.stack([f.evaluate_many(Z) for f in sys.dynamics], axis=1)


def step(sys: ControlSystem, x, u) -> np.ndarray:
    x = np.asarray(x, float)
    u = np.asarray(u, float).ravel()
    if x.shape != (sys.n,) or u.shape != (sys.m,):
        raise ValueError(f"expected state of size {sys.n} and input of size {sys.m}")
    return step_many(sys, x[None, :], u[None, :])[0]


def output_gap(sys: ControlSystem, X: np.ndarray, Xh: np.ndarray) -> np.ndarray:
    """Euclidean output distance ||h(x) - h(xh)|| row by row."""
    X, Xh = np.atleast_2d(X), np.atleast_2d(Xh)
    d = np.stack([h.evaluate_many(X) - h.evaluate_many(Xh) for h in sys.output], axis=1)
    return np.sqrt((d * d).sum(axis=1))


@dataclass
class Trajectory:
    states: np.ndarray            # (T+1, n)
    partner_states: np.ndarray    # (T+1, n)
    inputs: np.ndarray            # (T, m)
    partner_inputs: np.ndarray    # (T, m)
    gaps: np.ndarray              # (T+1,)
    boundary_exits: list[int] = field(default_factory=list)   # steps where a copy left X
    ru_time: int | None = None    # first step inside Ru, when tracked

    def __post_init__(self):
        T = len(self.inputs)
        if not (len(self.states) == len(self.partner_states) == len(self.gaps) == T + 1
                and len(self.partner_inputs) == T):
            raise ValueError("inconsistent trajectory lengths")

    @property
    def horizon(self) -> int:
        return len(self.inputs)


# ---------------------------------------------------------------------------
# input sources


def _box(sys: ControlSystem) -> np.ndarray:
    bb = sys.U.bounding_box()
    if bb is None or not all(math.isfinite(v) for iv in bb for v in iv):
        raise ValueError("random inputs need a bounded input box")
    return np.array(bb, float).reshape(sys.m, 2)


def _draw(sys: ControlSystem, rng: np.random.Generator, k: int) -> np.ndarray:
    """Uniform draws from U (rejection inside its bounding box)."""
    if sys.m == 0:
        return np.zeros((k, 0))
    box = _box(sys)
    out = np.empty((k, sys.m))
    todo = np.arange(k)
    for _ in range(1000):
        cand = rng.uniform(box[:, 0], box[:, 1], size=(len(todo), sys.m))
        ok = sys.U.contains_many(cand)
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
        if not len(todo):
            return out
    raise ValueError("input set too thin for rejection sampling")


def _is_policy(src) -> bool:
    return isinstance(src, (list, tuple)) and len(src) > 0 and all(isinstance(p, Polynomial) for p in src)


def _eval_policy(aug: AugmentedSystem, policy, X, Xh, U, Uh) -> np.ndarray:
    if len(policy) != aug.m:
        raise ValueError(f"policy has {len(policy)} components, system has {aug.m} inputs")
    Z = np.concatenate([X, Xh, U, Uh], axis=1)
    if not len(policy):
        return np.zeros((len(X), 0))
    return np.stack([p.evaluate_many(Z) for p in policy], axis=1)


def _batch(aug: AugmentedSystem, X0, Xh0, u_src, uh_src, horizon: int, rng: np.random.Generator,
           regions: RegionBundle | None = None, greedy_grid: int | None = None) -> list[Trajectory]:
    """Simulate k pair trajectories at once.

    ``u_src``/``uh_src`` is ``None`` (uniform random from U), an input array
    of shape (horizon, m), or a policy tuple.  A ``uh`` policy sees the
    current ``u``; a ``u`` policy sees the current ``uh``.  ``greedy_grid``
    replaces random ``uh`` by the grid point minimising the next-step gap.
    """
    sys = aug.base
    k, n, m = len(X0), sys.n, sys.m
    if _is_policy(u_src) and _is_policy(uh_src):
        raise ValueError("at most one of the two input sources can be a policy")
    X = np.empty((horizon + 1, k, n))
    Xh = np.empty((horizon + 1, k, n))
    U = np.empty((horizon, k, m))
    Uh = np.empty((horizon, k, m))
    X[0], Xh[0] = X0, Xh0
    grid = _grid(sys, greedy_grid) if greedy_grid else None
    gap_poly = regions.gap if regions is not None else None

    def fixed(src, t):
        arr = np.asarray(src, float).reshape(-1, m)
        if len(arr) < horizon:
            raise ValueError(f"input sequence has {len(arr)} steps, horizon is {horizon}")
        return np.broadcast_to(arr[t], (k, m))

    for t in range(horizon):
        x, xh = X[t], Xh[t]
        if _is_policy(u_src):
            uh = _adversary(aug, x, xh, u_src, grid, gap_poly, rng, k) if uh_src is None else fixed(uh_src, t)
            u = _eval_policy(aug, u_src, x, xh, np.zeros((k, m)), uh)
        else:
            u = _draw(sys, rng, k) if u_src is None else fixed(u_src, t)
            if _is_policy(uh_src):
                uh = _eval_policy(aug, uh_src, x, xh, u, np.zeros((k, m)))
            else:
                uh = _draw(sys, rng, k) if uh_src is None else fixed(uh_src, t)
        U[t], Uh[t] = u, uh
        X[t + 1] = step_many(sys, x, u)
        Xh[t + 1] = step_many(sys, xh, uh)
    trajs = []
    for i in range(k):
        xs, xhs = X[:, i], Xh[:, i]
        inside = sys.X.contains_many(xs) & sys.X.contains_many(xhs)
        exits = [int(t) for t in np.nonzero(~inside)[0]]
        trajs.append(Trajectory(xs.copy(), xhs.copy(), U[:, i].copy(), Uh[:, i].copy(),
                                output_gap(sys, xs, xhs), exits))
    return trajs


def _grid(sys: ControlSystem, k: int) -> np.ndarray:
    box = _box(sys)
    axes = [np.linspace(lo, hi, k) for lo, hi in box]
    pts = np.array(np.meshgrid(*axes, indexing="ij")).reshape(sys.m, -1).T
    return pts[sys.U.contains_many(pts)]


def _adversary(aug, x, xh, u_policy, grid, gap_poly, rng, k) -> np.ndarray:
    sys = aug.base
    if grid is None:
        return _draw(sys, rng, k)
    # greedy: partner input on the grid that keeps the next output gap smallest
    best = np.full(k, math.inf)
    choice = np.zeros((k, sys.m))
    for g in grid:
        uh = np.broadcast_to(g, (k, sys.m))
        u = _eval_policy(aug, u_policy, x, xh, np.zeros((k, sys.m)), uh)
        nx, nxh = step_many(sys, x, u), step_many(sys, xh, uh)
        val = gap_poly.evaluate_many(np.concatenate([nx, nxh], axis=1)) if gap_poly is not None \
            else output_gap(sys, nx, nxh) ** 2
        better = val < best
        best[better] = val[better]
        choice[better] = g
    return choice


def simulate_pair(aug: AugmentedSystem, x0, xh0, u=None, uh=None, horizon: int = 100,
                  seed: int = 0) -> Trajectory:
    """One pair trajectory; ``u``/``uh`` are None (random), sequences or policies."""
    x0 = np.asarray(x0, float)
    xh0 = np.asarray(xh0, float)
    if x0.shape != (aug.n,) or xh0.shape != (aug.n,):
        raise ValueError(f"initial states must have {aug.n} entries")
    rng = np.random.default_rng(seed)
    return _batch(aug, x0[None, :], xh0[None, :], u, uh, horizon, rng)[0]


# ---------------------------------------------------------------------------
# Monte-Carlo experiments


def _ru_times(regions: RegionBundle, trajs: list[Trajectory]) -> list[np.ndarray]:
    out = []
    for tr in trajs:
        inside = regions.Ru.contains_many(np.concatenate([tr.states, tr.partner_states], axis=1))
        out.append(np.nonzero(inside)[0])
    return out


def _initial_pairs(aug: AugmentedSystem, regions: RegionBundle, trials: int, seed: int):
    pts = sample_set(regions.R0, count=trials, seed=seed, stratified=True)
    return pts[:, :aug.n], pts[:, aug.n:]


@dataclass
class SafetySummary:
    trials: int
    horizon: int
    ru_entries: int               # pair states inside Ru, summed over all steps and trials
    trials_with_entry: int
    worst_gap: float
    boundary_exits: int           # trials in which a copy left X
    policy_out_of_bounds: int     # steps whose policy output left U
    gap_exceedances: int          # steps with gap^2 >= delta^2 + margin, inside X or not
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"trials": self.trials, "horizon": self.horizon, "ru_entries": self.ru_entries,
                "trials_with_entry": self.trials_with_entry, "worst_gap": self.worst_gap,
                "boundary_exits": self.boundary_exits, "policy_out_of_bounds": self.policy_out_of_bounds,
                "gap_exceedances": self.gap_exceedances}


def monte_carlo_safety(aug: AugmentedSystem, regions: RegionBundle, cert, trials: int = 1000,
                       horizon: int = 100, seed: int = 0, keep: bool = False) -> SafetySummary:
    """Pairs from R0 under random ``u`` and the certificate's partner policy."""
    X0, Xh0 = _initial_pairs(aug, regions, trials, seed)
    rng = np.random.default_rng([seed, 1])
    trajs = _batch(aug, X0, Xh0, None, tuple(cert.policy), horizon, rng)
    times = _ru_times(regions, trajs)
    oob = sum(int((~aug.base.U.contains_many(tr.partner_inputs)).sum()) for tr in trajs) if aug.m else 0
    for tr, ts in zip(trajs, times):
        tr.ru_time = int(ts[0]) if len(ts) else None
    level = regions.delta ** 2 + regions.margin
    exceed = sum(int((regions.gap.evaluate_many(np.concatenate([tr.states, tr.partner_states], axis=1))
                      >= level).sum()) for tr in trajs)
    return SafetySummary(trials, horizon, int(sum(len(t) for t in times)),
                         int(sum(1 for t in times if len(t))),
                         float(max(tr.gaps.max() for tr in trajs)) if trajs else 0.0,
                         int(sum(1 for tr in trajs if tr.boundary_exits)), oob, exceed,
                         trajs if keep else [])


@dataclass
class ReachSummary:
    strategy: str
    trials: int
    horizon: int
    reach_count: int
    median_time: float | None
    timeouts: int
    boundary_exits: int
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "trials": self.trials, "horizon": self.horizon,
                "reach_count": self.reach_count, "median_time_to_ru": self.median_time,
                "timeouts": self.timeouts, "boundary_exits": self.boundary_exits}


def monte_carlo_reach(aug: AugmentedSystem, regions: RegionBundle, policy: Sequence[Polynomial],
                      strategy: str = RANDOM, trials: int = 100, horizon: int = 500, seed: int = 0,
                      grid: int = 5, keep: bool = False) -> ReachSummary:
    """Pairs from R0 under the fixed ``u`` policy against a partner-input adversary.

    ``random`` draws the partner input uniformly from U; ``greedy`` picks,
    at every step, the point of a ``grid``-per-axis lattice over U that
    minimises the next output gap.
    """
    if strategy not in (RANDOM, GREEDY):
        raise ValueError(f"unknown adversary strategy {strategy!r}")
    X0, Xh0 = _initial_pairs(aug, regions, trials, seed)
    rng = np.random.default_rng([seed, 2])
    trajs = _batch(aug, X0, Xh0, tuple(policy), None, horizon, rng, regions,
                   grid if strategy == GREEDY else None)
    times = _ru_times(regions, trajs)
    first = []
    for tr, ts in zip(trajs, times):
        tr.ru_time = int(ts[0]) if len(ts) else None
        if tr.ru_time is not None:
            first.append(tr.ru_time)
    med = float(np.median(first)) if first else None
    return ReachSummary(strategy, trials, horizon, len(first), med, trials - len(first),
                        int(sum(1 for tr in trajs if tr.boundary_exits)), trajs if keep else [])


# ---------------------------------------------------------------------------
# export


def csv_header(aug: AugmentedSystem) -> list[str]:
    return (["trajectory", "t"] + list(aug.x_names) + list(aug.xh_names) + list(aug.u_names)
            + list(aug.uh_names) + ["gap"])


def export_trajectories(trajectories: Sequence[Trajectory], path, aug: AugmentedSystem) -> None:
    """Concatenated CSV with a trajectory-id column; inputs are blank on the final row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(aug))
        for k, tr in enumerate(trajectories):
            T = tr.horizon
            for t in range(T + 1):
                ins = [repr(float(v)) for v in tr.inputs[t]] + [repr(float(v)) for v in tr.partner_inputs[t]] \
                    if t < T else [""] * (2 * aug.m)
                w.writerow([k, t] + [repr(float(v)) for v in tr.states[t]]
                           + [repr(float(v)) for v in tr.partner_states[t]] + ins + [repr(float(tr.gaps[t]))])
