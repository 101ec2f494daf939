"""Acceptance criteria 1-12, each at its stated tolerance and size.

Every test records one PASS/FAIL line; pytest prints them in a summary
section, and running this file directly prints them as they complete.
"""
import time
import warnings

import numpy as np

from drbsde import registry
from drbsde.bsde_lsmc import (PenalizationSchedule, check_skorokhod, solve_bsde,
                              solve_double_barrier_direct, solve_double_barrier_penalized,
                              solve_one_barrier_penalized)
from drbsde.core import TimeGrid
from drbsde.forward_sde import SdeSpec, brownian, simulate_paths
from drbsde.game import (GameSpec, benchmark_game, girsanov_weight, hamiltonian_saddle,
                         solve_game_bsde, star_profile, verify_saddle)
from drbsde.obstacle_pde import (PdeSpec, SpaceGrid, exp_time_transform,
                                 solve_double_obstacle_vi, solve_penalized_pde,
                                 solve_transformed)

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []

N_SE = 3.0


def record(number, title, passed, detail, elapsed, budget=None):
    ok = bool(passed) and (budget is None or elapsed < budget)
    timing = f"{elapsed:.2f}s" + (f" (budget {budget:g}s)" if budget else "")
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} | {detail} | {timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def clamped_case():
    return registry.zero(), registry.const_barrier(-1.0, 1.0), registry.clamp_terminal()


def clamped_pde(nx=400, N=200):
    gen, bar, term = clamped_case()
    spec = PdeSpec.from_sde(brownian(), gen, term, bar)
    return spec, SpaceGrid.around(0.0, 1.0, 1.0, nx), TimeGrid(1.0, N)


def test_criterion_01_log_generator_closed_form():
    t0 = time.perf_counter()
    sde = SdeSpec(1, [0.0], vol=lambda t, x: np.zeros((1, 1)))
    ens = simulate_paths(sde, TimeGrid(1.0, 200), 1, seed=0)
    sol = solve_bsde(registry.neg_y_log_y(K=1.0), registry.constant_terminal(np.e), ens)
    oracle = np.exp(np.log(np.e) * np.exp(-1.0))
    err = abs(sol.Y0 - oracle)
    record(1, "log-generator closed form", err <= 5e-3,
           f"Y0={sol.Y0:.6f} oracle={oracle:.6f} err={err:.2e} tol=5e-3",
           time.perf_counter() - t0, budget=1.0)


def test_criterion_02_zero_solution():
    t0 = time.perf_counter()
    gen, bar = registry.zero(), registry.const_barrier(-1.0, 1.0)
    xi = registry.constant_terminal(0.0)
    ens = simulate_paths(brownian(), TimeGrid(1.0, 20), 500, seed=2)
    sols = {"bsde": [solve_bsde(gen, xi, ens)],
            "one-barrier": solve_one_barrier_penalized(gen, xi, bar, ens),
            "increasing": solve_double_barrier_penalized(gen, xi, bar, ens, direction="increasing"),
            "decreasing": solve_double_barrier_penalized(gen, xi, bar, ens, direction="decreasing"),
            "direct": [solve_double_barrier_direct(gen, xi, bar, ens)]}
    worst = 0.0
    for group in sols.values():
        for s in group:
            worst = max(worst, *(float(np.max(np.abs(a))) for a in (s.Y, s.Z, s.Kplus, s.Kminus)))
    spec = PdeSpec.from_sde(brownian(), gen, xi, bar)
    xg, tg = SpaceGrid.around(0.0, 1.0, 1.0, 101), TimeGrid(1.0, 50)
    pde = [solve_double_obstacle_vi(spec, xg, tg), solve_penalized_pde(spec, xg, tg, 100.0)]
    worst_pde = max(float(np.max(np.abs(v.u))) for v in pde)
    passed = worst <= 1e-10 and worst_pde <= 1e-10
    record(2, "zero solution in all schemes", passed,
           f"max|Y,Z,K+,K-| over {sum(map(len, sols.values()))} LSMC runs={worst:.1e}, "
           f"FD max|u|={worst_pde:.1e} tol=1e-10", time.perf_counter() - t0, budget=1.0)


def test_criterion_03_penalization_monotone():
    t0 = time.perf_counter()
    gen, bar, term = clamped_case()
    ens = simulate_paths(brownian(), TimeGrid(1.0, 50), 20_000, seed=3)
    levels = solve_double_barrier_penalized(gen, term, bar, ens, direction="increasing")
    y0 = [s.Y0 for s in levels]
    se = [s.meta["SE"] for s in levels]
    excess = max(y0[k] - y0[k + 1] - N_SE * np.hypot(se[k], se[k + 1]) for k in range(len(y0) - 1))
    residual = levels[-1].meta["sup_residual_lower"]
    record(3, "penalization monotone convergence", excess <= 0 and residual <= 0.02,
           f"Y0(n=1)={y0[0]:.4f} -> Y0(n=1024)={y0[-1]:.4f}, worst drop beyond 3SE={excess:.2e}, "
           f"final sup(L-Y)^+={residual:.1e} tol=0.02", time.perf_counter() - t0, budget=60.0)


def test_criterion_04_skorokhod_flat_off():
    t0 = time.perf_counter()
    gen, bar, term = clamped_case()
    ens = simulate_paths(brownian(), TimeGrid(1.0, 50), 50_000, seed=4)
    sol = solve_double_barrier_direct(gen, term, bar, ens)
    rep = check_skorokhod(sol, bar, ens, tol=1e-8)
    pushed = int(np.sum((sol.Kplus[:, -1] > 0) | (sol.Kminus[:, -1] > 0)))
    record(4, "Skorokhod flat-off", rep.passed,
           f"max residual lower={rep.residual_lower.max():.1e} upper={rep.residual_upper.max():.1e}, "
           f"paths with pushes={pushed}, failing={rep.failing_paths.size}",
           time.perf_counter() - t0, budget=10.0)


def test_criterion_05_bsde_pde_cross_validation():
    t0 = time.perf_counter()
    gen, bar, term = clamped_case()
    ens = simulate_paths(brownian(), TimeGrid(1.0, 50), 50_000, seed=5)
    sol = solve_double_barrier_direct(gen, term, bar, ens)
    u00 = float(solve_double_obstacle_vi(*clamped_pde(nx=400)).value(0.0))
    gap = abs(sol.Y0 - u00)
    record(5, "BSDE <-> PDE cross-validation", gap <= 0.03,
           f"Y0_lsmc={sol.Y0:.5f} (SE {sol.meta['SE']:.1e}) u_fd(0,0)={u00:.5f} gap={gap:.2e} tol=0.03",
           time.perf_counter() - t0, budget=60.0)


def test_criterion_06_increasing_decreasing_agreement():
    t0 = time.perf_counter()
    gen, bar, term = clamped_case()
    ens = simulate_paths(brownian(), TimeGrid(1.0, 50), 50_000, seed=5)
    sched = PenalizationSchedule()
    inc = solve_double_barrier_penalized(gen, term, bar, ens, sched=sched, direction="increasing")[-1]
    dec = solve_double_barrier_penalized(gen, term, bar, ens, sched=sched, direction="decreasing")[-1]
    gap = abs(inc.Y0 - dec.Y0)
    record(6, "increasing/decreasing agreement", gap <= 0.05,
           f"n={sched.levels[-1]:g}: Y0_inc={inc.Y0:.5f} Y0_dec={dec.Y0:.5f} gap={gap:.2e} tol=0.05",
           time.perf_counter() - t0, budget=120.0)


def test_criterion_07_comparison_property():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations, worst = 0, -np.inf
    for k in range(20):
        K, C, c = rng.uniform(0, 2), rng.uniform(0, 1), rng.uniform(1e-3, 1.0)
        shift = rng.uniform(-0.5, 0.5)
        lo = rng.uniform(-1.5, -0.5)
        hi = rng.uniform(0.5, 1.5)
        bar = registry.const_barrier(lo, hi)
        term = registry.clamp_terminal(lo, hi)
        ens = simulate_paths(brownian(), TimeGrid(1.0, 20), 2000, seed=100 + k)
        f = registry.log_mixed(K=K, C=C, shift=shift)
        fp = registry.log_mixed(K=K, C=C, shift=shift + c)
        a = solve_double_barrier_direct(f, term, bar, ens)
        b = solve_double_barrier_direct(fp, term, bar, ens)
        margin = a.Y0 - b.Y0 - N_SE * np.hypot(a.meta["SE"], b.meta["SE"])
        worst = max(worst, margin)
        violations += margin > 0
    record(7, "comparison property", violations == 0,
           f"20 pairs f' = f + c, violations={violations}, worst Y0-Y0'-3SE={worst:.3f}",
           time.perf_counter() - t0)


def test_criterion_08_pde_penalization_squeeze():
    t0 = time.perf_counter()
    levels = (10.0, 100.0, 1000.0, 10000.0)
    parts = []
    passed = True
    cases = {"clamped": clamped_pde(nx=400),
             "binding band": (PdeSpec.from_sde(brownian(), registry.neg_y_log_y(K=1.0, shift=0.5),
                                               registry.clamp_terminal(), registry.clamp_band(-1, 1, 0.3)),
                              SpaceGrid.around(0.0, 1.0, 1.0, 400), TimeGrid(1.0, 200))}
    for name, (spec, xg, tg) in cases.items():
        vi = solve_double_obstacle_vi(spec, xg, tg)
        gaps = [float(np.max(np.abs(solve_penalized_pde(spec, xg, tg, n).u - vi.u))) for n in levels]
        # round-off slack only: the clamped case sits at machine precision
        mono = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
        passed &= mono and gaps[-1] <= 1e-2
        parts.append(f"{name}: " + ", ".join(f"{g:.1e}" for g in gaps))
    record(8, "PDE penalization squeeze", passed, "; ".join(parts) + " (final tol 1e-2)",
           time.perf_counter() - t0, budget=30.0)


def test_criterion_09_time_transform_round_trip():
    t0 = time.perf_counter()
    spec, xg, _ = clamped_pde(nx=400)
    tg = TimeGrid(1.0, 1000)
    direct = solve_double_obstacle_vi(spec, xg, tg)
    trip = exp_time_transform(exp_time_transform(direct, "forward"), "inverse")
    rt = float(np.max(np.abs(trip.u - direct.u)))
    back = exp_time_transform(solve_transformed(spec, xg, tg), "inverse")
    gap = float(np.max(np.abs(back.u - direct.u)))
    record(9, "time-transform round trip", rt <= 1e-12 and gap <= 1e-3,
           f"inverse o forward err={rt:.1e} tol=1e-12; transformed vs direct={gap:.2e} tol=1e-3 (N=1000)",
           time.perf_counter() - t0)


def test_criterion_10_isaacs_separable_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst_gap = 0.0
    for _ in range(50):
        ug = rng.uniform(-3, 3, rng.integers(1, 8)).tolist()
        vg = rng.uniform(-3, 3, rng.integers(1, 8)).tolist()
        a, b, c = rng.normal(size=3)
        spec = GameSpec(brownian(), lambda t, x, u, v: np.full_like(x, a * u + b * v),
                        lambda t, x, u, v: np.full(x.shape[0], c * u ** 2 - v ** 3), ug, vg,
                        registry.const_barrier(), registry.constant_terminal(0.0))
        res = hamiltonian_saddle(spec, 0.0, rng.normal(size=(64, 1)), rng.normal(scale=3, size=(64, 1)))
        worst_gap = max(worst_gap, float(np.max(np.abs(res.isaacs_gap))))
    mismatches = 0
    for _ in range(50):
        table = rng.integers(-5, 6, size=(3, 3)).astype(float)
        spec = GameSpec(brownian(), lambda t, x, u, v: np.zeros_like(x),
                        lambda t, x, u, v, T=table: np.full(x.shape[0], T[u, v]), [0, 1, 2], [0, 1, 2],
                        registry.const_barrier(), registry.constant_terminal(0.0))
        res = hamiltonian_saddle(spec, 0.0, np.zeros((1, 1)), np.zeros((1, 1)))
        infsup = min(max(table[i, j] for j in range(3)) for i in range(3))
        supinf = max(min(table[i, j] for i in range(3)) for j in range(3))
        u_star = min(range(3), key=lambda i: (max(table[i]), i))
        v_star = min(range(3), key=lambda j: (-table[u_star, j], j))
        mismatches += not (res.H_star[0] == infsup and res.isaacs_gap[0] == infsup - supinf
                           and res.u_idx[0] == u_star and res.v_idx[0] == v_star)
    record(10, "Isaacs separable exactness", worst_gap == 0.0 and mismatches == 0,
           f"separable gap max={worst_gap:.1e} over 50 random grids; "
           f"3x3 enumeration mismatches={mismatches}/50", time.perf_counter() - t0)


def test_criterion_11_girsanov_martingale():
    t0 = time.perf_counter()
    spec = GameSpec(brownian(), lambda t, x, u, v: np.ones_like(x),
                    lambda t, x, u, v: np.zeros(x.shape[0]), [0.0], [0.0],
                    registry.const_barrier(), registry.constant_terminal(0.0))
    ens = simulate_paths(brownian(), TimeGrid(1.0, 50), 100_000, seed=11)
    idx = np.zeros((ens.M, ens.grid.N), dtype=int)
    w = girsanov_weight(spec, ens, idx, idx)
    dev = abs(w.mean - 1.0)
    record(11, "Girsanov martingale check", dev <= N_SE * w.SE and np.all(w.weights > 0),
           f"mean weight={w.mean:.5f} SE={w.SE:.1e} |mean-1|={dev:.1e} band={N_SE * w.SE:.1e}",
           time.perf_counter() - t0)


def test_criterion_12_saddle_bracketing():
    t0 = time.perf_counter()
    spec = benchmark_game()
    ens = simulate_paths(spec.sde, TimeGrid(1.0, 50), 50_000, seed=12)
    gs = solve_game_bsde(spec, ens)
    star = star_profile(spec, ens, gs)
    rep = verify_saddle(spec, ens, star, gs.sol.Y0, perturbations=10, seed=12,
                        n_se=N_SE, isaacs_gap_max=gs.isaacs_gap_max)
    band = N_SE * rep.SE + 0.03
    passed = (rep.violations_lower == 0 and rep.violations_upper == 0
              and len(rep.lower_side) == 10 and len(rep.upper_side) == 10
              and rep.value_gap <= band)
    record(12, "saddle bracketing", passed,
           f"Y0*={rep.Y0:.4f} J*={rep.J_star:.4f} SE={rep.SE:.1e} |J*-Y0*|={rep.value_gap:.1e} "
           f"band={band:.3f}; violations lower={rep.violations_lower}/10 upper={rep.violations_upper}/10",
           time.perf_counter() - t0, budget=120.0)


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fn()
            except AssertionError:
                failed += 1
    raise SystemExit(1 if failed else 0)
