"""Acceptance criteria 1-8, one test each.

Every test records a verdict line (printed in the terminal summary) before
asserting.  The desk-scale preset runs take over an hour on one core, so
their summaries are cached in ``.acceptance_cache`` keyed by the run
configuration and a hash of the numerical sources; set
``GMSPHERE_ACCEPTANCE_FRESH=1`` to ignore the cache.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

import gmsphere
from gmsphere.fct import FctWorkspace, zalesak_limit
from gmsphere.fem import build_operators
from gmsphere.integrator import Integrator
from gmsphere.mesh import build_cubed_sphere, mean_edge_length
from gmsphere.reaction import ModelParams
from gmsphere.sim import SimulationAborted, initial_state, preset_configs, run_case, spatial_study, temporal_study
from gmsphere.stepping import ode_rates, ode_step_euler, patankar_theta, step

from conftest import VERDICTS
from oracles import ssp_rk2

PKG_DIR = Path(gmsphere.__file__).parent
CACHE_DIR = Path(__file__).resolve().parent.parent / ".acceptance_cache"
NUMERICAL_SOURCES = ("mesh", "linalg", "fem", "reaction", "fct", "stepping", "integrator", "sim")

REFERENCE_MAX_U = 1.996
POSITIVITY_BUDGET_S = 30 * 60


def verdict(key, ok, detail):
    VERDICTS[key] = (bool(ok), detail)
    assert ok, detail


def source_hash():
    h = hashlib.sha256()
    for name in NUMERICAL_SOURCES:
        h.update((PKG_DIR / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def run_preset(config, ops):
    """Summary of one desk-scale preset, from the cache when the sources and config are unchanged."""
    config = config.replace(write_files=False)
    key = hashlib.sha256((config.to_text() + source_hash()).encode()).hexdigest()[:16]
    path = CACHE_DIR / f"{config.name}-{key}.json"
    if path.exists() and os.environ.get("GMSPHERE_ACCEPTANCE_FRESH") != "1":
        return json.loads(path.read_text())
    try:
        res = run_case(config, ops)
    except SimulationAborted as exc:
        res = exc.result
    out = {
        "name": config.name, "ok": res.ok, "aborted": res.aborted, "steps": res.steps, "t": res.t,
        "min_u_seen": res.min_u_seen, "min_v_seen": res.min_v_seen, "min_w_seen": res.min_w_seen,
        "u_max": res.u_max, "pattern": res.pattern, "steady": res.steady,
        "spike_locations": res.spike_locations.tolist(), "spike_values": res.spike_values.tolist(),
        "runtime": res.runtime,
    }
    CACHE_DIR.mkdir(exist_ok=True)
    path.write_text(json.dumps(out, indent=1))
    return out


@pytest.fixture(scope="module")
def ops3():
    return build_operators(build_cubed_sphere(3))


@pytest.fixture(scope="module")
def presets(ops3):
    cache = {}

    def get(order):
        if order not in cache:
            cache[order] = {c.name: run_preset(c, ops3) for c in preset_configs(order)}
        return cache[order]

    return get


# ---------------------------------------------------------------- 1


def test_criterion_1_geometry_and_assembly():
    failures = []
    for level in range(5):
        ops = build_operators(build_cubed_sphere(level))
        p = ops.mesh.vertices[ops.mesh.triangles]
        area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum()
        total_m = float(ops.M.sum())
        total_ml = float(ops.M_lumped.sum())
        for name, value in (("consistent", total_m), ("lumped", total_ml)):
            if abs(value - area) > 1e-12 * area:
                failures.append(f"level {level} {name} mass {value!r} vs area {area!r}")
        rows = np.abs(np.asarray(ops.L.sum(axis=1)).ravel()).max()
        if rows > 1e-12 * abs(ops.L).max():
            failures.append(f"level {level} stiffness row sum {rows:.3e}")
    study = spatial_study((2, 3, 4))
    rq2, rq4 = np.array(study.extra["rayleigh"][0]), np.array(study.extra["rayleigh"][2])
    dev2 = float(np.abs(rq2 - 2).max() / 2)
    dev4 = float(np.abs(rq4 - 2).max() / 2)
    if dev4 > 0.02:
        failures.append(f"level-4 Rayleigh deviation {dev4:.3%}")
    if dev2 > 0.08:
        failures.append(f"level-2 Rayleigh deviation {dev2:.3%}")
    if study.order < 1.9:
        failures.append(f"spatial order {study.order:.3f}")
    detail = f"Rayleigh dev level2 {dev2:.2%}, level4 {dev4:.2%}, spatial order {study.order:.3f}"
    verdict(1, not failures, "; ".join(failures) or detail)


# ---------------------------------------------------------------- 3 and 4


def test_criterion_3_and_4_fct_conservation_and_bounds(ops3):
    cfg = preset_configs(2)[0]
    params = cfg.params().with_(gamma_area=ops3.area)
    state = initial_state(cfg, ops3.mesh)
    integ = Integrator(ops3, params, cfg.scheme())
    cons = bound = 0.0
    for _ in range(100):
        _, stats = integ.advance(state, 100)
        cons = max(cons, stats.fct_conservation_u, stats.fct_conservation_v)
        bound = max(bound, stats.fct_bound_violation_u, stats.fct_bound_violation_v)
    assert integ.steps_done == 10_000

    rng = np.random.default_rng(20240601)
    mesh = build_cubed_sphere(1)
    ml = build_operators(mesh).M_lumped
    trial_failures = 0
    for _ in range(1000):
        uL = rng.random(mesh.n_vertices) * rng.choice([1e-3, 1.0, 1e3])
        f = rng.normal(size=mesh.n_edges) * rng.choice([1e-3, 1.0, 1e3])
        dt = float(rng.uniform(1e-3, 1.0))
        ws = FctWorkspace(mesh.edges, uL, uL, uL, fluxes=f)
        alpha = zalesak_limit(ws, ml, dt)
        u = ws.stats["u_new"]
        slack = 1e-12 * np.abs(uL).max()
        ok = (np.all((alpha >= 0) & (alpha <= 1)) and np.all(u >= ws.u_min - slack) and np.all(u <= ws.u_max + slack)
              and abs(ml @ u - ml @ uL) <= 1e-12 * (ml @ uL))
        trial_failures += not ok

    VERDICTS[3] = (cons <= 1e-12, f"max relative mass defect over 10^4 steps {cons:.2e} (limit 1e-12)")
    VERDICTS[4] = (bound <= 1e-14 and trial_failures == 0,
                   f"max bound violation {bound:.2e} (limit 1e-14 relative), random trials failed {trial_failures}/1000")
    assert VERDICTS[3][0], VERDICTS[3][1]
    assert VERDICTS[4][0], VERDICTS[4][1]


# ---------------------------------------------------------------- 5


def test_criterion_5_temporal_order():
    first = temporal_study(1)
    second = temporal_study(2)
    ok1 = 0.9 <= first.order <= 1.1
    ok2 = 1.8 <= second.order <= 2.2
    detail = (f"order-1 slope {first.order:.3f} (errors {', '.join(f'{e:.2e}' for e in first.errors)}); "
              f"order-2 slope {second.order:.3f} (errors {', '.join(f'{e:.2e}' for e in second.errors)})")
    verdict(5, ok1 and ok2, detail)


# ---------------------------------------------------------------- 6


def test_criterion_6_theta_degeneracy():
    ops = build_operators(build_cubed_sphere(2))
    params = ModelParams(sigma=0.01).with_(gamma_area=ops.area)
    cfg = preset_configs(2, level=2)[0]
    state = initial_state(cfg, ops.mesh)
    dt = cfg.dt
    worst = 0.0
    checked = 0
    for _ in range(200):
        a, b = ode_rates(state.v, ops, params)
        w_new, th1, th2 = patankar_theta(state.w, a, b, 0.5 * dt)
        if th1 == 0.0 and th2 == 0.0:
            ref = ssp_rk2(state.w, a, b, 0.5 * dt)
            worst = max(worst, abs(w_new - ref) / abs(ref))
            checked += 1
        state = step(state, cfg.scheme(), ops, params)
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        w, a, b = rng.uniform(1e-3, 10), rng.uniform(0, 10), rng.uniform(1e-3, 10)
        h = 10 ** rng.uniform(-5, -1)
        w_new, th1, th2 = patankar_theta(w, a, b, h)
        if th1 == 0.0 and th2 == 0.0:
            ref = ssp_rk2(w, a, b, h)
            worst = max(worst, abs(w_new - ref) / abs(ref))
            checked += 1
    verdict(6, checked > 0 and worst <= 1e-14, f"{checked} theta-free steps, max relative deviation {worst:.2e}")


# ---------------------------------------------------------------- 8


def test_criterion_8_ode_closed_form():
    ops = build_operators(build_cubed_sphere(1))
    params = ModelParams(sigma=0.01, K=0.0).with_(gamma_area=ops.area)
    v = np.full(ops.M.shape[0], 0.7)
    # tau_b / dt = 1e6, so the composed factor stays near 1/e instead of underflowing
    dt = 1e-7
    w = w0 = 0.37
    n = 1_000_000
    for _ in range(n):
        w = ode_step_euler(w, v, dt, ops, params)
    factor = params.tau_b / (params.tau_b + dt)
    exact = w0 * factor**n
    drift = abs(w - exact) / exact
    verdict(8, drift <= 1e-10, f"relative drift after 10^6 steps {drift:.2e}")


# ---------------------------------------------------------------- 2 and 7 (desk-scale presets)


@pytest.mark.slow
def test_criterion_2_positivity_on_presets(presets):
    bad = []
    runtime = 0.0
    for order in (1, 2):
        for name, r in presets(order).items():
            runtime += r["runtime"]
            if not r["ok"]:
                bad.append(f"{name} aborted: {r['aborted']}")
            elif not (r["min_u_seen"] >= 0 and r["min_v_seen"] > 0 and r["min_w_seen"] > 0):
                bad.append(f"{name} minima u {r['min_u_seen']:.3e} v {r['min_v_seen']:.3e} w {r['min_w_seen']:.3e}")
    if runtime > POSITIVITY_BUDGET_S:
        bad.append(f"runtime {runtime / 60:.1f} min exceeds {POSITIVITY_BUDGET_S / 60:.0f} min")
    verdict(2, not bad, "; ".join(bad) or f"16 runs positive, {runtime / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_pattern_reproduction(presets, ops3):
    runs = presets(1)
    h = mean_edge_length(ops3.mesh)
    failures = []
    expected = {
        "spike2_180_K0.002_o1": "2-spike symmetric",
        "spike6_K0.002_o1": "2-spike symmetric",
        "spike6_K200000_o1": "2-spike symmetric",
        "random_K200000_o1": "1-spike",
    }
    labels = {name: runs[name]["pattern"] for name in expected}
    for name, label in expected.items():
        if labels[name] != label:
            failures.append(f"(a) {name}: {labels[name]!r} instead of {label!r}")

    sym = runs["spike2_180_K0.002_o1"]
    if len(sym["spike_values"]) == 2:
        x0, x1 = np.array(sym["spike_locations"])
        u0, u1 = sym["spike_values"]
        gap = float(np.linalg.norm(x0 + x1))
        spread = abs(u0 - u1) / max(u0, u1)
        if gap > h:
            failures.append(f"(b) maxima {gap:.3e} from antipodal, edge {h:.3e}")
        if spread > 0.01:
            failures.append(f"(b) maxima differ by {spread:.2%}")
    else:
        failures.append(f"(b) {len(sym['spike_values'])} maxima")

    rel = sym["u_max"] / REFERENCE_MAX_U - 1
    if abs(rel) > 0.3:
        failures.append(f"(c) max u {sym['u_max']:.4f} is {rel:+.1%} from {REFERENCE_MAX_U}")
    # the second-order runs are reported for comparison only; the verdict uses the first-order scheme
    second = {name: presets(2)[name.replace("_o1", "_o2")]["pattern"] for name in expected}
    detail = f"labels {labels}; second-order labels {second}; symmetric case max u {sym['u_max']:.4f} ({rel:+.1%} vs {REFERENCE_MAX_U})"
    verdict(7, not failures, "; ".join(failures) + (" | " if failures else "") + detail)
