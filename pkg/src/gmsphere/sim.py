"""Run configuration, initial data, experiment presets and convergence drivers."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import fsolve

from .fem import Operators, build_operators, mesh_quality_report
from .integrator import Integrator
from .io import CsvSeries, write_vtk
from .mesh import SurfaceMesh, build_cubed_sphere, mean_edge_length
from .reaction import ModelParams
from .stepping import STEP_TOL, SchemeConfig, State

log = logging.getLogger(__name__)

IC_VARIANTS = ("spike2_180", "spike2_90", "spike6", "random")
SPIKE_CENTRES = {
    "spike2_180": ((0, 0, 1), (0, 0, -1)),
    "spike2_90": ((0, 0, 1), (1, 0, 0)),
    "spike6": ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)),
}
SPIKE_THRESHOLD = 0.5
# fields whose range is below this fraction of their maximum have no spikes
FLAT_RTOL = 1e-3
STEADY_STEPS = 1000

CSV_COLUMNS = (
    "step", "t", "u_min", "u_max", "v_min", "v_max", "w", "mass_u", "mass_v",
    "alpha_min_u", "alpha_mean_u", "n_limited_u", "alpha_min_v", "alpha_mean_v", "n_limited_v",
    "fct_conservation", "fct_bound_violation", "theta_max", "rate_max",
)


class ConfigError(ValueError):
    pass


class SimulationAborted(RuntimeError):
    """A run stopped on an invariant violation; carries the partial result."""

    def __init__(self, message, step, node, result: "CaseResult"):
        super().__init__(message)
        self.step = step
        self.node = node
        self.result = result


@dataclass
class RunConfig:
    """Everything needed to reproduce one simulation.

    Files are flat ``key = value`` lines; ``#`` starts a comment.  ``sigma``
    must always be given explicitly.
    """

    name: str = "run"
    level: int = 3
    # model
    sigma: float = math.nan
    K: float = 0.002
    p: float = 2.0
    q: float = 4.0
    r: float = 3.0
    s: float = 4.0
    epsilon: float = 0.1
    D_s: float = 10.0
    tau_s: float = 0.6
    tau_b: float = 0.1
    omega_volume: float = 4.0 * math.pi / 3.0
    ode_source_scaling: str = "direct"
    check_exponents: bool = True
    # scheme
    order: int = 1
    dt: float = 1e-4
    T_end: float = 100.0
    tol: float = STEP_TOL
    limiter: str = "limit"
    prelimit: bool = False
    reaction: str = "averaged"
    # initial data
    ic: str = "spike2_180"
    amplitude: float = 0.25
    width: float = 0.3
    seed: int = 0
    v0: float = 0.1
    w0: float = 0.01
    # output
    output_dir: str = "output"
    output_every: int = 1000
    snapshot_every: int = 0
    write_files: bool = True

    @property
    def n_steps(self) -> int:
        return int(round(self.T_end / self.dt))

    def validate(self) -> "RunConfig":
        if not math.isfinite(self.sigma):
            raise ConfigError("sigma is required (the model leaves it unspecified)")
        if not self.v0 > 0:
            raise ConfigError(f"v0 must be positive, got {self.v0}")
        if not self.w0 >= 0:
            raise ConfigError(f"w0 must be nonnegative, got {self.w0}")
        if not self.amplitude >= 0:
            raise ConfigError(f"amplitude must be nonnegative, got {self.amplitude}")
        if not self.width > 0:
            raise ConfigError(f"width must be positive, got {self.width}")
        if not (self.T_end > 0 and self.dt > 0):
            raise ConfigError("T_end and dt must be positive")
        if abs(self.n_steps * self.dt - self.T_end) > 1e-9 * self.T_end:
            raise ConfigError(f"T_end = {self.T_end} is not a whole number of steps of dt = {self.dt}")
        if self.ic not in IC_VARIANTS:
            raise ConfigError(f"unknown ic {self.ic!r}; choose from {', '.join(IC_VARIANTS)}")
        if self.output_every <= 0:
            raise ConfigError("output_every must be positive")
        for name in ("output_every", "snapshot_every"):
            k = getattr(self, name)
            if k and self.n_steps % k:
                raise ConfigError(f"{name} = {k} does not divide the step count {self.n_steps}")
        self.scheme()
        self.params().validate(check_exponents=self.check_exponents)
        return self

    def params(self) -> ModelParams:
        return ModelParams(
            p=self.p, q=self.q, r=self.r, s=self.s, epsilon=self.epsilon, sigma=self.sigma, D_s=self.D_s,
            tau_s=self.tau_s, tau_b=self.tau_b, K=self.K, omega_volume=self.omega_volume,
            ode_source_scaling=self.ode_source_scaling,
        )

    def scheme(self) -> SchemeConfig:
        return SchemeConfig(dt=self.dt, order=self.order, tol=self.tol, limiter=self.limiter, prelimit=self.prelimit,
                            reaction=self.reaction)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _format_value(x):
    if isinstance(x, bool):
        return "true" if x else "false"
    return repr(x) if isinstance(x, float) else str(x)


def _coerce(name, kind, text):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {kind.__name__}") from None


_FIELD_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines on top of ``base`` (default: a fresh RunConfig)."""
    fields = {f.name: _FIELD_TYPES[f.type] for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, fields[key], value)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text()).validate()


# ---------------------------------------------------------------- initial data


def make_initial_u(variant: str, mesh: SurfaceMesh, amplitude: float, width: float, seed: int = 0) -> np.ndarray:
    """Sum of Gaussian bumps in chordal distance, or i.i.d. uniform values in ``(0, amplitude]``.

    ``random`` draws from ``numpy.random.default_rng(seed)``.
    """
    if not width > 0:
        raise ConfigError(f"width must be positive, got {width}")
    x = mesh.vertices
    if variant == "random":
        rng = np.random.default_rng(seed)
        return amplitude * (1.0 - rng.random(len(x)))
    if variant not in SPIKE_CENTRES:
        raise ConfigError(f"unknown initial condition {variant!r}")
    u = np.zeros(len(x))
    for c in SPIKE_CENTRES[variant]:
        d2 = np.sum((x - np.asarray(c, dtype=float)) ** 2, axis=1)
        u += amplitude * np.exp(-d2 / (2.0 * width**2))
    return u


def initial_state(config: RunConfig, mesh: SurfaceMesh) -> State:
    u = make_initial_u(config.ic, mesh, config.amplitude, config.width, config.seed)
    return State(u, np.full(mesh.n_vertices, float(config.v0)), float(config.w0), 0.0).check(0)


# ---------------------------------------------------------------- patterns


def spike_nodes(mesh: SurfaceMesh, u, threshold: float = SPIKE_THRESHOLD) -> np.ndarray:
    """Vertices that are strict maxima of ``u`` over their stencil and exceed ``threshold * max(u)``.

    A numerically flat field has none, even where rounding makes a vertex a strict maximum.
    """
    u = np.asarray(u)
    if u.max() - u.min() <= FLAT_RTOL * abs(u.max()):
        return np.zeros(0, dtype=np.int64)
    level = threshold * u.max()
    out = [i for i, nb in enumerate(mesh.vertex_stencils) if u[i] > level and all(u[i] > u[j] for j in nb)]
    return np.array(out, dtype=np.int64)


def classify_pattern(mesh: SurfaceMesh, u, nodes=None) -> str:
    """``"flat"``, ``"1-spike"``, ``"2-spike symmetric"`` (antipodal within one mean edge length), ``"2-spike"`` or ``"<n>-spike"``."""
    nodes = spike_nodes(mesh, u) if nodes is None else nodes
    if len(nodes) == 0:
        return "flat"
    if len(nodes) == 2:
        x0, x1 = mesh.vertices[nodes]
        if np.linalg.norm(x0 + x1) <= mean_edge_length(mesh):
            return "2-spike symmetric"
    return f"{len(nodes)}-spike"


@dataclass
class CaseResult:
    name: str
    t: float
    steps: int
    u_min: float
    u_max: float
    v_min: float
    v_max: float
    w: float
    steady: bool
    spike_count: int
    spike_nodes: np.ndarray
    spike_locations: np.ndarray
    spike_values: np.ndarray
    pattern: str
    min_u_seen: float = math.inf
    min_v_seen: float = math.inf
    min_w_seen: float = math.inf
    max_fct_conservation: float = 0.0
    max_fct_bound_violation: float = 0.0
    runtime: float = 0.0
    aborted: str = ""
    state: State | None = field(default=None, repr=False)
    mesh: SurfaceMesh | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return not self.aborted

    def summary_row(self) -> dict:
        return {
            "case": self.name, "t": self.t, "steps": self.steps, "pattern": self.pattern,
            "spikes": self.spike_count, "u_min": self.u_min, "u_max": self.u_max, "v_min": self.v_min,
            "v_max": self.v_max, "w": self.w, "steady": int(self.steady), "min_u_seen": self.min_u_seen,
            "min_v_seen": self.min_v_seen, "min_w_seen": self.min_w_seen,
            "fct_conservation": self.max_fct_conservation, "fct_bound_violation": self.max_fct_bound_violation,
            "runtime_s": self.runtime, "status": self.aborted or "ok",
        }


def _result(name, mesh, state, steps, steady, seen, runtime, aborted="") -> CaseResult:
    nodes = spike_nodes(mesh, state.u)
    return CaseResult(
        name=name, t=state.t, steps=steps,
        u_min=float(state.u.min()), u_max=float(state.u.max()),
        v_min=float(state.v.min()), v_max=float(state.v.max()), w=float(state.w),
        steady=steady, spike_count=len(nodes), spike_nodes=nodes,
        spike_locations=mesh.vertices[nodes].copy(), spike_values=state.u[nodes].copy(),
        pattern=classify_pattern(mesh, state.u, nodes),
        min_u_seen=seen["u"], min_v_seen=seen["v"], min_w_seen=seen["w"],
        max_fct_conservation=seen["cons"], max_fct_bound_violation=seen["bound"],
        runtime=runtime, aborted=aborted, state=state, mesh=mesh,
    )


def run_case(config: RunConfig, ops: Operators | None = None, progress=None) -> CaseResult:
    """Integrate to ``T_end``, writing the CSV series and VTK snapshots under ``output_dir/name``.

    Raises :class:`SimulationAborted` (holding the partial result) on any
    invariant violation.
    """
    config.validate()
    if ops is None:
        ops = build_operators(build_cubed_sphere(config.level))
    mesh = ops.mesh
    report = mesh_quality_report(ops.L)
    if report.count:
        log.warning("stiffness has %d positive off-diagonal pairs; the positivity guarantee does not apply", report.count)
    params = config.params().with_(gamma_area=ops.area).validate(check_exponents=config.check_exponents)
    state = initial_state(config, mesh)
    integrator = Integrator(ops, params, config.scheme())
    outdir = Path(config.output_dir) / config.name
    csv = None
    if config.write_files:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.txt").write_text(config.to_text())
        csv = CsvSeries(outdir / "series.csv", CSV_COLUMNS)
        write_vtk(outdir / "snapshot_000000000.vtk", mesh, {"u": state.u, "v": state.v}, f"{config.name} t=0")
    ml = ops.M_lumped
    seen = {"u": float(state.u.min()), "v": float(state.v.min()), "w": state.w, "cons": 0.0, "bound": 0.0}

    def row(step, stats):
        return {
            "step": step, "t": state.t, "u_min": state.u.min(), "u_max": state.u.max(),
            "v_min": state.v.min(), "v_max": state.v.max(), "w": state.w,
            "mass_u": float(ml @ state.u), "mass_v": float(ml @ state.v),
            "alpha_min_u": stats.alpha_min_u if stats else 1.0, "alpha_mean_u": stats.alpha_mean_u if stats else 1.0,
            "n_limited_u": stats.n_limited_u if stats else 0,
            "alpha_min_v": stats.alpha_min_v if stats else 1.0, "alpha_mean_v": stats.alpha_mean_v if stats else 1.0,
            "n_limited_v": stats.n_limited_v if stats else 0,
            "fct_conservation": max(stats.fct_conservation_u, stats.fct_conservation_v) if stats else 0.0,
            "fct_bound_violation": max(stats.fct_bound_violation_u, stats.fct_bound_violation_v) if stats else 0.0,
            "theta_max": stats.theta_max if stats else 0.0, "rate_max": stats.rate_max if stats else 0.0,
        }

    if csv:
        csv.append(row(0, None))
    start = time.perf_counter()
    n_steps = config.n_steps
    chunk = config.output_every
    if config.snapshot_every:
        chunk = math.gcd(chunk, config.snapshot_every)
    step = 0
    steady = False
    try:
        while step < n_steps:
            k = min(chunk, n_steps - step)
            try:
                _, stats = integrator.advance(state, k)
            except Exception as exc:
                failed = getattr(exc, "step", integrator.steps_done + 1)
                node = getattr(exc, "node", -1)
                msg = str(exc)
                if not msg.startswith(f"step {failed}:"):
                    msg = f"step {failed}: {msg}"
                res = _result(config.name, mesh, state, integrator.steps_done, False, seen,
                              time.perf_counter() - start, aborted=msg)
                raise SimulationAborted(f"{config.name}: aborted at node {node}, {msg}", failed, node, res) from exc
            step += k
            seen["u"] = min(seen["u"], float(state.u.min()))
            seen["v"] = min(seen["v"], float(state.v.min()))
            seen["w"] = min(seen["w"], stats.w_min)
            seen["cons"] = max(seen["cons"], stats.fct_conservation_u, stats.fct_conservation_v)
            seen["bound"] = max(seen["bound"], stats.fct_bound_violation_u, stats.fct_bound_violation_v)
            steady = integrator.steady_run >= STEADY_STEPS
            if csv and step % config.output_every == 0:
                csv.append(row(step, stats))
            if config.write_files and config.snapshot_every and step % config.snapshot_every == 0:
                write_vtk(outdir / f"snapshot_{step:09d}.vtk", mesh, {"u": state.u, "v": state.v},
                          f"{config.name} t={state.t:g}")
            if progress:
                progress(step, n_steps, state)
    finally:
        if csv:
            csv.close()
    if config.write_files:
        write_vtk(outdir / "final.vtk", mesh, {"u": state.u, "v": state.v}, f"{config.name} t={state.t:g}")
    return _result(config.name, mesh, state, step, steady, seen, time.perf_counter() - start)


# ---------------------------------------------------------------- presets

PRESET_K = (0.002, 200000.0)
PRESET_SIGMA = 0.01


def preset_configs(order: int = 1, full_scale: bool = False, **overrides) -> list[RunConfig]:
    """The eight pattern cases: four initial conditions times two coupling rates.

    Desk scale is level 3, dt = 1e-4, T = 100; ``full_scale`` switches to
    level 5, dt = 1e-5, T = 500.
    """
    base = RunConfig(sigma=PRESET_SIGMA, order=order)
    if full_scale:
        base = base.replace(level=5, dt=1e-5, T_end=500.0, output_every=10000)
    out = []
    for ic in IC_VARIANTS:
        for K in PRESET_K:
            name = f"{ic}_K{K:g}_o{order}"
            out.append(base.replace(name=name, ic=ic, K=K, **overrides))
    return out


# ---------------------------------------------------------------- convergence


def flat_equilibrium(params: ModelParams, guess=(0.27, 0.72)):
    """Spatially constant steady state ``(u, v, w)`` with nontrivial activator, by Newton iteration."""
    P = params

    def w_of(v):
        return P.ode_source_factor * P.gamma_area * v / P.ode_decay

    def F(z):
        u, v = z
        return [
            -u + u**P.p / v**P.q + P.sigma,
            -(1.0 + P.K) * v + u**P.r / (P.epsilon * v**P.s) + P.K * w_of(v) / P.omega_volume,
        ]

    (u, v), info, ier, msg = fsolve(F, guess, xtol=1e-15, full_output=True)
    if np.abs(info["fvec"]).max() > 1e-12 or not (u > 0 and v > 0):
        raise RuntimeError(f"flat equilibrium not found: {msg}")
    # tau_s was divided out of the v equation, so the residual above is exact
    return float(u), float(v), float(w_of(v))


@dataclass
class ConvergenceReport:
    kind: str
    h: list
    errors: list
    order: float
    pairwise: list
    extra: dict = field(default_factory=dict)

    def rows(self):
        return [{"h": h, "error": e} for h, e in zip(self.h, self.errors)]


TEMPORAL_DTS = (4e-3, 2e-3, 1e-3)
TEMPORAL_REF_DT = 1.25e-4
TEMPORAL_T = 0.2
TEMPORAL_LEVEL = 2
TEMPORAL_PERTURBATION = 0.1


def _fit_order(h, e):
    h, e = np.log(np.asarray(h)), np.log(np.asarray(e))
    return float(np.polyfit(h, e, 1)[0])


def temporal_study(order: int, level: int = TEMPORAL_LEVEL, T: float = TEMPORAL_T, dts=TEMPORAL_DTS,
                   ref_dt: float = TEMPORAL_REF_DT, sigma: float = PRESET_SIGMA, limiter: str = "limit",
                   reaction: str = "averaged") -> ConvergenceReport:
    """Self-convergence of one scheme on a smooth perturbation of the flat equilibrium.

    Errors are max-norm differences in ``(u, v)`` at ``T`` to the same
    scheme run with ``ref_dt``.
    """
    ops = build_operators(build_cubed_sphere(level))
    x = ops.mesh.vertices
    params = ModelParams(sigma=sigma).with_(gamma_area=ops.area)
    us, vs, ws = flat_equilibrium(params)

    def run(dt):
        s = State(us * (1 + TEMPORAL_PERTURBATION * x[:, 2]), vs * (1 + TEMPORAL_PERTURBATION * x[:, 0]), ws)
        n = int(round(T / dt))
        Integrator(ops, params, SchemeConfig(dt=dt, order=order, limiter=limiter, reaction=reaction)).advance(s, n)
        return s

    ref = run(ref_dt)
    errors = []
    for dt in dts:
        s = run(dt)
        errors.append(float(max(np.abs(s.u - ref.u).max(), np.abs(s.v - ref.v).max())))
    pair = [float(np.log(errors[k] / errors[k + 1]) / np.log(dts[k] / dts[k + 1])) for k in range(len(dts) - 1)]
    return ConvergenceReport(f"temporal_order{order}", list(dts), errors, _fit_order(dts, errors), pair,
                             {"equilibrium": (us, vs, ws), "T": T, "level": level, "ref_dt": ref_dt,
                              "limiter": limiter, "reaction": reaction})


def rayleigh_quotients(ops: Operators) -> np.ndarray:
    """``x^T L x / x^T M x`` for the three coordinate functions."""
    out = []
    for k in range(3):
        f = ops.mesh.vertices[:, k]
        out.append(float(f @ (ops.L @ f)) / float(f @ (ops.M @ f)))
    return np.array(out)


def spatial_study(levels=(2, 3, 4)) -> ConvergenceReport:
    """Degree-1 eigenvalue error ``|RQ - 2|`` of the discrete Laplace-Beltrami operator against mean edge length."""
    h, errors, rq = [], [], []
    for level in levels:
        ops = build_operators(build_cubed_sphere(level))
        q = rayleigh_quotients(ops)
        rq.append(q.tolist())
        h.append(mean_edge_length(ops.mesh))
        errors.append(float(np.abs(q - 2.0).max()))
    pair = [float(np.log(errors[k] / errors[k + 1]) / np.log(h[k] / h[k + 1])) for k in range(len(h) - 1)]
    return ConvergenceReport("spatial_laplacian", h, errors, _fit_order(h, errors), pair,
                             {"levels": list(levels), "rayleigh": rq})


def convergence_study(kind: str, **options) -> ConvergenceReport:
    """``options`` (limiter, reaction) apply to the temporal studies."""
    if kind == "temporal_order1":
        return temporal_study(1, **options)
    if kind == "temporal_order2":
        return temporal_study(2, **options)
    if kind == "spatial_laplacian":
        return spatial_study()
    raise ValueError(f"unknown convergence study {kind!r}")
