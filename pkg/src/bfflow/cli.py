"""Scenario runner: INI-style configs in, CSV/SVG/summary files out.

Exit codes: 0 all criteria passed, 1 criterion failure, 2 runtime failure
(blow-up, solver non-convergence), 3 configuration error. SVG emission never
affects the exit code.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis as an
from . import dynamics as dyn
from . import grid as gr
from . import physics as ph
from . import reference as ref
from .grid import Grid, ScalarField, VectorField
from .physics import Forcing, MediumMatrix, NonlinearityParams
from .rng import SplitMix64

__all__ = ["ConfigError", "ScenarioConfig", "parse_config", "run_scenario",
           "main", "make_initial_state", "make_forcing", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

# section -> key -> (type tag, default); types: int, float, str, bool, floats
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "grid": {"dim": ("int", 2), "n": ("int", 16)},
    "medium": {"diag": ("floats", None), "rows": ("str", None)},
    "nonlinearity": {"alpha": ("float", 0.0), "beta": ("float", 0.0),
                     "gamma": ("float", 0.0), "l": ("float", 1.0)},
    "forcing": {"kind": ("str", "zero"), "seed": ("int", 1),
                "amplitude": ("float", 1.0), "path": ("str", "")},
    "initial": {"kind": ("str", "zero"), "amplitude": ("float", 1.0),
                "seed": ("int", 2), "u_share": ("float", 0.5)},
    "solver": {"dt": ("float", 0.0), "scheme": ("str", "rk4"),
               "newton_tol": ("float", 1e-10), "newton_max": ("int", 30),
               "cg_tol": ("float", 1e-12), "cfl_safety": ("float", 0.9)},
    "run": {"t_max": ("float", 1.0), "snapshot_stride": ("float", 0.1),
            "seed": ("int", 1)},
    "scenario": {
        "eps": ("float", 0.05),
        "deltas": ("floats", [0.0, 0.25, 0.5, 0.75, 1.0]),
        "ensemble_size": ("int", 16),
        "amplitudes": ("floats", [0.1, 1.0, 10.0]),
        "convective": ("bool", False),
        "split_kind": ("str", "trunc"),
        "shift_u_max": ("float", 10.0),
        "delta_exponent": ("float", 0.25),
        "perturbation": ("float", 1e-3),
        "rate_max": ("float", 0.0),     # fitted decay rates must be below this
        "r2_min": ("float", 0.9),
        "ratio_min": ("float", 8.0),    # audit residual drop per dt halving
        "dist_drop": ("float", 1e-3),
        "residual_tol": ("float", 1e-4),   # sanity gate; `audit` owns the order check
        "bound_factor": ("float", 10.0),
        "envelope_slack": ("float", 1.05),
        "horizon": ("float", 0.02),     # oracle order-measurement horizon
    },
}

SUBCOMMANDS = ("simulate", "spectrum", "lipschitz", "split", "expsplit",
               "smoothing", "attractor", "audit", "oracle")

DEFAULT_CONFIG = "\n".join(
    ["# bfflow scenario defaults"] +
    [line for s, keys in _SCHEMA.items()
     for line in [f"[{s}]"] + [
         f"{k} = {','.join(str(x) for x in d) if isinstance(d, list) else d}"
         for k, (tp, d) in keys.items() if d is not None]]) + "\n"


def _parse_value(tag: str, raw: str, lineno: int, key: str):
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.strip().lower()
            if low in ("on", "true", "1", "yes"):
                return True
            if low in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == "floats":
            return [float(x) for x in raw.replace(";", ",").split(",") if x.strip()]
        return raw.strip()
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {key!r} value {raw!r} as {tag}")


@dataclass
class ScenarioConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, pair: tuple[str, str]):
        return self.values[pair[0]][pair[1]]

    def grid(self) -> Grid:
        return Grid(self["grid", "dim"], self["grid", "n"])

    def medium(self) -> MediumMatrix:
        dim = self["grid", "dim"]
        diag = self["medium", "diag"]
        rows = self["medium", "rows"]
        if diag is not None and rows is not None:
            raise ConfigError("medium: give either diag or rows, not both")
        if rows is not None:
            mat = np.array([[float(x) for x in row.split()]
                            for row in rows.split(";")])
        elif diag is not None:
            mat = np.diag(diag)
        else:
            mat = np.eye(dim)
        if mat.shape != (dim, dim):
            raise ConfigError(f"medium matrix shape {mat.shape} != ({dim}, {dim})")
        try:
            return MediumMatrix(mat)
        except ValueError as e:
            raise ConfigError(f"medium: {e}")

    def nonlinearity(self) -> NonlinearityParams:
        try:
            return NonlinearityParams(self["nonlinearity", "alpha"],
                                      self["nonlinearity", "beta"],
                                      self["nonlinearity", "gamma"],
                                      self["nonlinearity", "l"])
        except ValueError as e:
            raise ConfigError(f"nonlinearity: {e}")

    def solver(self, grid: Grid, D: MediumMatrix) -> dyn.SolverConfig:
        dt = self["solver", "dt"]
        safety = self["solver", "cfl_safety"]
        probe = dyn.SolverConfig(dt=1.0, scheme=self["solver", "scheme"],
                                 cfl_safety=safety)
        if dt <= 0.0:
            dt = safety * probe.cfl_limit(grid, D)
        cfg = dyn.SolverConfig(dt=dt, scheme=self["solver", "scheme"],
                               newton_tol=self["solver", "newton_tol"],
                               newton_max=self["solver", "newton_max"],
                               cg_tol=self["solver", "cg_tol"],
                               cfl_safety=safety)
        cfg.validate(grid, D)
        return cfg

    def forcing(self, grid: Grid) -> Forcing:
        return make_forcing(grid, self["forcing", "kind"],
                            self["forcing", "seed"],
                            self["forcing", "amplitude"],
                            self["forcing", "path"])

    def initial(self, grid: Grid) -> dyn.SimState:
        return make_initial_state(grid, self["initial", "kind"],
                                  self["initial", "amplitude"],
                                  self["initial", "seed"],
                                  self["initial", "u_share"])


def parse_config(text: str) -> ScenarioConfig:
    """INI-style grammar: [section] headers, key = value, '#' comments,
    case-sensitive keys; unknown sections and keys are errors."""
    values = {s: {k: d for k, (tp, d) in keys.items()}
              for s, keys in _SCHEMA.items()}
    section: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw!r}")
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, rawval = (x.strip() for x in line.partition("="))
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        tag = _SCHEMA[section][key][0]
        values[section][key] = _parse_value(tag, rawval, lineno, key)

    cfg = ScenarioConfig(values)
    # semantic re-checks at parse time
    l = cfg["nonlinearity", "l"]
    if not 0.0 < l <= 2.0:
        raise ConfigError(f"nonlinearity: growth exponent l must lie in (0, 2], got {l}")
    cfg.medium()
    cfg.grid()
    return cfg


# ---------------------------------------------------------------------------
# deterministic field synthesis
# ---------------------------------------------------------------------------

def _spectral_noise_scalar(grid: Grid, rng: SplitMix64, decay: float) -> np.ndarray:
    """Random field with sine coefficients ~ N(0,1) * (lam/lam_min)^-decay."""
    lam = gr.laplacian_eigenvalues(grid)
    c = rng.normal(grid.shape) * (lam / lam.min()) ** (-decay)
    return gr.sine_synthesis_array(c, grid)


def make_initial_state(grid: Grid, kind: str, amplitude: float, seed: int,
                       u_share: float = 0.5) -> dyn.SimState:
    """Deterministic initial data with phase-space norm `amplitude`.

    kinds: zero; smooth (decaying random spectrum, safe under the explicit
    CFL bound); white_pressure (u = 0, white-noise mean-zero p, the rough
    datum of the smoothing scenarios); mode (lowest sine profiles).
    """
    rng = SplitMix64(seed)
    if kind == "zero":
        return dyn.SimState.zero(grid)
    if kind == "white_pressure":
        p = gr.project_mean_zero(ScalarField(grid, rng.normal(grid.shape)))
        scale = gr.norm_l2(p)
        p = ScalarField(grid, p.values * (amplitude / scale))
        return dyn.SimState(gr.zeros_vector(grid), p, 0.0)
    if kind == "smooth":
        u = np.stack([_spectral_noise_scalar(grid, rng, 1.5)
                      for _ in range(grid.dim)])
        p = _spectral_noise_scalar(grid, rng, 1.5)
    elif kind == "mode":
        base = gr.sine_mode(grid, (1,) * grid.dim).values
        second = gr.sine_mode(grid, (2,) + (1,) * (grid.dim - 1)).values
        u = np.stack([base] + [second] * (grid.dim - 1))
        p = second.copy()
    else:
        raise ConfigError(f"unknown initial kind {kind!r}")
    uf = VectorField(grid, u)
    pf = gr.project_mean_zero(ScalarField(grid, p))
    nu = gr.vector_spectral_norm(uf, 1.0)
    npn = gr.norm_l2(pf)
    u_amp = amplitude * np.sqrt(u_share)
    p_amp = amplitude * np.sqrt(1.0 - u_share)
    uf = VectorField(grid, uf.values * (u_amp / nu if nu else 0.0))
    pf = ScalarField(grid, pf.values * (p_amp / npn if npn else 0.0))
    return dyn.SimState(uf, pf, 0.0)


def _band_limited_scalar(grid: Grid, rng: SplitMix64, kmax: int = 6) -> np.ndarray:
    """Random combination of the lowest kmax^dim sine modes; the draw count
    is grid-independent, so one seed gives the same function on every grid."""
    kmax = min(kmax, grid.n)
    coeffs = rng.normal((kmax,) * grid.dim)
    c = np.zeros(grid.shape)
    c[(slice(0, kmax),) * grid.dim] = coeffs
    return gr.sine_synthesis_array(c, grid)


def make_forcing(grid: Grid, kind: str, seed: int, amplitude: float,
                 path: str = "") -> Forcing:
    if kind == "zero":
        return Forcing.zero(grid)
    if kind in ("fixed_random", "band_random"):
        rng = SplitMix64(seed)
        if kind == "band_random":
            comps = [_band_limited_scalar(grid, rng) for _ in range(grid.dim)]
        else:
            comps = [_spectral_noise_scalar(grid, rng, 1.0)
                     for _ in range(grid.dim)]
        g = VectorField(grid, np.stack(comps))
        scale = gr.norm_l2(g)
        return Forcing(VectorField(grid, g.values * (amplitude / scale)))
    if kind == "file":
        arr = np.load(path)
        return Forcing(VectorField(grid, np.asarray(arr, dtype=float)))
    raise ConfigError(f"unknown forcing kind {kind!r}")


# ---------------------------------------------------------------------------
# file emission
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_summary(path: Path, entries: dict[str, object]) -> None:
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} = {v}\n")


def write_svg(path: Path, title: str, xs, series: dict[str, np.ndarray],
              logy: bool = False) -> None:
    """Minimal SVG 1.1 line plot; purely cosmetic output."""
    W, H, M = 640, 400, 50
    xs = np.asarray(xs, dtype=float)
    colors = ["#1b6ca8", "#c1403d", "#3d8b37", "#8047a3", "#b07d2b"]
    finite_series = {}
    for name, ys in series.items():
        ys = np.asarray(ys, dtype=float)
        if logy:
            ys = np.where(ys > 0, ys, np.nan)
            ys = np.log10(ys)
        finite_series[name] = ys
    allv = np.concatenate([v[np.isfinite(v)] for v in finite_series.values()
                           if np.any(np.isfinite(v))] or [np.zeros(1)])
    ymin, ymax = (float(allv.min()), float(allv.max())) if allv.size else (0, 1)
    if ymax == ymin:
        ymax = ymin + 1.0
    xmin, xmax = float(xs.min()), float(xs.max())
    if xmax == xmin:
        xmax = xmin + 1.0

    def px(x):
        return M + (x - xmin) / (xmax - xmin) * (W - 2 * M)

    def py(y):
        return H - M - (y - ymin) / (ymax - ymin) * (H - 2 * M)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
             f'width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" '
             f'font-size="14">{title}{" (log10 y)" if logy else ""}</text>',
             f'<line x1="{M}" y1="{H - M}" x2="{W - M}" y2="{H - M}" stroke="black"/>',
             f'<line x1="{M}" y1="{M}" x2="{M}" y2="{H - M}" stroke="black"/>',
             f'<text x="{M}" y="{H - M + 20}" font-size="11">{xmin:.3g}</text>',
             f'<text x="{W - M}" y="{H - M + 20}" text-anchor="end" '
             f'font-size="11">{xmax:.3g}</text>',
             f'<text x="{M - 5}" y="{H - M}" text-anchor="end" '
             f'font-size="11">{ymin:.3g}</text>',
             f'<text x="{M - 5}" y="{M}" text-anchor="end" '
             f'font-size="11">{ymax:.3g}</text>']
    for i, (name, ys) in enumerate(finite_series.items()):
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys)
                       if np.isfinite(y))
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{W - M}" y="{M + 14 * (i + 1)}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# subcommand implementations (each returns a dict of summary entries; keys
# starting with "pass_" are criteria)
# ---------------------------------------------------------------------------

def _snapshot_every(cfg: dyn.SolverConfig, stride: float) -> int:
    return max(1, int(round(stride / cfg.dt)))


def _cmd_simulate(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    state0 = sc.initial(grid)
    eps = sc["scenario", "eps"]
    conv = sc["scenario", "convective"]
    traj = dyn.simulate(state0, cfg, forcing, D, params, sc["run", "t_max"],
                        snapshot_every=_snapshot_every(cfg, sc["run", "snapshot_stride"]),
                        convective_on=conv, collect_work=True)
    audit = an.energy_audit(traj, eps=eps)
    # residual accumulated over the steps inside each snapshot interval
    res_col = []
    j = 0
    for i, t in enumerate(traj.times):
        if i == 0:
            res_col.append(0.0)
            continue
        j2 = int(np.searchsorted(traj.step_times, t + 1e-12))
        res_col.append(float(np.abs(audit.residual_stage[j:j2 - 1]).sum()))
        j = j2 - 1
    rows = []
    for i, t in enumerate(traj.times):
        s = traj.state_at(i)
        rows.append((t, gr.weighted_inner(D, s.u, s.u) + gr.inner(s.p, s.p),
                     audit.e_eps_series[i], gr.vector_spectral_norm(s.u, 1.0),
                     gr.norm_l2(s.p), res_col[i]))
    write_csv(out / "energies.csv",
              ["t [time]", "e_plain [energy]", "e_eps [energy]",
               "h1_u [field]", "l2_p [field]", "residual [energy]"], rows)
    if svg:
        arr = np.array(rows)
        write_svg(out / "energies.svg", "energy series", arr[:, 0],
                  {"e_plain": arr[:, 1], "e_eps": arr[:, 2]})
    mean_defect = max(abs(float(p.mean())) for _, p in traj.states)
    total_res = float(np.abs(audit.residual_stage).sum())
    scale = max(1.0, float(np.array(rows)[:, 1].max()))
    return {
        "final_t": traj.times[-1],
        "mean_defect": mean_defect,
        "residual_total": total_res,
        "pass_finite": True,
        "pass_mean_zero": mean_defect <= 1e-12 * max(1.0, sc["run", "t_max"]),
        "pass_residual": total_res <= sc["scenario", "residual_tol"] * scale,
    }


def _cmd_spectrum(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    op = an.assemble_operator(grid, D)
    write_csv(out / "spectrum.csv", ["index [-]", "eigenvalue [1/time]"],
              list(enumerate(op.spectrum)))
    deltas = sc["scenario", "deltas"]
    t_max = 4.0 / op.eigmin
    fits = [(d, an.semigroup_decay(op, d, t_max=t_max)) for d in deltas]
    write_csv(out / "decay.csv", ["delta [-]", "fitted_rate [1/time]"],
              [(d, f.rate) for d, f in fits])
    if svg:
        write_svg(out / "spectrum.svg", "pressure operator spectrum",
                  np.arange(len(op.spectrum)), {"eigenvalue": op.spectrum})
        write_svg(out / "decay.svg", "fitted decay rate vs delta",
                  np.array(deltas), {"fitted_rate": np.array([f.rate for _, f in fits])})
    entries = {
        "symmetry_defect": op.symmetry_defect,
        "eigmin": op.eigmin,
        "pass_symmetry": op.symmetry_defect <= 1e-12,
        "pass_positive": op.eigmin > 0,
        "pass_decay": all(f.rate < sc["scenario", "rate_max"] for _, f in fits),
    }
    for d, f in fits:
        entries[f"rate_delta_{d:g}"] = f.rate
        if d == 0.5:
            entries["note_delta_0.5"] = ("index at the edge of the fractional "
                                         "range used by the elliptic estimates; "
                                         "reported for completeness")
    return entries


def _cmd_lipschitz(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    base = sc.initial(grid)
    eps0 = sc["scenario", "perturbation"]
    pert = make_initial_state(grid, "smooth", 1.0, sc["initial", "seed"] + 77)
    scale = eps0 / an.energy_norm(pert.u, pert.p)
    state2 = dyn.SimState(
        VectorField(grid, base.u.values + scale * pert.u.values),
        ScalarField(grid, base.p.values + scale * pert.p.values), 0.0)
    every = _snapshot_every(cfg, sc["run", "snapshot_stride"])
    t_max = sc["run", "t_max"]
    conv = sc["scenario", "convective"]
    tr1 = dyn.simulate(base, cfg, forcing, D, params, t_max, snapshot_every=every,
                       convective_on=conv)
    tr2 = dyn.simulate(state2, cfg, forcing, D, params, t_max, snapshot_every=every,
                       convective_on=conv)
    d0 = None
    rows = []
    for i, t in enumerate(tr1.times):
        u1, p1 = tr1.states[i]
        u2, p2 = tr2.states[i]
        d = an.energy_norm(VectorField(grid, u1 - u2), ScalarField(grid, p1 - p2))
        if d0 is None:
            d0 = d
        rows.append((t, d / d0))
    times = np.array([r[0] for r in rows])
    ratios = np.array([r[1] for r in rows])
    C, K = an.fit_envelope(times, ratios)
    env = C * np.exp(K * times)
    write_csv(out / "pairs.csv", ["t [time]", "ratio [-]", "envelope [-]"],
              [(t, r, e) for (t, r), e in zip(rows, env)])
    if svg:
        write_svg(out / "pairs.svg", "difference growth", times,
                  {"ratio": ratios, "envelope": env}, logy=True)
    excess = float(np.max(ratios / env))
    return {
        "envelope_C": C, "envelope_K": K, "max_excess": excess,
        "pass_envelope": bool(np.isfinite(K)
                              and excess <= sc["scenario", "envelope_slack"]),
    }


def _cmd_split(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    p0 = gr.project_mean_zero(sc.initial(grid).p)
    t_max = sc["run", "t_max"]
    every = _snapshot_every(cfg, sc["run", "snapshot_stride"])
    delta = sc["scenario", "delta_exponent"]
    reference = dyn.run_truncated(p0, forcing, cfg, D, params, t_max,
                                  snapshot_every=every)
    if sc["scenario", "split_kind"] == "bootstrap":
        split = dyn.run_bootstrap_split(reference, cfg, D, params)
    else:
        L = ph.monotone_shift(params, sc["scenario", "shift_u_max"])
        split = dyn.run_split(reference, cfg, D, params, L)
    rows = []
    for i, t in enumerate(split.times):
        q, v = split.qv[i]
        r, w = split.rw[i]
        rows.append((t, gr.norm_l2(q), gr.vector_spectral_norm(v, 1.0),
                     gr.spectral_norm(gr.project_mean_zero(r), delta),
                     gr.vector_spectral_norm(w, 1.0 + delta)))
    write_csv(out / "split.csv",
              ["t [time]", "norm_q [field]", "norm_v [field]",
               "norm_r_hdelta [field]", "norm_w_h1delta [field]"], rows)
    arr = np.array(rows)
    if svg:
        write_svg(out / "split.svg", "splitting norms", arr[:, 0],
                  {"norm_q": arr[:, 1], "norm_r_hdelta": arr[:, 3]}, logy=True)
    qsq = arr[:, 1] ** 2
    pos = qsq > 1e-28
    fit = an.fit_decay(arr[pos, 0], qsq[pos])
    t10 = t_max / 5.0
    late = arr[:, 0] >= t10
    r_at = arr[np.argmax(late), 3]
    r_sup = float(arr[late, 3].max())
    return {
        "recombination_p": split.recombination_p,
        "recombination_u": split.recombination_u,
        "q_rate": fit.rate, "q_r2": fit.r_squared,
        "r_sup_late": r_sup, "r_at_window_start": r_at,
        "pass_contracting": fit.rate < sc["scenario", "rate_max"],
        "pass_bounded": r_sup <= sc["scenario", "bound_factor"] * max(r_at, 1e-30),
    }


def _cmd_expsplit(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    base = sc.initial(grid)
    pert = make_initial_state(grid, "smooth", 1.0, sc["initial", "seed"] + 101)
    scale = sc["scenario", "perturbation"] / an.energy_norm(pert.u, pert.p)
    other = dyn.SimState(
        VectorField(grid, base.u.values + scale * pert.u.values),
        ScalarField(grid, base.p.values + scale * pert.p.values), 0.0)
    every = _snapshot_every(cfg, sc["run", "snapshot_stride"])
    t_max = sc["run", "t_max"]
    tr1 = dyn.simulate(base, cfg, forcing, D, params, t_max, snapshot_every=every)
    tr2 = dyn.simulate(other, cfg, forcing, D, params, t_max, snapshot_every=every)
    es = dyn.run_exp_split(tr1, tr2, cfg, D, params)
    d0 = an.energy_norm(VectorField(grid, tr1.states[0][0] - tr2.states[0][0]),
                        ScalarField(grid, tr1.states[0][1] - tr2.states[0][1]))
    rows = []
    for i, t in enumerate(es.times):
        uh, phat = es.hat[i]
        ut, pt = es.tilde[i]
        rows.append((t, an.energy_norm(uh, phat),
                     gr.spectral_norm(gr.project_mean_zero(pt), 1.0)))
    write_csv(out / "expsplit.csv",
              ["t [time]", "hat_norm [field]", "tilde_h1 [field]"], rows)
    arr = np.array(rows)
    if svg:
        write_svg(out / "expsplit.svg", "difference splitting", arr[:, 0],
                  {"hat_norm": arr[:, 1], "tilde_h1": arr[:, 2]}, logy=True)
    hat_sq = arr[:, 1] ** 2
    fit = an.fit_decay(arr[:, 0], np.maximum(hat_sq, 1e-300))
    tilde_ratio = arr[1:, 2] / d0
    C, K = an.fit_envelope(arr[1:, 0], np.maximum(tilde_ratio, 1e-300))
    return {
        "recombination": es.recombination,
        "hat_rate": fit.rate, "hat_r2": fit.r_squared,
        "tilde_envelope_C": C, "tilde_envelope_K": K,
        "pass_hat_decay": fit.rate < sc["scenario", "rate_max"]
                          and fit.r_squared >= sc["scenario", "r2_min"],
        "pass_tilde_bounded": bool(np.isfinite(arr[:, 2]).all() and np.isfinite(K)),
    }


def _cmd_smoothing(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    state0 = sc.initial(grid)
    conv = sc["scenario", "convective"]
    targets = [2.0 ** -k for k in range(10, -1, -1)]
    traj = dyn.simulate(state0, cfg, forcing, D, params, 1.0,
                        snapshot_times=targets, convective_on=conv)
    rep = an.smoothing_report(traj)
    rows = list(zip(rep.times, rep.series["t|grad_u|^2"],
                    rep.series["t^2|du_dt|^2"], rep.series["t|dp_dt|^2"],
                    rep.series["t^(8/3)|du_dt|^2"]))
    write_csv(out / "smoothing.csv",
              ["t [time]", "t_grad_u2 [energy]", "t2_dtu2 [energy]",
               "t_dtp2 [energy]", "t83_dtu2 [energy]"], rows)
    if svg:
        arr = np.array(rows)
        write_svg(out / "smoothing.svg", "weighted smoothing", arr[:, 0],
                  {"t2_dtu2": arr[:, 2], "t83_dtu2": arr[:, 4]}, logy=True)
    entries = {f"sup_{k}": v for k, v in rep.weighted_sups.items()}
    entries["grid_tag"] = rep.grid_tag
    entries["pass_finite_sups"] = all(np.isfinite(v)
                                      for v in rep.weighted_sups.values())
    return entries


def _cmd_attractor(sc: ScenarioConfig, out: Path, svg: bool, threads: int,
                   seed: int | None) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    run_seed = sc["run", "seed"] if seed is None else seed
    size = sc["scenario", "ensemble_size"]
    amps = np.geomspace(0.1, 10.0, size)
    states = [make_initial_state(grid, "smooth", a, run_seed + 1000 + i)
              for i, a in enumerate(amps)]
    t_max = sc["run", "t_max"]
    every = _snapshot_every(cfg, sc["run", "snapshot_stride"])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda s: an.evolve_ensemble([s], cfg, forcing, D, params,
                                             t_max, every), states))
        snap_times = results[0][0]
        snaps = [(np.concatenate([r[1][i][0] for r in results]),
                  np.concatenate([r[1][i][1] for r in results]))
                 for i in range(len(snap_times))]
        report = an.ensemble_report_from_snaps(grid, snap_times, snaps, run_seed)
    else:
        report = an.ensemble_study(states, cfg, forcing, D, params, t_max,
                                   snapshot_every=every, seed=run_seed)
    write_csv(out / "attractor.csv",
              ["t [time]", "diameter [field]", "dist_to_ball [field]"],
              [(t, d, x) for (t, d), (_, x) in
               zip(report.diam_series, report.dist_to_ball_series)])
    write_csv(out / "boxcount.csv", ["scale [field]", "count [-]"],
              report.box_counts)
    if svg:
        write_svg(out / "attractor.svg", "ensemble attraction",
                  report.diam_series[:, 0],
                  {"diameter": report.diam_series[:, 1],
                   "dist_to_ball": report.dist_to_ball_series[:, 1]}, logy=True)
        scales = np.array([s for s, _ in report.box_counts])
        counts = np.array([c for _, c in report.box_counts], dtype=float)
        write_svg(out / "boxcount.svg", "box counts vs scale", scales,
                  {"count": counts})
    dist = report.dist_to_ball_series
    pos = dist[:, 1] > 0
    early = dist[pos][:1]
    final = dist[-1, 1]
    drop_ok = True
    rate_ok = True
    fit_rate = 0.0
    fit_r2 = 1.0
    if pos.sum() >= 5:
        fit = an.fit_decay(dist[pos, 0], dist[pos, 1])
        fit_rate, fit_r2 = fit.rate, fit.r_squared
        rate_ok = fit.rate < 0 and fit.r_squared >= 0.8
    if early.size:
        drop_ok = final <= sc["scenario", "dist_drop"] * early[0, 1]
    by_scale = sorted(report.box_counts)  # counts must not grow with scale
    return {
        "r_ball": report.r_ball, "dist_final": final,
        "dist_rate": fit_rate, "dist_r2": fit_r2,
        "pass_attraction": bool(drop_ok),
        "pass_dist_fit": bool(rate_ok),
        "pass_boxcounts_monotone": all(c1 <= c0 for (_, c0), (_, c1) in
                                       zip(by_scale, by_scale[1:])),
    }


def _cmd_audit(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    grid = sc.grid()
    D = sc.medium()
    params = sc.nonlinearity()
    cfg = sc.solver(grid, D)
    forcing = sc.forcing(grid)
    state0 = sc.initial(grid)
    conv = sc["scenario", "convective"]
    eps = sc["scenario", "eps"]
    t_max = sc["run", "t_max"]
    rows = []
    totals = []
    for level, dt in enumerate([cfg.dt, cfg.dt / 2.0]):
        c = dyn.SolverConfig(dt=dt, scheme=cfg.scheme, newton_tol=cfg.newton_tol,
                             newton_max=cfg.newton_max, cg_tol=cfg.cg_tol,
                             cfl_safety=cfg.cfl_safety)
        traj = dyn.simulate(state0, c, forcing, D, params, t_max,
                            snapshot_every=max(1, int(round(t_max / dt / 8))),
                            convective_on=conv, collect_work=True)
        audit = an.energy_audit(traj, eps=eps)
        totals.append(float(np.abs(audit.residual_stage).sum() * dt))
        for t, rs, rt in zip(audit.step_times[1:], audit.residual_stage,
                             audit.residual_trap):
            rows.append((dt, t, rs, rt))
    write_csv(out / "audit.csv",
              ["dt [time]", "t [time]", "residual_stage [energy]",
               "residual_trap [energy]"], rows)
    if svg:
        arr = np.array([(t, abs(rs)) for d, t, rs, _ in rows if d == cfg.dt])
        write_svg(out / "audit.svg", "audit residual", arr[:, 0],
                  {"|residual|": arr[:, 1]}, logy=True)
    ratio = totals[0] / totals[1] if totals[1] > 0 else np.inf
    return {
        "residual_total_dt": totals[0], "residual_total_half": totals[1],
        "ratio": ratio,
        "pass_order": ratio >= sc["scenario", "ratio_min"],
    }


def _cmd_oracle(sc: ScenarioConfig, out: Path, svg: bool) -> dict:
    dim = sc["grid", "dim"]
    grid = Grid(dim, min(sc["grid", "n"], ref._SIZE_GUARD_PER_AXIS[dim]))
    D = sc.medium()
    prop = ref.build_propagator(grid, D)
    state0 = make_initial_state(grid, "smooth", 1.0, sc["initial", "seed"])
    horizon = sc["scenario", "horizon"]
    lin = NonlinearityParams(0.0, 0.0)
    forcing = Forcing.zero(grid)
    u_ref, p_ref = prop.apply(state0.u, state0.p, horizon)
    errors = []
    for dt in (4e-4, 2e-4, 1e-4):
        c = dyn.SolverConfig(dt=dt)
        steps = int(round(horizon / dt))
        traj = dyn.simulate(state0, c, forcing, D, lin, horizon,
                            snapshot_every=steps)
        u, p = traj.states[-1]
        num = np.sqrt(np.sum((u - u_ref.values) ** 2) + np.sum((p - p_ref.values) ** 2))
        den = np.sqrt(np.sum(u_ref.values ** 2) + np.sum(p_ref.values ** 2))
        errors.append((dt, float(num / den)))
    write_csv(out / "oracle.csv", ["dt [time]", "error [-]"], errors)
    if svg:
        arr = np.array(errors)
        write_svg(out / "oracle.svg", "convergence to dense propagator",
                  arr[:, 0], {"error": arr[:, 1]}, logy=True)
    ratios = [errors[i][1] / errors[i + 1][1] for i in range(len(errors) - 1)]
    return {
        "ratios": " ".join(f"{r:.2f}" for r in ratios),
        "pass_order": all(r >= 12.0 for r in ratios),
    }


def run_scenario(config: ScenarioConfig, subcommand: str, out_dir: str | Path = ".",
                 svg: bool = False, threads: int = 1,
                 seed: int | None = None) -> int:
    """Execute a subcommand; emits CSVs plus summary.txt, returns the exit code."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if subcommand == "simulate":
            entries = _cmd_simulate(config, out, svg)
        elif subcommand == "spectrum":
            entries = _cmd_spectrum(config, out, svg)
        elif subcommand == "lipschitz":
            entries = _cmd_lipschitz(config, out, svg)
        elif subcommand == "split":
            entries = _cmd_split(config, out, svg)
        elif subcommand == "expsplit":
            entries = _cmd_expsplit(config, out, svg)
        elif subcommand == "smoothing":
            entries = _cmd_smoothing(config, out, svg)
        elif subcommand == "attractor":
            entries = _cmd_attractor(config, out, svg, threads, seed)
        elif subcommand == "audit":
            entries = _cmd_audit(config, out, svg)
        else:
            entries = _cmd_oracle(config, out, svg)
    except RuntimeError as err:
        # blow-up, Newton/CG non-convergence, invariant drift
        write_summary(out / "summary.txt",
                      {"status": "RUNTIME_ERROR", "error": err})
        return 2
    flags = {k: v for k, v in entries.items() if k.startswith("pass_")}
    ok = all(flags.values())
    summary = {"subcommand": subcommand, "status": "PASS" if ok else "FAIL"}
    for k, v in entries.items():
        summary[k] = ("PASS" if v else "FAIL") if k.startswith("pass_") else v
    write_summary(out / "summary.txt", summary)
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bfflow",
        description="scenario runner for the slightly compressible "
                    "Brinkman-Forchheimer laboratory")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="scenario config path")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--svg", action="store_true", help="emit SVG line plots")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # usage errors are configuration errors; --help stays 0
        return 0 if err.code in (0, None) else 3
    try:
        text = Path(args.config).read_text()
        config = parse_config(text)
    except (OSError, ConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 3
    try:
        return run_scenario(config, args.subcommand, args.out, svg=args.svg,
                            threads=args.threads, seed=args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
