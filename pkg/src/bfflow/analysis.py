"""Measurements on trajectories and operators.

Everything here is diagnostic: dense assembly and spectrum of the pressure
operator, decay-rate fits, energy-identity audits, weighted smoothing
diagnostics, and ensemble studies of the attraction to the higher-energy ball.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from . import grid as gr
from . import physics as ph
from .grid import Grid, ScalarField, VectorField
from .krylov import conjugate_gradient
from .physics import MediumMatrix, NonlinearityParams
from .rng import SplitMix64

__all__ = [
    "AssembledOperator", "DecayFit", "SmoothingReport", "AttractorReport",
    "AuditReport", "assemble_operator", "semigroup_decay", "fit_decay",
    "energy_audit", "smoothing_report", "ensemble_study", "energy_norm",
    "higher_energy_norm", "dist_to_higher_ball", "fit_envelope", "box_counts",
]

_SIZE_GUARD = 4096


# ---------------------------------------------------------------------------
# norms on the phase space and distance to the higher-energy ball
# ---------------------------------------------------------------------------

def energy_norm(u: VectorField, p: ScalarField) -> float:
    """Phase-space norm: H1 seminorm of u plus L2 norm of p, in quadrature."""
    return float(np.sqrt(gr.vector_spectral_norm(u, 1.0) ** 2 + gr.norm_l2(p) ** 2))


def higher_energy_norm(u: VectorField, p: ScalarField) -> float:
    """Higher-order norm: spectral H2 of u plus H1 of p."""
    return float(np.sqrt(gr.vector_spectral_norm(u, 2.0) ** 2
                         + gr.spectral_norm(p, 1.0) ** 2))


def _spectral_weights(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """(E weights, E1 weights) over concatenated (u components, p) coefficients."""
    lam = gr.laplacian_eigenvalues(grid).ravel()
    w_e = np.concatenate([np.tile(lam, grid.dim), np.ones_like(lam)])
    w_e1 = np.concatenate([np.tile(lam * lam, grid.dim), lam])
    return w_e, w_e1


def _state_coefficients(u: VectorField, p: ScalarField) -> np.ndarray:
    grid = u.grid
    cs = [gr.sine_coefficients_array(u.values[a], grid).ravel()
          for a in range(grid.dim)]
    cs.append(gr.sine_coefficients_array(p.values, grid).ravel())
    return np.concatenate(cs)


def dist_to_higher_ball(u: VectorField, p: ScalarField, radius: float) -> float:
    """Phase-space distance from (u, p) to the ball of `radius` in the
    higher-energy norm, computed exactly in the shared sine eigenbasis.

    Both norms are diagonal there, so the nearest ball point solves a scalar
    Lagrange condition, found by bisection on the multiplier.
    """
    grid = u.grid
    w, v = _spectral_weights(grid)
    c = _state_coefficients(u, p)
    r2 = radius * radius
    if float(np.sum(v * c * c)) <= r2:
        return 0.0

    def constraint(mu: float) -> float:
        y = c * w / (w + mu * v)
        return float(np.sum(v * y * y)) - r2

    lo, hi = 0.0, 1.0
    while constraint(hi) > 0.0:
        hi *= 4.0
        if hi > 1e18:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if constraint(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    gap = c * (mu * v) / (w + mu * v)
    return float(np.sqrt(np.sum(w * gap * gap)))


# ---------------------------------------------------------------------------
# pressure operator: assembly and semigroup decay
# ---------------------------------------------------------------------------

@dataclass
class AssembledOperator:
    """Dense form of the pressure operator on the mean-zero subspace."""

    grid: Grid
    D: MediumMatrix
    matrix: np.ndarray        # (m, m), m = n^dim - 1
    basis: np.ndarray         # (N, m) orthonormal mean-zero reduction map
    spectrum: np.ndarray      # ascending eigenvalues of the symmetric part
    symmetry_defect: float    # |A - A^T|_F / |A|_F
    eigenvectors: np.ndarray  # columns, in the reduced coordinates

    @property
    def eigmin(self) -> float:
        return float(self.spectrum[0])

    def propagate_coeffs(self, c0: np.ndarray, t: float) -> np.ndarray:
        return self.eigenvectors @ (np.exp(-self.spectrum * t)
                                    * (self.eigenvectors.T @ c0))

    def to_field(self, c: np.ndarray) -> ScalarField:
        return ScalarField(self.grid, (self.basis @ c).reshape(self.grid.shape))

    def reduce(self, p: ScalarField) -> np.ndarray:
        return self.basis.T @ p.values.ravel()


def _mean_zero_basis(N: int) -> np.ndarray:
    """Orthonormal basis of the mean-zero subspace via a Householder map."""
    q = np.full(N, 1.0 / np.sqrt(N))
    v = q.copy()
    v[0] -= 1.0
    H = np.eye(N) - 2.0 * np.outer(v, v) / np.dot(v, v)
    return H[:, 1:]


def assemble_operator(grid: Grid, D: MediumMatrix, cg_tol: float = 1e-13) -> AssembledOperator:
    """Column-by-column dense assembly of p -> -div(D (-lap)^-1 grad p),
    restricted to the mean-zero subspace; spectrum from the symmetric
    eigensolver after the symmetry-defect check."""
    N = grid.num_nodes
    if N > _SIZE_GUARD:
        raise ValueError(f"dense assembly guarded to {_SIZE_GUARD} nodes, got {N}")
    Q = _mean_zero_basis(N)
    m = N - 1
    cols = np.empty((N, m))
    for j in range(m):
        pj = Q[:, j].reshape(grid.shape)
        w = conjugate_gradient(
            lambda x: -gr.lap_array(x, grid.h, grid.dim),
            gr.grad_array(pj, grid.h, grid.dim), rtol=cg_tol)
        cols[:, j] = -gr.div_array(D.apply_array(w), grid.h, grid.dim).ravel()
    A = Q.T @ cols
    normA = float(np.linalg.norm(A))
    defect = float(np.linalg.norm(A - A.T)) / normA if normA else 0.0
    sym = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(sym)
    return AssembledOperator(grid=grid, D=D, matrix=A, basis=Q,
                             spectrum=vals, symmetry_defect=defect,
                             eigenvectors=vecs)


@dataclass
class DecayFit:
    c: float
    rate: float
    r_squared: float
    window: tuple[float, float]


def fit_decay(times, values=None, window: tuple[float, float] | None = None) -> DecayFit:
    """Least squares on (t, log value): c = exp(intercept), rate = slope.

    Accepts separate time/value arrays or a single (N, 2) series of pairs.
    """
    t = np.asarray(times, dtype=float)
    if values is None:
        t, v = t[:, 0], t[:, 1]
    else:
        v = np.asarray(values, dtype=float)
    if window is not None:
        mask = (t >= window[0]) & (t <= window[1])
        t, v = t[mask], v[mask]
    else:
        window = (float(t[0]), float(t[-1])) if len(t) else (0.0, 0.0)
    if len(t) < 5:
        raise ValueError(f"need at least 5 points in the fit window, got {len(t)}")
    if np.any(v <= 0.0):
        raise ValueError("fit window contains nonpositive values")
    y = np.log(v)
    slope, intercept = np.polyfit(t, y, 1)
    fitted = slope * t + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return DecayFit(c=float(np.exp(intercept)), rate=float(slope),
                    r_squared=float(r2), window=(float(t[0]), float(t[-1])))


def semigroup_decay(op: AssembledOperator, delta: float, t_max: float = 4.0,
                    samples: int = 24, n_init: int = 10,
                    seed: int = 515) -> DecayFit:
    """Worst (largest) fitted decay rate of the H^delta norm of exp(-tA) p0
    over `n_init` random initial pressures, via the dense eigendecomposition."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    rng = SplitMix64(seed)
    ts = np.linspace(0.0, t_max, samples)
    worst: DecayFit | None = None
    for _ in range(n_init):
        p0 = rng.normal(op.grid.shape)
        c0 = op.basis.T @ p0.ravel()
        norms = [gr.spectral_norm(op.to_field(op.propagate_coeffs(c0, t)), delta)
                 for t in ts]
        fit = fit_decay(ts, norms)
        if worst is None or fit.rate > worst.rate:
            worst = fit
    return worst


# ---------------------------------------------------------------------------
# energy-identity audit
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    """Residuals of the semi-discrete energy identity along a stored run.

    `residual_stage` uses the integrator's own stage quadrature for the work
    integrals (5th order per step); `residual_trap` uses endpoint trapezoid
    (3rd order per step). `gp_violation` is the positive excess of the
    one-sided decay surrogate dE/dt + eps*E <= 0 evaluated with the
    minus-coupled perturbed functional on the stored snapshots.
    """

    step_times: np.ndarray
    residual_trap: np.ndarray
    residual_stage: np.ndarray | None
    snapshot_times: np.ndarray
    e_eps_series: np.ndarray
    gp_violation: np.ndarray
    eps: float


def energy_audit(traj: dyn.Trajectory, g=None, D: MediumMatrix | None = None,
                 params: NonlinearityParams | None = None,
                 eps: float = 0.0) -> AuditReport:
    if traj.energy_series is None:
        raise ValueError("trajectory was not run with collect_work=True")
    D = D or traj.D
    params = params or traj.params
    forcing = traj.forcing if g is None else dyn._as_forcing(g, traj.grid)

    E = traj.energy_series
    terms = traj.endpoint_terms  # columns diss, fw, gw, bw
    phi = terms[:, 0] + terms[:, 1] + terms[:, 3] - terms[:, 2]
    dts = np.diff(traj.step_times)
    residual_trap = 0.5 * np.diff(E) + 0.5 * dts * (phi[:-1] + phi[1:])
    residual_stage = None
    if traj.work_increments is not None:
        W = traj.work_increments
        residual_stage = 0.5 * np.diff(E) + (W[:, 0] + W[:, 1] + W[:, 3] - W[:, 2])

    # decay surrogate on snapshots, with the minus-coupled functional
    e_eps = []
    e_dec = []
    for i in range(len(traj.times)):
        s = traj.state_at(i)
        e_plain = gr.weighted_inner(D, s.u, s.u) + gr.inner(s.p, s.p)
        coupling = (2.0 * eps * gr.vector_inner(s.u, ph.bogovski(s.p))
                    if eps > 0 else 0.0)
        e_eps.append(e_plain + coupling)
        e_dec.append(e_plain - coupling)
    e_eps = np.array(e_eps)
    e_dec = np.array(e_dec)
    viol = np.zeros(max(len(e_dec) - 1, 0))
    if len(e_dec) > 1:
        dts_snap = np.diff(traj.times)
        rate = np.diff(e_dec) / dts_snap
        viol = np.maximum(rate + eps * 0.5 * (e_dec[:-1] + e_dec[1:]), 0.0)
    return AuditReport(
        step_times=traj.step_times, residual_trap=residual_trap,
        residual_stage=residual_stage, snapshot_times=traj.times,
        e_eps_series=e_eps, gp_violation=viol, eps=eps)


# ---------------------------------------------------------------------------
# smoothing diagnostics
# ---------------------------------------------------------------------------

SMOOTHING_WEIGHTS = ("t|grad_u|^2", "t^2|du_dt|^2", "t|dp_dt|^2", "t^(8/3)|du_dt|^2")


@dataclass
class SmoothingReport:
    weighted_sups: dict[str, float]
    grid_tag: str
    times: np.ndarray
    series: dict[str, np.ndarray]


def smoothing_report(traj: dyn.Trajectory) -> SmoothingReport:
    """Weighted-in-time sups over the stored snapshots of a run on (0, 1].

    Time derivatives are the stepper's own right-hand side evaluated at the
    snapshots, never finite differences of neighbouring snapshots.
    """
    sys = dyn._FullSystem(traj.grid, traj.D, traj.params, traj.forcing,
                          traj.convective_on)
    w = traj.grid.cell_volume
    rows = {name: [] for name in SMOOTHING_WEIGHTS}
    times = []
    for i, t in enumerate(traj.times):
        if t <= 0.0:
            continue
        u, p = traj.states[i]
        du, dp = sys.rhs(t, u, p)
        grad_u2 = -w * float(np.vdot(gr.lap_array(u, traj.grid.h, traj.grid.dim), u))
        du2 = w * float(np.vdot(du, du))
        dp2 = w * float(np.vdot(dp, dp))
        times.append(t)
        rows["t|grad_u|^2"].append(t * grad_u2)
        rows["t^2|du_dt|^2"].append(t * t * du2)
        rows["t|dp_dt|^2"].append(t * dp2)
        rows["t^(8/3)|du_dt|^2"].append(t ** (8.0 / 3.0) * du2)
    series = {k: np.array(v) for k, v in rows.items()}
    sups = {k: float(v.max()) if len(v) else 0.0 for k, v in series.items()}
    return SmoothingReport(weighted_sups=sups,
                           grid_tag=f"{traj.grid.n}^{traj.grid.dim}",
                           times=np.array(times), series=series)


# ---------------------------------------------------------------------------
# ensemble / attractor diagnostics
# ---------------------------------------------------------------------------

@dataclass
class AttractorReport:
    ensemble_size: int
    diam_series: np.ndarray          # (k, 2): t, phase-space diameter
    dist_to_ball_series: np.ndarray  # (k, 2): t, sup over members of dist
    r_ball: float
    box_counts: list[tuple[float, int]]
    seed: int | None = None


def box_counts(points: np.ndarray, n_scales: int = 6) -> list[tuple[float, int]]:
    """Occupied-box counts of a 2D point cloud at dyadic scales."""
    pts = np.asarray(points, dtype=float)
    lo = pts.min(axis=0)
    extent = float((pts - lo).max())
    if extent == 0.0:
        return [(1.0 / 2 ** k, 1) for k in range(1, n_scales + 1)]
    out = []
    for k in range(1, n_scales + 1):
        scale = extent / 2 ** k
        idx = np.floor((pts - lo) / scale).astype(np.int64)
        out.append((scale, len({(int(a), int(b)) for a, b in idx})))
    return out


def evolve_ensemble(initial_states: list[dyn.SimState], cfg: dyn.SolverConfig,
                    g, D: MediumMatrix, params: NonlinearityParams,
                    t_max: float, snapshot_every: int = 50,
                    convective_on: bool = False):
    """Batched member evolution; returns (snap_times, [(U, P) snapshots]).

    A member losing finiteness aborts the run with its index in the message.
    """
    if not initial_states:
        raise ValueError("empty ensemble")
    grid = initial_states[0].grid
    forcing = dyn._as_forcing(g, grid)
    cfg.validate(grid, D)
    sys = dyn._FullSystem(grid, D, params, forcing, convective_on)
    B = len(initial_states)
    U = np.stack([s.u.values for s in initial_states])
    P = np.stack([gr.mean_project_array(s.p.values, grid.dim)
                  for s in initial_states])
    n_steps = int(round(t_max / cfg.dt))

    def check_members(step_idx: int):
        for m in range(B):
            if not (np.all(np.isfinite(U[m])) and np.all(np.isfinite(P[m]))):
                err = dyn.BlowUpError(step_idx, step_idx * cfg.dt)
                err.args = (f"ensemble member {m}: {err.args[0]}",)
                err.member = m
                raise err

    snap_times = [0.0]
    snaps = [(U.copy(), P.copy())]
    for k in range(n_steps):
        t = k * cfg.dt
        U, P, _ = dyn._rk4_full(sys, t, U, P, cfg.dt, False)
        P = gr.mean_project_array(P, grid.dim)
        if (k + 1) % 64 == 0 or k + 1 == n_steps:
            check_members(k + 1)
        if (k + 1) % snapshot_every == 0 or k + 1 == n_steps:
            snap_times.append((k + 1) * cfg.dt)
            snaps.append((U.copy(), P.copy()))
    return snap_times, snaps


def ensemble_report_from_snaps(grid: Grid, snap_times, snaps,
                               seed: int | None = None) -> AttractorReport:
    """Diagnostics over stored ensemble snapshots: phase-space diameter,
    distance to the operationally defined higher-energy ball (radius = twice
    the largest higher-energy norm of member 0 over the last quarter of the
    run), and box counts of the (|u|_H1, |p|_L2) projection."""
    B = snaps[0][0].shape[0]
    lam = gr.laplacian_eigenvalues(grid).ravel()
    w_e, w_e1 = _spectral_weights(grid)

    def coeffs(Um, Pm):
        cs = [gr.sine_coefficients_array(Um[a], grid).ravel()
              for a in range(grid.dim)]
        cs.append(gr.sine_coefficients_array(Pm, grid).ravel())
        return np.concatenate(cs)

    all_coeffs = []      # per snapshot: (B, len)
    for Us, Ps in snaps:
        all_coeffs.append(np.stack([coeffs(Us[m], Ps[m]) for m in range(B)]))

    # ball radius from member 0 over the last quarter
    q0 = len(snap_times) - max(1, len(snap_times) // 4)
    e1_member0 = [np.sqrt(np.sum(w_e1 * c[0] * c[0])) for c in all_coeffs[q0:]]
    r_ball = 2.0 * float(max(e1_member0))

    diam = []
    dist = []
    for c, t in zip(all_coeffs, snap_times):
        worst = 0.0
        for i in range(B):
            for j in range(i + 1, B):
                d = c[i] - c[j]
                worst = max(worst, float(np.sqrt(np.sum(w_e * d * d))))
        diam.append((t, worst))
        far = 0.0
        for i in range(B):
            if float(np.sum(w_e1 * c[i] * c[i])) <= r_ball ** 2:
                continue
            snap_idx = snap_times.index(t)
            Us, Ps = snaps[snap_idx]
            far = max(far, dist_to_higher_ball(
                VectorField(grid, Us[i]), ScalarField(grid, Ps[i]), r_ball))
        dist.append((t, far))

    # box counting over the last half of the run
    half = len(snap_times) // 2
    pts = []
    for c in all_coeffs[half:]:
        for i in range(B):
            cu2 = np.sum(w_e[:grid.dim * lam.size] * c[i, :grid.dim * lam.size] ** 2)
            cp2 = np.sum(c[i, grid.dim * lam.size:] ** 2)
            pts.append((np.sqrt(cu2), np.sqrt(cp2)))
    boxes = box_counts(np.array(pts))

    return AttractorReport(ensemble_size=B, diam_series=np.array(diam),
                           dist_to_ball_series=np.array(dist), r_ball=r_ball,
                           box_counts=boxes, seed=seed)


def ensemble_study(initial_states: list[dyn.SimState], cfg: dyn.SolverConfig,
                   g, D: MediumMatrix, params: NonlinearityParams,
                   t_max: float, snapshot_every: int = 50,
                   seed: int | None = None,
                   convective_on: bool = False) -> AttractorReport:
    """Evolve the ensemble and reduce the attractor diagnostics.

    Evolution is deterministic given the initial states; `seed` is recorded
    so reports can name the generator seed that produced them.
    """
    grid = initial_states[0].grid
    snap_times, snaps = evolve_ensemble(initial_states, cfg, g, D, params,
                                        t_max, snapshot_every, convective_on)
    return ensemble_report_from_snaps(grid, snap_times, snaps, seed)


# ---------------------------------------------------------------------------
# envelope fitting (Lipschitz-style diagnostics)
# ---------------------------------------------------------------------------

def fit_envelope(times, ratios) -> tuple[float, float]:
    """(C, K) with ratios(t) <= C e^{K t}: K from least squares on the log,
    C lifted so the envelope touches the series from above."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(ratios, dtype=float)
    if np.any(v <= 0.0):
        raise ValueError("ratio series must be positive")
    K = float(np.polyfit(t, np.log(v), 1)[0])
    C = float(np.max(v * np.exp(-K * t)))
    return C, K
