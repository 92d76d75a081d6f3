"""Constitutive content of the model.

Nonlinear drag f(u) = phi(|u|^2) u with phi(z) = alpha + beta z^l + gamma sqrt(z),
its potential and Jacobian, the constant symmetric positive definite medium
matrix D, forcings, the divergence right-inverse (minimum-seminorm realization),
energy functionals, and the energy-preserving convective term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import grid as gr
from .grid import Grid, ScalarField, VectorField
from .krylov import conjugate_gradient

__all__ = [
    "NonlinearityParams", "MediumMatrix", "Forcing", "EnergyReport",
    "eval_phi", "eval_f", "eval_potential", "apply_fprime", "monotone_shift",
    "bogovski", "energy_report", "convective", "certify_eps",
    "dissipation_form",
]


@dataclass(frozen=True)
class NonlinearityParams:
    """Coefficients of phi(z) = alpha + beta z^l + gamma sqrt(z), z = |u|^2.

    `shift` caches a certified monotone shift L (see `monotone_shift`); it is
    carried, not applied: solvers that need f + L id add it explicitly.
    """

    alpha: float
    beta: float
    gamma: float = 0.0
    l: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be nonnegative")
        if not 0.0 < self.l <= 2.0:
            raise ValueError(f"growth exponent l must lie in (0, 2], got {self.l}")
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")

    def dissipative(self) -> bool:
        """Coefficient condition the drag-dissipativity scenarios rely on."""
        if self.l == 0.5:
            return self.beta + self.gamma > 0
        if self.l > 0.5:
            return self.beta > 0
        return True

    def with_shift(self, shift: float) -> "NonlinearityParams":
        return NonlinearityParams(self.alpha, self.beta, self.gamma, self.l, shift)

    def is_zero(self) -> bool:
        return self.alpha == 0.0 and self.beta == 0.0 and self.gamma == 0.0


@dataclass(frozen=True)
class MediumMatrix:
    """Constant symmetric positive definite medium matrix."""

    entries: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.entries, dtype=float)
        object.__setattr__(self, "entries", mat)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("medium matrix must be square")
        scale = max(1.0, float(np.abs(mat).max()))
        if np.abs(mat - mat.T).max() > 1e-14 * scale:
            raise ValueError("medium matrix must be symmetric (to 1e-14)")
        eigs = np.linalg.eigvalsh(mat)
        if eigs[0] <= 0:
            raise ValueError(f"medium matrix must be positive definite, eigmin={eigs[0]}")
        object.__setattr__(self, "_eigs", eigs)

    @classmethod
    def identity(cls, dim: int) -> "MediumMatrix":
        return cls(np.eye(dim))

    @classmethod
    def diagonal(cls, diag) -> "MediumMatrix":
        return cls(np.diag(np.asarray(diag, dtype=float)))

    @property
    def eigmin(self) -> float:
        return float(self._eigs[0])

    @property
    def eigmax(self) -> float:
        return float(self._eigs[-1])

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def apply_array(self, u: np.ndarray) -> np.ndarray:
        """Matrix-vector product over the component axis preceding the grid
        axes (batch axes may precede it)."""
        comp_ax = u.ndim - self.dim - 1
        out = np.tensordot(self.entries, u, axes=([1], [comp_ax]))
        return np.moveaxis(out, 0, comp_ax)

    def matvec(self, U: VectorField) -> VectorField:
        return VectorField(U.grid, self.apply_array(U.values))


@dataclass
class Forcing:
    """Time-independent base plus an optional sampled time series.

    The series is interpolated linearly in t and clamped outside its range;
    `at(t)` always includes the base term.
    """

    base: VectorField
    time_series: list[tuple[float, VectorField]] | None = None

    def __post_init__(self):
        if self.time_series:
            times = [t for t, _ in self.time_series]
            if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
                raise ValueError("time_series must be strictly increasing in t")
            for _, f in self.time_series:
                if f.grid != self.base.grid:
                    raise ValueError("time_series fields must share the base grid")

    @classmethod
    def zero(cls, grid: Grid) -> "Forcing":
        return cls(gr.zeros_vector(grid))

    @classmethod
    def constant(cls, g: VectorField) -> "Forcing":
        return cls(g)

    @property
    def grid(self) -> Grid:
        return self.base.grid

    def at_array(self, t: float) -> np.ndarray:
        if not self.time_series:
            return self.base.values
        times = np.array([s for s, _ in self.time_series])
        if t <= times[0]:
            return self.base.values + self.time_series[0][1].values
        if t >= times[-1]:
            return self.base.values + self.time_series[-1][1].values
        j = int(np.searchsorted(times, t, side="right"))
        t0, f0 = self.time_series[j - 1]
        t1, f1 = self.time_series[j]
        w = (t - t0) / (t1 - t0)
        return self.base.values + (1.0 - w) * f0.values + w * f1.values

    def at(self, t: float) -> VectorField:
        return VectorField(self.grid, self.at_array(t).copy())


@dataclass
class EnergyReport:
    e_plain: float       # |u|^2_{L2_D} + |p|^2
    e_eps: float         # perturbed functional with the divergence right-inverse
    eps: float
    dissipation: float   # |grad u|^2_{L2_D} realized as -<lap u, D u>
    f_work: float        # (f(u), D u)
    g_work: float        # (g, D u)


# ---------------------------------------------------------------------------
# nonlinearity
# ---------------------------------------------------------------------------

def _phi_array(z: np.ndarray, p: NonlinearityParams) -> np.ndarray:
    out = np.full_like(z, p.alpha)
    if p.beta:
        out = out + p.beta * z ** p.l
    if p.gamma:
        out = out + p.gamma * np.sqrt(z)
    return out


def eval_phi(z: float, params: NonlinearityParams) -> float:
    if z < 0:
        raise ValueError(f"phi is defined for z >= 0, got {z}")
    return float(_phi_array(np.asarray(z, dtype=float), params))


def f_apply_array(u: np.ndarray, params: NonlinearityParams, dim: int) -> np.ndarray:
    """phi(|u|^2) u, batch-safe over leading axes."""
    if params.is_zero():
        return np.zeros_like(u)
    comp_ax = u.ndim - dim - 1
    z = np.sum(u * u, axis=comp_ax, keepdims=True)
    return _phi_array(z, params) * u


def eval_f(u: VectorField, params: NonlinearityParams) -> VectorField:
    return VectorField(u.grid, f_apply_array(u.values, params, u.grid.dim))


def eval_potential(u: VectorField, params: NonlinearityParams) -> float:
    """h^d * sum of F(u), F the radial antiderivative: dF(su)/ds|_{s=1} = f(u).u."""
    z = np.sum(u.values * u.values, axis=0)
    F = 0.5 * (params.alpha * z
               + params.beta * z ** (params.l + 1.0) / (params.l + 1.0)
               + (2.0 / 3.0) * params.gamma * z ** 1.5)
    return float(u.grid.cell_volume * F.sum())


def fprime_apply_array(u: np.ndarray, v: np.ndarray,
                       params: NonlinearityParams, dim: int) -> np.ndarray:
    """Exact Jacobian action f'(u) v = phi(z) v + 2 phi'(z) (u.v) u, z = |u|^2.

    The phi' branch is masked at z = 0, where the rank-one term vanishes in
    the limit for every admissible exponent.
    """
    if params.is_zero():
        return np.zeros_like(v)
    comp_ax = u.ndim - dim - 1
    z = np.sum(u * u, axis=comp_ax, keepdims=True)
    out = _phi_array(z, params) * v
    if params.beta == 0.0 and params.gamma == 0.0:
        return out
    zsafe = np.where(z > 0.0, z, 1.0)
    dphi = np.zeros_like(z)
    if params.beta:
        dphi += params.beta * params.l * zsafe ** (params.l - 1.0)
    if params.gamma:
        dphi += params.gamma / (2.0 * np.sqrt(zsafe))
    dphi = np.where(z > 0.0, dphi, 0.0)
    s = np.sum(u * v, axis=comp_ax, keepdims=True)
    return out + 2.0 * dphi * s * u


def apply_fprime(u: VectorField, v: VectorField, params: NonlinearityParams) -> VectorField:
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    return VectorField(u.grid, fprime_apply_array(u.values, v.values, params, u.grid.dim))


def fprime_eigenvalues(z: np.ndarray, params: NonlinearityParams) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of f'(v) at z = |v|^2: phi(z) across v, phi(z) + 2 z phi'(z) along v."""
    e1 = _phi_array(z, params)
    along = e1.copy()
    if params.beta:
        along = along + 2.0 * params.beta * params.l * z ** params.l
    if params.gamma:
        along = along + params.gamma * np.sqrt(z)
    return e1, along


def monotone_shift(params: NonlinearityParams, u_max: float) -> float:
    """Smallest L (1% bracketing) with eig(f'(v)) + L >= 0 for all |v| <= u_max.

    Scans the closed-form eigenvalue branches on a 1000-point log grid in
    z = |v|^2 plus z = 0, then refines around the worst sample. For the
    nonnegative-coefficient phi family both branches take their minimum
    alpha >= 0 at z = 0, so the certified shift is zero; the scan is kept as
    the certificate.
    """
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    zmax = u_max * u_max
    zs = np.concatenate([[0.0], np.geomspace(zmax * 1e-12, zmax, 1000)])
    e1, e2 = fprime_eigenvalues(zs, params)
    worst = np.minimum(e1, e2)
    m = float(worst.min())
    if m >= 0.0:
        return 0.0
    # refine the bracket around the worst sample to 1% in L
    j = int(np.argmin(worst))
    lo = zs[max(j - 1, 0)]
    hi = zs[min(j + 1, len(zs) - 1)]
    for _ in range(200):
        if hi - lo <= 0.0:
            break
        z1 = lo + (hi - lo) / 3.0
        z2 = hi - (hi - lo) / 3.0
        g1 = float(np.minimum(*fprime_eigenvalues(np.array([z1]), params)))
        g2 = float(np.minimum(*fprime_eigenvalues(np.array([z2]), params)))
        if g1 < g2:
            hi = z2
        else:
            lo = z1
        if abs(min(g1, g2)) > 0 and (hi - lo) < 1e-6 * zmax:
            break
        m = min(m, g1, g2)
    return -m * 1.005


# ---------------------------------------------------------------------------
# divergence right-inverse
# ---------------------------------------------------------------------------

def _neg_lap_solve(b: np.ndarray, grid: Grid, rtol: float) -> np.ndarray:
    return conjugate_gradient(
        lambda x: -gr.lap_array(x, grid.h, grid.dim), b, rtol=rtol)


def _a0_symbol_preconditioner(grid: Grid):
    """Approximate inverse of G^T (-lap)^-1 G in the sine basis.

    The wide central-difference symbol over the compact Laplacian symbol is
    the diagonal of that operator up to boundary coupling; dividing by it is
    an SPD preconditioner that tames the near-checkerboard pressure modes.
    """
    h = grid.h
    k = np.arange(1, grid.n + 1)
    wide1 = (np.sin(k * np.pi * h) / h) ** 2
    wide = np.zeros(grid.shape)
    for a in range(grid.dim):
        shape = [1] * grid.dim
        shape[a] = grid.n
        wide = wide + wide1.reshape(shape)
    symbol = wide / gr.laplacian_eigenvalues(grid)

    def apply(r: np.ndarray) -> np.ndarray:
        c = gr.sine_coefficients_array(r, grid)
        return gr.sine_synthesis_array(c / symbol, grid)

    return apply


def bogovski(p: ScalarField, rtol: float = 1e-10, inner_rtol: float = 1e-12) -> VectorField:
    """Minimum-H1-seminorm right inverse of the divergence on mean-zero fields.

    Solves (G^T M G) s = -p with M the inverse Dirichlet vector Laplacian and
    returns w = M G s, so that div w = p to the conjugate-gradient tolerance
    and w carries the zero extension by construction. The outer CG is
    symbol-preconditioned; its residual is still measured against the true
    operator.
    """
    grid = p.grid
    pv = p.values
    p0 = pv - pv.mean()
    scale = float(np.abs(p0).max())
    if scale > 0 and abs(pv.mean()) > 1e-12 * scale:
        warnings.warn("bogovski input had nonzero mean; projected internally",
                      stacklevel=2)
    if scale == 0.0:
        return gr.zeros_vector(grid)

    def apply_a0(s: np.ndarray) -> np.ndarray:
        w = _neg_lap_solve(gr.grad_array(s, grid.h, grid.dim), grid, inner_rtol)
        return -gr.div_array(w, grid.h, grid.dim)

    s = conjugate_gradient(apply_a0, -p0, rtol=rtol,
                           precondition=_a0_symbol_preconditioner(grid))
    w = _neg_lap_solve(gr.grad_array(s, grid.h, grid.dim), grid, inner_rtol)
    return VectorField(grid, w)


# ---------------------------------------------------------------------------
# energy functionals
# ---------------------------------------------------------------------------

def dissipation_form(D: MediumMatrix, u: VectorField) -> float:
    """|grad u|^2_{L2_D} in the summation-by-parts form -<lap u, D u>.

    This is the exact quantity produced by the semi-discrete energy identity;
    it coincides with the D-weighted forward-difference gradient energy.
    """
    return -gr.vector_inner(gr.laplacian(u), D.matvec(u))


def energy_report(u: VectorField, p: ScalarField, g: VectorField,
                  D: MediumMatrix, params: NonlinearityParams,
                  eps: float) -> EnergyReport:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    e_plain = gr.weighted_inner(D, u, u) + gr.inner(p, p)
    coupling = 2.0 * eps * gr.vector_inner(u, bogovski(p)) if eps > 0 else 0.0
    return EnergyReport(
        e_plain=e_plain,
        e_eps=e_plain + coupling,
        eps=eps,
        dissipation=dissipation_form(D, u),
        f_work=gr.vector_inner(eval_f(u, params), D.matvec(u)),
        g_work=gr.vector_inner(g, D.matvec(u)),
    )


def certify_eps(grid: Grid, D: MediumMatrix, n_samples: int = 50,
                seed: int = 2024) -> float:
    """Largest eps keeping the perturbed energy within [1/2, 3/2] of the plain
    one over `n_samples` random states (sampled certificate)."""
    from .rng import SplitMix64
    rng = SplitMix64(seed)
    best = np.inf
    for _ in range(n_samples):
        u = VectorField(grid, rng.normal((grid.dim,) + grid.shape))
        p = ScalarField(grid, rng.normal(grid.shape))
        p = gr.project_mean_zero(p)
        e_plain = gr.weighted_inner(D, u, u) + gr.inner(p, p)
        coupling = gr.vector_inner(u, bogovski(p))
        if coupling != 0.0:
            best = min(best, e_plain / (4.0 * abs(coupling)))
    return float(best)


# ---------------------------------------------------------------------------
# convective term
# ---------------------------------------------------------------------------

def convective_array(u: np.ndarray, v: np.ndarray, h: float, dim: int) -> np.ndarray:
    """B(u, v) = (u.grad) v + (1/2) div(u) v in the split central form
    (1/2)[(u.grad) v + grad.(u x v)], whose discrete pairing with v vanishes
    identically because the central difference matrix is antisymmetric."""
    comp_ax = u.ndim - dim - 1
    out = np.zeros_like(v)
    for a in range(dim):
        va = np.take(v, a, axis=comp_ax)
        acc = np.zeros_like(va)
        for b in range(dim):
            ub = np.take(u, b, axis=comp_ax)
            dva = (gr._shifted(va, dim, b, -1) - gr._shifted(va, dim, b, 1)) / (2.0 * h)
            prod = ub * va
            dprod = (gr._shifted(prod, dim, b, -1) - gr._shifted(prod, dim, b, 1)) / (2.0 * h)
            acc += 0.5 * (ub * dva + dprod)
        idx = [slice(None)] * out.ndim
        idx[comp_ax] = a
        out[tuple(idx)] = acc
    return out


def convective(u: VectorField, v: VectorField) -> VectorField:
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")
    return VectorField(u.grid, convective_array(u.values, v.values, u.grid.h, u.grid.dim))
