"""Discrete calculus on a uniform interior grid over the unit square/cube.

Conventions:
  * Interior nodes x_i = i*h, i = 1..n per axis, h = 1/(n+1); fields carry
    values on interior nodes only and are treated as zero outside them
    (homogeneous Dirichlet for velocities, plain zero extension otherwise).
  * grad/div are central second-order differences and are exact negative
    adjoints of each other under the h^d-weighted inner product.
  * laplacian is the compact 5-point (2D) / 7-point (3D) stencil, whose
    eigenvectors are exactly the sampled sine modes; all fractional norms
    are defined spectrally through that sine eigenbasis.
  * n must be even: for odd n the central-difference gradient has a
    checkerboard kernel mode, which would break the pressure operator's
    positivity and the divergence right-inverse.

All stencil helpers act on the trailing `dim` axes, so arrays with extra
leading axes (field components, ensemble members) go through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid", "ScalarField", "VectorField",
    "grad", "div", "laplacian", "weighted_inner", "sobolev_norm",
    "project_mean_zero", "inner", "vector_inner", "norm_l2",
    "sine_coefficients", "sine_synthesis", "spectral_norm",
    "vector_spectral_norm", "laplacian_eigenvalues", "zeros_scalar",
    "zeros_vector", "sine_mode", "coordinates",
]


@dataclass(frozen=True)
class Grid:
    """Uniform grid of n^dim interior nodes on the unit box."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.n < 4:
            raise ValueError(f"need n >= 4 interior nodes per axis, got {self.n}")
        if self.n % 2 != 0:
            raise ValueError(
                f"n must be even (odd n gives the central-difference gradient "
                f"a checkerboard kernel), got {self.n}")
        if self.h * (self.n + 1) != 1.0:
            raise ValueError(
                f"h*(n+1) != 1 in double precision for n={self.n}; "
                f"choose a neighbouring size")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def num_nodes(self) -> int:
        return self.n ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.h ** self.dim


def coordinates(grid: Grid) -> tuple[np.ndarray, ...]:
    """Mesh arrays of the interior node coordinates, shape grid.shape each."""
    axis = (np.arange(1, grid.n + 1) * grid.h)
    return tuple(np.meshgrid(*([axis] * grid.dim), indexing="ij"))


def _check_values(grid: Grid, values: np.ndarray, expected_shape: tuple[int, ...]):
    if values.shape != expected_shape:
        raise ValueError(f"field shape {values.shape} != expected {expected_shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite entries")


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_values(self.grid, self.values, self.grid.shape)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class VectorField:
    """dim-component field; component axis first, zero outside interior nodes."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        _check_values(self.grid, self.values, (self.grid.dim,) + self.grid.shape)

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy())


def zeros_scalar(grid: Grid) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.shape))


def zeros_vector(grid: Grid) -> VectorField:
    return VectorField(grid, np.zeros((grid.dim,) + grid.shape))


def _same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


# ---------------------------------------------------------------------------
# stencils (array level, trailing-axes convention)
# ---------------------------------------------------------------------------

def _padded(a: np.ndarray, dim: int) -> np.ndarray:
    """Copy of `a` with one zero ghost node around each trailing grid axis."""
    shape = a.shape[:-dim] + tuple(s + 2 for s in a.shape[-dim:])
    b = np.zeros(shape, dtype=a.dtype)
    idx = (slice(None),) * (a.ndim - dim) + (slice(1, -1),) * dim
    b[idx] = a
    return b


def _view(b: np.ndarray, dim: int, offsets: dict[int, int]) -> np.ndarray:
    """Interior-sized view of a padded array, shifted by `offsets[axis]`."""
    idx = [slice(None)] * (b.ndim - dim)
    for axis in range(dim):
        off = offsets.get(axis, 0)
        idx.append(slice(1 + off, b.shape[b.ndim - dim + axis] - 1 + off))
    return b[tuple(idx)]


def _shifted(a: np.ndarray, dim: int, axis: int, offset: int) -> np.ndarray:
    """a shifted by `offset` nodes along grid axis `axis`, zero-filled.

    out[..., i, ...] = a[..., i - offset, ...] with zero extension.
    """
    return _view(_padded(a, dim), dim, {axis: -offset}).copy()


def grad_array(p: np.ndarray, h: float, dim: int) -> np.ndarray:
    """Central gradient; output gains a component axis before the grid axes."""
    b = _padded(p, dim)
    scale = 1.0 / (2.0 * h)
    comps = [scale * (_view(b, dim, {a: 1}) - _view(b, dim, {a: -1}))
             for a in range(dim)]
    return np.stack(comps, axis=p.ndim - dim)


def div_array(U: np.ndarray, h: float, dim: int) -> np.ndarray:
    """Central divergence; consumes the component axis preceding the grid axes."""
    comp_ax = U.ndim - dim - 1
    b = _padded(U, dim)
    out = None
    for a in range(dim):
        ba = np.take(b, a, axis=comp_ax)
        term = _view(ba, dim, {a: 1}) - _view(ba, dim, {a: -1})
        out = term if out is None else out + term
    return out * (1.0 / (2.0 * h))


def lap_array(x: np.ndarray, h: float, dim: int) -> np.ndarray:
    """Compact Dirichlet Laplacian, applied over the trailing grid axes."""
    b = _padded(x, dim)
    out = -2.0 * dim * x
    for a in range(dim):
        out = out + _view(b, dim, {a: 1}) + _view(b, dim, {a: -1})
    return out * (1.0 / (h * h))


def grad(p: ScalarField) -> VectorField:
    return VectorField(p.grid, grad_array(p.values, p.grid.h, p.grid.dim))


def div(U: VectorField) -> ScalarField:
    return ScalarField(U.grid, div_array(U.values, U.grid.h, U.grid.dim))


def laplacian(U: VectorField) -> VectorField:
    return VectorField(U.grid, lap_array(U.values, U.grid.h, U.grid.dim))


# ---------------------------------------------------------------------------
# inner products and means
# ---------------------------------------------------------------------------

def inner(f: ScalarField, g: ScalarField) -> float:
    _same_grid(f, g)
    return float(f.grid.cell_volume * np.vdot(f.values, g.values))

def vector_inner(U: VectorField, V: VectorField) -> float:
    _same_grid(U, V)
    return float(U.grid.cell_volume * np.vdot(U.values, V.values))


def norm_l2(f: ScalarField | VectorField) -> float:
    w = f.grid.cell_volume
    return float(np.sqrt(w * np.vdot(f.values, f.values)))


def weighted_inner(D, U: VectorField, V: VectorField) -> float:
    """h^d * sum over nodes of (D u) . v for a constant symmetric matrix D.

    Accepts a physics.MediumMatrix or a bare (dim, dim) array.
    """
    _same_grid(U, V)
    mat = np.asarray(getattr(D, "entries", D), dtype=float)
    d = U.grid.dim
    if mat.shape != (d, d):
        raise ValueError(f"D must be {d}x{d}, got {mat.shape}")
    DU = np.einsum("ab,b...->a...", mat, U.values)
    return float(U.grid.cell_volume * np.vdot(DU, V.values))


def project_mean_zero(p: ScalarField) -> ScalarField:
    return ScalarField(p.grid, p.values - p.values.mean())


def mean_project_array(p: np.ndarray, dim: int) -> np.ndarray:
    """Subtract the grid mean over the trailing `dim` axes (batch-safe)."""
    axes = tuple(range(p.ndim - dim, p.ndim))
    return p - p.mean(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# sine eigenbasis: transforms, eigenvalues, fractional norms
# ---------------------------------------------------------------------------

def _dst1_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """2 * sum_j a_j sin(pi k j/(n+1)) along `axis`, via an odd FFT extension."""
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    buf = np.zeros(a.shape[:-1] + (2 * n + 2,))
    buf[..., 1:n + 1] = a
    buf[..., n + 2:] = -a[..., ::-1]
    out = -np.fft.rfft(buf, axis=-1).imag[..., 1:n + 1]
    return np.moveaxis(out, -1, axis)


def _dst_all_axes(a: np.ndarray, dim: int) -> np.ndarray:
    for axis in range(a.ndim - dim, a.ndim):
        a = _dst1_axis(a, axis)
    return a


def sine_coefficients(f: ScalarField) -> np.ndarray:
    """Coefficients in the h-orthonormal basis prod_a sqrt(2) sin(k_a pi x_a)."""
    return sine_coefficients_array(f.values, f.grid)


def sine_coefficients_array(values: np.ndarray, grid: Grid) -> np.ndarray:
    scale = (grid.h / np.sqrt(2.0)) ** grid.dim
    return scale * _dst_all_axes(values, grid.dim)


def sine_synthesis(coeffs: np.ndarray, grid: Grid) -> ScalarField:
    return ScalarField(grid, sine_synthesis_array(coeffs, grid))


def sine_synthesis_array(coeffs: np.ndarray, grid: Grid) -> np.ndarray:
    scale = (1.0 / np.sqrt(2.0)) ** grid.dim
    return scale * _dst_all_axes(coeffs, grid.dim)


def laplacian_eigenvalues(grid: Grid) -> np.ndarray:
    """Eigenvalues of -laplacian on the sine modes, indexed like a field array."""
    h = grid.h
    k = np.arange(1, grid.n + 1)
    lam1 = (4.0 / (h * h)) * np.sin(k * np.pi * h / 2.0) ** 2
    lam = np.zeros(grid.shape)
    for a in range(grid.dim):
        shape = [1] * grid.dim
        shape[a] = grid.n
        lam = lam + lam1.reshape(shape)
    return lam


def spectral_norm(f: ScalarField, exponent: float) -> float:
    """sqrt(sum_k lambda_k^exponent c_k^2); exponent 0 is the plain L2 norm.

    Exponents outside [0, 1] are legitimate here (H^{1+delta}, H^2
    diagnostics); `sobolev_norm` is the contract-checked [0, 1] entry point.
    """
    c = sine_coefficients(f)
    lam = laplacian_eigenvalues(f.grid)
    return float(np.sqrt(np.sum(lam ** exponent * c * c)))


def sobolev_norm(f: ScalarField, delta: float) -> float:
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    return spectral_norm(f, delta)


def vector_spectral_norm(U: VectorField, exponent: float) -> float:
    """Componentwise spectral norm: sqrt(sum_a |U_a|_{H^exponent}^2)."""
    lam = laplacian_eigenvalues(U.grid)
    total = 0.0
    for a in range(U.grid.dim):
        c = sine_coefficients_array(U.values[a], U.grid)
        total += float(np.sum(lam ** exponent * c * c))
    return float(np.sqrt(total))


def sine_mode(grid: Grid, k: tuple[int, ...], normalized: bool = True) -> ScalarField:
    """Sampled sine mode prod_a sin(k_a pi x_a); unit discrete L2 norm if normalized."""
    if len(k) != grid.dim:
        raise ValueError("wave vector length must equal grid.dim")
    xs = coordinates(grid)
    vals = np.ones(grid.shape)
    for a, ka in enumerate(k):
        vals = vals * np.sin(ka * np.pi * xs[a])
    if normalized:
        vals = vals * (np.sqrt(2.0) ** grid.dim)
    return ScalarField(grid, vals)
