"""Hand-rolled conjugate gradients on ndarray unknowns."""

from __future__ import annotations

from typing import Callable

import numpy as np


class CGError(RuntimeError):
    """CG failed to reach tolerance; carries the last relative residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (rel residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def conjugate_gradient(
    apply_op: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = 1e-12,
    max_iter: int | None = None,
    inner: Callable[[np.ndarray, np.ndarray], float] | None = None,
    precondition: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Solve A x = b for A self-adjoint positive definite in `inner`.

    `inner` defaults to the flat Euclidean dot product; pass a weighted dot
    when A is only self-adjoint in a weighted metric. `precondition`, if
    given, applies an SPD approximate inverse of A (standard preconditioned
    CG). Convergence is ||r|| <= rtol * ||b|| in `inner`'s norm, measured on
    the true residual either way.
    """
    dot = inner if inner is not None else lambda u, v: float(np.vdot(u, v))
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_op(x) if x0 is not None else b.copy()
    bnorm = np.sqrt(dot(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    if max_iter is None:
        max_iter = 40 * int(np.sqrt(b.size)) + 200
    tol2 = (rtol * bnorm) ** 2
    rs_plain = dot(r, r)
    if rs_plain <= tol2:
        return x
    z = precondition(r) if precondition is not None else r
    p = z.copy()
    rz = dot(r, z)
    for it in range(max_iter):
        Ap = apply_op(p)
        pAp = dot(p, Ap)
        if pAp <= 0.0:
            raise CGError("operator not positive definite on Krylov direction",
                          float(np.sqrt(rs_plain) / bnorm), it)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_plain = dot(r, r)
        if rs_plain <= tol2:
            return x
        z = precondition(r) if precondition is not None else r
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CGError("conjugate gradients did not converge",
                  float(np.sqrt(rs_plain) / bnorm), max_iter)
