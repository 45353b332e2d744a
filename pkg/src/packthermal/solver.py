"""Steady 2D pack temperature solvers.

Two discretizations of ``div(lam grad T) + phi = 0`` with insulated walls,
battery source ``phi_b`` and coolant sink ``-k (T - T0)``:

``lowfi``
    the non-conservative 5-point stencil obtained by expanding the divergence
    (central differences on ``lam`` and ``T``, Laplacian scaled by the centre
    conductivity), with walls handled by mirroring index -1 onto index 1.
    This is exactly the system whose Jacobi fixed point the physics loss
    measures.
``reference``
    the conservative finite-volume scheme with harmonic-mean face
    conductivities and zero-flux wall faces. It stands in for the
    high-fidelity ground truth.

Both are written as ``aP T_c = aE T_e + aW T_w + aN T_n + aS T_s + b`` (all
terms multiplied by ``h^2``) and solved by Gauss-Seidel sweeps, a sparse
direct factorization, or a dense brute-force solve for small grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import GridSpec, PackConfig, ScalarField
from .layout import BatteryMask

SCHEMES = ("lowfi", "reference")
METHODS = ("iterative", "sparse", "dense")
DENSE_MAX_SIDE = 32


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    pass


class SingularSystemError(SolverError):
    pass


class GridTooLargeError(SolverError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    tolerance: float = 1e-10
    max_iterations: int = 200_000
    method: str = "iterative"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")


@dataclass(frozen=True)
class Stencil:
    """Per-pixel 5-point coefficients; out-of-grid neighbours are already folded."""

    ap: np.ndarray
    ae: np.ndarray
    aw: np.ndarray
    an: np.ndarray
    as_: np.ndarray
    b: np.ndarray


def _reflect(a: np.ndarray) -> np.ndarray:
    return np.pad(a, 1, mode="reflect")


def _check_inputs(lam: ScalarField, mask: BatteryMask) -> None:
    if lam.spec.shape != mask.spec.shape:
        raise ValueError(f"conductivity grid {lam.spec.shape} != mask grid {mask.spec.shape}")
    if mask.flags.all():
        raise SingularSystemError(
            "no coolant pixels: pure-Neumann system without a sink is singular")


def build_stencil(lam: ScalarField, mask: BatteryMask, config: PackConfig,
                  scheme: str = "lowfi") -> Stencil:
    _check_inputs(lam, mask)
    h2 = lam.spec.h ** 2
    v = lam.values
    bat = mask.flags
    sink = np.where(bat, 0.0, config.k * h2)
    b = np.where(bat, config.phi_b * h2, config.k * h2 * config.t0)
    if scheme == "lowfi":
        p = _reflect(v)
        gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 4  # columns: +x is "east"
        gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 4  # rows: +y is "north"
        ae, aw = v + gx, v - gx
        an, as_ = v + gy, v - gy
        ap = 4 * v + sink
    elif scheme == "reference":
        def hmean(a, c):
            return 2 * a * c / (a + c)
        ae = np.zeros_like(v)
        aw = np.zeros_like(v)
        an = np.zeros_like(v)
        as_ = np.zeros_like(v)
        fx = hmean(v[:, :-1], v[:, 1:])
        ae[:, :-1] = fx
        aw[:, 1:] = fx
        fy = hmean(v[:-1, :], v[1:, :])
        an[:-1, :] = fy
        as_[1:, :] = fy
        ap = ae + aw + an + as_ + sink
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return Stencil(ap, ae, aw, an, as_, b)


@nb.njit(cache=True)
def _nbr(i, n):
    # mirror about the boundary node: -1 -> 1, n -> n-2
    if i < 0:
        return 1
    if i >= n:
        return n - 2
    return i


@nb.njit(cache=True)
def _residual_inf(t, ap, ae, aw, an, as_, b):
    m, n = t.shape
    r = 0.0
    for i in range(m):
        for j in range(n):
            s = (ae[i, j] * t[i, _nbr(j + 1, n)] + aw[i, j] * t[i, _nbr(j - 1, n)]
                 + an[i, j] * t[_nbr(i + 1, m), j] + as_[i, j] * t[_nbr(i - 1, m), j]
                 + b[i, j] - ap[i, j] * t[i, j])
            r = max(r, abs(s))
    return r


@nb.njit(cache=True)
def _gauss_seidel(t, ap, ae, aw, an, as_, b, tol, max_sweeps):
    m, n = t.shape
    bnorm = 0.0
    for i in range(m):
        for j in range(n):
            bnorm = max(bnorm, abs(b[i, j]))
    if bnorm == 0.0:
        bnorm = 1.0
    for sweep in range(1, max_sweeps + 1):
        dmax = 0.0
        tmax = 0.0
        for i in range(m):
            for j in range(n):
                s = (ae[i, j] * t[i, _nbr(j + 1, n)] + aw[i, j] * t[i, _nbr(j - 1, n)]
                     + an[i, j] * t[_nbr(i + 1, m), j] + as_[i, j] * t[_nbr(i - 1, m), j]
                     + b[i, j])
                new = s / ap[i, j]
                dmax = max(dmax, abs(new - t[i, j]))
                t[i, j] = new
                tmax = max(tmax, abs(new))
        if dmax <= tol * tmax:
            if _residual_inf(t, ap, ae, aw, an, as_, b) <= tol * bnorm:
                return sweep
    return -1


def _sparse_matrix(st: Stencil) -> sp.csr_matrix:
    m, n = st.ap.shape
    idx = np.arange(m * n).reshape(m, n)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [st.ap.ravel()]
    ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")

    def mirror(k, size):
        k = np.where(k < 0, 1, k)
        return np.where(k >= size, size - 2, k)

    for coef, di, dj in ((st.ae, 0, 1), (st.aw, 0, -1), (st.an, 1, 0), (st.as_, -1, 0)):
        rows.append(idx.ravel())
        cols.append(idx[mirror(ii + di, m), mirror(jj + dj, n)].ravel())
        vals.append(-coef.ravel())
    a = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * n, m * n))
    return a.tocsr()


def _solve(lam, mask, config, opts, scheme) -> ScalarField:
    opts = opts or SolveOptions()
    if opts.method == "dense":
        return solve_dense(lam, mask, config, scheme=scheme)
    st = build_stencil(lam, mask, config, scheme)
    # Solve for the rise u = T - T0: a uniform field maps to the sink term
    # alone, so T0 drops out and the tolerances measure the heating itself
    # rather than the ambient offset.
    rise_b = st.b - config.t0 * (st.ap - st.ae - st.aw - st.an - st.as_)
    if opts.method == "sparse":
        u = spla.spsolve(_sparse_matrix(st).tocsc(), rise_b.ravel()).reshape(st.ap.shape)
        if not np.all(np.isfinite(u)):
            raise SingularSystemError("sparse factorization failed")
        return ScalarField(lam.spec, config.t0 + u)
    u = np.zeros(lam.spec.shape)
    sweeps = _gauss_seidel(u, st.ap, st.ae, st.aw, st.an, st.as_, rise_b,
                           opts.tolerance, opts.max_iterations)
    if sweeps < 0:
        raise ConvergenceError(
            f"Gauss-Seidel did not reach tolerance {opts.tolerance:g} in "
            f"{opts.max_iterations} sweeps")
    return ScalarField(lam.spec, config.t0 + u)


def solve_lowfi(lam: ScalarField, mask: BatteryMask, config: PackConfig,
                opts: SolveOptions | None = None) -> ScalarField:
    """Solve the expanded-divergence finite-difference system exactly."""
    return _solve(lam, mask, config, opts, "lowfi")


def solve_reference(lam: ScalarField, mask: BatteryMask, config: PackConfig,
                    opts: SolveOptions | None = None) -> ScalarField:
    """Solve the conservative harmonic-mean finite-volume system."""
    return _solve(lam, mask, config, opts, "reference")


def solve_dense(lam: ScalarField, mask: BatteryMask, config: PackConfig,
                scheme: str = "lowfi") -> ScalarField:
    """Brute-force oracle: assemble the full matrix pixel by pixel and factorize.

    Assembly is written directly from the pointwise equations and shares no
    code with :func:`build_stencil`.
    """
    m, n = lam.spec.shape
    if max(m, n) > DENSE_MAX_SIDE:
        raise GridTooLargeError(f"dense solve limited to {DENSE_MAX_SIDE}x{DENSE_MAX_SIDE}, "
                                f"got {m}x{n}")
    if lam.spec.shape != mask.spec.shape:
        raise ValueError("conductivity and mask grids differ")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    h = lam.spec.h
    h2 = h * h
    lv = lam.values
    bat = mask.flags
    a = np.zeros((m * n, m * n))
    rhs = np.zeros(m * n)

    def k_of(i, j):
        return i * n + j

    def fold(i, size):
        return 1 if i == -1 else (size - 2 if i == size else i)

    for i in range(m):
        for j in range(n):
            row = k_of(i, j)
            lc = lv[i, j]
            if scheme == "lowfi":
                nb_ = {d: (fold(i + d[0], m), fold(j + d[1], n))
                       for d in ((0, 1), (0, -1), (1, 0), (-1, 0))}
                lx = (lv[nb_[(0, 1)]] - lv[nb_[(0, -1)]]) / (2 * h)
                ly = (lv[nb_[(1, 0)]] - lv[nb_[(-1, 0)]]) / (2 * h)
                # lam_x * T_x + lam_y * T_y + lam_c * lap(T)
                a[row, k_of(*nb_[(0, 1)])] += lx / (2 * h) + lc / h2
                a[row, k_of(*nb_[(0, -1)])] += -lx / (2 * h) + lc / h2
                a[row, k_of(*nb_[(1, 0)])] += ly / (2 * h) + lc / h2
                a[row, k_of(*nb_[(-1, 0)])] += -ly / (2 * h) + lc / h2
                a[row, row] -= 4 * lc / h2
            else:
                for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < m and 0 <= jj < n):
                        continue  # insulated wall face
                    ln = lv[ii, jj]
                    face = 2 * lc * ln / (lc + ln)
                    a[row, k_of(ii, jj)] += face / h2
                    a[row, row] -= face / h2
            if bat[i, j]:
                rhs[row] = -config.phi_b
            else:
                a[row, row] -= config.k
                rhs[row] = -config.k * config.t0
    if np.all(bat):
        raise SingularSystemError("no coolant pixels: system is singular")
    try:
        t = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    return ScalarField(lam.spec, t.reshape(m, n))


def complete_intensity_array(t: np.ndarray, bat: np.ndarray, config: PackConfig) -> np.ndarray:
    """Source term with the coolant sink evaluated at ``t``."""
    return np.where(bat, config.phi_b, -config.k * (t - config.t0))


def jacobi_target_array(t: np.ndarray, lam: np.ndarray, phi: np.ndarray, h: float) -> np.ndarray:
    """Neighbour reconstruction ``T'`` whose quarter is the Jacobi update of each pixel.

    ``t``, ``lam`` and ``phi`` share their trailing two (spatial) axes; walls
    are mirrored without duplicating the edge node.
    """
    pad = [(0, 0)] * (t.ndim - 2) + [(1, 1), (1, 1)]
    tp = np.pad(t, pad, mode="reflect")
    lp = np.pad(np.broadcast_to(lam, t.shape), pad, mode="reflect")
    c = (Ellipsis, slice(1, -1), slice(1, -1))
    e = (Ellipsis, slice(1, -1), slice(2, None))
    w = (Ellipsis, slice(1, -1), slice(None, -2))
    nn = (Ellipsis, slice(2, None), slice(1, -1))
    s = (Ellipsis, slice(None, -2), slice(1, -1))
    lc = lp[c]
    return (h * h * phi / lc
            + (lp[e] - lp[w]) / lc * (tp[e] - tp[w]) / 4
            + (lp[nn] - lp[s]) / lc * (tp[nn] - tp[s]) / 4
            + tp[e] + tp[w] + tp[nn] + tp[s])


def residual_lowfi(t: ScalarField, lam: ScalarField, mask: BatteryMask,
                   config: PackConfig) -> ScalarField:
    """Per-pixel ``|T - T'/4|`` with the coolant intensity completed from ``T``."""
    phi = complete_intensity_array(t.values, mask.flags, config)
    tp = jacobi_target_array(t.values, lam.values, phi, t.spec.h)
    return ScalarField(t.spec, np.abs(t.values - tp / 4))


def energy_balance(t: ScalarField, mask: BatteryMask, config: PackConfig,
                   grid: GridSpec | None = None) -> dict:
    """Heat generated in the cells versus heat absorbed by the coolant sink (W/m)."""
    h2 = (grid or t.spec).h ** 2
    bat = mask.flags
    heat_in = float(bat.sum() * config.phi_b * h2)
    heat_out = float(np.sum(config.k * (t.values[~bat] - config.t0)) * h2)
    mismatch = 0.0 if heat_in == 0 else abs(heat_in - heat_out) / heat_in
    return {"heat_in": heat_in, "heat_out": heat_out, "relative_mismatch": mismatch}
