"""IR-guided depth hole filling in the style of colorization by optimization.

Each missing pixel p must equal the weighted average of its neighbors,

    d(p) - sum_q w(p, q) d(q) = 0,    w(p, q) ~ exp(-(I(p) - I(q))^2 / (2 sigma_p^2)),

with weights normalized over the neighborhood of p and sigma_p^2 the IR
variance in the 3x3 window around p. Observed pixels are fixed (Dirichlet),
so the unknowns are the missing pixels only.

The equation matrix A = I - W is not symmetric (the weights are normalized
per row and sigma varies per pixel), so the solver works on the quadratic
cost ||A d - b||^2 whose normal equations A^T A d = A^T b are symmetric
positive definite whenever every hole touches observed depth. Their unique
solution is the solution of A d = b.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from irdseg.preprocess import missing_mask

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
OFFSETS = {
    4: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


class UnsolvableRegionError(ValueError):
    def __init__(self, pixels):
        self.pixels = [tuple(int(v) for v in p) for p in pixels]
        preview = ", ".join(map(str, self.pixels[:8]))
        more = "" if len(self.pixels) <= 8 else f", ... ({len(self.pixels)} pixels)"
        super().__init__(f"hole touches no observed depth: {preview}{more}")


class ConvergenceError(RuntimeError):
    pass


@dataclass
class SparseSystem:
    """SPD system in CSR form, plus the pixel coordinates of each unknown."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    rhs: np.ndarray
    pixels: np.ndarray

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=(self.n, self.n))


def local_variance(ir: np.ndarray) -> np.ndarray:
    """Population variance over the 3x3 window (clipped at the image border), floored."""
    ir = np.asarray(ir, dtype=np.float64)
    h, w = ir.shape
    s = np.zeros_like(ir)
    s2 = np.zeros_like(ir)
    cnt = np.zeros_like(ir)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(0, -dy), h - max(0, dy))
            xs = slice(max(0, -dx), w - max(0, dx))
            src = ir[max(0, dy) : h + min(0, dy), max(0, dx) : w + min(0, dx)]
            s[ys, xs] += src
            s2[ys, xs] += src * src
            cnt[ys, xs] += 1
    mean = s / cnt
    return np.maximum(s2 / cnt - mean * mean, VARIANCE_FLOOR)


def _weight_field(ir: np.ndarray, neighborhood: int) -> np.ndarray:
    """H x W x K normalized weights toward each offset; 0 where the neighbor is off-image."""
    offsets = OFFSETS[neighborhood]
    ir = np.asarray(ir, dtype=np.float64)
    h, w = ir.shape
    var = local_variance(ir)
    logits = np.full((h, w, len(offsets)), -np.inf)
    for k, (dy, dx) in enumerate(offsets):
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        nb = ir[max(0, dy) : h + min(0, dy), max(0, dx) : w + min(0, dx)]
        diff = ir[ys, xs] - nb
        logits[ys, xs, k] = -(diff * diff) / (2.0 * var[ys, xs])
    # normalizing in log space keeps at least one weight nonzero
    logits -= logits.max(axis=2, keepdims=True)
    wts = np.exp(logits)
    return wts / wts.sum(axis=2, keepdims=True)


def neighbor_weights(ir: np.ndarray, p: tuple[int, int], neighborhood: int = 4) -> dict:
    """Normalized weights {(y, x): w} from pixel ``p`` to its in-image neighbors."""
    if neighborhood not in OFFSETS:
        raise ValueError("neighborhood must be 4 or 8")
    wts = _weight_field(ir, neighborhood)
    h, w = np.shape(ir)
    y, x = p
    out = {}
    for k, (dy, dx) in enumerate(OFFSETS[neighborhood]):
        qy, qx = y + dy, x + dx
        if 0 <= qy < h and 0 <= qx < w:
            out[(qy, qx)] = float(wts[y, x, k])
    return out


def build_equations(depth: np.ndarray, ir: np.ndarray, mask: np.ndarray | None = None, neighborhood: int = 4):
    """Equation form A d = b over the missing pixels.

    Returns (A as CSR, b, pixel coordinates of the unknowns).
    """
    if neighborhood not in OFFSETS:
        raise ValueError("neighborhood must be 4 or 8")
    depth = np.asarray(depth, dtype=np.float64)
    if np.shape(ir) != depth.shape:
        raise ValueError(f"IR {np.shape(ir)} and depth {depth.shape} differ in extent")
    if mask is None:
        mask = missing_mask(depth)
    missing = np.asarray(mask) > 0
    h, w = depth.shape
    pixels = np.argwhere(missing)
    n = len(pixels)
    index = np.full((h, w), -1, dtype=np.int64)
    index[missing] = np.arange(n)
    wts = _weight_field(ir, neighborhood)

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.ones(n)]
    rhs = np.zeros(n)
    py, px = pixels[:, 0], pixels[:, 1]
    for k, (dy, dx) in enumerate(OFFSETS[neighborhood]):
        qy, qx = py + dy, px + dx
        inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        src = np.nonzero(inside)[0]
        qy, qx = qy[inside], qx[inside]
        wk = wts[py[src], px[src], k]
        target = index[qy, qx]
        unknown = target >= 0
        rows.append(src[unknown])
        cols.append(target[unknown])
        vals.append(-wk[unknown])
        np.add.at(rhs, src[~unknown], wk[~unknown] * depth[qy[~unknown], qx[~unknown]])
    a = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    _check_anchored(a, rhs, wts, pixels, index, neighborhood, (h, w))
    return a, rhs, pixels


def _check_anchored(a, rhs, wts, pixels, index, neighborhood, shape):
    """Every connected group of unknowns needs a positive weight toward observed depth."""
    n = len(pixels)
    if n == 0:
        return
    h, w = shape
    anchored = np.zeros(n, dtype=bool)
    py, px = pixels[:, 0], pixels[:, 1]
    for k, (dy, dx) in enumerate(OFFSETS[neighborhood]):
        qy, qx = py + dy, px + dx
        inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        hit = np.zeros(n, dtype=bool)
        hit[inside] = (index[qy[inside], qx[inside]] < 0) & (wts[py[inside], px[inside], k] > 0)
        anchored |= hit
    coupling = a.copy()
    coupling.setdiag(0)
    coupling.eliminate_zeros()
    ncomp, labels = connected_components(coupling, directed=False)
    good = np.zeros(ncomp, dtype=bool)
    good[labels[anchored]] = True
    if not good.all():
        bad = np.isin(labels, np.nonzero(~good)[0])
        raise UnsolvableRegionError(pixels[bad])


def build_system(depth: np.ndarray, ir: np.ndarray, mask: np.ndarray | None = None, neighborhood: int = 4) -> SparseSystem:
    a, b, pixels = build_equations(depth, ir, mask, neighborhood)
    at = a.T.tocsr()
    m = (at @ a).tocsr()
    m.sort_indices()
    return SparseSystem(len(pixels), m.indptr, m.indices, m.data, at @ b, pixels)


def conjugate_gradient(matrix, rhs: np.ndarray, tol: float = 1e-8, max_iter: int | None = None, jacobi: bool = False):
    """Plain (optionally Jacobi-preconditioned) CG. Returns (x, iterations)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(rhs, dtype=np.float64)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if n == 0 or bnorm == 0.0:
        return x, 0
    inv_diag = None
    if jacobi:
        diag = matrix.diagonal()
        if np.any(diag <= 0):
            raise ConvergenceError("nonpositive diagonal: system is not SPD")
        inv_diag = 1.0 / diag
    r = b.copy()
    z = r * inv_diag if jacobi else r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = matrix @ p
        curvature = p @ ap
        if curvature <= 0:
            raise ConvergenceError(f"CG breakdown at iteration {it}: p^T A p = {curvature:.3e}, system is not SPD")
        step = rz / curvature
        x += step * p
        r -= step * ap
        if np.linalg.norm(r) <= tol * bnorm:
            # confirm against the true residual to guard against drift
            if np.linalg.norm(b - matrix @ x) <= tol * bnorm:
                return x, it
            r = b - matrix @ x
        z = r * inv_diag if jacobi else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    resid = np.linalg.norm(b - matrix @ x) / bnorm
    raise ConvergenceError(f"CG did not converge in {max_iter} iterations (relative residual {resid:.3e})")


def cg_solve(system: SparseSystem, tol: float = 1e-8, max_iter: int | None = None, jacobi: bool = False) -> np.ndarray:
    x, iters = conjugate_gradient(system.matrix(), system.rhs, tol, max_iter, jacobi)
    log.debug("CG converged in %d iterations for %d unknowns", iters, system.n)
    return x


def fill_depth(
    depth: np.ndarray,
    ir: np.ndarray,
    neighborhood: int = 4,
    tol: float = 1e-10,
    max_iter: int | None = None,
    jacobi: bool = False,
) -> np.ndarray:
    """Dense depth: observed pixels untouched, holes replaced by the guided solve."""
    depth = np.asarray(depth, dtype=np.float64)
    out = depth.copy()
    system = build_system(depth, ir, None, neighborhood)
    if system.n:
        x = cg_solve(system, tol, max_iter, jacobi)
        out[system.pixels[:, 0], system.pixels[:, 1]] = x
    return out
