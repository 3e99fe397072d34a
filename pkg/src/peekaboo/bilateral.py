"""Edge-aware refinement of soft masks in a simplified 5-D bilateral grid.

Every pixel of a reference image maps to the grid vertex containing its
(x / s_spatial, y / s_spatial, luma / s_luma, chroma1 / s_chroma,
chroma2 / s_chroma) coordinates. With S the splat matrix (vertex x pixel),
B the blur operator (a [1, 2, 1] kernel along each of the five grid
dimensions, centre tap counted once per dimension), and Dn, Dm the
bistochastization diagonals, refinement solves the bilateral-space system

    (lam * (Dm - Dn B Dn) + diag(S c)) y = S (c * t)

for vertex values y by Jacobi-preconditioned conjugate gradient, then reads
pixel values back through S^T. Bistochastization iterates
n <- sqrt(n m / B n) and finally rewrites m = n * (B n), which makes the
normalized blur preserve constants exactly, so the smoothness term has the
all-ones vector in its null space.

The refinement operator zeta used for pseudo-labels is
binarize(0.5) -> solve -> binarize(0.5) with uniform confidence.

Solver internals run in float64; pipeline data stays float32 at the edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grids import ShapeError, binarize, check_image, check_mask

logger = logging.getLogger(__name__)

GRID_DIMS = 5


@dataclass(frozen=True)
class SolverConfig:
    sigma_spatial: float = 16.0
    sigma_luma: float = 16.0
    sigma_chroma: float = 8.0
    lam: float = 30.0
    pcg_tol: float = 1e-5
    pcg_max_iter: int = 25 * GRID_DIMS

    def __post_init__(self):
        for name in ("sigma_spatial", "sigma_luma", "sigma_chroma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


def _reference_to_yuv(image: np.ndarray) -> np.ndarray:
    """BT.601 luma/chroma of the reference, rescaled to an 8-bit-like range.

    The affine rescale keeps the default bandwidths meaningful whether the
    reference arrives as raw 0..255, 0..1, or mean/std-normalized values.
    """
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    rgb = (img - lo) * scale
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 + 0.564 * (b - y)
    cr = 128.0 + 0.713 * (r - y)
    return np.stack([y, cb, cr], axis=-1)


class BilateralGrid:
    """Splat/blur/slice factorization of a reference image.

    Hard assignment: each pixel contributes to exactly one vertex, so every
    vertex carries at least one pixel and the splat of a constant is exact.
    """

    def __init__(
        self,
        reference: np.ndarray,
        sigma_spatial: float = 16.0,
        sigma_luma: float = 16.0,
        sigma_chroma: float = 8.0,
    ):
        img = check_image(reference)
        h, w, _ = img.shape
        self.shape = (h, w)
        self.npixels = h * w

        yuv = _reference_to_yuv(img)
        yy, xx = np.mgrid[0:h, 0:w]
        coords = np.stack(
            [
                xx.ravel() / sigma_spatial,
                yy.ravel() / sigma_spatial,
                yuv[..., 0].ravel() / sigma_luma,
                yuv[..., 1].ravel() / sigma_chroma,
                yuv[..., 2].ravel() / sigma_chroma,
            ],
            axis=1,
        )
        coords = np.floor(coords).astype(np.int64)
        coords -= coords.min(axis=0)
        # mixed-radix codes with one spare slot per dimension so a +/-1
        # neighbour offset can never alias another valid cell
        sizes = coords.max(axis=0) + 2
        strides = np.ones(GRID_DIMS, dtype=np.int64)
        for d in range(GRID_DIMS - 2, -1, -1):
            strides[d] = strides[d + 1] * sizes[d + 1]
        codes = coords @ strides

        uniq, inverse = np.unique(codes, return_inverse=True)
        self.nvertices = len(uniq)
        self.S = sp.csr_matrix(
            (np.ones(self.npixels), (inverse, np.arange(self.npixels))),
            shape=(self.nvertices, self.npixels),
        )
        self._adjacency = []
        for d in range(GRID_DIMS):
            for offset in (-1, 1):
                neighbor = uniq + offset * strides[d]
                idx = np.searchsorted(uniq, neighbor)
                idx = np.clip(idx, 0, self.nvertices - 1)
                valid = uniq[idx] == neighbor
                rows = np.nonzero(valid)[0]
                self._adjacency.append(
                    sp.csr_matrix(
                        (np.ones(len(rows)), (rows, idx[rows])),
                        shape=(self.nvertices, self.nvertices),
                    )
                )
        self._bisto: tuple[np.ndarray, np.ndarray] | None = None

    def splat(self, x: np.ndarray) -> np.ndarray:
        return self.S @ x

    def slice(self, y: np.ndarray) -> np.ndarray:
        return self.S.T @ y

    def blur(self, y: np.ndarray) -> np.ndarray:
        """[1, 2, 1] along each grid dimension: 2 * ndims * y plus both
        neighbours per dimension."""
        out = 2.0 * GRID_DIMS * y
        for adj in self._adjacency:
            out = out + adj @ y
        return out

    def blur_matrix(self) -> sp.csr_matrix:
        b = sp.identity(self.nvertices, format="csr") * (2.0 * GRID_DIMS)
        for adj in self._adjacency:
            b = b + adj
        return b.tocsr()

    def bistochastize(self, maxiter: int = 100, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Diagonals (n, m) with m = n * blur(n), cached after the first call."""
        if self._bisto is None:
            mass = self.splat(np.ones(self.npixels))
            n = np.ones(self.nvertices)
            for _ in range(maxiter):
                n_next = np.sqrt(n * mass / self.blur(n))
                if np.abs(n_next - n).max() < tol:
                    n = n_next
                    break
                n = n_next
            m = n * self.blur(n)
            self._bisto = (n, m)
        return self._bisto

    def normalized_blur(self, y: np.ndarray) -> np.ndarray:
        """Dm^{-1} Dn B Dn y; preserves the all-ones vector."""
        n, m = self.bistochastize()
        return n * self.blur(n * y) / m


def pcg(
    matvec,
    b: np.ndarray,
    diag: np.ndarray,
    tol: float,
    max_iter: int,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, bool, int, float]:
    """Jacobi-preconditioned conjugate gradient for an SPD operator.

    Stops when the absolute residual 2-norm drops to tol. Returns
    (solution, converged flag, iterations used, final residual norm).
    """
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64).copy()
    r = b - matvec(x)
    res = float(np.linalg.norm(r))
    if res <= tol:
        return x, True, 0, res
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    for k in range(1, max_iter + 1):
        ap = matvec(p)
        pap = float(p @ ap)
        if pap <= 0:
            logger.debug("pcg: lost positive definiteness at iteration %d", k)
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r))
        if res <= tol:
            return x, True, k, res
        z = r / diag
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    return x, False, max_iter, res


def solve(
    grid: BilateralGrid,
    target: np.ndarray,
    confidence: np.ndarray,
    cfg: SolverConfig = SolverConfig(),
) -> tuple[np.ndarray, bool]:
    """Solve the bilateral-space system for a pixel target and confidence.

    Returns (refined pixel grid clamped to [0, 1] float32, converged flag).
    """
    t_arr = check_mask(target)
    c_arr = check_mask(confidence)
    if t_arr.shape != grid.shape or c_arr.shape != grid.shape:
        raise ShapeError(
            f"target {t_arr.shape} / confidence {c_arr.shape} vs grid {grid.shape}"
        )
    t = t_arr.astype(np.float64).ravel()
    c = c_arr.astype(np.float64).ravel()
    if np.any(c < 0):
        raise ValueError("confidence must be non-negative")
    if c.max() <= 0:
        raise ValueError("confidence is all zero; nothing to anchor the solve")

    n, m = grid.bistochastize()
    sc = grid.splat(c)
    sct = grid.splat(c * t)
    lam = cfg.lam

    def matvec(y: np.ndarray) -> np.ndarray:
        return lam * (m * y - n * grid.blur(n * y)) + sc * y

    # diag(B) = 2 * ndims (no self-adjacency), so diag(Dn B Dn) = 2 ndims n^2
    diag = lam * (m - 2.0 * GRID_DIMS * n * n) + sc
    diag = np.maximum(diag, 1e-12)
    y0 = sct / np.maximum(sc, 1e-10)
    y, converged, iters, res = pcg(matvec, sct, diag, cfg.pcg_tol, cfg.pcg_max_iter, x0=y0)
    if not converged:
        logger.debug(
            "bilateral solve: pcg stopped at %d iterations, residual %.3e > %.3e",
            iters,
            res,
            cfg.pcg_tol,
        )
    out = grid.slice(y).reshape(grid.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32), converged


def bilateral_solve(
    reference: np.ndarray,
    target: np.ndarray,
    confidence: np.ndarray | None = None,
    cfg: SolverConfig = SolverConfig(),
) -> tuple[np.ndarray, bool]:
    """Build a grid from the reference and solve; uniform confidence by default."""
    grid = BilateralGrid(reference, cfg.sigma_spatial, cfg.sigma_luma, cfg.sigma_chroma)
    if confidence is None:
        confidence = np.ones(grid.shape, dtype=np.float32)
    return solve(grid, target, confidence, cfg)


def zeta(
    mask: np.ndarray,
    reference: np.ndarray | None = None,
    cfg: SolverConfig = SolverConfig(),
    grid: BilateralGrid | None = None,
) -> np.ndarray:
    """Pseudo-label operator: binarize at 0.5, smooth along reference edges,
    re-binarize at 0.5. Callers treat the output as detached."""
    if grid is None:
        if reference is None:
            raise ValueError("zeta needs a reference image or a prebuilt grid")
        grid = BilateralGrid(reference, cfg.sigma_spatial, cfg.sigma_luma, cfg.sigma_chroma)
    hard = binarize(mask, 0.5)
    refined, _ = solve(grid, hard, np.ones(grid.shape, dtype=np.float32), cfg)
    return binarize(refined, 0.5)
