"""Deterministic float64 tensor kernels.

Arrays are plain numpy ndarrays (C-order, float64).  The reductions that
feed algebraic identity checks (matmul, conv2d) accumulate strictly
left-to-right over the contraction axis so results are bit-identical to a
naive loop oracle running in the same order.  Everything else relies on
numpy's deterministic elementwise semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


class NonFiniteError(ValueError):
    """Raised when an operation produces NaN or +/-Inf."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    return a


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(m,k) @ (k,n) with a fixed left-to-right sum over k.

    Each output entry accumulates a[i,0]*b[0,j], then a[i,1]*b[1,j], ...
    exactly as a scalar triple loop would, so an oracle using that order
    reproduces the result bit-for-bit.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    k = a.shape[1]
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(k):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return check_finite(out, "matmul result")


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_tensor(a).T)


def reshape(a: np.ndarray, shape) -> np.ndarray:
    return np.ascontiguousarray(as_tensor(a).reshape(shape))


def add(a, b) -> np.ndarray:
    return check_finite(as_tensor(a) + as_tensor(b), "add result")


def mul(a, b) -> np.ndarray:
    return check_finite(as_tensor(a) * as_tensor(b), "mul result")


def scale(a, alpha: float) -> np.ndarray:
    return check_finite(as_tensor(a) * float(alpha), "scale result")


def relu(a) -> np.ndarray:
    return np.maximum(as_tensor(a), 0.0)


def sigmoid(a) -> np.ndarray:
    a = as_tensor(a)
    # split by sign to stay stable for large |a|
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = as_tensor(z)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def attention_activation(logits: np.ndarray, mode: str = "softmax", tau: float = 1.0) -> np.ndarray:
    """Row-wise attention over K kernels.

    softmax: rows in [0,1] and summing to 1; temperature divides the
    max-subtracted logits.  sigmoid: independent gates in [0,1]; tau is
    ignored (it only parameterizes the softmax).
    """
    logits = as_tensor(logits)
    if mode == "softmax":
        if tau <= 0:
            raise ValueError("softmax temperature must be positive")
        return check_finite(softmax_rows(logits / float(tau)), "attention")
    if mode == "sigmoid":
        return check_finite(sigmoid(logits), "attention")
    raise ValueError(f"unknown attention mode {mode!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"expected NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    return check_finite(x.reshape(n, c, h * w).sum(axis=2) / float(h * w), "pooled")


def max_pool2d(x: np.ndarray, k: int, stride: int, padding: int = 0) -> np.ndarray:
    """(N,C,H,W) max pooling; padded border positions never win the max."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    padded = np.full((n, c, h + 2 * padding, w + 2 * padding), -np.inf)
    padded[:, :, padding:padding + h, padding:padding + w] = x
    out = np.full((n, c, ho, wo), -np.inf)
    for dy in range(k):
        for dx in range(k):
            out = np.maximum(out, padded[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride])
    return check_finite(out, "max_pool2d")


def max_pool2d_backward(x: np.ndarray, grad: np.ndarray, k: int, stride: int, padding: int = 0) -> np.ndarray:
    """Scatter grad to the first window position (in (dy,dx) scan order)
    attaining each pooled maximum — the deterministic tie-break."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    padded = np.full((n, c, h + 2 * padding, w + 2 * padding), -np.inf)
    padded[:, :, padding:padding + h, padding:padding + w] = x
    out = max_pool2d(x, k, stride, padding)
    gp = np.zeros_like(padded)
    taken = np.zeros((n, c, ho, wo), dtype=bool)
    for dy in range(k):
        for dx in range(k):
            patch = padded[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride]
            wins = (patch == out) & ~taken
            gp[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += np.where(wins, grad, 0.0)
            taken |= wins
    return gp[:, :, padding:padding + h, padding:padding + w]


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (C*kh*kw, N*Ho*Wo) patch matrix.

    Rows are ordered (c, dy, dx) row-major, matching the reduction order of
    the naive seven-loop convolution.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"empty conv output for input {x.shape} kernel {(kh, kw)}")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((c * kh * kw, n * ho * wo))
    row = 0
    for ci in range(c):
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, ci, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride]
                cols[row] = patch.reshape(-1)
                row += 1
    return cols


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """Cross-correlation of NCHW input with (C_out, C_in/groups, kh, kw) kernel.

    The contraction over (c_in, dy, dx) runs in that row-major order,
    left-to-right, so a scalar loop oracle matches exactly.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    n, c, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c % groups or c_out % groups or c_in_g != c // groups:
        raise ValueError(f"bad group structure: input {c} ch, weight {weight.shape}, groups {groups}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if groups == 1:
        cols = im2col(x, kh, kw, stride, padding)
        flat = matmul(weight.reshape(c_out, c_in_g * kh * kw), cols)
        out = flat.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out)
    og = c_out // groups
    out = np.empty((n, c_out, ho, wo))
    for g in range(groups):
        xg = x[:, g * c_in_g : (g + 1) * c_in_g]
        wg = weight[g * og : (g + 1) * og]
        cols = im2col(xg, kh, kw, stride, padding)
        flat = matmul(wg.reshape(og, c_in_g * kh * kw), cols)
        out[:, g * og : (g + 1) * og] = flat.reshape(og, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# batch norm (functional; state lives with the layer)


def batchnorm_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over (N,H,W)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    m = float(n * h * w)
    mean = x.sum(axis=(0, 2, 3)) / m
    var = ((x - mean.reshape(1, c, 1, 1)) ** 2).sum(axis=(0, 2, 3)) / m
    return mean, var


def batchnorm_apply(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = BN_EPS,
) -> np.ndarray:
    c = x.shape[1]
    inv = 1.0 / np.sqrt(var + eps)
    out = (x - mean.reshape(1, c, 1, 1)) * (gamma * inv).reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return check_finite(out, "batchnorm output")


# ---------------------------------------------------------------------------
# structured assembly


def apply_diag_rows(lam: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """diag(lam) @ mat without materializing the diagonal matrix."""
    lam = as_tensor(lam)
    mat = as_tensor(mat)
    if lam.ndim != 1 or lam.shape[0] != mat.shape[0]:
        raise ValueError(f"diag length {lam.shape} vs rows {mat.shape}")
    return lam[:, None] * mat


def block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    """Dense block-diagonal assembly of 2-d blocks."""
    blocks = [as_tensor(b) for b in blocks]
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def mode_n_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n product T x_n M for a 3-d tensor, modes numbered 1..3.

    (T x_n M)[..., j, ...] = sum_i M[j, i] * T[..., i, ...] with the sum
    over the mode-n index.
    """
    t = as_tensor(t)
    m = as_tensor(m)
    if t.ndim != 3:
        raise ValueError(f"mode_n_product expects a 3-d tensor, got {t.shape}")
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1..3, got {mode}")
    ax = mode - 1
    if m.shape[1] != t.shape[ax]:
        raise ValueError(f"mode-{mode} extent {t.shape[ax]} vs matrix {m.shape}")
    moved = np.moveaxis(t, ax, 0)
    rest = moved.shape[1:]
    unfolded = moved.reshape(t.shape[ax], -1)
    prod = matmul(m, unfolded)
    folded = prod.reshape((m.shape[0],) + rest)
    return np.ascontiguousarray(np.moveaxis(folded, 0, ax))


# ---------------------------------------------------------------------------
# SVD: one-sided Jacobi


@dataclass
class SvdResult:
    u: np.ndarray  # (m, r) column-orthonormal
    s: np.ndarray  # (r,) descending, non-negative
    v: np.ndarray  # (n, r) column-orthonormal


def _orthonormal_fill(u: np.ndarray, col: int) -> np.ndarray:
    """A unit vector orthogonal to the first `col` columns of u."""
    m = u.shape[0]
    for seed in range(m):
        cand = np.zeros(m)
        cand[seed] = 1.0
        for j in range(col):
            cand -= (u[:, j] @ cand) * u[:, j]
        nrm = math.sqrt(float(cand @ cand))
        if nrm > 1e-8:
            return cand / nrm
    raise np.linalg.LinAlgError("could not complete orthonormal basis")


def svd(a: np.ndarray, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdResult:
    """Thin SVD a = u @ diag(s) @ v.T via one-sided Jacobi rotations.

    Columns of the working matrix are rotated pairwise until the relative
    off-diagonal mass of A^T A drops below `tol` or `max_sweeps` passes
    complete.  Rank-deficient inputs yield exact trailing zeros in s; the
    matching u columns are filled with an orthonormal complement.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"svd expects a matrix, got {a.shape}")
    m, n = a.shape
    if m < n:
        flipped = svd(np.ascontiguousarray(a.T), tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=flipped.v, s=flipped.s, v=flipped.u)

    work = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        diag = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = float(work[:, p] @ work[:, p])
                aqq = float(work[:, q] @ work[:, q])
                apq = float(work[:, p] @ work[:, q])
                off += 2.0 * apq * apq
                if apq == 0.0:
                    continue
                # classic two-sided Jacobi angle on the 2x2 Gram block
                tau = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp = work[:, p].copy()
                wq = work[:, q].copy()
                work[:, p] = c * wp - s * wq
                work[:, q] = s * wp + c * wq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        for p in range(n):
            dpp = float(work[:, p] @ work[:, p])
            diag += dpp * dpp
        if off <= tol * tol * max(diag, 1.0) or off == 0.0:
            break

    norms = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    work = work[:, order]
    v = v[:, order]
    # tiny columns are exact zeros of the decomposition
    cutoff = max(m, n) * np.finfo(np.float64).eps * (norms[0] if norms.size else 0.0)
    u = np.empty((m, n))
    s = np.empty(n)
    for j in range(n):
        if norms[j] > cutoff:
            s[j] = norms[j]
            u[:, j] = work[:, j] / norms[j]
        else:
            s[j] = 0.0
            u[:, j] = _orthonormal_fill(u, j)
    return SvdResult(u=u, s=s, v=v)
