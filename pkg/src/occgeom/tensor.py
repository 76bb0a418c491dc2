"""Dense-tensor substrate shared by every module.

Values are float64 numpy arrays, row-major with the last axis fastest.
Every exported operation is a pure function: inputs are never mutated and
results are deterministic, so concurrent use needs no synchronization.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

Array = np.ndarray


def as_tensor(x) -> Array:
    """Coerce to a float64 ndarray, the package-wide value carrier."""
    return np.asarray(x, dtype=np.float64)


def matmul(a: Array, b: Array) -> Array:
    """Matrix product of a [m x k] and b [k x n].

    Raises ValueError when either operand is not 2-D or the inner
    dimensions disagree.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    return a @ b


def softmax(x: Array, axis: int = -1) -> Array:
    """Numerically stable softmax along `axis` (max-subtraction).

    Entries of exactly -inf receive exactly zero weight, which is the
    masking convention used by the attention modules. Slices that are
    entirely -inf normalize to all zeros rather than NaN.
    """
    x = as_tensor(x)
    if x.ndim == 0:
        raise ValueError("softmax needs at least one axis")
    axis = int(axis)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    m = np.max(x, axis=axis, keepdims=True)
    live = np.isfinite(m)
    shifted = np.where(live, x - np.where(live, m, 0.0), -np.inf)
    e = np.exp(shifted)
    s = np.sum(e, axis=axis, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def bilinear_sample(img: Array, uv: Array) -> tuple[Array, Array]:
    """Bilinearly sample img [H x W x C] at continuous pixel coords uv [N x 2].

    uv[:, 0] is the column coordinate u (x), uv[:, 1] the row coordinate v
    (y); pixel centers sit at integer coordinates, so the sampleable region
    is [0, W-1] x [0, H-1]. Out-of-bounds samples return zeros and are
    flagged invalid.

    Returns:
        (values [N x C], valid [N] bool)
    """
    img = as_tensor(img)
    uv = as_tensor(uv)
    if img.ndim != 3:
        raise ValueError(f"bilinear_sample expects H x W x C image, got {img.shape}")
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ValueError(f"bilinear_sample expects N x 2 coordinates, got {uv.shape}")
    h, w = img.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    u0i = np.clip(u0.astype(np.int64), 0, w - 1)
    v0i = np.clip(v0.astype(np.int64), 0, h - 1)
    u1i = np.minimum(u0i + 1, w - 1)
    v1i = np.minimum(v0i + 1, h - 1)
    top = img[v0i, u0i] * (1.0 - fu) + img[v0i, u1i] * fu
    bot = img[v1i, u0i] * (1.0 - fu) + img[v1i, u1i] * fu
    out = top * (1.0 - fv) + bot * fv
    out[~valid] = 0.0
    return out, valid


def bilinear_sample_grad(img: Array, uv: Array) -> tuple[Array, Array]:
    """Spatial derivative of bilinear_sample at uv.

    Returns (d/du [N x C], d/dv [N x C]); zero for out-of-bounds samples.
    At the image's outer edge the one-sided kink is resolved toward zero.
    """
    img = as_tensor(img)
    uv = as_tensor(uv)
    h, w = img.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    u0i = np.clip(u0.astype(np.int64), 0, w - 1)
    v0i = np.clip(v0.astype(np.int64), 0, h - 1)
    u1i = np.minimum(u0i + 1, w - 1)
    v1i = np.minimum(v0i + 1, h - 1)
    i00, i01 = img[v0i, u0i], img[v0i, u1i]
    i10, i11 = img[v1i, u0i], img[v1i, u1i]
    du = (i01 - i00) * (1.0 - fv) + (i11 - i10) * fv
    dv = (i10 - i00) * (1.0 - fu) + (i11 - i01) * fu
    du[~valid] = 0.0
    dv[~valid] = 0.0
    return du, dv


def trilinear_sample(vol: Array, xyz: Array) -> tuple[Array, Array]:
    """Trilinearly sample a volume at continuous grid coordinates.

    vol is [X x Y x Z] or [C x X x Y x Z]; xyz [N x 3] addresses cell
    centers at integer coordinates. Positions outside [-0.5, dim-0.5] on
    any axis return exactly zero and are flagged invalid; inside that box,
    missing corner neighbors count as zero.

    Returns:
        (values [N] or [N x C], valid [N] bool)
    """
    vals, valid, _, _ = _trilinear_parts(vol, xyz)
    return vals, valid


def _trilinear_parts(vol: Array, xyz: Array) -> tuple[Array, Array, Array, Array]:
    """trilinear_sample plus the flat corner indices [N x 8] and weights
    [N x 8] needed for adjoint scattering. Corner indices of out-of-range
    corners are 0 with weight forced to 0."""
    vol = as_tensor(vol)
    xyz = as_tensor(xyz)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ValueError(f"trilinear_sample expects N x 3 coordinates, got {xyz.shape}")
    channelled = vol.ndim == 4
    if not channelled and vol.ndim != 3:
        raise ValueError(f"trilinear_sample expects 3-D or 4-D volume, got {vol.shape}")
    dims = np.array(vol.shape[1:] if channelled else vol.shape)
    valid = np.all((xyz >= -0.5) & (xyz <= dims - 0.5), axis=1)
    lo = np.floor(xyz).astype(np.int64)
    f = xyz - lo
    n = xyz.shape[0]
    idx = np.zeros((n, 8), dtype=np.int64)
    wgt = np.zeros((n, 8), dtype=np.float64)
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    k = 0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                cx = lo[:, 0] + dx
                cy = lo[:, 1] + dy
                cz = lo[:, 2] + dz
                inside = (
                    (cx >= 0) & (cx < dims[0])
                    & (cy >= 0) & (cy < dims[1])
                    & (cz >= 0) & (cz < dims[2])
                )
                w = wx * wy * wz * inside * valid
                flat = (
                    np.clip(cx, 0, dims[0] - 1) * strides[0]
                    + np.clip(cy, 0, dims[1] - 1) * strides[1]
                    + np.clip(cz, 0, dims[2] - 1)
                )
                idx[:, k] = flat
                wgt[:, k] = w
                k += 1
    if channelled:
        corners = vol.reshape(vol.shape[0], -1).T[idx]  # N x 8 x C
        vals = np.einsum("nkc,nk->nc", corners, wgt)
    else:
        vals = np.sum(vol.ravel()[idx] * wgt, axis=1)
    return vals, valid, idx, wgt


def conv3d(x: Array, w: Array, stride: int = 1) -> Array:
    """3-D cross-correlation of x [C x X x Y x Z] with w [C' x C x k x k x k].

    k must be odd; spatial zero padding of k//2 keeps stride-1 outputs the
    same size, and stride s maps extent n to ceil(n/s).
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 4:
        raise ValueError(f"conv3d expects C x X x Y x Z input, got {x.shape}")
    if w.ndim != 5:
        raise ValueError(f"conv3d expects C' x C x k x k x k weights, got {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ValueError(f"conv3d kernel must be cubic, got {w.shape[2:]}")
    if k % 2 == 0:
        raise ValueError(f"conv3d kernel size must be odd, got {k}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[0]}, weights expect {w.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"conv3d stride must be positive, got {stride}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    return np.einsum("cxyzijk,ocijk->oxyz", win, w, optimize=True)


def grad_check(
    f: Callable[[Array], float],
    x: Array,
    analytic_grad: Array,
    eps: float = 1e-4,
) -> float:
    """Central-difference check of an analytic gradient.

    Returns max over coordinates of |central difference - analytic| /
    (|analytic| + 1e-8). Raises RuntimeError if f goes non-finite at any
    probe point.
    """
    x = as_tensor(x)
    g = as_tensor(analytic_grad)
    if x.shape != g.shape:
        raise ValueError(f"gradient shape {g.shape} does not match input {x.shape}")
    flat = x.ravel().copy()
    gflat = g.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(flat.reshape(x.shape)))
        flat[i] = orig - eps
        fm = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise RuntimeError(f"objective non-finite at coordinate {i} (eps={eps})")
        cd = (fp - fm) / (2.0 * eps)
        err = abs(cd - gflat[i]) / (abs(gflat[i]) + 1e-8)
        worst = max(worst, err)
    return worst
