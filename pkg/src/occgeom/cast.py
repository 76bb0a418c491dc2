"""Context-aware photometric self-supervision across cameras and time.

A rendered target depth map turns a source image from another camera and/or
timestamp into a reconstruction of the target view (inverse warping); an
SSIM + L1 photometric loss compares reconstruction and reference, and the
weighted sum over temporal, spatial and spatial-temporal context pairs is
the self-training signal. Analytic gradients with respect to the rendered
depth are provided for the optimization loop.
"""

from __future__ import annotations

import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import camera as cam_mod
from .camera import CameraRig, Intrinsics, Pose
from .renderer import DepthMap
from .tensor import as_tensor, bilinear_sample, bilinear_sample_grad
from .view_transform import DepthDistribution

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
KINDS = ("temporal", "spatial", "spatial_temporal")


@dataclass(frozen=True)
class PhotometricConfig:
    """Loss mixing weights; defaults match the reference training recipe."""

    alpha: float = 0.85
    ssim_window: int = 3
    lambda_t: float = 1.0
    lambda_sp: float = 0.1
    lambda_spt: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 1, got {self.ssim_window}")
        for name in ("lambda_t", "lambda_sp", "lambda_spt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class WarpContext:
    """A source->target reprojection: which frames, and the relative pose."""

    kind: str
    source: tuple[int, int]  # (camera, timestamp)
    target: tuple[int, int]
    pose: Pose  # source-camera coords -> target-camera coords

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown context kind {self.kind!r}")
        if self.kind == "temporal" and self.source[0] != self.target[0]:
            raise ValueError("temporal context must keep the camera fixed")
        if self.kind == "spatial" and self.source[1] != self.target[1]:
            raise ValueError("spatial context must keep the timestamp fixed")


def make_warp_context(
    rig: CameraRig, kind: str, source: tuple[int, int], target: tuple[int, int]
) -> WarpContext:
    pose = cam_mod.relative_pose(
        kind, rig, source[0], target[0], source[1], target[1]
    )
    return WarpContext(kind, tuple(source), tuple(target), pose)


def _target_geometry(k_tgt: Intrinsics, shape: tuple[int, int]) -> np.ndarray:
    """Unit target-camera-frame direction per pixel, [H*W x 3]."""
    h, w = shape
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    hvec = np.stack(
        [(us - k_tgt.cx) / k_tgt.fx, (vs - k_tgt.cy) / k_tgt.fy, np.ones((h, w))],
        axis=-1,
    ).reshape(-1, 3)
    return hvec / np.linalg.norm(hvec, axis=1, keepdims=True)


def _warp_core(
    src_img: np.ndarray,
    target_depth: DepthMap,
    ctx: WarpContext,
    k_src: Intrinsics,
    k_tgt: Intrinsics,
    with_grad: bool,
):
    src_img = as_tensor(src_img)
    h, w = target_depth.depth.shape
    units = _target_geometry(k_tgt, (h, w))
    depth = target_depth.depth.ravel()
    p_tgt = depth[:, None] * units  # rendered depth is ray distance
    inv = ctx.pose.inverse()
    p_src = inv.apply(p_tgt)
    z = p_src[:, 2]
    front = z > 1e-9
    zsafe = np.where(front, z, 1.0)
    u = k_src.fx * p_src[:, 0] / zsafe + k_src.cx
    v = k_src.fy * p_src[:, 1] / zsafe + k_src.cy
    uv = np.stack([u, v], axis=1)
    samples, in_bounds = bilinear_sample(src_img, uv)
    valid = target_depth.valid.ravel() & front & in_bounds
    recon = np.where(valid[:, None], samples, 0.0).reshape(h, w, -1)
    if not with_grad:
        return recon, valid.reshape(h, w)
    # chain rule: d(recon)/d(depth) through the source projection and sampler
    dp_dd = units @ inv.rotation.T  # d(p_src)/d(depth), per pixel
    du_dd = k_src.fx * (dp_dd[:, 0] * zsafe - p_src[:, 0] * dp_dd[:, 2]) / zsafe**2
    dv_dd = k_src.fy * (dp_dd[:, 1] * zsafe - p_src[:, 1] * dp_dd[:, 2]) / zsafe**2
    gu, gv = bilinear_sample_grad(src_img, uv)
    drecon = gu * du_dd[:, None] + gv * dv_dd[:, None]
    drecon = np.where(valid[:, None], drecon, 0.0).reshape(h, w, -1)
    return recon, valid.reshape(h, w), drecon


def warp_image(
    src_img: np.ndarray,
    target_depth: DepthMap,
    ctx: WarpContext,
    k_src: Intrinsics,
    k_tgt: Intrinsics,
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp a source image into the target view.

    Each valid target pixel is lifted to 3D with its rendered ray distance,
    mapped into the source camera by the inverse context pose, projected,
    and bilinearly sampled. A pixel is valid iff the target depth is valid
    AND the source projection lands in front of the camera and in bounds.

    Returns:
        (recon [H x W x C], valid [H x W] bool)
    """
    return _warp_core(src_img, target_depth, ctx, k_src, k_tgt, with_grad=False)


def warp_image_with_grad(
    src_img: np.ndarray,
    target_depth: DepthMap,
    ctx: WarpContext,
    k_src: Intrinsics,
    k_tgt: Intrinsics,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """warp_image plus d(recon)/d(target depth), [H x W x C]."""
    return _warp_core(src_img, target_depth, ctx, k_src, k_tgt, with_grad=True)


def _box_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Zero-padded box mean with constant divisor window^2 (self-adjoint)."""
    h, w = x.shape[:2]
    p = window // 2
    xp = np.pad(x, ((p, p), (p, p)) + ((0, 0),) * (x.ndim - 2))
    out = np.zeros_like(x)
    for dy in range(window):
        for dx in range(window):
            out += xp[dy : dy + h, dx : dx + w]
    return out / float(window * window)


def _ssim_stats(a: np.ndarray, b: np.ndarray, window: int):
    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a**2
    var_b = _box_mean(b * b, window) - mu_b**2
    cov = _box_mean(a * b, window) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + _SSIM_C1
    a2 = 2.0 * cov + _SSIM_C2
    b1 = mu_a**2 + mu_b**2 + _SSIM_C1
    b2 = var_a + var_b + _SSIM_C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a: np.ndarray, b: np.ndarray, window: int = 3) -> np.ndarray:
    """Per-pixel, per-channel structural similarity on [0, 1] intensities.

    Local statistics use a zero-padded box window; output lies in [-1, 1].
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    _, _, a1, a2, b1, b2 = _ssim_stats(a, b, window)
    return (a1 * a2) / (b1 * b2)


def _ssim_backward(
    a: np.ndarray, b: np.ndarray, grad_map: np.ndarray, window: int
) -> np.ndarray:
    """Adjoint of ssim() w.r.t. its second argument.

    grad_map is dL/d(ssim map); returns dL/db. Derived by differentiating
    the windowed statistics; every window sum reduces to one more box
    filter, which is self-adjoint under zero padding.
    """
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_stats(a, b, window)
    d = b1 * b2
    s = (a1 * a2) / d
    t_const = (mu_a * (a2 - a1) - s * mu_b * (b2 - b1)) / d
    t_a = a1 / d
    t_b = -s * b1 / d
    return 2.0 * (
        _box_mean(grad_map * t_const, window)
        + a * _box_mean(grad_map * t_a, window)
        + b * _box_mean(grad_map * t_b, window)
    )


def photometric_loss(
    ref: np.ndarray, recon: np.ndarray, valid: np.ndarray, cfg: PhotometricConfig
) -> float:
    """Mean over valid pixels of alpha/2 * (1 - SSIM) + (1 - alpha) * L1.

    Both images are masked by `valid` before the SSIM statistics so that
    identical images give exactly zero regardless of the mask; invalid
    pixels are excluded from the mean. With no valid pixels the loss is 0
    and a RuntimeWarning is emitted.
    """
    ref = as_tensor(ref)
    recon = as_tensor(recon)
    if ref.shape != recon.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {recon.shape}")
    mask = np.asarray(valid, dtype=bool)
    n = int(mask.sum()) * ref.shape[2]
    if n == 0:
        warnings.warn("photometric loss over empty valid set; returning 0", RuntimeWarning)
        return 0.0
    m = mask[:, :, None]
    x = ref * m
    y = recon * m
    smap = ssim(x, y, cfg.ssim_window)
    per = 0.5 * cfg.alpha * (1.0 - smap) + (1.0 - cfg.alpha) * np.abs(x - y)
    return float(np.sum(per * m) / n)


def photometric_loss_grad(
    ref: np.ndarray, recon: np.ndarray, valid: np.ndarray, cfg: PhotometricConfig
) -> np.ndarray:
    """d(photometric_loss)/d(recon), [H x W x C]; zero where invalid."""
    ref = as_tensor(ref)
    recon = as_tensor(recon)
    mask = np.asarray(valid, dtype=bool)
    n = int(mask.sum()) * ref.shape[2]
    if n == 0:
        return np.zeros_like(recon)
    m = mask[:, :, None]
    x = ref * m
    y = recon * m
    grad_smap = np.where(m, -0.5 * cfg.alpha / n, 0.0)
    g = _ssim_backward(x, y, grad_smap, cfg.ssim_window)
    g += np.where(m, (1.0 - cfg.alpha) / n * np.sign(y - x), 0.0)
    return g * m


def _ring_neighbors(i: int, n: int) -> list[int]:
    if n < 2:
        return []
    return sorted({(i - 1) % n, (i + 1) % n} - {i})


def context_pairs(rig: CameraRig) -> list[tuple[str, tuple[int, int], tuple[int, int]]]:
    """All (kind, source, target) frame pairs the total loss evaluates.

    Targets live at the latest timestamp (where depth is rendered); the
    previous timestamp provides the temporal sources, and each camera's
    ring neighbors provide the spatial sources.
    """
    ts = rig.timestamps()
    t_ref = ts[-1]
    t_prev = ts[-2] if len(ts) >= 2 else None
    n = len(rig.cameras)
    pairs = []
    if t_prev is not None:
        for i in range(n):
            pairs.append(("temporal", (i, t_prev), (i, t_ref)))
    for i in range(n):
        for j in _ring_neighbors(i, n):
            pairs.append(("spatial", (j, t_ref), (i, t_ref)))
    if t_prev is not None:
        for i in range(n):
            for j in _ring_neighbors(i, n):
                pairs.append(("spatial_temporal", (j, t_prev), (i, t_ref)))
    return pairs


def cast_loss(
    rig: CameraRig,
    images: Mapping[tuple[int, int], np.ndarray],
    depths: Sequence[DepthMap],
    cfg: PhotometricConfig,
) -> tuple[float, dict]:
    """Total context-aware self-training loss and its breakdown.

    `depths` holds one rendered depth map per camera at the latest rig
    timestamp. Each context term averages its pair losses; with a single
    camera the spatial terms are zero and flagged inactive in the
    breakdown. The breakdown dict is JSON-ready:
    {"L_t", "L_sp", "L_spt", "total", "active_pairs"}.
    """
    total, breakdown, _ = _cast_core(rig, images, depths, cfg, with_grad=False)
    return total, breakdown


def cast_loss_with_depth_grad(
    rig: CameraRig,
    images: Mapping[tuple[int, int], np.ndarray],
    depths: Sequence[DepthMap],
    cfg: PhotometricConfig,
) -> tuple[float, dict, list[np.ndarray]]:
    """cast_loss plus d(total)/d(rendered depth) per camera, each [H x W]."""
    return _cast_core(rig, images, depths, cfg, with_grad=True)


def _cast_core(rig, images, depths, cfg, with_grad):
    n = len(rig.cameras)
    if len(depths) != n:
        raise ValueError(f"{len(depths)} depth maps for {n} cameras")
    ts = rig.timestamps()
    t_ref = ts[-1]
    pairs = context_pairs(rig)
    sums = {"temporal": 0.0, "spatial": 0.0, "spatial_temporal": 0.0}
    counts = {"temporal": 0, "spatial": 0, "spatial_temporal": 0}
    lam = {
        "temporal": cfg.lambda_t,
        "spatial": cfg.lambda_sp,
        "spatial_temporal": cfg.lambda_spt,
    }
    n_pairs = {k: sum(1 for p in pairs if p[0] == k) for k in sums}
    grads = [np.zeros_like(depths[i].depth) for i in range(n)] if with_grad else None
    active = 0
    for kind, src, tgt in pairs:
        if src not in images or tgt not in images:
            raise KeyError(f"missing image for frame {src if src not in images else tgt}")
        ctx = make_warp_context(rig, kind, src, tgt)
        k_src = rig.cameras[src[0]].intrinsics
        k_tgt = rig.cameras[tgt[0]].intrinsics
        dm = depths[tgt[0]]
        ref = images[tgt]
        if with_grad:
            recon, valid, drecon = warp_image_with_grad(
                images[src], dm, ctx, k_src, k_tgt
            )
        else:
            recon, valid = warp_image(images[src], dm, ctx, k_src, k_tgt)
        pair_loss = photometric_loss(ref, recon, valid, cfg)
        sums[kind] += pair_loss
        if np.any(valid):
            active += 1
        if with_grad and np.any(valid):
            gl = photometric_loss_grad(ref, recon, valid, cfg)
            grads[tgt[0]] += (lam[kind] / n_pairs[kind]) * np.sum(gl * drecon, axis=2)
    terms = {
        k: (sums[k] / n_pairs[k] if n_pairs[k] else 0.0) for k in sums
    }
    total = sum(lam[k] * terms[k] for k in terms)
    breakdown = {
        "L_t": terms["temporal"],
        "L_sp": terms["spatial"],
        "L_spt": terms["spatial_temporal"],
        "total": total,
        "active_pairs": active,
    }
    if with_grad:
        return total, breakdown, grads
    return total, breakdown, None


def depth_l1_loss(
    depths: Sequence[DepthMap], sparse: Sequence[np.ndarray | None]
) -> float:
    """L1 between rendered and sparse depth at sample pixels, pooled over
    cameras. The raw accumulated depth is compared ungated, so a from-empty
    density field still produces a usable objective."""
    loss, _ = _depth_l1(depths, sparse, with_grad=False)
    return loss


def depth_bin_cross_entropy(
    dists: Sequence[DepthDistribution | None], sparse: Sequence[np.ndarray | None]
) -> float:
    """Cross-entropy of per-pixel depth distributions vs binned sparse depth.

    The target is the one-hot nearest bin; samples pool across cameras.
    Returns 0 when no camera carries both a distribution and samples.
    """
    total = 0.0
    count = 0
    for dist, pts in zip(dists, sparse):
        if dist is None or pts is None or len(pts) == 0:
            continue
        pts = as_tensor(pts).reshape(-1, 3)
        us = pts[:, 0].astype(np.int64)
        vs = pts[:, 1].astype(np.int64)
        target = np.argmin(np.abs(pts[:, 2][:, None] - dist.bins[None, :]), axis=1)
        p = dist.probs[vs, us, target]
        total += float(np.sum(-np.log(np.clip(p, 1e-12, None))))
        count += pts.shape[0]
    return total / count if count else 0.0


def pretrain_loss(
    rig: CameraRig,
    images: Mapping[tuple[int, int], np.ndarray],
    depths: Sequence[DepthMap],
    sparse: Sequence[np.ndarray | None],
    cfg: PhotometricConfig,
    depth_dists: Sequence[DepthDistribution | None] | None = None,
) -> tuple[float, dict]:
    """Pretraining objective: depth-bin CE + rendered-depth L1 + context loss.

    `sparse` carries per-camera [(u, v, depth)] supervision at the latest
    timestamp (empty/None entries contribute nothing); `depth_dists`
    optionally supplies per-camera explicit depth distributions for the CE
    term. Returns (total, breakdown).
    """
    dists = depth_dists if depth_dists is not None else [None] * len(rig.cameras)
    l_ed = depth_bin_cross_entropy(dists, sparse)
    l_rd, _ = _depth_l1(depths, sparse, with_grad=False)
    l_cast, cast_parts = cast_loss(rig, images, depths, cfg)
    total = l_ed + l_rd + l_cast
    breakdown = {
        "L_ed": l_ed,
        "L_rd": l_rd,
        "L_t": cast_parts["L_t"],
        "L_sp": cast_parts["L_sp"],
        "L_spt": cast_parts["L_spt"],
        "L_cast": l_cast,
        "total": total,
        "active_pairs": cast_parts["active_pairs"],
    }
    return total, breakdown


def pretrain_loss_with_depth_grad(
    rig: CameraRig,
    images: Mapping[tuple[int, int], np.ndarray],
    depths: Sequence[DepthMap],
    sparse: Sequence[np.ndarray | None],
    cfg: PhotometricConfig,
    depth_dists: Sequence[DepthDistribution | None] | None = None,
) -> tuple[float, dict, list[np.ndarray]]:
    """pretrain_loss plus d(total)/d(rendered depth) per camera.

    The CE term does not depend on the rendered depth, so its gradient
    contribution is zero.
    """
    dists = depth_dists if depth_dists is not None else [None] * len(rig.cameras)
    l_ed = depth_bin_cross_entropy(dists, sparse)
    l_rd, rd_grads = _depth_l1(depths, sparse, with_grad=True)
    l_cast, cast_parts, cast_grads = cast_loss_with_depth_grad(rig, images, depths, cfg)
    grads = [rd + cg for rd, cg in zip(rd_grads, cast_grads)]
    total = l_ed + l_rd + l_cast
    breakdown = {
        "L_ed": l_ed,
        "L_rd": l_rd,
        "L_t": cast_parts["L_t"],
        "L_sp": cast_parts["L_sp"],
        "L_spt": cast_parts["L_spt"],
        "L_cast": l_cast,
        "total": total,
        "active_pairs": cast_parts["active_pairs"],
    }
    return total, breakdown, grads


def _depth_l1(depths, sparse, with_grad):
    grads = [np.zeros_like(d.depth) for d in depths]
    count = 0
    for pts in sparse:
        if pts is not None and len(pts) > 0:
            count += as_tensor(pts).reshape(-1, 3).shape[0]
    if count == 0:
        return 0.0, grads
    total = 0.0
    for ci, (dm, pts) in enumerate(zip(depths, sparse)):
        if pts is None or len(pts) == 0:
            continue
        pts = as_tensor(pts).reshape(-1, 3)
        us = pts[:, 0].astype(np.int64)
        vs = pts[:, 1].astype(np.int64)
        diff = dm.depth[vs, us] - pts[:, 2]
        total += float(np.sum(np.abs(diff)))
        if with_grad:
            np.add.at(grads[ci], (vs, us), np.sign(diff) / count)
    return total / count, grads
