"""Point-map evaluation: similarity alignment, Chamfer metrics, and the view-overlap filter."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .scenegen import CameraParams, GeoSample, ViewRender, project_points, unproject_depth

OCCLUSION_TOLERANCE = 0.05
MAX_POINTS = 2048


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def umeyama(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity taking src[i] onto dst[i] (Umeyama 1991, with scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"umeyama: need matching (N, 3) clouds, got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 3:
        raise ValueError(f"umeyama: need at least 3 correspondences, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs * xs).sum() / n
    if var_s <= 1e-300:
        raise ValueError("umeyama: source points are all coincident")
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[-1] = -1.0
    rot = u @ np.diag(s) @ vt
    scale = float((d * s).sum() / var_s)
    return SimilarityTransform(scale, rot, mu_d - scale * rot @ mu_s)


def chamfer_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Accuracy (pred -> gt), completeness (gt -> pred) and their mean, by nearest neighbour."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer_metrics: empty point cloud")
    acc = cKDTree(gt).query(pred)[0].mean()
    comp = cKDTree(pred).query(gt)[0].mean()
    return {"accuracy": float(acc), "completeness": float(comp), "overall": float(0.5 * (acc + comp))}


def view_overlap(view: ViewRender, main: ViewRender, tol: float = OCCLUSION_TOLERANCE) -> float:
    """Fraction of `view`'s surface points that the main camera also sees."""
    points = unproject_depth(view)
    if len(points) == 0:
        return 0.0
    h, w = main.depth_gt.shape
    u, v, z = project_points(points, main.camera, h, w)
    inside = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    seen = np.zeros(len(points), dtype=bool)
    ui = np.floor(u[inside]).astype(int)
    vi = np.floor(v[inside]).astype(int)
    d_main = main.depth_gt[vi, ui]
    seen[inside] = (d_main > 0) & (z[inside] <= d_main * (1.0 + tol))
    return float(seen.mean())


# A geometry model maps a frame set to (depth V x H x W, cameras V x 8).
GeoModel = Callable[[GeoSample], tuple[np.ndarray, np.ndarray]]


def oracle_model(sample: GeoSample) -> tuple[np.ndarray, np.ndarray]:
    return sample.depths.copy(), sample.cameras.copy()


def encoder_model(encoder) -> GeoModel:
    from . import diffcore as dc

    def predict(sample: GeoSample):
        with dc.no_grad():
            tokens = encoder.forward(sample.images[None])
            cams = encoder.camera_head_out(tokens).data[0]
            depth, _ = encoder.depth_head_out(tokens)
        return depth.data[0], cams

    return predict


def _cloud(depth: np.ndarray, camera_vec: np.ndarray, valid: np.ndarray) -> np.ndarray:
    d = np.where(valid, depth, 0.0)
    return unproject_depth(ViewRender(None, d, CameraParams.from_vector(camera_vec)))


def eval_pointmaps(
    model: GeoModel,
    scenes: Sequence[GeoSample],
    threshold: float = 0.35,
    main_view: int = 0,
    max_points: int = MAX_POINTS,
    seed: int = 0,
) -> dict:
    """Filter views by overlap with the main view, predict, align, and score each scene."""
    per_scene, skipped = [], 0
    for idx, sample in enumerate(scenes):
        views = sample.views()
        overlaps = [view_overlap(v, views[main_view]) for v in views]
        keep = [i for i, o in enumerate(overlaps) if o >= threshold]
        if not keep:
            skipped += 1
            continue
        sub = GeoSample(sample.images[keep], sample.depths[keep], sample.cameras[keep])
        depth, cams = model(sub)
        pred_pts, gt_pts = [], []
        for k in range(len(keep)):
            valid = (sub.depths[k] > 0) & (depth[k] > 0)
            pred_pts.append(_cloud(depth[k], cams[k], valid))
            gt_pts.append(_cloud(sub.depths[k], sub.cameras[k], valid))
        pred = np.concatenate(pred_pts)
        gt = np.concatenate(gt_pts)
        if len(pred) < 3:
            skipped += 1
            continue
        try:
            pred = umeyama(pred, gt).apply(pred)
        except (ValueError, np.linalg.LinAlgError):
            pass  # degenerate prediction: score it unaligned
        if len(pred) > max_points:
            sel = np.sort(np.random.default_rng([seed, idx]).choice(len(pred), max_points, replace=False))
            pred, gt = pred[sel], gt[sel]
        metrics = chamfer_metrics(pred, gt)
        per_scene.append({"scene": idx, "views": keep, "overlaps": [round(o, 6) for o in overlaps], **metrics})
    keys = ("accuracy", "completeness", "overall")
    aggregate = {k: float(np.mean([s[k] for s in per_scene])) if per_scene else float("nan") for k in keys}
    return {"per_scene": per_scene, "aggregate": aggregate, "skipped": skipped}


def height_variance(points: np.ndarray) -> float:
    """Variance of world z over a cloud: the vertical relief of a surface patch (m^2)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:
        return float("nan")
    return float(np.var(points[:, 2]))


def region_cloud(depth: np.ndarray, sample: GeoSample, label: int) -> np.ndarray:
    """Points of one labelled region, from per-view depth maps and the GT cameras, pooled over views."""
    out = []
    for k in range(sample.n_views):
        mask = (sample.labels[k] == label) & (depth[k] > 0)
        out.append(_cloud(depth[k], sample.cameras[k], mask))
    return np.concatenate(out) if out else np.zeros((0, 3))


def decoy_relief(model: GeoModel, samples: Sequence[GeoSample], decoy_id: int, real_id: int = 0) -> dict:
    """Predicted height variance over a flat decoy vs over the real object it imitates.

    Depth is lifted to the world with the GT cameras so that only the predicted
    surface shape matters; a flat print should show less relief than a solid.
    """
    decoy, real = [], []
    for sample in samples:
        depth, _ = model(sample)
        decoy.append(height_variance(region_cloud(depth, sample, decoy_id)))
        real.append(height_variance(region_cloud(depth, sample, real_id)))
    return {"decoy": float(np.nanmean(decoy)), "real": float(np.nanmean(real)),
            "per_scene": [[d, r] for d, r in zip(decoy, real)]}
