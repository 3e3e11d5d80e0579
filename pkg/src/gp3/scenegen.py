"""Procedural tabletop scenes, pinhole ray casting, and the episode file format.

World frame: metres, table top at z = table_height (0 by default), objects
placed inside the unit cube. Camera frame follows the usual vision
convention (x right, y down, z forward); `translation` maps world to camera.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

# ------------------------------------------------------------------ vocabulary

COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta"]
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.15, 0.30, 0.90],
        [0.95, 0.85, 0.10],
        [0.60, 0.20, 0.80],
        [0.95, 0.55, 0.10],
        [0.10, 0.85, 0.85],
        [0.90, 0.20, 0.70],
    ]
)
SHAPES = ["cube", "sphere"]
VOCAB = [
    "<pad>", "<unk>", "push", "reach", "the", "to", "a", "on",
    *COLOR_NAMES,
    "cube", "sphere", "block", "ball", "goal", "pad", "object", "move",
    "touch", "slide", "left", "right", "front", "back", "near", "far",
]
assert len(VOCAB) == 32

BACKGROUND = np.array([0.80, 0.86, 0.93])
TABLE_ALBEDO = np.array([0.55, 0.45, 0.35])
PAD_ALBEDO = np.array([0.96, 0.96, 0.96])
ARM_ALBEDO = np.array([0.25, 0.25, 0.28])
ARM_RADIUS = 0.02
LIGHT_DIR = np.array([-0.3, -0.5, 0.8]) / np.linalg.norm([-0.3, -0.5, 0.8])
AMBIENT = 0.35

LABEL_BACKGROUND = -1
LABEL_TABLE = -2
LABEL_ARM = -3

PLACE_LO, PLACE_HI = 0.2, 0.8
TABLE_EXTENT = (-0.25, 1.25)


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.split():
        if word not in VOCAB:
            raise ValueError(f"word {word!r} is not in the vocabulary")
        ids.append(VOCAB.index(word))
    return ids


def detokenize(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[i] for i in ids)


# --------------------------------------------------------------------- cameras


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(r).as_quat()
    return _canonical_quat(np.array([w, x, y, z]))


@dataclass
class CameraParams:
    rotation_q: np.ndarray
    translation: np.ndarray
    fov_v: float

    def __post_init__(self):
        self.rotation_q = np.asarray(self.rotation_q, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.fov_v = float(self.fov_v)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.fov_v < math.pi:
            raise ValueError(f"degenerate camera: fov_v={self.fov_v} outside (0, pi)")
        n = np.linalg.norm(self.rotation_q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"camera quaternion not unit length (norm {n})")
        if self.rotation_q[0] < 0:
            raise ValueError("camera quaternion must have a non-negative scalar part")

    @classmethod
    def look_at(cls, eye, target, fov_v: float, up=(0.0, 0.0, 1.0)) -> "CameraParams":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])  # rows: camera axes in world coords
        q = matrix_to_quat(rot)
        rot = quat_to_matrix(q)
        return cls(q, -rot @ eye, fov_v)

    @classmethod
    def from_vector(cls, g) -> "CameraParams":
        g = np.asarray(g, dtype=np.float64)
        return cls(_canonical_quat(g[:4]), g[4:7], g[7])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation_q, self.translation, [self.fov_v]])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.rotation_q)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def focal(self, height: int) -> float:
        return 0.5 * height / math.tan(0.5 * self.fov_v)


def pixel_rays(camera: CameraParams, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin and world-frame directions whose camera-frame z component is 1.

    With that scaling the ray parameter of a hit equals its camera-frame depth.
    """
    f = camera.focal(height)
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    d_cam = np.stack([(jj - 0.5 * width) / f, (ii - 0.5 * height) / f, np.ones_like(jj)], axis=-1)
    return camera.center, d_cam @ camera.rotation


def project_points(points: np.ndarray, camera: CameraParams, height: int, width: int):
    """World points -> (u, v, z): continuous pixel coordinates and camera depth."""
    pc = points @ camera.rotation.T + camera.translation
    f = camera.focal(height)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * pc[:, 0] / z + 0.5 * width
        v = f * pc[:, 1] / z + 0.5 * height
    return u, v, z


# ----------------------------------------------------------------------- scene


@dataclass
class SceneObject:
    kind: str  # cube | sphere | flat_decoy
    center: np.ndarray
    half_extent: float
    color_id: int
    mimic: Optional[str] = None  # shape a flat_decoy is printed to look like

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.kind not in ("cube", "sphere", "flat_decoy"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")
        if self.kind == "flat_decoy" and self.mimic not in SHAPES:
            raise ValueError("flat_decoy needs a mimic shape")

    @property
    def shape_name(self) -> str:
        return self.mimic if self.kind == "flat_decoy" else self.kind


@dataclass
class Scene:
    objects: list[SceneObject]
    table_height: float = 0.0
    table_extent: Optional[tuple[float, float]] = TABLE_EXTENT
    arm_tip: Optional[np.ndarray] = None
    goal_pad: Optional[tuple[float, float, float]] = None  # (x, y, half size)
    print_camera: Optional[CameraParams] = None
    target_id: int = 0

    @classmethod
    def empty(cls) -> "Scene":
        return cls(objects=[], table_extent=None)

    @property
    def target(self) -> SceneObject:
        return self.objects[self.target_id]

    def instruction(self, verb: str = "reach") -> str:
        t = self.target
        return f"{verb} the {COLOR_NAMES[t.color_id]} {t.shape_name}"

    def to_dict(self) -> dict:
        return {
            "objects": [
                {
                    "kind": o.kind,
                    "center": o.center.tolist(),
                    "half_extent": o.half_extent,
                    "color_id": o.color_id,
                    "mimic": o.mimic,
                }
                for o in self.objects
            ],
            "table_height": self.table_height,
            "table_extent": list(self.table_extent) if self.table_extent else None,
            "arm_tip": None if self.arm_tip is None else np.asarray(self.arm_tip).tolist(),
            "goal_pad": list(self.goal_pad) if self.goal_pad else None,
            "print_camera": None if self.print_camera is None else self.print_camera.to_vector().tolist(),
            "target_id": self.target_id,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    def virtual_center(self, obj: SceneObject) -> np.ndarray:
        """Centre of the solid a decoy imitates, resting on the table."""
        return np.array([obj.center[0], obj.center[1], self.table_height + obj.half_extent])

    def real_twin(self, index: int) -> "Scene":
        """Copy of the scene with decoy `index` replaced by the solid it imitates."""
        obj = self.objects[index]
        if obj.kind != "flat_decoy":
            raise ValueError(f"object {index} is not a flat_decoy")
        objects = list(self.objects)
        objects[index] = SceneObject(obj.mimic, self.virtual_center(obj), obj.half_extent, obj.color_id)
        return Scene(objects, self.table_height, self.table_extent, self.arm_tip, self.goal_pad,
                     self.print_camera, self.target_id)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance to the nearest rendered surface (decoys count as the table)."""
        points = np.atleast_2d(points)
        best = np.full(len(points), np.inf)
        if self.table_extent is not None:
            lo, hi = self.table_extent
            dz = np.abs(points[:, 2] - self.table_height)
            dx = np.maximum(np.maximum(lo - points[:, 0], points[:, 0] - hi), 0)
            dy = np.maximum(np.maximum(lo - points[:, 1], points[:, 1] - hi), 0)
            best = np.minimum(best, np.sqrt(dz**2 + dx**2 + dy**2))
        for o in self.objects:
            if o.kind == "sphere":
                d = np.abs(np.linalg.norm(points - o.center, axis=1) - o.half_extent)
            elif o.kind == "cube":
                q = np.abs(points - o.center) - o.half_extent
                outside = np.linalg.norm(np.maximum(q, 0), axis=1)
                inside = np.minimum(q.max(axis=1), 0)
                d = np.abs(outside + inside)
            else:
                continue
            best = np.minimum(best, d)
        if self.arm_tip is not None:
            d = np.abs(np.linalg.norm(points - np.asarray(self.arm_tip), axis=1) - ARM_RADIUS)
            best = np.minimum(best, d)
        return best


# ------------------------------------------------------------------ camera rig

WORKSPACE_CENTER = np.array([0.5, 0.5, 0.05])
RIG_EYES = [
    np.array([0.5, -0.45, 0.75]),   # front (print camera for decoys, main view)
    np.array([1.30, -0.05, 0.80]),  # corner
    np.array([-0.30, -0.05, 0.80]),  # corner2
    np.array([0.5, 0.35, 1.35]),    # top
]
# The top camera looks almost straight down, so a world-z up vector would make its
# roll swing wildly under jitter; it uses +y instead.
RIG_UPS = [(0.0, 0.0, 1.0)] * 3 + [(0.0, 1.0, 0.0)]
RIG_FOV = math.radians(50.0)


def rig_cameras(n_views: int = 4, rng: np.random.Generator | None = None, jitter: float = 0.0) -> list[CameraParams]:
    """The fixed front / corner / corner2 / top rig, optionally jittered."""
    if not 1 <= n_views <= len(RIG_EYES):
        raise ValueError(f"n_views must be in 1..{len(RIG_EYES)}")
    cams = []
    for eye, up in zip(RIG_EYES[:n_views], RIG_UPS):
        target = WORKSPACE_CENTER
        fov = RIG_FOV
        if rng is not None and jitter > 0:
            eye = eye + rng.uniform(-jitter, jitter, 3)
            target = target + rng.uniform(-0.5 * jitter, 0.5 * jitter, 3)
            fov = fov * (1.0 + rng.uniform(-0.1, 0.1) * jitter / 0.05)
        cams.append(CameraParams.look_at(eye, target, fov, up))
    return cams


# --------------------------------------------------------------- scene sampling


class SceneGenerationError(RuntimeError):
    pass


def _decoy_footprint(center_xy, half_extent, table_height, camera: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned xy bounds of the table region a decoy print must cover."""
    c = np.array([center_xy[0], center_xy[1], table_height + half_extent])
    corners = c + half_extent * np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).T.reshape(-1, 3)
    eye = camera.center
    pts = []
    for p in corners:
        d = p - eye
        if d[2] >= 0:
            raise SceneGenerationError("print camera must look down at the table")
        s = (table_height - eye[2]) / d[2]
        pts.append(eye + s * d)
    pts = np.array(pts)[:, :2]
    return pts.min(axis=0), pts.max(axis=0)


def generate_scene(
    seed: int,
    n_objects: int = 1,
    decoy: bool = False,
    table_height: float = 0.0,
    print_camera: CameraParams | None = None,
) -> Scene:
    """Deterministic random tabletop with `n_objects` solids (object 0 is the target).

    Solid colours are all distinct, so exactly one solid carries the target
    colour. With `decoy`, one extra flat print of the target is added whose
    footprint (as seen from `print_camera`) is kept clear of every other object.
    """
    if not 1 <= n_objects <= 8:
        raise ValueError(f"n_objects must be in 1..8, got {n_objects}")
    rng = np.random.default_rng(seed)
    print_camera = print_camera or rig_cameras(1)[0]
    colors = rng.permutation(len(COLOR_NAMES))[:n_objects]
    n_total = n_objects + int(decoy)
    kinds = [SHAPES[int(rng.integers(2))] for _ in range(n_objects)]
    sizes = rng.uniform(0.04, 0.06, n_total)
    placed: list[SceneObject] = []
    boxes: list[tuple[np.ndarray, np.ndarray]] = []  # xy keep-out boxes

    def clear(lo, hi) -> bool:
        return not any(np.all(hi > blo) and np.all(lo < bhi) for blo, bhi in boxes)

    for i in range(n_total):
        is_decoy = decoy and i == n_total - 1
        he = float(sizes[i])
        for _ in range(1000):
            xy = rng.uniform(PLACE_LO, PLACE_HI, 2)
            if is_decoy:
                lo, hi = _decoy_footprint(xy, he, table_height, print_camera)
                lo, hi = lo - 0.02, hi + 0.02
            else:
                lo, hi = xy - he - 0.02, xy + he + 0.02
            if clear(lo, hi):
                break
        else:
            raise SceneGenerationError(f"seed {seed}: could not place object {i} after 1000 samples")
        if is_decoy:
            target = placed[0]
            obj = SceneObject("flat_decoy", [xy[0], xy[1], table_height], he, target.color_id, mimic=target.kind)
        else:
            z = table_height + he
            obj = SceneObject(kinds[i], [xy[0], xy[1], z], he, int(colors[i]))
        placed.append(obj)
        boxes.append((lo, hi))
    return Scene(placed, table_height=table_height, print_camera=print_camera, target_id=0)


# ------------------------------------------------------------------- rendering


@dataclass
class ViewRender:
    image: np.ndarray  # H x W x 3 in [0, 1]
    depth_gt: np.ndarray  # H x W, camera z, 0 = no hit
    camera: CameraParams
    labels: Optional[np.ndarray] = None  # object index, or one of the LABEL_* codes


def _box_hit(origin, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tnear = np.where(par, np.where(inside, -np.inf, np.inf), tnear)
    tfar = np.where(par, np.where(inside, np.inf, -np.inf), tfar)
    t_in = tnear.max(axis=-1)
    t_out = tfar.min(axis=-1)
    hit = (t_in <= t_out) & (t_in > 1e-9)
    axis = tnear.argmax(axis=-1)
    normal = np.zeros(dirs.shape)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
    np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
    return np.where(hit, t_in, np.inf), normal


def _sphere_hit(origin, dirs, center, radius):
    oc = origin - center
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = np.einsum("...i,...i->...", dirs, oc)
    c = oc @ oc - radius * radius if oc.ndim == 1 else np.einsum("...i,...i->...", oc, oc) - radius * radius
    disc = b * b - a * c
    ok = disc >= 0
    s = (-b - np.sqrt(np.where(ok, disc, 0.0))) / a
    hit = ok & (s > 1e-9)
    point = origin + s[..., None] * dirs
    normal = (point - center) / radius
    return np.where(hit, s, np.inf), normal


def _solid_hit(kind, origin, dirs, center, half):
    if kind == "cube":
        return _box_hit(origin, dirs, center, half)
    return _sphere_hit(origin, dirs, center, half)


def _shade(albedo: np.ndarray, normal: np.ndarray) -> np.ndarray:
    lambert = np.clip(np.einsum("...i,i->...", normal, LIGHT_DIR), 0.0, None)
    return albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[..., None]


def render_view(scene: Scene, camera: CameraParams, res: tuple[int, int] = (32, 32)) -> ViewRender:
    """Ray-cast one view: flat Lambertian colour, camera-z depth, per-pixel labels."""
    camera.validate()
    height, width = res
    origin, dirs = pixel_rays(camera, height, width)
    best = np.full((height, width), np.inf)
    labels = np.full((height, width), LABEL_BACKGROUND, dtype=np.int64)
    albedo = np.broadcast_to(BACKGROUND, (height, width, 3)).copy()
    normal = np.zeros((height, width, 3))
    lit = np.zeros((height, width), dtype=bool)

    def take(s, n, alb, label, shaded=True):
        closer = s < best
        best[closer] = s[closer]
        labels[closer] = label
        normal[closer] = n[closer]
        albedo[closer] = alb if np.ndim(alb) == 1 else alb[closer]
        lit[closer] = shaded

    for idx, obj in enumerate(scene.objects):
        if obj.kind == "flat_decoy":
            continue
        s, n = _solid_hit(obj.kind, origin, dirs, obj.center, obj.half_extent)
        take(s, n, PALETTE[obj.color_id], idx)
    if scene.arm_tip is not None:
        s, n = _sphere_hit(origin, dirs, np.asarray(scene.arm_tip, dtype=np.float64), ARM_RADIUS)
        take(s, n, ARM_ALBEDO, LABEL_ARM)

    if scene.table_extent is not None:
        h = scene.table_height
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (h - origin[2]) / dirs[..., 2]
        s = np.where(np.isfinite(s) & (s > 1e-9), s, np.inf)
        p = origin + np.where(np.isfinite(s), s, 0.0)[..., None] * dirs
        lo, hi = scene.table_extent
        on_table = np.isfinite(s) & (p[..., 0] >= lo) & (p[..., 0] <= hi) & (p[..., 1] >= lo) & (p[..., 1] <= hi)
        s = np.where(on_table, s, np.inf)
        plane_alb = np.broadcast_to(TABLE_ALBEDO, (height, width, 3)).copy()
        plane_norm = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (height, width, 3)).copy()
        plane_label = np.full((height, width), LABEL_TABLE, dtype=np.int64)
        if scene.goal_pad is not None:
            gx, gy, gh = scene.goal_pad
            on_pad = (np.abs(p[..., 0] - gx) <= gh) & (np.abs(p[..., 1] - gy) <= gh)
            plane_alb[on_pad] = PAD_ALBEDO
        for idx, obj in enumerate(scene.objects):
            if obj.kind != "flat_decoy":
                continue
            # anamorphic print: colour each table point with whatever the imitated solid
            # would show along the print camera's ray through that point
            eye = (scene.print_camera or camera).center
            if np.array_equal(eye, camera.center):
                # the print camera itself: reuse its rays so the print matches the solid bit for bit
                vs, vn = _solid_hit(obj.mimic, origin, dirs, scene.virtual_center(obj), obj.half_extent)
                printed = on_table & (vs < s)
            else:
                vs, vn = _solid_hit(obj.mimic, eye, p - eye, scene.virtual_center(obj), obj.half_extent)
                printed = on_table & (vs < 1.0)
            plane_alb[printed] = PALETTE[obj.color_id]
            plane_norm[printed] = vn[printed]
            plane_label[printed] = idx
        closer = s < best
        best[closer] = s[closer]
        labels[closer] = plane_label[closer]
        normal[closer] = plane_norm[closer]
        albedo[closer] = plane_alb[closer]
        lit[closer] = True

    image = np.where(lit[..., None], _shade(albedo, normal), albedo)
    depth = np.where(np.isfinite(best), best, 0.0)
    return ViewRender(np.clip(image, 0.0, 1.0), depth, camera, labels)


def unproject_depth(view: ViewRender, return_pixels: bool = False):
    """World-frame points for every pixel with positive depth."""
    depth = np.asarray(view.depth_gt, dtype=np.float64)
    height, width = depth.shape
    ii, jj = np.nonzero(depth > 0)
    cam = view.camera
    f = cam.focal(height)
    d = depth[ii, jj]
    pc = np.stack([(jj + 0.5 - 0.5 * width) / f * d, (ii + 0.5 - 0.5 * height) / f * d, d], axis=-1)
    points = (pc - cam.translation) @ cam.rotation
    if return_pixels:
        return points, np.stack([ii, jj], axis=-1)
    return points


# --------------------------------------------------------------- geometry samples


@dataclass
class GeoSample:
    """One multi-view frame set with ground truth for geometry training."""

    images: np.ndarray  # V x H x W x 3
    depths: np.ndarray  # V x H x W
    cameras: np.ndarray  # V x 8
    labels: Optional[np.ndarray] = None

    @property
    def n_views(self) -> int:
        return len(self.images)

    def views(self) -> list[ViewRender]:
        return [
            ViewRender(self.images[v], self.depths[v], CameraParams.from_vector(self.cameras[v]))
            for v in range(self.n_views)
        ]


def make_geo_sample(
    seed: int,
    n_views: int = 4,
    res: tuple[int, int] = (32, 32),
    n_objects: int | None = None,
    decoy: bool = False,
    jitter: float = 0.05,
) -> GeoSample:
    rng = np.random.default_rng([seed, 0x6E0])
    if n_objects is None:
        n_objects = int(rng.integers(1, 5))
    cams = rig_cameras(n_views, rng, jitter)
    scene = generate_scene(seed, n_objects, decoy=decoy)
    if rng.random() < 0.5:
        scene.arm_tip = np.array([*rng.uniform(0.2, 0.8, 2), rng.uniform(0.15, 0.4)])
    return render_sample(scene, cams, res)


def render_sample(scene: Scene, cameras: Sequence[CameraParams], res=(32, 32)) -> GeoSample:
    views = [render_view(scene, c, res) for c in cameras]
    return GeoSample(
        np.stack([v.image for v in views]),
        np.stack([v.depth_gt for v in views]),
        np.stack([c.to_vector() for c in cameras]),
        np.stack([v.labels for v in views]),
    )


# ---------------------------------------------------------------------- episodes

EPISODE_MAGIC = b"GP3E"
EPISODE_VERSION = 1
_BLOBS = ("images", "depths", "cameras", "proprio", "actions")


class EpisodeFormatError(ValueError):
    pass


@dataclass
class Episode:
    images: np.ndarray  # T x V x H x W x 3, float32
    depths: np.ndarray  # T x V x H x W
    cameras: np.ndarray  # T x V x 8
    proprio: np.ndarray  # T x 4
    actions: np.ndarray  # T x 4
    instruction: list[int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in _BLOBS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        self.instruction = [int(i) for i in self.instruction]
        t = len(self.images)
        if t < 1:
            raise ValueError("episode needs at least one step")
        if not all(len(getattr(self, n)) == t for n in _BLOBS):
            raise ValueError("per-step arrays disagree on T")
        if self.images.ndim != 5 or self.depths.shape != self.images.shape[:4]:
            raise ValueError(f"bad view shapes {self.images.shape} / {self.depths.shape}")
        if self.cameras.shape != (t, self.images.shape[1], 8):
            raise ValueError(f"bad camera shape {self.cameras.shape}")
        if any(not 0 <= i < len(VOCAB) for i in self.instruction):
            raise ValueError("instruction token outside the vocabulary")

    @property
    def shape(self) -> dict:
        t, v, h, w, _ = self.images.shape
        return {"T": t, "V": v, "H": h, "W": w}

    def views_at(self, step: int) -> list[ViewRender]:
        return [
            ViewRender(self.images[step, v].astype(np.float64), self.depths[step, v].astype(np.float64),
                       CameraParams.from_vector(self.cameras[step, v].astype(np.float64)))
            for v in range(self.images.shape[1])
        ]

    def geo_sample(self, step: int = 0) -> GeoSample:
        return GeoSample(self.images[step].astype(np.float64), self.depths[step].astype(np.float64),
                         self.cameras[step].astype(np.float64))


def make_episode(seed: int, task_spec, res: tuple[int, int] = (32, 32)) -> Episode:
    """Roll out the scripted expert and record every (observation, action) pair."""
    from . import toytask

    state, obs = toytask.env_reset(seed, task_spec, res)
    images, depths, cameras, proprio, actions = [], [], [], [], []
    done = False
    while not done:
        action = toytask.scripted_expert(state, task_spec)
        images.append(np.stack([v.image for v in obs.views]))
        depths.append(np.stack([v.depth_gt for v in obs.views]))
        cameras.append(np.stack([v.camera.to_vector() for v in obs.views]))
        proprio.append(obs.proprio)
        actions.append(action)
        state, _, done, _ = toytask.env_step(state, action)
        if not done:
            obs = toytask.observe(state, task_spec, res)
    meta = {"seed": int(seed), "task": task_spec.to_dict(), "success": bool(state.success)}
    return Episode(np.stack(images), np.stack(depths), np.stack(cameras), np.stack(proprio),
                   np.stack(actions), obs.instruction, meta)


def write_episode(path, episode: Episode) -> None:
    blobs = [getattr(episode, n).astype("<f4").tobytes() for n in _BLOBS]
    entries, offset = [], 0
    for name, blob in zip(_BLOBS, blobs):
        arr = getattr(episode, name)
        entries.append({"name": name, "dtype": "f32le", "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
    manifest = {
        **episode.shape,
        "vocab": VOCAB,
        "instruction": episode.instruction,
        "blobs": entries,
        "meta": episode.meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<I", EPISODE_VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


def read_manifest(raw: bytes) -> tuple[dict, int]:
    """Parse the header; returns (manifest, offset of the blob section)."""
    if len(raw) < 4 or raw[:4] != EPISODE_MAGIC:
        raise EpisodeFormatError("bad magic at offset 0")
    if len(raw) < 16:
        raise EpisodeFormatError(f"truncated header at offset {len(raw)}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != EPISODE_VERSION:
        raise EpisodeFormatError(f"unsupported version {version} at offset 4")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise EpisodeFormatError(f"manifest length {mlen} exceeds file size at offset 8")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EpisodeFormatError(f"corrupt manifest at offset 16: {exc}") from None
    return manifest, 16 + mlen


def read_episode(path) -> Episode:
    raw = Path(path).read_bytes()
    manifest, base = read_manifest(raw)
    arrays = {}
    for entry in manifest["blobs"]:
        start = base + entry["offset"]
        n = int(np.prod(entry["shape"])) * 4
        if entry["nbytes"] != n:
            raise EpisodeFormatError(f"blob {entry['name']!r} length {entry['nbytes']} != shape size at offset {start}")
        if start + n > len(raw):
            raise EpisodeFormatError(f"truncated blob {entry['name']!r} at offset {start}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=start).reshape(entry["shape"])
    missing = [n for n in _BLOBS if n not in arrays]
    if missing:
        raise EpisodeFormatError(f"missing blobs {missing}")
    if manifest.get("vocab") != VOCAB:
        raise EpisodeFormatError("episode vocabulary differs from this build's vocabulary")
    return Episode(**{n: arrays[n] for n in _BLOBS}, instruction=manifest["instruction"], meta=manifest.get("meta", {}))
