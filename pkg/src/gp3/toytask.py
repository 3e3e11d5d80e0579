"""Closed-loop toy manipulation benchmark: reach / push among coloured distractors."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .scenegen import (
    PLACE_HI,
    PLACE_LO,
    CameraParams,
    Scene,
    ViewRender,
    generate_scene,
    render_view,
    rig_cameras,
    tokenize,
)

log = logging.getLogger(__name__)

HORIZON = 50
MAX_STEP = 0.05
CONTACT_RADIUS = 0.06
EXPERT_GAIN = 0.8
PAD_HALF = 0.05
TASKS = ("reach", "push")
METHODS = ("baseline", "FT", "FT+F", "FT+GF")
GRID_VIEWS = (1, 2, 4)


@dataclass(frozen=True)
class TaskSpec:
    task: str = "reach"
    n_views: int = 2
    distractors: int = 0
    decoy_views: bool = False
    success_eps: float = 0.03
    horizon: int = HORIZON

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 1 <= self.n_views <= 4:
            raise ValueError(f"n_views must be in 1..4, got {self.n_views}")
        if not 0 <= self.distractors <= 7:
            raise ValueError(f"distractors must be in 0..7, got {self.distractors}")
        if self.success_eps <= 0 or self.horizon < 1:
            raise ValueError("success_eps and horizon must be positive")

    @property
    def tier(self) -> str:
        if self.task == "reach":
            return "easy"
        return "hard" if self.decoy_views else "medium"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(**dict(d))


@dataclass
class EnvState:
    ee: np.ndarray
    gripper: float
    scene: Scene
    step: int = 0
    horizon: int = HORIZON
    success: bool = False

    @property
    def objects(self):
        return self.scene.objects

    @property
    def target_id(self) -> int:
        return self.scene.target_id

    @property
    def target(self):
        return self.scene.target

    @property
    def goal(self) -> Optional[np.ndarray]:
        if self.scene.goal_pad is None:
            return None
        return np.array(self.scene.goal_pad[:2])


@dataclass
class Observation:
    views: list[ViewRender]
    proprio: np.ndarray  # ee xyz + gripper
    instruction: list[int] = field(default_factory=list)

    @property
    def images(self) -> np.ndarray:
        return np.stack([v.image for v in self.views])


def task_cameras(spec: TaskSpec) -> list[CameraParams]:
    return rig_cameras(spec.n_views)


def _place_goal(rng: np.random.Generator, target_xy: np.ndarray) -> np.ndarray:
    for _ in range(1000):
        g = rng.uniform(PLACE_LO, PLACE_HI, 2)
        if 0.15 <= np.linalg.norm(g - target_xy) <= 0.3:
            return g
    raise RuntimeError("could not place goal pad")


def env_reset(seed: int, spec: TaskSpec, res: tuple[int, int] = (32, 32)) -> tuple[EnvState, Observation]:
    scene = generate_scene(seed, n_objects=1 + spec.distractors, decoy=spec.decoy_views)
    rng = np.random.default_rng([seed, 0xE5])
    if spec.task == "push":
        g = _place_goal(rng, scene.target.center[:2])
        scene.goal_pad = (float(g[0]), float(g[1]), PAD_HALF)
    ee = np.array([*rng.uniform(0.2, 0.8, 2), rng.uniform(0.2, 0.35)])
    state = EnvState(ee, 0.0, scene, 0, spec.horizon, False)
    return state, observe(state, spec, res)


def observe(state: EnvState, spec: TaskSpec, res: tuple[int, int] = (32, 32)) -> Observation:
    scene = copy.copy(state.scene)
    scene.arm_tip = state.ee.copy()
    views = [render_view(scene, cam, res) for cam in task_cameras(spec)]
    verb = spec.task
    return Observation(views, np.append(state.ee, state.gripper), tokenize(state.scene.instruction(verb)))


def clip_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (4,):
        raise ValueError(f"action must have 4 entries, got {a.shape}")
    return np.concatenate([np.clip(a[:3], -MAX_STEP, MAX_STEP), a[3:]])


def _is_success(state: EnvState, spec: TaskSpec) -> bool:
    target = state.target
    if spec.task == "reach":
        return bool(np.linalg.norm(state.ee - target.center) <= spec.success_eps)
    gx, gy, gh = state.scene.goal_pad
    return bool(abs(target.center[0] - gx) <= gh and abs(target.center[1] - gy) <= gh)


def env_step(state: EnvState, action, spec: TaskSpec | None = None) -> tuple[EnvState, float, bool, bool]:
    """Apply a clipped (dx, dy, dz, dgripper) action; returns (state', 0.0, done, success).

    The gripper entry is a delta like the translation, so a zero action leaves
    everything but the step counter untouched.
    """
    spec = spec or _spec_of(state)
    a = clip_action(action)
    new = copy.deepcopy(state)
    delta = np.clip(state.ee + a[:3], 0.0, 1.0) - state.ee
    if spec.task == "push":
        for obj in new.scene.objects:
            if obj.kind == "flat_decoy":
                continue
            rel = obj.center - state.ee
            if np.linalg.norm(rel) <= CONTACT_RADIUS and float(delta @ rel) > 0:
                obj.center[:2] = np.clip(obj.center[:2] + delta[:2], 0.0, 1.0)
    new.ee = state.ee + delta
    new.gripper = float(np.clip(state.gripper + a[3], 0.0, 1.0))
    new.step = state.step + 1
    new.success = _is_success(new, spec)
    done = new.success or new.step >= new.horizon
    return new, 0.0, done, new.success


def _spec_of(state: EnvState) -> TaskSpec:
    return TaskSpec(task="push" if state.scene.goal_pad is not None else "reach", horizon=state.horizon)


def scripted_expert(state: EnvState, spec: TaskSpec) -> np.ndarray:
    """Proportional controller; push goes lift, travel, descend behind the object, then push."""
    target = state.target
    if spec.task == "reach":
        goal = target.center
    else:
        obj_xy, zc = target.center[:2], target.center[2]
        g = state.goal
        u = g - obj_xy
        u = u / max(np.linalg.norm(u), 1e-12)
        rel = state.ee - target.center
        along = float(rel[:2] @ u)
        lateral = np.linalg.norm(rel[:2] - along * u)
        if -0.065 <= along <= -0.02 and lateral <= 0.015 and abs(rel[2]) <= 0.02:
            push = np.clip(EXPERT_GAIN * (g - obj_xy), -MAX_STEP, MAX_STEP)
            dz = np.clip(EXPERT_GAIN * (zc - state.ee[2]), -MAX_STEP, MAX_STEP)
            return np.array([push[0], push[1], dz, 0.0])
        pre = obj_xy - 0.05 * u
        hover = zc + 0.10
        if np.linalg.norm(state.ee[:2] - pre) > 0.015:
            if state.ee[2] < hover - 0.02:
                goal = np.array([state.ee[0], state.ee[1], hover])
            else:
                goal = np.array([pre[0], pre[1], hover])
        else:
            goal = np.array([pre[0], pre[1], zc])
    step = np.clip(EXPERT_GAIN * (goal - state.ee), -MAX_STEP, MAX_STEP)
    return np.append(step, 0.0)


Policy = Callable[[Observation, EnvState], np.ndarray]


def expert_policy(spec: TaskSpec) -> Policy:
    return lambda obs, state: scripted_expert(state, spec)


def random_policy(seed: int = 0) -> Policy:
    rng = np.random.default_rng(seed)
    return lambda obs, state: np.append(rng.uniform(-MAX_STEP, MAX_STEP, 3), 0.0)


def rollout(policy: Policy, spec: TaskSpec, seed: int, res=(32, 32)) -> tuple[bool, int]:
    state, obs = env_reset(seed, spec, res)
    while True:
        action = np.asarray(policy(obs, state), dtype=np.float64)
        if not np.all(np.isfinite(action)):
            log.warning("trial seed %d: non-finite action %s at step %d, counted as failure", seed, action, state.step)
            return False, state.step
        state, _, done, success = env_step(state, action, spec)
        if done:
            return success, state.step
        obs = observe(state, spec, res)


def success_rate(policy: Policy, spec: TaskSpec, n_trials: int, seed0: int = 0, res=(32, 32)) -> float:
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    wins = sum(rollout(policy, spec, seed0 + i, res)[0] for i in range(n_trials))
    return wins / n_trials


# ------------------------------------------------------------------- ablation


def ablation_grid(
    cells: Mapping[tuple[str, int], Optional[Policy]],
    spec: TaskSpec,
    n_trials: int,
    seed0: int = 10_000,
    seed: int = 0,
    res=(32, 32),
    methods: Sequence[str] = METHODS,
    views: Sequence[int] = GRID_VIEWS,
) -> list[dict]:
    """Success rate per (method, views) cell; a missing policy leaves the cell absent."""
    rows = []
    for method in methods:
        for v in views:
            policy = cells.get((method, v))
            row = {"method": method, "views": v, "tier": spec.tier, "success_rate": None,
                   "n_trials": n_trials, "seed": seed}
            if policy is not None:
                cell_spec = TaskSpec(**{**spec.to_dict(), "n_views": v})
                row["success_rate"] = success_rate(policy, cell_spec, n_trials, seed0, res)
            rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    methods = list(dict.fromkeys(r["method"] for r in rows))
    views = sorted({r["views"] for r in rows})
    cell = {(r["method"], r["views"]): r["success_rate"] for r in rows}
    width = max(len(m) for m in methods + ["method"])
    lines = [f"{'method':<{width}}  " + "  ".join(f"{v} view{'s' if v > 1 else ' '}" for v in views)]
    for m in methods:
        vals = []
        for v in views:
            s = cell.get((m, v))
            vals.append(f"{'absent':>7}" if s is None else f"{s:7.3f}")
        lines.append(f"{m:<{width}}  " + "  ".join(vals))
    return "\n".join(lines)


def table_json(rows: Sequence[dict]) -> str:
    return json.dumps(list(rows), indent=2, sort_keys=True)


def expert_step_bound(state: EnvState) -> int:
    return math.ceil(np.linalg.norm(state.ee - state.target.center) / 0.04) + 2
