"""Two-stage training: geometry fine-tuning, then action training under LoRA and G-FiLM."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .diffcore import Parameter
from .encoder import Encoder, EncoderConfig
from .geoeval import encoder_model, eval_pointmaps
from .losses import action_loss, camera_loss, depth_loss
from .policy import (
    ACT_DIM,
    Denoiser,
    DiffusionSchedule,
    MLPHead,
    PolicyInput,
    ddpm_sample,
    ddpm_train_loss,
)
from .scenegen import Episode, GeoSample, make_geo_sample
from .toytask import MAX_STEP, Observation

ACTION_SCALE = 1.0 / MAX_STEP  # actions are regressed in units of the step clip


@dataclass
class TrainConfig:
    stage: int = 1
    lr_init: float = 1e-3
    epochs: int = 30
    warmup_frac: float = 0.10
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    seed: int = 0
    alpha: float = 0.1
    huber_delta: float = 1.0
    depth_norm: str = "l1"
    head: str = "mlp"
    film: str = "global"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    stage1_lora: bool = False
    chunk: int = 0  # 0 picks 1 for the MLP head and 4 for diffusion
    diffusion_steps: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if not 0 < self.warmup_frac < 1:
            raise ValueError(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")
        if self.lr_init < 0:
            raise ValueError("lr_init must be non-negative")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        if self.head not in ("mlp", "diffusion"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.film not in ("none", "global", "all"):
            raise ValueError(f"unknown film mode {self.film!r}")

    @property
    def action_chunk(self) -> int:
        return self.chunk or (1 if self.head == "mlp" else 4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**dict(d))

    @classmethod
    def load(cls, path=None, overrides: Sequence[str] = (), **defaults) -> "TrainConfig":
        """JSON file (optional) overridden by `key=value` strings."""
        d = dict(defaults)
        if path is not None:
            d.update(json.loads(Path(path).read_text()))
        types = {f.name: f.type for f in fields(cls)}
        for item in overrides:
            key, sep, value = item.lstrip("-").partition("=")
            key = key.replace("-", "_")
            if not sep or key not in types:
                raise ValueError(f"bad override {item!r}")
            d[key] = _coerce(value, types[key])
        return cls.from_dict(d)


def _coerce(value: str, typ: str):
    if typ == "bool":
        if value.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


# --------------------------------------------------------------- optimisation


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first warmup_frac of training, cosine decay afterwards."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        return cfg.lr_init * step / warm
    progress = (step - warm) / (total_steps - warm)
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], step: int) -> "OptimizerState":
        m = {k[len("optim.m."):]: a.copy() for k, a in arrays.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: a.copy() for k, a in arrays.items() if k.startswith("optim.v.")}
        return cls(m, v, step)


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, Optional[np.ndarray]],
              state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam on every parameter with requires_grad; frozen ones are skipped."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} differs from parameter {name!r} {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def optimize_step(loss, params: Mapping[str, Parameter], state: OptimizerState, lr: float,
                  cfg: TrainConfig) -> float:
    """Backward `loss`, then one Adam step; returns the loss value."""
    for p in params.values():
        p.grad = None
    dc.backward(loss)
    adam_step(params, {n: p.grad for n, p in params.items()}, state, lr, cfg)
    return float(loss.data)


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    checkpoint: Optional[Path] = None
    best: Optional[Path] = None


def _log_metrics(out_dir: Optional[Path], record: dict) -> None:
    if out_dir is not None:
        with open(out_dir / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ------------------------------------------------------------------- Stage 1


def stage1_dataset(n: int, seed0: int = 0, decoy_frac: float = 0.5, n_views: int = 4,
                   res=(32, 32)) -> list[GeoSample]:
    """Synthetic frame sets seeded seed0..seed0+n-1; about `decoy_frac` of them hold a flat decoy."""
    return [make_geo_sample(seed0 + i, n_views, res,
                            decoy=bool(np.random.default_rng([seed0 + i, 1]).random() < decoy_frac))
            for i in range(n)]


def stage1_loss(encoder: Encoder, images, depths, cameras, cfg: TrainConfig):
    tokens = encoder.forward(images)
    cams = encoder.camera_head_out(tokens)
    depth, sigma = encoder.depth_head_out(tokens)
    b = images.shape[0]
    l_cam = camera_loss(cams, cameras, cfg.huber_delta) / b
    l_depth = depth_loss(depth, sigma, depths, cfg.alpha, cfg.depth_norm)
    return l_cam + l_depth, float(l_cam.data), float(l_depth.data)


def _stack_geo(samples: Sequence[GeoSample], idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([samples[i].images for i in idx]), np.stack([samples[i].depths for i in idx]),
            np.stack([samples[i].cameras for i in idx]))


def train_stage1(
    dataset: Sequence[GeoSample],
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    val: Sequence[GeoSample] | None = None,
    out_dir=None,
    resume=None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Minimise camera + depth loss over all encoder and head weights.

    Writes last.gp3w every epoch (and best.gp3w by validation Overall when `val`
    is given). `resume` continues from a last.gp3w, bit-identically to an
    uninterrupted run. `max_epochs` stops early without changing the schedule.
    """
    if len(dataset) == 0:
        raise ValueError("train_stage1: empty dataset")
    views = {s.n_views for s in dataset}
    if len(views) != 1:
        raise ValueError(f"train_stage1: samples disagree on view count {sorted(views)}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = max(cfg.epochs * steps_per_epoch, 1)

    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        encoder = Encoder.from_arrays(arrays, meta)
        if meta.get("lora"):
            _unfreeze_all(encoder)
        state = OptimizerState.from_arrays(arrays, int(meta["step"]))
        start, history = int(meta["epoch"]) + 1, list(meta["history"])
        best_val = meta.get("best_val")
    else:
        encoder = Encoder(encoder_cfg or EncoderConfig(), seed=cfg.seed)
        if cfg.stage1_lora:
            encoder.add_lora(cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed)
            _unfreeze_all(encoder)
        state, start, history, best_val = OptimizerState(), 0, [], None
    params = dict(encoder.trainable())
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    last = best = None
    for epoch in range(start, stop):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, cams, deps = [], [], []
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch : (k + 1) * cfg.batch]
            images, depths, cameras = _stack_geo(dataset, idx)
            lr = lr_schedule(state.step, total, cfg)
            loss, l_cam, l_depth = stage1_loss(encoder, images, depths, cameras, cfg)
            losses.append(optimize_step(loss, params, state, lr, cfg))
            cams.append(l_cam)
            deps.append(l_depth)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "camera_loss": float(np.mean(cams)),
                  "depth_loss": float(np.mean(deps)), "lr": lr, "step": state.step}
        if val:
            record["val"] = eval_pointmaps(encoder_model(encoder), val)["aggregate"]
        history.append(record)
        _log_metrics(out_dir, record)
        if out_dir is not None:
            score = record["val"]["overall"] if val else record["loss"]
            improved = best_val is None or score < best_val
            best_val = score if improved else best_val
            meta = {"stage": 1, "epoch": epoch, "step": state.step, "history": history,
                    "train_config": cfg.to_dict(), "best_val": best_val}
            last = out_dir / "last.gp3w"
            encoder.save(last, extra=state.to_arrays(), meta=meta)
            if improved:
                best = out_dir / "best.gp3w"
                encoder.save(best, meta=meta)
    return TrainResult(encoder, history, last, best)


def _unfreeze_all(encoder: Encoder) -> None:
    """Stage-1 LoRA variant: adapters train but W0 stays frozen; everything else trains."""
    frozen = {id(a.base) for a in encoder.lora_adapters().values()}
    for _, p in encoder.named_parameters():
        p.requires_grad = id(p) not in frozen


# ------------------------------------------------------------------- Stage 2


class PolicyModel:
    """Encoder + action head, usable as a toytask policy `policy(obs, state)`."""

    def __init__(self, encoder: Encoder, head, kind: str = "mlp", chunk: int = 1,
                 schedule: DiffusionSchedule | None = None, seed: int = 0):
        self.encoder = encoder
        self.head = head
        self.kind = kind
        self.chunk = chunk
        self.schedule = schedule or DiffusionSchedule.linear()
        self.rng = np.random.default_rng([seed, 0x5A3])

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.head.named_parameters("policy.")

    def trainable(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def policy_input(self, images, proprio, instructions) -> PolicyInput:
        lang = self.encoder.embed_batch(instructions)
        tokens = self.encoder.forward(images, lang)
        return PolicyInput(self.encoder.pooled_feature(tokens), proprio)

    def loss(self, images, proprio, instructions, actions, rng: np.random.Generator):
        """actions: (B, chunk, 4) in world units."""
        inp = self.policy_input(images, proprio, instructions)
        target = actions.reshape(len(actions), -1) * ACTION_SCALE
        if self.kind == "mlp":
            return action_loss(self.head(inp), target)
        return ddpm_train_loss(self.head, inp, target, rng, self.schedule)

    def predict(self, images, proprio, instructions) -> np.ndarray:
        """(B, chunk, 4) actions in world units."""
        with dc.no_grad():
            inp = self.policy_input(images, proprio, instructions)
            if self.kind == "mlp":
                out = self.head(inp).data
            else:
                out = ddpm_sample(self.head, inp, self.rng, self.schedule, self.chunk * ACT_DIM)
        return out.reshape(len(out), self.chunk, ACT_DIM) / ACTION_SCALE

    def __call__(self, obs: Observation, state=None) -> np.ndarray:
        return self.predict(obs.images[None], obs.proprio[None], [obs.instruction])[0, 0]

    def save(self, path, meta: dict | None = None) -> None:
        extra = {f"policy.{k}": v for k, v in self.head.state_dict().items()}
        m = {"head": self.kind, "chunk": self.chunk, "diffusion_steps": self.schedule.n_steps}
        m.update(meta or {})
        self.encoder.save(path, extra=extra, meta=m)

    @classmethod
    def load(cls, path, seed: int = 0) -> "PolicyModel":
        arrays, meta = load_checkpoint(path)
        if "head" not in meta:
            raise KeyError(f"{path}: not a policy checkpoint (no head entry)")
        encoder = Encoder.from_arrays(arrays, meta)
        head = make_head(meta["head"], encoder.cfg.embed_dim, meta["chunk"], seed)
        own = {k[len("policy."):]: v for k, v in arrays.items() if k.startswith("policy.")}
        head.load_state_dict(own)
        return cls(encoder, head, meta["head"], meta["chunk"],
                   DiffusionSchedule.linear(meta.get("diffusion_steps", 50)), seed)


def make_head(kind: str, feature_dim: int, chunk: int, seed: int):
    if kind == "mlp":
        return MLPHead(feature_dim, ACT_DIM * chunk, seed=seed)
    return Denoiser(feature_dim, ACT_DIM * chunk, seed=seed)


def _load_stage1(stage1) -> Encoder:
    if isinstance(stage1, Encoder):
        arrays = {f"encoder.{k}": v for k, v in stage1.state_dict().items()}
        meta = {"encoder_config": stage1.cfg.to_dict(), "lora": stage1.lora_config()}
        return Encoder.from_arrays(arrays, meta)
    return Encoder.load(stage1)


def build_policy(stage1, cfg: TrainConfig, encoder_cfg: EncoderConfig | None = None) -> PolicyModel:
    """Encoder from a Stage-1 checkpoint (path or Encoder), or random init when `stage1` is None.

    Base weights are frozen; LoRA A/B, FiLM projections, the instruction table
    and the head are the only trainable parameters.
    """
    if stage1 is None:
        ecfg = encoder_cfg or EncoderConfig()
        encoder = Encoder(EncoderConfig(**{**ecfg.to_dict(), "film": cfg.film}), seed=cfg.seed)
    else:
        encoder = _load_stage1(stage1)
        if encoder.lora_adapters():
            raise ValueError("Stage-1 encoder already carries LoRA adapters; merge them first")
        encoder = _with_film(encoder, cfg.film)
    encoder.freeze()
    encoder.add_lora(cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed)
    for a in encoder.lora_adapters().values():
        a.lora_A.requires_grad = True
        a.lora_B.requires_grad = True
    for proj in encoder.film.values():
        proj.unfreeze()
    encoder.lang_table.requires_grad = True
    head = make_head(cfg.head, encoder.cfg.embed_dim, cfg.action_chunk, cfg.seed)
    return PolicyModel(encoder, head, cfg.head, cfg.action_chunk,
                       DiffusionSchedule.linear(cfg.diffusion_steps), cfg.seed)


def _with_film(encoder: Encoder, film: str) -> Encoder:
    if encoder.cfg.film == film:
        return encoder
    arrays = {f"encoder.{k}": v for k, v in encoder.state_dict().items() if not k.startswith("film.")}
    return Encoder.from_arrays(arrays, {"encoder_config": encoder.cfg.to_dict(), "lora": None}, film)


def census(model: PolicyModel) -> list[str]:
    return sorted(model.trainable())


@dataclass
class StepData:
    images: np.ndarray  # N x V x H x W x 3 (float32)
    proprio: np.ndarray  # N x 4
    actions: np.ndarray  # N x chunk x 4
    instructions: list[list[int]]


def episode_steps(episodes: Sequence[Episode], chunk: int = 1) -> StepData:
    """Flatten episodes into per-step samples; chunks past the end are zero-padded."""
    if not episodes:
        raise ValueError("no episodes")
    imgs, prop, acts, instr = [], [], [], []
    for ep in episodes:
        t = len(ep.actions)
        padded = np.concatenate([ep.actions, np.zeros((chunk - 1, ACT_DIM), np.float32)])
        for s in range(t):
            acts.append(padded[s : s + chunk])
            instr.append(list(ep.instruction))
        imgs.append(ep.images)
        prop.append(ep.proprio)
    return StepData(np.concatenate(imgs), np.concatenate(prop), np.stack(acts), instr)


def train_stage2(
    episodes: Sequence[Episode],
    stage1_ckpt,
    cfg: TrainConfig,
    out_dir=None,
    encoder_cfg: EncoderConfig | None = None,
) -> TrainResult:
    """Action training with the encoder under LoRA and language FiLM on its global blocks."""
    model = build_policy(stage1_ckpt, cfg, encoder_cfg)
    data = episode_steps(episodes, model.chunk)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    n = len(data.proprio)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = max(cfg.epochs * steps_per_epoch, 1)
    params = model.trainable()
    state, history, last = OptimizerState(), [], None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        losses = []
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch : (k + 1) * cfg.batch]
            lr = lr_schedule(state.step, total, cfg)
            loss = model.loss(data.images[idx].astype(np.float64), data.proprio[idx].astype(np.float64),
                              [data.instructions[i] for i in idx], data.actions[idx].astype(np.float64), rng)
            losses.append(optimize_step(loss, params, state, lr, cfg))
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "step": state.step}
        history.append(record)
        _log_metrics(out_dir, record)
    if out_dir is not None:
        last = out_dir / "policy.gp3w"
        model.save(last, meta={"stage": 2, "train_config": cfg.to_dict(), "history": history})
    return TrainResult(model, history, last, last)


def stage2_loss_on(model: PolicyModel, data: StepData, seed: int = 0) -> float:
    """Mean action loss over a dataset, evaluated without gradients."""
    rng = np.random.default_rng(seed)
    with dc.no_grad():
        out = []
        for k in range(0, len(data.proprio), 64):
            sl = slice(k, k + 64)
            loss = model.loss(data.images[sl].astype(np.float64), data.proprio[sl].astype(np.float64),
                              data.instructions[sl], data.actions[sl].astype(np.float64), rng)
            out.append(float(loss.data) * len(data.proprio[sl]))
    return sum(out) / len(data.proprio)


# ------------------------------------------------------------------- ablation

ABLATION_FILM = {"baseline": "none", "FT": "none", "FT+F": "all", "FT+GF": "global"}


def run_ablation(
    stage1_ckpt,
    spec,
    cfg: TrainConfig,
    seeds: Sequence[int] = (0,),
    views: Sequence[int] = (1, 2, 4),
    methods: Sequence[str] = ("baseline", "FT", "FT+F", "FT+GF"),
    n_episodes: int = 50,
    n_trials: int = 30,
    eval_seed0: int = 10_000,
    out_dir=None,
) -> tuple[list[dict], list[dict]]:
    """Train one Stage-2 policy per (seed, method, views) cell and score it closed loop.

    baseline starts from a randomly initialised encoder of the Stage-1 architecture;
    FT / FT+F / FT+GF start from the Stage-1 checkpoint with FiLM off / on every
    block / on global blocks only. Returns (per-seed rows, seed-averaged rows).
    """
    from .scenegen import make_episode
    from .toytask import TaskSpec, ablation_grid

    _, meta = load_checkpoint(stage1_ckpt)
    encoder_cfg = EncoderConfig(**meta["encoder_config"])
    data = {v: [make_episode(i, TaskSpec(**{**spec.to_dict(), "n_views": v})) for i in range(n_episodes)]
            for v in views}
    rows = []
    for seed in seeds:
        cells = {}
        for v in views:
            for m in methods:
                mcfg = TrainConfig(**{**cfg.to_dict(), "stage": 2, "film": ABLATION_FILM[m], "seed": seed})
                res = train_stage2(data[v], None if m == "baseline" else stage1_ckpt, mcfg, encoder_cfg=encoder_cfg)
                cells[(m, v)] = res.model
        seed_rows = ablation_grid(cells, spec, n_trials, eval_seed0, seed, methods=methods, views=views)
        rows.extend(seed_rows)
        if out_dir is not None:
            _log_metrics(Path(out_dir), {"seed": seed, "rows": seed_rows})
    summary = []
    for m in methods:
        for v in views:
            vals = [r["success_rate"] for r in rows if r["method"] == m and r["views"] == v]
            summary.append({"method": m, "views": v, "tier": spec.tier, "success_rate": float(np.mean(vals)),
                            "n_trials": n_trials, "seed": list(seeds)})
    return rows, summary
