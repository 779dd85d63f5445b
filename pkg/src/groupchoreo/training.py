"""Loss assembly, the optimisation loop and trainer checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_archive, save_archive
from .contrastive import contrastive_training_scores, negative_batch, nce_loss
from .diffusion import q_sample
from .errors import IoFailure, NonFiniteLoss, SequenceTooShort, ShapeMismatch
from .model import GCDModel
from .motion import Skeleton, default_skeleton, forward_kinematics_torch, load_motion
from .network import ModelConfig
from .synth import load_audio

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "l_simple", "l_pos", "l_vel", "l_foot", "l_nce", "total")


@dataclass
class LossWeights:
    lambda_pos: float = 1.0
    lambda_vel: float = 1.0
    lambda_foot: float = 0.005
    lambda_nce: float = 0.001

    def __post_init__(self):
        if min(self.lambda_pos, self.lambda_vel, self.lambda_foot, self.lambda_nce) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 8
    iterations: int = 2000
    T: int = 60
    seed: int = 0
    model: str = "toy"
    M: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    n_negatives: int = 10
    replace_prob: float = 0.5
    nce_anchors: int = 1
    nce_negative_grad: bool = False
    grad_clip: float = 1.0
    lr_schedule: str = "constant"
    checkpoint_every: int = 500
    use_geo: bool = True
    use_nce: bool = True
    use_group_attention: bool = True
    normalize: bool = True
    fps: float = 30.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 1 or self.iterations < 0 or self.T < 2:
            raise ValueError("batch_size >= 1, iterations >= 0 and T >= 2 are required")
        if self.model not in ("toy", "full"):
            raise ValueError(f"model must be 'toy' or 'full', got {self.model!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return replace(cls(learning_rate=1e-4, batch_size=64, iterations=500_000, T=150, model="full"), **overrides)

    def model_config(self) -> ModelConfig:
        base = ModelConfig.full() if self.model == "full" else ModelConfig.toy()
        changes = {"use_group_attention": self.use_group_attention}
        if self.M is not None:
            changes["M"] = self.M
        return replace(base, **changes)

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(
            lambda_pos=w.lambda_pos if self.use_geo else 0.0,
            lambda_vel=w.lambda_vel if self.use_geo else 0.0,
            lambda_foot=w.lambda_foot if self.use_geo else 0.0,
            lambda_nce=w.lambda_nce if self.use_nce else 0.0,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# config files: "key = value" lines, '#' comments; weights use their lambda_* names

_WEIGHT_KEYS = {f.name for f in fields(LossWeights)}


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if current is None:
        return None if value.lower() == "none" else int(value)
    return value


def parse_config_lines(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def train_config_from(overrides: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    top, weights = {}, asdict(cfg.weights)
    for key, value in overrides.items():
        if key in _WEIGHT_KEYS:
            weights[key] = float(value)
        elif key in known and key != "weights":
            top[key] = _coerce(str(value), known[key])
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(cfg, weights=LossWeights(**weights), **top)


def load_train_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    try:
        entries = parse_config_lines(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    entries.update(overrides or {})
    return train_config_from(entries)


# ---------------------------------------------------------------------------
# losses


def simple_loss(x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    if x0.shape != x0_hat.shape:
        raise ShapeMismatch(f"{tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    return torch.mean((x0 - x0_hat) ** 2)


def safe_norm(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Euclidean norm that is exactly 0 at 0 and differentiable there."""
    return torch.sqrt(torch.sum(v**2, dim=-1) + eps) - eps**0.5


def contact_mask_torch(positions: torch.Tensor, skeleton: Skeleton, fps: float,
                       height_thresh: float = 0.08, speed_thresh: float = 0.15) -> torch.Tensor:
    """Contact flags for the ``T - 1`` frame transitions of ``(..., T, J, 3)`` positions."""
    feet = positions[..., [skeleton.left_foot, skeleton.right_foot], :]
    speed = torch.linalg.norm(feet[..., 1:, :, :] - feet[..., :-1, :, :], dim=-1) * fps
    return (feet[..., :-1, :, 1] < height_thresh) & (speed < speed_thresh)


def geometric_losses(x0: torch.Tensor, x0_hat: torch.Tensor, skeleton: Skeleton | None = None, fps: float = 30.0):
    """Joint position, velocity and foot-contact losses through forward kinematics.

    Velocities are frame differences (m / frame). The foot term averages the
    predicted foot speed over frames where the ground truth is in contact and
    is 0 when there are none.
    """
    skeleton = skeleton or default_skeleton()
    if x0.shape != x0_hat.shape:
        raise ShapeMismatch(f"{tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    if x0.shape[-2] < 2:
        raise SequenceTooShort("geometric losses need T >= 2")
    p_hat = forward_kinematics_torch(x0_hat, skeleton)
    with torch.no_grad():
        p = forward_kinematics_torch(x0, skeleton)
        contact = contact_mask_torch(p, skeleton, fps).to(x0.dtype)
    l_pos = torch.mean((p_hat - p) ** 2)
    v_hat = p_hat[..., 1:, :, :] - p_hat[..., :-1, :, :]
    v = p[..., 1:, :, :] - p[..., :-1, :, :]
    l_vel = torch.mean((v_hat - v) ** 2)
    foot_speed = safe_norm(v_hat[..., [skeleton.left_foot, skeleton.right_foot], :])
    l_foot = torch.sum(foot_speed * contact) / contact.sum().clamp_min(1.0)
    return l_pos, l_vel, l_foot


def total_loss(components: dict, weights: LossWeights):
    """``L_simple + (l_pos L_pos + l_vel L_vel + l_foot L_foot) + l_nce L_nce``."""
    geo = (
        weights.lambda_pos * components["l_pos"]
        + weights.lambda_vel * components["l_vel"]
        + weights.lambda_foot * components["l_foot"]
    )
    return components["l_simple"] + geo + weights.lambda_nce * components["l_nce"]


# ---------------------------------------------------------------------------
# data


def load_manifest(path):
    """``[(audio, group), ...]`` from a dataset manifest written by ``build_dataset``."""
    path = Path(path)
    root = path.parent
    try:
        entries = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    return [(load_audio(root / e["audio"]), load_motion(root / e["motion"])) for e in entries]


class BatchSampler:
    """Draws same-``N`` batches of random crops; consumes only its own rng."""

    def __init__(self, dataset, T: int, batch_size: int):
        if not dataset:
            raise ValueError("dataset is empty")
        self.T, self.batch_size = T, batch_size
        self.audio = [a.features.astype(np.float32) for a, _ in dataset]
        self.motion = [g.data.astype(np.float32) for _, g in dataset]
        self.fps = dataset[0][1].fps
        buckets: dict[int, list[int]] = {}
        for i, g in enumerate(self.motion):
            if g.shape[1] >= T and self.audio[i].shape[0] >= T:
                buckets.setdefault(g.shape[0], []).append(i)
        if not buckets:
            raise SequenceTooShort(f"no sequence has at least T={T} frames")
        self.keys = sorted(buckets)
        self.buckets = [np.array(buckets[k]) for k in self.keys]
        sizes = np.array([len(b) for b in self.buckets], dtype=np.float64)
        self.probs = sizes / sizes.sum()

    def sample(self, rng: np.random.Generator):
        bucket = self.buckets[rng.choice(len(self.buckets), p=self.probs)]
        idx = rng.choice(bucket, size=self.batch_size, replace=len(bucket) < self.batch_size)
        xs, auds = [], []
        for i in idx:
            n_frames = self.motion[i].shape[1]
            start = int(rng.integers(0, n_frames - self.T + 1))
            xs.append(self.motion[i][:, start:start + self.T])
            auds.append(self.audio[i][start:start + self.T])
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(auds))


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset, model: GCDModel | None = None, skeleton: Skeleton | None = None):
        self.cfg = cfg
        self.skeleton = skeleton or default_skeleton()
        self.sampler = BatchSampler(dataset, cfg.T, cfg.batch_size)
        if model is None:
            model = GCDModel(cfg.model_config(), seed=cfg.seed)
            if cfg.normalize:
                model.fit_normalizer(self.sampler.motion)
        self.model = model
        self.fps = self.sampler.fps
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.history: list[dict] = []

    def compute_losses(self, x0: torch.Tensor, audio: torch.Tensor) -> dict:
        cfg, model = self.cfg, self.model
        sched = model.schedule
        weights = cfg.effective_weights()
        B, N = x0.shape[:2]
        den = model.denoiser
        x0_raw, x0 = x0, model.normalize(x0)
        m = torch.randint(1, sched.M + 1, (B,), generator=self.gen)
        eps = torch.randn(x0.shape, generator=self.gen)
        z = torch.randn(B, model.cfg.d, generator=self.gen)
        tokens = den.encode_music(audio)
        w = den.group_embedding(tokens, N, z)
        x_m = q_sample(x0, m, eps, sched)
        x0_hat = den(x_m, m, tokens, w)
        comps = {"l_simple": simple_loss(x0, x0_hat)}
        with torch.set_grad_enabled(cfg.use_geo and torch.is_grad_enabled()):
            comps["l_pos"], comps["l_vel"], comps["l_foot"] = geometric_losses(
                x0_raw, model.denormalize(x0_hat), self.skeleton, self.fps
            )
        if cfg.use_nce and B >= 2 and cfg.n_negatives > 0:
            A = min(cfg.nce_anchors, B)
            mixed = negative_batch(x0, cfg.n_negatives, cfg.replace_prob, self.rng, n_anchors=A)
            pos, neg = contrastive_training_scores(
                den, model.encoder, sched, x0[:A], mixed, tokens[:A], w[:A], m[:A],
                generator=self.gen, anchor_pred=(x_m[:A], x0_hat[:A]), negative_grad=cfg.nce_negative_grad,
            )
            comps["l_nce"] = nce_loss(pos, neg)
            comps["margin"] = (pos.mean() - neg.mean()).detach()
        else:
            comps["l_nce"] = torch.zeros(())
        comps["total"] = total_loss(comps, weights)
        return comps

    def step(self) -> dict:
        self.model.train()
        x0, audio = self.sampler.sample(self.rng)
        comps = self.compute_losses(x0, audio)
        if not torch.isfinite(comps["total"]):
            raise NonFiniteLoss(
                f"iteration {self.iteration}: " + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in comps.items())
            )
        for group in self.optimizer.param_groups:
            group["lr"] = self.learning_rate_at(self.iteration)
        self.optimizer.zero_grad(set_to_none=True)
        comps["total"].backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.iteration += 1
        row = {"iteration": self.iteration, **{k: float(comps[k].detach()) for k in HISTORY_COLUMNS[1:]}}
        if "margin" in comps:
            row["margin"] = float(comps["margin"])
        self.history.append(row)
        return row

    def learning_rate_at(self, iteration: int) -> float:
        """Step size for the update that follows ``iteration`` completed steps."""
        cfg = self.cfg
        if cfg.lr_schedule == "constant" or cfg.iterations == 0:
            return cfg.learning_rate
        frac = min(iteration / cfg.iterations, 1.0)
        return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * frac))

    def evaluate(self, n_batches: int = 10) -> dict:
        """Mean loss terms and contrastive margin over ``n_batches`` fresh batches, without updates."""
        self.model.eval()
        rows = []
        with torch.no_grad():
            for _ in range(n_batches):
                x0, audio = self.sampler.sample(self.rng)
                comps = self.compute_losses(x0, audio)
                rows.append({k: float(v) for k, v in comps.items()})
        return {k: float(np.mean([r[k] for r in rows if k in r])) for k in rows[0]} if rows else {}

    def run(self, iterations: int | None = None, out_dir=None, checkpoint_every: int | None = None) -> list[dict]:
        target = self.cfg.iterations if iterations is None else iterations
        every = checkpoint_every or self.cfg.checkpoint_every
        while self.iteration < target:
            row = self.step()
            if self.iteration % 100 == 0:
                log.info("iter %d  simple=%.4f  nce=%.4f  total=%.4f", row["iteration"], row["l_simple"], row["l_nce"], row["total"])
            if out_dir is not None and every and self.iteration % every == 0:
                self.save(Path(out_dir) / "checkpoint.gcdckpt")
        return self.history

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = dict(self.model.named_arrays())
        names = {id(p): n for n, p in self.model.named_parameters()}
        steps = {}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                arrays[f"optimizer/{name}/exp_avg"] = st["exp_avg"]
                arrays[f"optimizer/{name}/exp_avg_sq"] = st["exp_avg_sq"]
                steps[name] = float(st["step"])
        arrays["rng/torch"] = self.gen.get_state()
        return arrays, steps

    def save(self, path) -> Path:
        arrays, steps = self.state_arrays()
        meta = {
            "model_config": self.model.cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "trainer_state": {
                "iteration": self.iteration,
                "adam_steps": steps,
                "numpy_rng": self.rng.bit_generator.state,
                "history": self.history,
            },
        }
        return save_archive(path, arrays, meta)

    @classmethod
    def resume(cls, path, dataset, cfg: TrainConfig | None = None) -> "Trainer":
        model, arrays, meta = load_model(path, return_state=True)
        cfg = cfg or TrainConfig(**meta["train_config"])
        trainer = cls(cfg, dataset, model=model)
        state = meta["trainer_state"]
        trainer.iteration = state["iteration"]
        trainer.history = list(state["history"])
        trainer.rng.bit_generator.state = state["numpy_rng"]
        trainer.gen.set_state(torch.from_numpy(arrays["rng/torch"].astype(np.uint8)))
        params = dict(model.named_parameters())
        for name, step in state["adam_steps"].items():
            p = params[name]
            trainer.optimizer.state[p] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(arrays[f"optimizer/{name}/exp_avg"]).reshape(p.shape),
                "exp_avg_sq": torch.from_numpy(arrays[f"optimizer/{name}/exp_avg_sq"]).reshape(p.shape),
            }
        return trainer


def load_model(path, return_state: bool = False):
    arrays, meta = load_archive(path)
    model = GCDModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_named_arrays(
        {k: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(("denoiser/", "contrastive/", "normalizer/"))}
    )
    model.eval()
    return (model, arrays, meta) if return_state else model


def save_model(model: GCDModel, path) -> Path:
    return save_archive(path, model.named_arrays(), {"model_config": model.cfg.to_dict(), "trainer_state": {}})


def write_history_csv(history: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(history)
    return path


def train(dataset_manifest, cfg: TrainConfig, out_dir, resume=None) -> tuple[Path, list[dict]]:
    """Train from a manifest; writes ``checkpoint.gcdckpt`` and ``loss_history.csv`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_manifest(dataset_manifest)
    trainer = Trainer.resume(resume, dataset, cfg) if resume else Trainer(cfg, dataset)
    trainer.run(cfg.iterations, out)
    ckpt = trainer.save(out / "checkpoint.gcdckpt")
    write_history_csv(trainer.history, out / "loss_history.csv")
    return ckpt, trainer.history
