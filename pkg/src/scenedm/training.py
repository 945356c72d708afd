"""Hybrid noise-prediction objective and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as tn
from .augment import augment, augment_noise, half_difference
from .model import BatchFeatures, DenoiserConfig, SceneDM
from .optim import Adam, step_decay_lr
from .scene import Scene, scene_features, to_scene_frame, velocity_states
from .schedule import NoiseSchedule, diffuse, make_schedule
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: float = 0.4  # fraction of total steps
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    noise: str = "consistent"  # consistent | independent
    loss_norm: str = "l2"  # l2 | l1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.noise not in ("consistent", "independent"):
            raise ValueError(f"unknown noise mode {self.noise!r}")
        if self.loss_norm not in ("l2", "l1"):
            raise ValueError(f"unknown loss norm {self.loss_norm!r}")


# --------------------------------------------------------------------------
# losses


def _masked_error(pred, true: np.ndarray, mask: np.ndarray, norm: str) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    true = np.asarray(true, dtype=pred.data.dtype)
    if pred.shape != true.shape:
        raise tn.ShapeError(f"loss: prediction {pred.shape} vs target {true.shape}")
    mask = np.asarray(mask, dtype=bool)
    full = np.broadcast_to(mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim)), pred.shape)
    count = int(full.sum())
    if count == 0:
        raise ValueError("loss: every agent in the batch is masked")
    d = tn.mul(tn.sub(pred, Tensor(true)), Tensor(full.astype(pred.data.dtype)))
    if norm == "l1":
        return tn.scalar_mul(tn.abs_mean(d), d.size / count)
    return tn.scalar_mul(tn.sum_all(tn.mul(d, d)), 1.0 / count)


def loss_mse(eps_true_aug: np.ndarray, eps_pred, mask: np.ndarray, norm: str = "l2") -> Tensor:
    """Mean squared error over the unmasked agents' noise scalars."""
    return _masked_error(eps_pred, eps_true_aug, mask, norm)


def loss_smooth_aug(eps_true_aug: np.ndarray, eps_pred, mask: np.ndarray, norm: str = "l2") -> Tensor:
    """Match predicted rear-minus-front differences to the true ones."""
    pred = eps_pred if isinstance(eps_pred, Tensor) else Tensor(eps_pred)
    return _masked_error(half_difference(pred), half_difference(np.asarray(eps_true_aug)), mask, norm)


def loss_smooth(eps_true_base: np.ndarray, eps_pred, mask: np.ndarray, norm: str = "l2") -> Tensor:
    """Smoothness loss from base noise (..., T, H): the target difference
    for element t is ``eps[t+1] - eps[t]``."""
    eps_true_base = np.asarray(eps_true_base)
    target = eps_true_base[..., 1:, :] - eps_true_base[..., :-1, :]
    pred = eps_pred if isinstance(eps_pred, Tensor) else Tensor(eps_pred)
    return _masked_error(half_difference(pred), target, mask, norm)


def loss_hybrid(l_mse, l_smooth, lam: float):
    if isinstance(l_mse, Tensor) or isinstance(l_smooth, Tensor):
        if lam == 0:
            return l_mse
        return tn.add(l_mse, tn.scalar_mul(l_smooth, lam))
    return l_mse + lam * l_smooth


# --------------------------------------------------------------------------
# dataset


@dataclass
class Normalizer:
    """Per-coordinate z-scoring; ``bound`` is the largest |z| seen in training."""

    mean: np.ndarray
    std: np.ndarray
    bound: np.ndarray | None = None

    def normalize(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        d = {"mean": self.mean.tolist(), "std": self.std.tolist()}
        if self.bound is not None:
            d["bound"] = self.bound.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        bound = np.asarray(d["bound"], dtype=np.float64) if d.get("bound") is not None else None
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64), bound)


@dataclass
class TrainingSet:
    feats: BatchFeatures
    velocities: np.ndarray  # (S, N, T, H) raw velocity states, zeros for padding
    normalizer: Normalizer

    def __len__(self) -> int:
        return self.velocities.shape[0]

    def batch(self, idx: np.ndarray) -> tuple[BatchFeatures, np.ndarray]:
        f = self.feats
        feats = BatchFeatures(f.hist[idx], f.poly[idx], f.poly_mask[idx], f.agent_mask[idx], f.last_pose[idx])
        z = self.normalizer.normalize(self.velocities[idx])
        return feats, np.where(feats.agent_mask[:, :, None, None], z, 0.0)


def build_training_set(scenes: list[Scene], cfg: DenoiserConfig, normalizer: Normalizer | None = None) -> TrainingSet:
    if not scenes:
        raise ValueError("empty dataset")
    feats, vels = [], []
    for sc in scenes:
        sc = to_scene_frame(sc)
        if not sc.has_future:
            raise ValueError(f"scene {sc.scene_id} has no ground-truth future")
        f = scene_features(sc, cfg.n_max, cfg.t_hist, cfg.n_polylines, cfg.poly_points)
        v = np.zeros((cfg.n_max, cfg.T, cfg.H))
        fut = sc.future_poses()
        if fut.shape[1] != cfg.T:
            raise ValueError(f"scene {sc.scene_id}: future length {fut.shape[1]} != T={cfg.T}")
        v[: sc.n_agents] = velocity_states(sc.last_poses(), fut, sc.dt)
        feats.append(f)
        vels.append(v)
    batch = BatchFeatures.stack(feats)
    vels = np.stack(vels)
    if normalizer is None:
        valid = vels[batch.agent_mask]  # (n_valid, T, H)
        flat = valid.reshape(-1, cfg.H)
        mean, std = flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-3)
        normalizer = Normalizer(mean, std, np.abs((flat - mean) / std).max(axis=0))
    return TrainingSet(batch, vels, normalizer)


# --------------------------------------------------------------------------
# one step


def sample_steps(rng: np.random.Generator, K: int, n: int) -> np.ndarray:
    """Diffusion steps drawn uniformly from 1..K, one per batch element."""
    return rng.integers(1, K + 1, size=n)


def make_targets(z: np.ndarray, eps0: np.ndarray, eps_indep: np.ndarray | None, k: np.ndarray,
                 sched: NoiseSchedule, cfg: DenoiserConfig, noise_mode: str):
    """Clean sequence, noisy input and noise target for one batch."""
    if not cfg.augment:
        return z, diffuse(z, k, eps0, sched), eps0
    S0 = augment(z)
    eps_aug = augment_noise(eps0) if noise_mode == "consistent" else eps_indep
    return S0, diffuse(S0, k, eps_aug, sched), eps_aug


def compute_losses(model: SceneDM, feats: BatchFeatures, z: np.ndarray, rng: np.random.Generator,
                   sched: NoiseSchedule, tcfg: TrainConfig):
    cfg = model.cfg
    B = z.shape[0]
    k = sample_steps(rng, cfg.K, B)
    eps0 = rng.standard_normal(z.shape)
    eps_indep = rng.standard_normal(z.shape[:2] + (cfg.T - 1, 2 * cfg.H)) if cfg.augment and tcfg.noise == "independent" else None
    _, S_k, eps_target = make_targets(z, eps0, eps_indep, k, sched, cfg, tcfg.noise)
    pred = model(S_k, k, feats)
    mask = feats.agent_mask
    l_mse = loss_mse(eps_target, pred, mask, tcfg.loss_norm)
    if cfg.augment and tcfg.lam > 0:
        l_smooth = loss_smooth_aug(eps_target, pred, mask, tcfg.loss_norm)
    else:
        l_smooth = None
    total = loss_hybrid(l_mse, l_smooth, tcfg.lam) if l_smooth is not None else l_mse
    return total, l_mse, l_smooth


@dataclass
class TrainResult:
    model: SceneDM
    normalizer: Normalizer
    history: list[dict] = field(default_factory=list)
    checkpoint_hash: str | None = None


def checkpoint_meta(model: SceneDM, sched: NoiseSchedule, normalizer: Normalizer, tcfg: TrainConfig, sched_kind: str,
                    beta_range, step: int) -> dict:
    return {
        "denoiser": model.cfg.to_dict(),
        "schedule": {"kind": sched_kind, "K": sched.K, "beta_range": list(beta_range) if beta_range else None},
        "normalizer": normalizer.to_dict(),
        "train": asdict(tcfg),
        "step": step,
    }


def train(scenes_or_set, cfg: DenoiserConfig, tcfg: TrainConfig, sched: NoiseSchedule | None = None,
          out_dir: str | Path | None = None, sched_kind: str = "linear", beta_range=None,
          model: SceneDM | None = None) -> TrainResult:
    """Optimise encoder and denoiser jointly on the hybrid loss.

    Everything random (init, batches, steps, noise) flows from ``tcfg.seed``.
    """
    data = scenes_or_set if isinstance(scenes_or_set, TrainingSet) else build_training_set(scenes_or_set, cfg)
    if sched is None:
        sched = make_schedule(sched_kind, cfg.K, beta_range)
    if sched.K != cfg.K:
        raise ValueError(f"schedule K={sched.K} != model K={cfg.K}")
    rng = np.random.default_rng(tcfg.seed)
    if model is None:
        model = SceneDM(cfg, seed=int(rng.integers(2**31)))
    opt = Adam(model.parameters(), lr=tcfg.lr)
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = len(data)
    for step in range(tcfg.steps):
        lr = step_decay_lr(tcfg.lr, step, tcfg.steps, tcfg.lr_decay_factor, tcfg.lr_decay_every)
        opt.lr = lr
        idx = rng.choice(n, size=min(tcfg.batch_size, n), replace=False)
        feats, z = data.batch(idx)
        total, l_mse, l_smooth = compute_losses(model, feats, z, rng, sched, tcfg)
        if not math.isfinite(total.item()):
            raise NonFiniteError(f"training diverged at step {step}: loss={total.item()}")
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append({
            "step": step,
            "L_mse": l_mse.item(),
            "L_smooth": l_smooth.item() if l_smooth is not None else 0.0,
            "L_hybrid": total.item(),
            "lr": lr,
        })
        if step % 50 == 0:
            log.info("step %d  L_mse=%.4f  L_hybrid=%.4f  lr=%.2e", step, history[-1]["L_mse"], history[-1]["L_hybrid"], lr)
        if out_dir is not None and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            save_model(out_dir / f"checkpoint_{step + 1:06d}.ckpt", model, sched, data.normalizer, tcfg, sched_kind, beta_range, step + 1)

    result = TrainResult(model, data.normalizer, history)
    if out_dir is not None:
        result.checkpoint_hash = save_model(out_dir / "model.ckpt", model, sched, data.normalizer, tcfg, sched_kind, beta_range, tcfg.steps)
        write_loss_csv(out_dir / "loss.csv", history)
    return result


def save_model(path, model: SceneDM, sched: NoiseSchedule, normalizer: Normalizer, tcfg: TrainConfig,
               sched_kind: str = "linear", beta_range=None, step: int = 0) -> str:
    meta = checkpoint_meta(model, sched, normalizer, tcfg, sched_kind, beta_range, step)
    return ckpt.save(path, model.state_dict(), meta)


def load_model(path) -> tuple[SceneDM, NoiseSchedule, Normalizer, dict]:
    params, meta = ckpt.load(path)
    cfg = DenoiserConfig(**meta["denoiser"])
    model = SceneDM(cfg, seed=0)
    model.load_state_dict(params)
    s = meta["schedule"]
    sched = make_schedule(s["kind"], s["K"], tuple(s["beta_range"]) if s.get("beta_range") else None)
    return model, sched, Normalizer.from_dict(meta["normalizer"]), meta


LOSS_FIELDS = ("step", "L_mse", "L_smooth", "L_hybrid", "lr")


def write_loss_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOSS_FIELDS})


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
