"""AdamW, the warmup/linear-decay schedule, and the training/evaluation loops."""
from __future__ import annotations

import json
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import CLASSES
from .dataset import Dataset, build_dataset, load_scenarios, split_indices
from .head import kmeans_intentions
from .metrics import EvalCase, EvalConfig, MetricsReport, decimate, evaluate_cases
from .model import LidarMotionModel, ModelConfig


@dataclass
class OptimConfig:
    lr_peak: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")


class NonFiniteError(FloatingPointError):
    pass


def lr_schedule(step: int, total_steps: int, config: OptimConfig = OptimConfig()) -> float:
    """Linear warmup from 0 to lr_peak over ceil(warmup_fraction * total) steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(config.warmup_fraction * total_steps)
    if warm > 0 and step <= warm:
        return config.lr_peak * step / warm
    if total_steps == warm:
        return config.lr_peak
    return config.lr_peak * (total_steps - step) / (total_steps - warm)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: dict, t: int, lr: float,
               config: OptimConfig = OptimConfig(), name: str = "param") -> None:
    """In-place AdamW update with decoupled weight decay; ``state`` holds m and v."""
    if t < 1:
        raise ValueError("AdamW step index starts at 1")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for {name}")
    m = state.setdefault("m", np.zeros_like(param))
    v = state.setdefault("v", np.zeros_like(param))
    m *= config.beta1
    m += (1 - config.beta1) * grad
    v *= config.beta2
    v += (1 - config.beta2) * grad * grad
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    param -= lr * config.weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


class AdamW:
    def __init__(self, named_params, config: OptimConfig = OptimConfig()):
        self.params = list(named_params)
        self.config = config
        self.state = {name: {} for name, _, _ in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        if self.config.grad_clip:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for _, _, g in self.params))
            if norm > self.config.grad_clip:
                for _, _, g in self.params:
                    g *= self.config.grad_clip / norm
        for name, p, g in self.params:
            adamw_step(p, g, self.state[name], self.t, lr, self.config, name)


def fit_intentions(ds: Dataset, k: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Per-class k-means over agent-frame gt endpoints (last valid step)."""
    last = ds.fut_valid.shape[1] - 1 - np.argmax(ds.fut_valid[:, ::-1], axis=1)
    ends = ds.fut_xy[np.arange(len(ds)), last]
    classes = np.asarray(ds.classes)
    endpoints = {c: ends[classes == c] for c in CLASSES if (classes == c).sum() >= k}
    out = kmeans_intentions(endpoints, k, seed)
    # classes too rare for k-means fall back to straight-ahead anchors at the pooled endpoint scale
    for c in CLASSES:
        if c not in out:
            reach = float(np.linalg.norm(ends, axis=1).mean()) if len(ends) else 1.0
            out[c] = np.stack([np.linspace(0.0, reach, k), np.zeros(k)], axis=1)
    return out


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    starts = list(range(0, n, batch_size))
    # a trailing singleton batch cannot define batch-norm statistics; fold it into the previous one
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else n
        yield order[s:e]


@dataclass
class TrainResult:
    model: LidarMotionModel
    trace: list[dict] = field(default_factory=list)
    report: MetricsReport | None = None


def train(model_config: ModelConfig, train_data: Dataset, optim_config: OptimConfig = OptimConfig(),
          val_data: Dataset | None = None, eval_every: int = 0, log=None) -> TrainResult:
    """Train from scratch; deterministic given the seeds and a fixed BLAS thread count."""
    model = LidarMotionModel(model_config)
    model.intentions = {c: v.astype(np.float32) for c, v in
                        fit_intentions(train_data, model_config.n_modes, optim_config.seed).items()}
    opt = AdamW(model.named_parameters(), optim_config)
    rng = np.random.default_rng(optim_config.seed)
    steps_per_epoch = len(list(iterate_batches(len(train_data), optim_config.batch_size, None)))
    total = steps_per_epoch * optim_config.epochs
    trace = []
    step = 0
    for epoch in range(1, optim_config.epochs + 1):
        model.train()
        losses = []
        for b, idx in enumerate(iterate_batches(len(train_data), optim_config.batch_size, rng)):
            batch = train_data.subset(idx)
            model.zero_grad()
            pred = model.forward(batch)
            loss, _, g_logits, g_traj, _ = model.loss(batch, pred)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(g_logits, g_traj)
            step += 1
            opt.step(lr_schedule(step, total, optim_config))
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": math.fsum(losses) / len(losses)}
        if val_data is not None and eval_every and (epoch % eval_every == 0 or epoch == optim_config.epochs):
            rep = evaluate(model, val_data)
            row.update({"val_minADE": rep.overall["minADE"], "val_MR": rep.overall["MR"],
                        "val_mAP": rep.overall["mAP"]})
        trace.append(row)
        if log:
            log(row)
    result = TrainResult(model, trace)
    if val_data is not None:
        result.report = evaluate(model, val_data)
    return result


def predict(model: LidarMotionModel, data: Dataset, batch_size: int = 256):
    """Eval-mode predictions: (probs (B, K), traj (B, K, S, 7))."""
    model.eval()
    probs, trajs = [], []
    for idx in iterate_batches(len(data), batch_size, None):
        pred = model.forward(data.subset(idx))
        probs.append(pred.probs)
        trajs.append(pred.traj)
    return np.concatenate(probs), np.concatenate(trajs)


def eval_cases(data: Dataset, probs: np.ndarray, traj: np.ndarray,
               config: EvalConfig = EvalConfig()) -> list[EvalCase]:
    preds = decimate(traj[..., :2].astype(np.float64), config, axis=2)
    gt_xy = decimate(data.fut_xy.astype(np.float64), config, axis=1)
    gt_vel = decimate(data.fut_vel.astype(np.float64), config, axis=1)
    gt_valid = decimate(data.fut_valid, config, axis=1)
    return [EvalCase(probs[i].astype(np.float64), preds[i], gt_xy[i], gt_vel[i], gt_valid[i],
                     float(data.v0[i]), data.buckets[i], data.classes[i]) for i in range(len(data))]


def evaluate(model: LidarMotionModel, data: Dataset, config: EvalConfig = EvalConfig()) -> MetricsReport:
    probs, traj = predict(model, data)
    return evaluate_cases(eval_cases(data, probs, traj, config), config)


def build_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def save_model(model: LidarMotionModel, path, optim_config: OptimConfig | None = None) -> None:
    """Binary checkpoint plus a ``<path>.json`` sidecar with configs and build version."""
    path = Path(path)
    checkpoint.save(path, model.state_dict())
    sidecar = {"model_config": model.config.to_dict(),
               "optim_config": asdict(optim_config) if optim_config else None,
               "version": build_version()}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(path, model_config: ModelConfig | None = None) -> LidarMotionModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    if model_config is None:
        side = Path(str(path) + ".json")
        if not side.is_file():
            raise FileNotFoundError(f"checkpoint {path} has no {side.name} sidecar; pass model_config")
        sidecar = json.loads(side.read_text())
        model_config = ModelConfig.from_dict(sidecar["model_config"])
    model = LidarMotionModel(model_config)
    model.load_state_dict(checkpoint.load(path))
    return model


def dataset_for(model_config: ModelConfig, data_dir, seed: int = 0, split: str | None = None,
                val_fraction: float = 0.2) -> Dataset:
    """Read bundles under ``data_dir`` and build targets; ``split`` selects "train" or "val"."""
    scenarios = load_scenarios(data_dir)
    if split is not None:
        tr, va = split_indices(len(scenarios), val_fraction)
        scenarios = [scenarios[i] for i in (tr if split == "train" else va)]
    return build_dataset(scenarios, model_config.features, model_config.frames, model_config.n_points,
                         seed, with_lidar=model_config.use_lidar)


def evaluate_checkpoint(path, data_dir, split: str | None = None) -> MetricsReport:
    model = load_model(path)
    return evaluate(model, dataset_for(model.config, data_dir, split=split))
