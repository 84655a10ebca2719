"""History encoder and optional LiDAR encoder feeding an intention-anchored GMM head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import CLASSES, DT
from .encoder import EncoderConfig, LidarEncoder
from .head import DEFAULT_LOSS_WEIGHTS, HistoryEncoder, TrajectoryHead, TrajectorySet, total_loss
from .lidar import feature_dim, normalize_selection
from .nn import Module


@dataclass
class ModelConfig:
    depth: int = 12
    width_anchors: tuple[int, int, int] = (256, 512, 1024)
    lidar_dim: int = 256
    n_points: int = 512
    features: tuple[str, ...] = ("intensity",)
    frames: int = 11
    use_lidar: bool = True
    history_widths: tuple[int, ...] = (64, 64)
    head_widths: tuple[int, ...] = (128, 128)
    n_modes: int = 6
    n_steps: int = 80
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    seed: int = 0

    def __post_init__(self):
        self.features = normalize_selection(self.features)
        self.width_anchors = tuple(self.width_anchors)
        self.history_widths = tuple(self.history_widths)
        self.head_widths = tuple(self.head_widths)
        self.loss_weights = tuple(self.loss_weights)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-scale variant: depth 2, narrow blocks, 32 points per frame."""
        base = dict(depth=2, width_anchors=(16, 32, 64), n_points=32, history_widths=(64, 64),
                    head_widths=(128, 128))
        base.update(overrides)
        return cls(**base)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.depth, self.width_anchors, self.lidar_dim, self.frames, self.n_points,
                             feature_dim(self.features))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class LidarMotionModel(Module):
    """Fuses the LiDAR feature with the agent-history feature by concatenation.

    Without LiDAR a learned embedding replaces the LiDAR feature. Sub-module
    initializations come from independent seed streams, so the history and head
    parameters are identical with and without the LiDAR encoder.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        hist_ss, head_ss, enc_ss = np.random.SeedSequence(config.seed).spawn(3)
        self.history = self.add_child("history", HistoryEncoder(config.history_widths,
                                                                np.random.default_rng(hist_ss), dtype))
        self.head = self.add_child("head", TrajectoryHead(self.history.out_dim, config.lidar_dim,
                                                          config.head_widths, config.n_modes, config.n_steps,
                                                          DT, np.random.default_rng(head_ss), dtype))
        self.encoder = None
        if config.use_lidar:
            self.encoder = self.add_child("encoder", LidarEncoder(config.encoder_config(),
                                                                  np.random.default_rng(enc_ss), dtype))
        self.intentions = {c: np.zeros((config.n_modes, 2), dtype=np.float32) for c in CLASSES}
        self.dtype = dtype

    def anchors(self, classes) -> np.ndarray:
        return np.stack([self.intentions[c] for c in classes]).astype(self.dtype)

    def forward(self, batch, zero_lidar: bool = False) -> TrajectorySet:
        hist = self.history.forward(batch.hist.astype(self.dtype), batch.hist_valid)
        lidar = None
        if self.encoder is not None:
            if batch.lidar is None:
                raise ValueError("model expects LiDAR tensors but the batch has none")
            lidar = self.encoder.forward(batch.lidar.astype(self.dtype), batch.lidar_mask)
            if zero_lidar:
                lidar = np.zeros_like(lidar)
        self._zeroed = zero_lidar
        return self.head.forward(hist, lidar, self.anchors(batch.classes))

    def backward(self, grad_logits: np.ndarray, grad_traj: np.ndarray) -> None:
        g_hist, g_lidar = self.head.backward(grad_logits, grad_traj)
        self.history.backward(g_hist)
        if self.encoder is not None and not self._zeroed:
            self.encoder.backward(g_lidar)

    def loss(self, batch, pred: TrajectorySet):
        return total_loss(pred, batch.fut_xy.astype(self.dtype), batch.fut_vel.astype(self.dtype),
                          batch.fut_valid, self.anchors(batch.classes), self.config.loss_weights)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = super().state_dict(prefix)
        for c, pts in self.intentions.items():
            state[f"{prefix}intentions/{c}"] = pts
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        missing = [f"{prefix}intentions/{c}" for c in CLASSES if f"{prefix}intentions/{c}" not in state]
        try:
            super().load_state_dict(state, prefix)
        except KeyError as exc:
            if missing:
                raise KeyError(f"{exc.args[0]}, " + ", ".join(missing)) from None
            raise
        if missing:
            raise KeyError("checkpoint is missing parameters: " + ", ".join(missing))
        for c in CLASSES:
            self.intentions[c] = np.asarray(state[f"{prefix}intentions/{c}"], dtype=self.dtype)
