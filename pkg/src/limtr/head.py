"""Agent-history encoding, intention points, GMM trajectory decoding and the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CLASSES, DT, N_PAST, AgentTrack
from .nn import (DimensionError, Linear, MlpBlock, Module, StateError, grouped_maxpool,
                 grouped_maxpool_backward)

HISTORY_DIM = 11
LOG_2PI = float(np.log(2 * np.pi))
STD_FLOOR = 1e-3
RHO_LIMIT = 0.99


def history_features(track: AgentTrack) -> tuple[np.ndarray, np.ndarray]:
    """Per-step agent-centric states, (11, 11) features and (11,) validity.

    Columns: x, y, cos(dh), sin(dh), vx, vy, length, width, height, valid, time (s, <= 0).
    """
    x0, y0, _, h0 = track.current_pose
    c, s = np.cos(h0), np.sin(h0)
    rot = np.array([[c, s], [-s, c]])
    valid = np.asarray(track.past_valid, dtype=bool)
    feats = np.zeros((N_PAST, HISTORY_DIM))
    feats[:, 0:2] = (track.past_xyz[:, :2] - np.array([x0, y0])) @ rot.T
    dh = track.past_heading - h0
    feats[:, 2] = np.cos(dh)
    feats[:, 3] = np.sin(dh)
    feats[:, 4:6] = track.past_vel @ rot.T
    feats[:, 6:9] = track.size
    feats[:, 9] = 1.0
    feats[:, 10] = (np.arange(N_PAST) - (N_PAST - 1)) * DT
    feats[~valid] = 0.0
    return feats, valid


class HistoryEncoder(Module):
    """Shared MLP over past steps followed by a masked max-pool over time."""

    def __init__(self, widths=(64, 64), rng=None, dtype=np.float32):
        super().__init__()
        self.mlp = self.add_child("mlp", MlpBlock(HISTORY_DIM, list(widths), rng, dtype))
        self.out_dim = self.mlp.out_dim

    def forward(self, feats: np.ndarray, valid: np.ndarray) -> np.ndarray:
        valid = np.asarray(valid, dtype=bool)
        if not valid.any(axis=1).all():
            raise ValueError("every track needs at least one valid past step")
        h = self.mlp.forward(feats, valid)
        pooled, self._arg = grouped_maxpool(h, valid)
        self._n = feats.shape[1]
        return pooled

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.mlp.backward(grouped_maxpool_backward(grad, self._arg, self._n))


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its assigned
    centroid. Returns (centroids, labels, inertia_per_iteration).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < k:
        raise ValueError(f"need at least {k} points for k-means, got {pts.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(pts.shape[0])]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(pts.shape[0]) if total == 0 else rng.choice(pts.shape[0], p=d2 / total)
        centroids[j] = pts[idx]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    inertia = []
    labels = np.zeros(pts.shape[0], dtype=int)
    for _ in range(max_iters):
        dist = ((pts[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        inertia.append(float(dist[np.arange(len(pts)), labels].sum()))
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = pts[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                own = ((pts - new[labels]) ** 2).sum(axis=1)
                far = int(own.argmax())
                new[j] = pts[far]
                labels[far] = j
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids, labels, inertia


def kmeans_intentions(endpoints: dict[str, np.ndarray], k: int = 6, seed: int = 0,
                      max_iters: int = 100) -> dict[str, np.ndarray]:
    """Class name -> (k, 2) intention points from k-means over that class's endpoints."""
    out = {}
    for cls in CLASSES:
        if cls not in endpoints:
            continue
        pts = np.asarray(endpoints[cls])
        if len(pts) < k:
            raise ValueError(f"class {cls!r} has {len(pts)} endpoints, fewer than K={k}")
        out[cls] = kmeans(pts, k, seed, max_iters)[0]
    return out


@dataclass
class TrajectorySet:
    """Batched mode predictions.

    ``traj`` has shape (B, K, S, 7) with columns (x, y, std_x, std_y, rho, vx, vy).
    """

    logits: np.ndarray
    traj: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


class TrajectoryHead(Module):
    """Per-intention MLP on concat(history, lidar-or-embedding, intention point).

    Mean positions are ``frac(t) * anchor + pos_scale * raw``; velocities are
    ``anchor / horizon + pos_scale * raw``.
    """

    def __init__(self, hist_dim: int, lidar_dim: int = 256, widths=(128, 128), n_modes: int = 6,
                 n_steps: int = 80, dt: float = DT, rng=None, dtype=np.float32, pos_scale: float = 4.0):
        super().__init__()
        self.pos_scale = pos_scale
        rng = np.random.default_rng() if rng is None else rng
        self.hist_dim, self.lidar_dim = hist_dim, lidar_dim
        self.n_modes, self.n_steps, self.dt = n_modes, n_steps, dt
        self.no_lidar = self.add_param("no_lidar_embedding", np.zeros(lidar_dim, dtype=dtype))
        self.mlp = self.add_child("mlp", MlpBlock(hist_dim + lidar_dim + 2, list(widths), rng, dtype))
        self.out = self.add_child("out", Linear(self.mlp.out_dim, 1 + 7 * n_steps, rng, dtype))
        self._cache = None

    def forward(self, hist: np.ndarray, lidar: np.ndarray | None, anchors: np.ndarray) -> TrajectorySet:
        b, k = hist.shape[0], self.n_modes
        if anchors.shape != (b, k, 2):
            raise DimensionError(f"anchors must have shape ({b}, {k}, 2), got {anchors.shape}")
        absent = lidar is None
        if absent:
            lidar = np.broadcast_to(self.no_lidar, (b, self.lidar_dim))
        fused = np.concatenate([hist, lidar], axis=1)
        rows = np.concatenate([np.broadcast_to(fused[:, None, :], (b, k, fused.shape[1])),
                               anchors.astype(fused.dtype)], axis=2)
        out = self.out.forward(self.mlp.forward(rows))
        logits = out[..., 0]
        raw = out[..., 1:].reshape(b, k, self.n_steps, 7)
        frac = (np.arange(1, self.n_steps + 1) / self.n_steps)[None, None, :, None]
        traj = np.empty_like(raw)
        traj[..., 0:2] = self.pos_scale * raw[..., 0:2] + frac * anchors[:, :, None, :]
        traj[..., 2:4] = np.logaddexp(0, raw[..., 2:4]) + STD_FLOOR
        traj[..., 4] = RHO_LIMIT * np.tanh(raw[..., 4])
        traj[..., 5:7] = self.pos_scale * raw[..., 5:7] + anchors[:, :, None, :] / (self.n_steps * self.dt)
        self._cache = (raw, absent, fused.shape[1])
        return TrajectorySet(logits, traj)

    def backward(self, grad_logits: np.ndarray, grad_traj: np.ndarray):
        """Return (grad_hist, grad_lidar); grad_lidar is None when the embedding was used."""
        if self._cache is None:
            raise StateError("TrajectoryHead.backward called before forward")
        raw, absent, fdim = self._cache
        self._cache = None
        b, k = grad_logits.shape
        g_raw = np.empty_like(raw)
        g_raw[..., 0:2] = self.pos_scale * grad_traj[..., 0:2]
        g_raw[..., 2:4] = grad_traj[..., 2:4] / (1.0 + np.exp(-raw[..., 2:4]))
        g_raw[..., 4] = grad_traj[..., 4] * RHO_LIMIT * (1.0 - np.tanh(raw[..., 4]) ** 2)
        g_raw[..., 5:7] = self.pos_scale * grad_traj[..., 5:7]
        g_out = np.concatenate([grad_logits[..., None], g_raw.reshape(b, k, -1)], axis=2)
        g_rows = self.mlp.backward(self.out.backward(g_out))
        g_fused = g_rows[..., :fdim].sum(axis=1)
        g_hist = g_fused[:, :self.hist_dim]
        g_lidar = g_fused[:, self.hist_dim:]
        if absent:
            self._grads["no_lidar_embedding"] += g_lidar.sum(axis=0)
            return g_hist, None
        return g_hist, g_lidar


def decode_trajectories(history_feat, lidar_feat, intentions: dict[str, np.ndarray], classes,
                        head: TrajectoryHead) -> TrajectorySet:
    """Look up each target's class intentions and run the head."""
    anchors = []
    for cls in classes:
        if cls not in intentions:
            raise ValueError(f"no intention points for class {cls!r}")
        anchors.append(intentions[cls])
    return head.forward(history_feat, lidar_feat, np.stack(anchors))


def _check_valid(gt_valid: np.ndarray) -> np.ndarray:
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if not gt_valid.any(axis=-1).all():
        raise ValueError("ground truth has no valid steps for at least one target")
    return gt_valid


def _positive_rows(pred: TrajectorySet, positive) -> np.ndarray:
    b = pred.traj.shape[0]
    return pred.traj[np.arange(b), np.broadcast_to(np.asarray(positive), (b,))]


def gmm_nll(pred: TrajectorySet, gt_xy, gt_valid, positive, return_grad=False):
    """Mean over valid steps of the bivariate Gaussian NLL of the positive mode, per target."""
    gt_valid = _check_valid(gt_valid)
    b = pred.traj.shape[0]
    pos = np.broadcast_to(np.asarray(positive), (b,))
    sel = _positive_rows(pred, pos)
    mx, my, sx, sy, rho = (sel[..., i] for i in range(5))
    dx = (gt_xy[..., 0] - mx) / sx
    dy = (gt_xy[..., 1] - my) / sy
    one_m = 1.0 - rho ** 2
    z = dx * dx - 2 * rho * dx * dy + dy * dy
    nll = LOG_2PI + np.log(sx) + np.log(sy) + 0.5 * np.log(one_m) + z / (2 * one_m)
    w = gt_valid / gt_valid.sum(axis=-1, keepdims=True)
    values = (nll * w).sum(axis=-1)
    if not return_grad:
        return values
    gdx = (dx - rho * dy) / one_m
    gdy = (dy - rho * dx) / one_m
    g = np.zeros_like(pred.traj)
    rows = np.arange(b)
    g[rows, pos, :, 0] = -gdx / sx * w
    g[rows, pos, :, 1] = -gdy / sy * w
    g[rows, pos, :, 2] = (1.0 / sx - gdx * dx / sx) * w
    g[rows, pos, :, 3] = (1.0 / sy - gdy * dy / sy) * w
    g[rows, pos, :, 4] = (-rho / one_m - dx * dy / one_m + z * rho / one_m ** 2) * w
    return values, g


def velocity_l1(pred: TrajectorySet, gt_vel, gt_valid, positive, return_grad=False):
    """Mean absolute velocity error over valid steps and both components, per target."""
    gt_valid = _check_valid(gt_valid)
    b = pred.traj.shape[0]
    pos = np.broadcast_to(np.asarray(positive), (b,))
    diff = _positive_rows(pred, pos)[..., 5:7] - gt_vel
    w = gt_valid / (2.0 * gt_valid.sum(axis=-1, keepdims=True))
    values = (np.abs(diff) * w[..., None]).sum(axis=(-1, -2))
    if not return_grad:
        return values
    g = np.zeros_like(pred.traj)
    g[np.arange(b), pos, :, 5:7] = np.sign(diff) * w[..., None]
    return values, g


def mode_cross_entropy(pred: TrajectorySet, positive, return_grad=False):
    """-log p_positive per target; gradient is w.r.t. the logits."""
    b = pred.logits.shape[0]
    pos = np.broadcast_to(np.asarray(positive), (b,))
    z = pred.logits - pred.logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    values = -logp[np.arange(b), pos]
    if not return_grad:
        return values
    g = np.exp(logp)
    g[np.arange(b), pos] -= 1.0
    return values, g


def select_positive(gt_xy: np.ndarray, gt_valid: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Index of the intention point nearest (L2) to each target's last valid gt position."""
    gt_valid = _check_valid(gt_valid)
    last = gt_valid.shape[-1] - 1 - np.argmax(gt_valid[..., ::-1], axis=-1)
    end = gt_xy[np.arange(gt_xy.shape[0]), last]
    d2 = ((anchors - end[:, None, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=-1)


DEFAULT_LOSS_WEIGHTS = (1.0, 0.5, 1.0)


def total_loss(pred: TrajectorySet, gt_xy, gt_vel, gt_valid, anchors, weights=DEFAULT_LOSS_WEIGHTS):
    """Weighted NLL + velocity L1 + mode CE, averaged over the batch.

    Returns (loss, positive_modes, grad_logits, grad_traj, parts).
    """
    w_nll, w_vel, w_ce = weights
    if min(weights) <= 0:
        raise ValueError("loss weights must be positive")
    positive = select_positive(gt_xy, gt_valid, anchors)
    b = pred.traj.shape[0]
    nll, g_nll = gmm_nll(pred, gt_xy, gt_valid, positive, return_grad=True)
    vel, g_vel = velocity_l1(pred, gt_vel, gt_valid, positive, return_grad=True)
    ce, g_ce = mode_cross_entropy(pred, positive, return_grad=True)
    loss = float((w_nll * nll + w_vel * vel + w_ce * ce).mean())
    grad_traj = (w_nll * g_nll + w_vel * g_vel) / b
    grad_logits = w_ce * g_ce / b
    parts = {"nll": float(nll.mean()), "vel": float(vel.mean()), "ce": float(ce.mean())}
    return loss, positive, grad_logits, grad_traj, parts
