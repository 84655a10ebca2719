"""Two-stage LiDAR encoder: point compression, then time compression, to one 256-d feature."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (DimensionError, Linear, MlpBlock, Module, StateError, grouped_maxpool,
                 grouped_maxpool_backward)


@dataclass
class EncoderConfig:
    depth_per_block: int = 12
    width_anchors: tuple[int, int, int] = (256, 512, 1024)
    out_dim: int = 256
    n_frames: int = 11
    n_points: int = 512
    in_dim: int = 7

    def block_widths(self) -> tuple[list[int], list[int], list[int]]:
        """Each block runs at its own anchor width: A (per point), B (after concat), C (time)."""
        a, b, c = self.width_anchors
        d = self.depth_per_block
        return [a] * d, [b] * d, [c] * d


class LidarEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        self.config = config
        wa, wb, wc = config.block_widths()
        self.block_a = self.add_child("point_a", MlpBlock(config.in_dim, wa, rng, dtype))
        self.block_b = self.add_child("point_b", MlpBlock(2 * wa[-1], wb, rng, dtype))
        self.block_c = self.add_child("time", MlpBlock(config.n_frames * wb[-1], wc, rng, dtype))
        self.proj = self.add_child("proj", Linear(wc[-1], config.out_dim, rng, dtype))
        self._cache = None

    def _check(self, data: np.ndarray, mask: np.ndarray) -> None:
        c = self.config
        if data.ndim != 4 or data.shape[1:] != (c.n_frames, data.shape[2], c.in_dim):
            raise DimensionError(f"encoder expects (B, {c.n_frames}, N, {c.in_dim}), got {data.shape}")
        if mask.shape != data.shape[:3]:
            raise DimensionError(f"mask shape {mask.shape} does not match data {data.shape[:3]}")

    def point_compress(self, data: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """(B, T, N, D) points -> (B, T, C) per-frame features; empty frames give zeros."""
        self._check(data, mask)
        b, t, n, _ = data.shape
        groups = b * t
        gmask = mask.reshape(groups, n)
        n_valid = int(gmask.sum())
        wa, wb = self.block_a.out_dim, self.block_b.out_dim
        if n_valid == 0:
            self._pc_cache = ("empty", data.shape)
            return np.zeros((b, t, wb), dtype=data.dtype)
        # a single valid row cannot define batch statistics; fall back to running stats
        degrade = self.training and n_valid < 2
        if degrade:
            self.block_a.eval(), self.block_b.eval()
        try:
            h = self.block_a.forward(data.reshape(groups, n, -1), gmask)
            g1, arg1 = grouped_maxpool(h, gmask)
            cat = np.concatenate([h, np.broadcast_to(g1[:, None, :], (groups, n, wa))], axis=-1)
            h2 = self.block_b.forward(cat, gmask)
            g2, arg2 = grouped_maxpool(h2, gmask)
        finally:
            if degrade:
                self.block_a.train(), self.block_b.train()
        self._pc_cache = ("ok", data.shape, arg1, arg2)
        return g2.reshape(b, t, wb)

    def point_compress_backward(self, grad: np.ndarray) -> np.ndarray:
        cache = self._pc_cache
        if cache[0] == "empty":
            return np.zeros(cache[1], dtype=grad.dtype)
        _, shape, arg1, arg2 = cache
        b, t, n, d = shape
        wa = self.block_a.out_dim
        g_h2 = grouped_maxpool_backward(grad.reshape(b * t, -1), arg2, n)
        g_cat = self.block_b.backward(g_h2)
        g_h = g_cat[..., :wa] + grouped_maxpool_backward(g_cat[..., wa:].sum(axis=1), arg1, n)
        return self.block_a.backward(g_h).reshape(shape)

    def time_compress(self, x: np.ndarray) -> np.ndarray:
        """(B, T, C) -> (B, out_dim) via flatten, MLP block and a plain linear projection."""
        if x.shape[1] != self.config.n_frames:
            raise DimensionError(f"time_compress expects {self.config.n_frames} frames, got {x.shape}")
        self._tc_shape = x.shape
        return self.proj.forward(self.block_c.forward(x.reshape(x.shape[0], -1)))

    def time_compress_backward(self, grad: np.ndarray) -> np.ndarray:
        return self.block_c.backward(self.proj.backward(grad)).reshape(self._tc_shape)

    def forward(self, data: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Batched encoder: (B, T, N, D) with (B, T, N) mask -> (B, out_dim)."""
        out = self.time_compress(self.point_compress(data, mask))
        self._cache = True
        return out

    def backward(self, grad_feature: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input points."""
        if self._cache is None:
            raise StateError("encoder backward called without a preceding forward")
        self._cache = None
        return self.point_compress_backward(self.time_compress_backward(grad_feature))


def encoder_forward(tensor, encoder: LidarEncoder) -> np.ndarray:
    """Single-target convenience wrapper around :meth:`LidarEncoder.forward`."""
    return encoder.forward(tensor.data[None], tensor.mask[None])[0]


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form trainable parameter count (weights, biases, BN scale/shift)."""
    wa, wb, wc = config.block_widths()

    def block(in_dim, widths):
        total, prev = 0, in_dim
        for w in widths:
            total += prev * w + w + 2 * w
            prev = w
        return total

    return (block(config.in_dim, wa) + block(2 * wa[-1], wb)
            + block(config.n_frames * wb[-1], wc) + wc[-1] * config.out_dim + config.out_dim)
