"""Dense layers with explicit forward/backward passes.

Every module caches what its backward pass needs during ``forward``. Arrays are
plain numpy arrays; leading axes are treated as batch axes (shared-MLP
semantics) and flattened to rows internally.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


class Module:
    """Minimal container: named parameters, gradients, buffers and a mode flag."""

    def __init__(self):
        self.training = True
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self._params.items():
            yield prefix + name, value, self._grads[name]
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}/")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {name: p for name, p, _ in self.named_parameters(prefix)}
        state.update(dict(self.named_buffers(prefix)))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        own = self.state_dict(prefix)
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError("checkpoint is missing parameters: " + ", ".join(missing))
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise DimensionError(f"{name}: checkpoint shape {src.shape} != model shape {target.shape}")
            target[...] = src


class Linear(Module):
    """y = x @ W.T + b over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        if in_dim <= 0 or out_dim <= 0:
            raise DimensionError(f"Linear dims must be positive, got {in_dim}x{out_dim}")
        rng = np.random.default_rng() if rng is None else rng
        bound = np.sqrt(1.0 / in_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(out_dim, dtype=dtype))
        self._saved: np.ndarray | None = None

    @property
    def grad_weight(self) -> np.ndarray:
        return self._grads["weight"]

    @property
    def grad_bias(self) -> np.ndarray:
        return self._grads["bias"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"input shape {x.shape} does not match weight shape {self.weight.shape}")
        self._saved = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._saved is None:
            raise StateError("Linear.backward called without a saved forward input")
        grad_in, gw, gb = linear_backward(grad_out, self._saved, self)
        self._grads["weight"] += gw
        self._grads["bias"] += gb
        return grad_in


def linear_forward(x: np.ndarray, layer: Linear) -> np.ndarray:
    return layer.forward(x)


def linear_backward(grad_out: np.ndarray, saved_input: np.ndarray | None, layer: Linear):
    """Return (grad_in, grad_weight, grad_bias) without touching the layer's buffers."""
    if saved_input is None:
        raise StateError("linear_backward needs the saved forward input")
    expected = saved_input.shape[:-1] + (layer.out_dim,)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    g2 = grad_out.reshape(-1, layer.out_dim)
    x2 = saved_input.reshape(-1, layer.in_dim)
    return grad_out @ layer.weight, g2.T @ x2, g2.sum(axis=0)


class BatchNorm(Module):
    """Batch normalization over rows of a (rows, dim) array.

    Uses population variance. An optional row mask excludes padded rows from
    the batch statistics; those rows are still normalized with the same
    statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self.gamma = self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self._buffers["running_mean"] = self.running_mean
        self._buffers["running_var"] = self.running_var
        self._cache = None

    def forward(self, x: np.ndarray, row_mask: np.ndarray | None = None) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"BatchNorm({self.dim}) got input of shape {x.shape}")
        if row_mask is not None and row_mask.all():
            row_mask = None
        if self.training:
            n = x.shape[0] if row_mask is None else int(row_mask.sum())
            if n < 2:
                raise DegenerateBatchError(f"BatchNorm needs >= 2 unmasked rows in train mode, got {n}")
            if row_mask is None:
                mean = x.mean(axis=0)
                xc = x - mean
                var = np.einsum("ij,ij->j", xc, xc) / n
            else:
                w = row_mask.astype(x.dtype)
                mean = (w @ x) / n
                xc = x - mean
                var = (w @ (xc * xc)) / n
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            n = 0
            xc = x - self.running_mean
            var = self.running_var
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc
        xhat *= inv
        self._cache = (xhat, inv, row_mask, n, self.training)
        return xhat * self.gamma + self.beta

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("BatchNorm.backward called before forward")
        xhat, inv, row_mask, n, trained = self._cache
        sum_g = grad_out.sum(axis=0)
        sum_gx = np.einsum("ij,ij->j", grad_out, xhat)
        self._grads["gamma"] += sum_gx
        self._grads["beta"] += sum_g
        scale = self.gamma * inv
        if not trained:
            return grad_out * scale
        # every row is normalized with the batch stats, but only unmasked rows define them
        stat_term = xhat * (sum_gx / n)
        stat_term += sum_g / n
        if row_mask is not None:
            stat_term *= row_mask[:, None]
        grad_in = grad_out - stat_term
        grad_in *= scale
        return grad_in


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return grad_out * (saved_input > 0)


def masked_maxpool(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature max over unmasked rows of ``x`` (n, dim).

    Returns the pooled vector and the winning row per feature; ties go to the
    lowest row index.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyPoolError("masked_maxpool over a set with no valid rows")
    pooled, arg = grouped_maxpool(x[None], mask[None])
    return pooled[0], arg[0]


def grouped_maxpool(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked max over axis 1 of ``x`` (groups, n, dim).

    Groups without any valid row yield zeros and argmax -1.
    """
    filled = np.where(mask[..., None], x, -np.inf)
    arg = filled.argmax(axis=1)
    pooled = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    empty = ~mask.any(axis=1)
    if empty.any():
        pooled = pooled.copy()
        pooled[empty] = 0.0
        arg[empty] = -1
    return pooled, arg


def grouped_maxpool_backward(grad_out: np.ndarray, arg: np.ndarray, n: int) -> np.ndarray:
    """Route (groups, dim) gradients to the recorded argmax rows of a (groups, n, dim) input."""
    groups, dim = grad_out.shape
    grad_in = np.zeros((groups, n, dim), dtype=grad_out.dtype)
    live = arg >= 0
    g_idx, d_idx = np.nonzero(live)
    grad_in[g_idx, arg[g_idx, d_idx], d_idx] = grad_out[g_idx, d_idx]
    return grad_in


def masked_maxpool_backward(grad_out: np.ndarray, arg: np.ndarray, n: int) -> np.ndarray:
    return grouped_maxpool_backward(grad_out[None], arg[None], n)[0]


class MlpBlock(Module):
    """Stack of (Linear -> BatchNorm -> ReLU) layers shared over all leading axes."""

    def __init__(self, in_dim: int, width_schedule: list[int], rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        if not width_schedule:
            raise DimensionError("MlpBlock needs at least one layer")
        rng = np.random.default_rng() if rng is None else rng
        self.in_dim = in_dim
        self.width_schedule = list(width_schedule)
        self.linears: list[Linear] = []
        self.norms: list[BatchNorm] = []
        prev = in_dim
        for i, width in enumerate(self.width_schedule):
            self.linears.append(self.add_child(f"linear{i}", Linear(prev, width, rng, dtype)))
            self.norms.append(self.add_child(f"bn{i}", BatchNorm(width, dtype=dtype)))
            prev = width
        self.out_dim = prev
        self._pre: list[np.ndarray] = []
        self._lead: tuple[int, ...] | None = None

    @property
    def depth(self) -> int:
        return len(self.width_schedule)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"MlpBlock expects last dim {self.in_dim}, got shape {x.shape}")
        self._lead = x.shape[:-1]
        h = x.reshape(-1, self.in_dim)
        row_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
        self._pre = []
        for lin, bn in zip(self.linears, self.norms):
            z = bn.forward(lin.forward(h), row_mask)
            self._pre.append(z)
            h = relu(z)
        return h.reshape(self._lead + (self.out_dim,))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._lead is None:
            raise StateError("MlpBlock.backward called before forward")
        g = grad_out.reshape(-1, self.out_dim)
        for lin, bn, z in zip(reversed(self.linears), reversed(self.norms), reversed(self._pre)):
            g = lin.backward(bn.backward(relu_backward(g, z)))
        return g.reshape(self._lead + (self.in_dim,))


def ladder_widths(depth: int, anchors=(256, 512, 1024)) -> list[int]:
    """Split ``anchors`` into contiguous, near-equal runs over ``depth`` layers.

    ladder_widths(12) -> 4x256, 4x512, 4x1024; ladder_widths(2) -> [256, 1024].
    """
    if depth < 1:
        raise DimensionError("depth must be >= 1")
    k = len(anchors)
    # layer i takes the anchor whose run contains it; runs are as even as possible
    # and the last anchor is always reached
    if depth < k:
        picks = np.round(np.linspace(0, k - 1, depth)).astype(int)
        return [anchors[i] for i in picks]
    base, extra = divmod(depth, k)
    runs = [base + (1 if i < extra else 0) for i in range(k)]
    return [a for a, r in zip(anchors, runs) for _ in range(r)]


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[], float], arrays: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], step: float = 1e-6,
               tolerance: float = 1e-5, zero_floor: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` recomputes the scalar loss from the current contents of
    ``arrays``, which are perturbed in place and restored. The error for each
    array is ||analytic - numeric|| / (||analytic|| + ||numeric||), with an
    exact match counting as zero. Arrays whose analytic and numeric gradients
    both have norm below ``zero_floor`` times the largest analytic norm in the
    check (parameters the loss does not depend on, such as a bias ahead of
    batch norm) also count as zero.
    """
    report = GradCheckReport(0.0, tolerance=tolerance)
    scale = max((float(np.linalg.norm(np.asarray(g, dtype=np.float64))) for g in analytic.values()), default=0.0)
    floor = zero_floor * max(scale, 1.0)
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 arrays; {name} is {arr.dtype}")
        ana = np.asarray(analytic[name], dtype=np.float64)
        if not np.all(np.isfinite(ana)):
            report.failure = f"non-finite analytic gradient in {name}"
            return report
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                report.failure = f"non-finite loss while perturbing {name}[{i}]"
                return report
            nflat[i] = (up - down) / (2 * step)
        denom = np.linalg.norm(ana) + np.linalg.norm(num)
        err = 0.0 if denom < floor else float(np.linalg.norm(ana - num) / denom)
        report.errors[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
