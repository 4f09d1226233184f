"""
Minimal dense-network substrate.

Tensors are plain float64 numpy arrays. Parameters live in ``ParamSet``
containers; ``MLP`` stacks dense/relu/softmax-output layers with an explicit
cached forward and a reverse-mode ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DomainError, NumericError, StructuralError, UsageError

LAYER_KINDS = ("dense", "relu", "softmax-output")
OPTIMIZER_KINDS = ("sgd", "adam")


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


class ParamSet:
    """Ordered named tensors with a per-entry trainable flag.

    Entries are updated in place by optimizers and broadcasts, so views built
    with :meth:`join` stay valid across rounds.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, trainable: bool = True):
        self._entries: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        for name, value in (entries or {}).items():
            self.add(name, value, trainable)

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._entries:
            raise StructuralError(f"duplicate parameter name {name!r}")
        self._entries[name] = np.array(value, dtype=np.float64)
        self._trainable[name] = bool(trainable)

    @classmethod
    def join(cls, parts: Mapping[str, "ParamSet"]) -> "ParamSet":
        """Namespaced view sharing storage with ``parts`` (``prefix/name``)."""
        out = cls()
        for prefix, ps in parts.items():
            for name, value in ps.items():
                key = f"{prefix}/{name}"
                out._entries[key] = value
                out._trainable[key] = ps.is_trainable(name)
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, flag: bool) -> None:
        for name in self._trainable:
            self._trainable[name] = bool(flag)

    def freeze(self) -> None:
        self.set_trainable(False)

    def unfreeze(self) -> None:
        self.set_trainable(True)

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(
            v.size for k, v in self._entries.items() if self._trainable[k] or not trainable_only
        )

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._entries.items():
            out.add(name, value.copy(), self._trainable[name])
        return out

    def assign(self, other: "ParamSet") -> None:
        """Copy values from an aggregation-compatible set, in place."""
        if not self.compatible(other):
            raise StructuralError("cannot assign from an incompatible ParamSet")
        for name, value in self._entries.items():
            np.copyto(value, other[name])

    def compatible(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self._entries[k].shape == other[k].shape for k in self._entries
        )

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact comparison of names, shapes and values."""
        return self.compatible(other) and all(
            np.array_equal(self._entries[k], other[k]) for k in self._entries
        )

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{list(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({body})"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise StructuralError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise StructuralError(f"{self.kind} layer must preserve width")


def check_chain(specs: Sequence[LayerSpec]) -> None:
    for k in range(1, len(specs)):
        if specs[k - 1].out_dim != specs[k].in_dim:
            raise StructuralError(
                f"layer {k - 1} outputs {specs[k - 1].out_dim} but layer {k} expects {specs[k].in_dim}"
            )


def mlp_specs(widths: Sequence[int], final_relu: bool) -> list[LayerSpec]:
    """Dense layers through ``widths`` with relu between them (and after the last if asked)."""
    specs: list[LayerSpec] = []
    for i in range(len(widths) - 1):
        specs.append(LayerSpec("dense", widths[i], widths[i + 1]))
        if i < len(widths) - 2 or final_relu:
            specs.append(LayerSpec("relu", widths[i + 1], widths[i + 1]))
    return specs


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator) -> ParamSet:
    ps = ParamSet()
    for i, spec in enumerate(specs):
        if spec.kind == "dense":
            bound = np.sqrt(1.0 / spec.in_dim)
            ps.add(f"{i}.W", rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)))
            ps.add(f"{i}.b", np.zeros(spec.out_dim))
    return ps


# -- primitive operations ---------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise StructuralError(
            f"dense shapes do not chain: x{list(x.shape)} W{list(W.shape)} b{list(b.shape)}"
        )
    return x @ W + b


def dense_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray, need_dx: bool = True):
    dW = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ W.T if need_dx else None
    return dx, dW, db


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    check_finite(z, "softmax input")
    if z.shape[-1] < 1:
        raise StructuralError("softmax needs at least one class")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise StructuralError(f"expected {batch} labels, got shape {list(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise StructuralError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def cross_entropy_with_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    if logits.ndim != 2:
        raise StructuralError(f"logits must be 2-D, got shape {list(logits.shape)}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    if not np.isfinite(loss):
        raise NumericError("cross-entropy loss is not finite")
    return loss, grad


def cross_entropy_loss(logits, labels) -> float:
    return cross_entropy_with_grad(as_tensor(logits, "logits"), labels)[0]


def dice_with_grad(pred, target, eps: float = 1.0) -> tuple[float, np.ndarray]:
    """Smoothed soft Dice loss averaged over the batch, plus d loss / d pred."""
    pred = as_tensor(pred, "pred")
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise StructuralError(f"dice shapes differ: {list(pred.shape)} vs {list(target.shape)}")
    if np.any(pred < 0) or np.any(pred > 1):
        raise DomainError("dice_loss predictions must lie in [0, 1]")
    if not np.all((target == 0) | (target == 1)):
        raise DomainError("dice_loss target must be binary")
    inter = (pred * target).sum(axis=1)
    denom = pred.sum(axis=1) + target.sum(axis=1) + eps
    num = 2.0 * inter + eps
    loss = float(np.mean(1.0 - num / denom))
    # d/dp [1 - num/denom] = -(2 t * denom - num) / denom^2
    grad = -(2.0 * target * denom[:, None] - num[:, None]) / denom[:, None] ** 2
    grad /= pred.shape[0]
    return loss, grad


def dice_loss(pred, target, eps: float = 1.0) -> float:
    return dice_with_grad(pred, target, eps)[0]


# -- layer stacks -----------------------------------------------------------

class MLP:
    """A fixed stack of layers bound to a ParamSet.

    ``forward`` records the activations needed by ``backward``; gradients are
    emitted only for entries whose trainable flag is set.
    """

    def __init__(self, specs: Sequence[LayerSpec], params: ParamSet):
        check_chain(specs)
        self.specs = list(specs)
        self.params = params
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                for name, shape in ((f"{i}.W", (spec.in_dim, spec.out_dim)), (f"{i}.b", (spec.out_dim,))):
                    if name not in params or params[name].shape != shape:
                        raise StructuralError(f"parameter {name} missing or not shaped {list(shape)}")
        self._cache: list | None = None

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], rng: np.random.Generator) -> "MLP":
        return cls(specs, init_params(specs, rng))

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def forward(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise StructuralError(f"input shape {list(x.shape)} does not match in_dim {self.in_dim}")
        cache = []
        h = x
        for i, spec in enumerate(self.specs):
            cache.append(h)
            if spec.kind == "dense":
                h = h @ self.params[f"{i}.W"] + self.params[f"{i}.b"]
            elif spec.kind == "relu":
                h = np.maximum(h, 0.0)
            else:
                h = softmax(h)
        if record:
            cache.append(h)
            self._cache = cache
        return h

    def backward(self, dout: np.ndarray, grads: dict[str, np.ndarray], prefix: str = "",
                 need_input_grad: bool = True) -> np.ndarray | None:
        """Accumulate parameter gradients into ``grads`` and return d loss / d input."""
        if self._cache is None:
            raise UsageError("backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        # first layer that still needs work below it
        stop = 0
        if not need_input_grad:
            trainable = [i for i, s in enumerate(self.specs)
                         if s.kind == "dense" and self.params.is_trainable(f"{i}.W")]
            if not trainable:
                return None
            stop = trainable[0]
        d = dout
        for i in range(len(self.specs) - 1, stop - 1, -1):
            spec = self.specs[i]
            x = cache[i]
            if spec.kind == "dense":
                wname, bname = f"{i}.W", f"{i}.b"
                W = self.params[wname]
                need_dx = i > stop or need_input_grad
                if self.params.is_trainable(wname):
                    _accumulate(grads, prefix + wname, x.T @ d)
                if self.params.is_trainable(bname):
                    _accumulate(grads, prefix + bname, d.sum(axis=0))
                d = d @ W.T if need_dx else None
            elif spec.kind == "relu":
                d = d * (x > 0)
            else:
                y = cache[i + 1]
                d = y * (d - (d * y).sum(axis=-1, keepdims=True))
        return d if need_input_grad else None


def _accumulate(grads: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# -- optimizers -------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise StructuralError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise DomainError("learning rate must be positive")

    def reset(self) -> None:
        self.step_count = 0
        self.m.clear()
        self.v.clear()


def optimizer_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """Apply one update in place. Entries that are frozen or lack a gradient are untouched."""
    for name, g in grads.items():
        if name not in params:
            raise StructuralError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise StructuralError(
                f"gradient for {name} has shape {list(g.shape)}, parameter is {list(params[name].shape)}"
            )
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "adam":
        t = state.step_count
        c1 = 1.0 - state.beta1 ** t
        c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if not params.is_trainable(name):
            continue
        p = params[name]
        if state.kind == "sgd":
            p -= lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    def failures(self) -> list[str]:
        return [k for k, err in self.max_rel_error.items() if not err < self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # entries whose true gradient is below ``floor`` are judged on absolute error / floor
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss_fn: Callable[[], float], param: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every element of ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = loss_fn()
        flat[j] = orig - h
        down = loss_fn()
        flat[j] = orig
        gflat[j] = (up - down) / (2.0 * h)
    return grad


def finite_difference_check(loss_fn: Callable[[], float], params: ParamSet,
                            analytic: Mapping[str, np.ndarray], tolerance: float = 1e-4,
                            h: float = 1e-5) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences for every named entry."""
    errors: dict[str, float] = {}
    for name, g in analytic.items():
        numeric = numeric_gradient(loss_fn, params[name], h)
        errors[name] = float(relative_error(g, numeric).max()) if g.size else 0.0
    return GradCheckReport(errors, tolerance)
