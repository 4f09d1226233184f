"""
Features weighted fusion of a projected global feature with a local feature.

Per channel ``i`` the two candidates compete through a two-way softmax::

    a_i = exp(g_i) / (exp(g_i) + exp(l_i)),   b_i = 1 - a_i
    fused_i = a_i * g_i + b_i * l_i

where ``g`` is the global feature mapped to the local width by a learned
affine projection. A second projection maps the fused feature back to the
global width for the bypass head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .nn import ParamSet, check_finite


@dataclass
class FusionProjection:
    """Personalized up (G -> C) and down (C -> G) affine maps. Never aggregated."""

    params: ParamSet

    @classmethod
    def init(cls, global_dim: int, local_dim: int, rng: np.random.Generator,
             scale: float = 1e-2) -> "FusionProjection":
        """Identity on the leading min(G, C) square, small uniform noise elsewhere."""
        k = min(global_dim, local_dim)
        up = rng.uniform(-scale, scale, size=(global_dim, local_dim))
        down = rng.uniform(-scale, scale, size=(local_dim, global_dim))
        up[:k, :k] = np.eye(k)
        down[:k, :k] = np.eye(k)
        ps = ParamSet()
        ps.add("up.W", up)
        ps.add("up.b", np.zeros(local_dim))
        ps.add("down.W", down)
        ps.add("down.b", np.zeros(global_dim))
        return cls(ps)

    @classmethod
    def from_weights(cls, up_W, up_b, down_W, down_b) -> "FusionProjection":
        ps = ParamSet()
        ps.add("up.W", up_W)
        ps.add("up.b", up_b)
        ps.add("down.W", down_W)
        ps.add("down.b", down_b)
        proj = cls(ps)
        if ps["down.W"].shape != (proj.local_dim, proj.global_dim) or ps["up.b"].shape != (proj.local_dim,) \
                or ps["down.b"].shape != (proj.global_dim,):
            raise StructuralError("fusion projection shapes are inconsistent")
        return proj

    @property
    def global_dim(self) -> int:
        return self.params["up.W"].shape[0]

    @property
    def local_dim(self) -> int:
        return self.params["up.W"].shape[1]


@dataclass
class FusionWeights:
    a: np.ndarray
    b: np.ndarray


def resample_global(x_g: np.ndarray, proj: FusionProjection) -> np.ndarray:
    if x_g.ndim != 2 or x_g.shape[1] != proj.global_dim:
        raise StructuralError(
            f"global feature has shape {list(x_g.shape)}, projection expects width {proj.global_dim}"
        )
    return x_g @ proj.params["up.W"] + proj.params["up.b"]


def resample_fused(x_lf: np.ndarray, proj: FusionProjection) -> np.ndarray:
    if x_lf.ndim != 2 or x_lf.shape[1] != proj.local_dim:
        raise StructuralError(
            f"fused feature has shape {list(x_lf.shape)}, projection expects width {proj.local_dim}"
        )
    return x_lf @ proj.params["down.W"] + proj.params["down.b"]


def fusion_weights(xg_hat: np.ndarray, x_l: np.ndarray) -> FusionWeights:
    if xg_hat.shape != x_l.shape:
        raise StructuralError(
            f"fusion inputs differ in shape: {list(xg_hat.shape)} vs {list(x_l.shape)}"
        )
    m = np.maximum(xg_hat, x_l)
    eg = np.exp(xg_hat - m)
    el = np.exp(x_l - m)
    s = eg + el
    return FusionWeights(check_finite(eg / s, "fusion weights"), el / s)


def fuse_local(xg_hat: np.ndarray, x_l: np.ndarray, w: FusionWeights) -> np.ndarray:
    if not (xg_hat.shape == x_l.shape == w.a.shape == w.b.shape):
        raise StructuralError("fuse_local inputs and weights must share one shape")
    return w.a * xg_hat + w.b * x_l


def fuse_backward(dout: np.ndarray, xg_hat: np.ndarray, x_l: np.ndarray,
                  w: FusionWeights) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the fused feature w.r.t. both inputs, through the weights too."""
    coupling = (xg_hat - x_l) * w.a * w.b
    return dout * (w.a + coupling), dout * (w.b - coupling)

