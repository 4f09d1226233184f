"""Analytic-vs-central-difference checks for every differentiable path in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import Dataset
from .fusion import FusionProjection, fuse_backward, fuse_local, fusion_weights, resample_fused, resample_global
from .nn import (MLP, GradCheckReport, LayerSpec, ParamSet, cross_entropy_with_grad, dense_backward,
                 finite_difference_check)
from .protocol import (STAGE_GLOBAL, STAGE_LOCAL, AblationFlags, GlobalBypass, make_client, stage_loss,
                       stream)

H = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    @property
    def worst(self) -> float:
        return max(self.report.max_rel_error.values(), default=0.0)


def _mlp_case(specs: list[LayerSpec], rng: np.random.Generator, batch: int = 5):
    net = MLP.build(specs, rng)
    x = rng.standard_normal((batch, specs[0].in_dim))
    out_dim = specs[-1].out_dim
    if specs[-1].kind == "softmax-output":
        # a random linear functional of the probabilities
        r = rng.standard_normal((batch, out_dim))

        def loss(record=False):
            return float(np.sum(r * net.forward(x, record)))

        def dloss():
            return r
    else:
        y = rng.integers(0, out_dim, size=batch)

        def loss(record=False):
            return cross_entropy_with_grad(net.forward(x, record), y)[0]

        def dloss():
            return cross_entropy_with_grad(net.forward(x, False), y)[1]

    return net, loss, dloss


def check_layer(kind: str, seed: int, tolerance: float = 1e-4) -> GradCheckReport:
    """One small stack exercising ``kind``; every dense parameter is checked."""
    rng = np.random.default_rng(seed)
    if kind == "dense":
        specs = [LayerSpec("dense", 4, 3)]
    elif kind == "relu":
        specs = [LayerSpec("dense", 4, 6), LayerSpec("relu", 6, 6), LayerSpec("dense", 6, 3)]
    elif kind == "softmax-output":
        specs = [LayerSpec("dense", 4, 3), LayerSpec("softmax-output", 3, 3)]
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    net, loss, dloss = _mlp_case(specs, rng)
    d = dloss()
    loss(record=True)
    grads: dict[str, np.ndarray] = {}
    net.backward(d, grads)
    return finite_difference_check(loss, net.params, grads, tolerance, H)


def check_fusion_path(seed: int, tolerance: float = 1e-4, global_dim: int = 3, local_dim: int = 5,
                      batch: int = 4) -> GradCheckReport:
    """resample -> weights -> fuse -> resample, differentiated w.r.t. both inputs and all projection params."""
    rng = np.random.default_rng(seed)
    proj = FusionProjection.init(global_dim, local_dim, rng, scale=0.5)
    for name, value in proj.params.items():
        value += rng.normal(scale=0.3, size=value.shape)
    inputs = ParamSet({"x_g": rng.standard_normal((batch, global_dim)),
                       "x_l": rng.standard_normal((batch, local_dim))})
    r = rng.standard_normal((batch, global_dim))
    both = ParamSet.join({"proj": proj.params, "in": inputs})

    def forward():
        xg_hat = resample_global(inputs["x_g"], proj)
        w = fusion_weights(xg_hat, inputs["x_l"])
        x_lf = fuse_local(xg_hat, inputs["x_l"], w)
        return xg_hat, w, x_lf, resample_fused(x_lf, proj)

    def loss():
        return float(np.sum(r * forward()[3]))

    xg_hat, w, x_lf, _ = forward()
    p = proj.params
    d_xlf, dWd, dbd = dense_backward(r, x_lf, p["down.W"])
    d_xghat, d_xl = fuse_backward(d_xlf, xg_hat, inputs["x_l"], w)
    d_xg, dWu, dbu = dense_backward(d_xghat, inputs["x_g"], p["up.W"])
    grads = {"proj/up.W": dWu, "proj/up.b": dbu, "proj/down.W": dWd, "proj/down.b": dbd,
             "in/x_g": d_xg, "in/x_l": d_xl}
    return finite_difference_check(loss, both, grads, tolerance, H)


def small_client(seed: int, flags: AblationFlags | None = None, batch: int = 6):
    """A tiny client with random parameters and one labelled batch."""
    cfg = ExperimentConfig(clients=[[5, 4]], bypass=[3], n_classes=3, n_features=6, seed=seed)
    rng = stream(seed, 99)
    x = rng.standard_normal((batch, 6))
    y = rng.integers(0, 3, size=batch)
    ds = Dataset(x, y)
    bypass = GlobalBypass.build(6, [3], 3, stream(seed, 98))
    client = make_client(0, [5, 4], bypass, ds, ds, cfg)
    # move every parameter to a generic point: zero biases put relu inputs exactly on the kink
    parts = [client.local_body, client.local_head, client.bypass.body, client.bypass.head]
    for ps in [m.params for m in parts] + [client.fusion.params]:
        for _, value in ps.items():
            value += rng.normal(scale=0.3, size=value.shape)
    if flags is not None:
        client.flags = flags
    return client, x, y


def check_stage_loss(stage: int, seed: int, tolerance: float = 1e-4,
                     flags: AblationFlags | None = None) -> GradCheckReport:
    """Weighted two-head loss of one stage vs finite differences over that stage's trainable set."""
    client, x, y = small_client(seed, flags)
    view = client.stage_params(stage)
    _, grads = stage_loss(client, x, y, stage)
    trainable = {k: grads.get(k, np.zeros_like(view[k])) for k in view if view.is_trainable(k)}
    return finite_difference_check(lambda: stage_loss(client, x, y, stage, with_grad=False)[0],
                                   view, trainable, tolerance, H)


def run_suite(seeds: int = 20, tolerance: float = 1e-4) -> list[CheckResult]:
    results = []
    for seed in range(seeds):
        for kind in ("dense", "relu", "softmax-output"):
            results.append(CheckResult(f"layer:{kind}", seed, check_layer(kind, seed, tolerance)))
        results.append(CheckResult("fusion-path", seed, check_fusion_path(seed, tolerance)))
        results.append(CheckResult("local-stage-loss", seed, check_stage_loss(STAGE_LOCAL, seed, tolerance)))
        results.append(CheckResult("global-stage-loss", seed, check_stage_loss(STAGE_GLOBAL, seed, tolerance)))
    return results
