"""
Round loop for heterogeneous clients sharing a small global bypass model.

Each client owns a personalized local model (body + head), a private fusion
projection, and a working copy of the shared bypass (body + head). A round is

a. local stage: bypass frozen, local model and projection trained on
   ``lambda_l_loc * CE(local head) + lambda_g_loc * CE(bypass head)``;
b. global stage: local model frozen, bypass and projection trained on
   ``lambda_g_glob * CE(bypass head) + lambda_l_glob * CE(local head)``;
c. the server averages the bypass copies and broadcasts the result.

Both heads read the fused feature. Only the local head is used at inference.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import Dataset
from .errors import ConfigError, StructuralError, UsageError
from .fusion import (FusionProjection, FusionWeights, fuse_backward, fuse_local,
                     fusion_weights, resample_fused, resample_global)
from .metrics import accuracy, confusion_matrix, macro_f1
from .nn import (MLP, OptimizerState, ParamSet, cross_entropy_with_grad, dense_backward,
                 mlp_specs, optimizer_step)

# spawn-key tags for independent random streams
INIT_LOCAL, INIT_BYPASS, INIT_FUSION, SHUFFLE, SPLIT = 1, 2, 3, 4, 5
STAGE_LOCAL, STAGE_GLOBAL, STAGE_FINETUNE = 0, 1, 2


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one purpose; identical keys give identical draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=keys)))


@dataclass
class LossWeights:
    lambda_l_loc: float = 0.9
    lambda_g_loc: float = 0.1
    lambda_g_glob: float = 0.9
    lambda_l_glob: float = 0.1

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "LossWeights":
        return cls(cfg.lambda_l_loc, cfg.lambda_g_loc, cfg.lambda_g_glob, cfg.lambda_l_glob)


@dataclass
class AblationFlags:
    no_global_head: bool = False
    no_global_body: bool = False
    no_fusion: bool = False

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "AblationFlags":
        return cls(cfg.no_global_head, cfg.no_global_body, cfg.no_fusion)


@dataclass
class GlobalBypass:
    body: MLP
    head: MLP

    @classmethod
    def build(cls, in_dim: int, widths: Sequence[int], n_classes: int,
              rng: np.random.Generator) -> "GlobalBypass":
        body = MLP.build(mlp_specs([in_dim, *widths], final_relu=True), rng)
        head = MLP.build(mlp_specs([widths[-1], n_classes], final_relu=False), rng)
        return cls(body, head)

    @property
    def feature_dim(self) -> int:
        return self.body.out_dim

    def param_sets(self) -> dict[str, ParamSet]:
        return {"body": self.body.params, "head": self.head.params}

    def copy(self) -> "GlobalBypass":
        return GlobalBypass(MLP(self.body.specs, self.body.params.copy()),
                            MLP(self.head.specs, self.head.params.copy()))

    def assign(self, other: "GlobalBypass") -> None:
        self.body.params.assign(other.body.params)
        self.head.params.assign(other.head.params)

    def equal(self, other: "GlobalBypass") -> bool:
        return self.body.params.equal(other.body.params) and self.head.params.equal(other.head.params)


@dataclass
class ClientState:
    id: int
    local_body: MLP
    local_head: MLP
    fusion: FusionProjection
    bypass: GlobalBypass
    opt_local: OptimizerState
    opt_global: OptimizerState
    train: Dataset
    test: Dataset
    n_classes: int
    seed: int = 0
    flags: AblationFlags = field(default_factory=AblationFlags)
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def sample_count(self) -> int:
        return len(self.train) + len(self.test)

    def local_params(self) -> dict[str, ParamSet]:
        return {"local_body": self.local_body.params, "local_head": self.local_head.params}

    def stage_params(self, stage: int) -> ParamSet:
        """Trainable view for a stage, after applying that stage's freeze pattern."""
        local = [self.local_body.params, self.local_head.params]
        bypass = [self.bypass.body.params, self.bypass.head.params]
        for ps in bypass if stage == STAGE_LOCAL else local:
            ps.freeze()
        for ps in (local if stage == STAGE_LOCAL else bypass) + [self.fusion.params]:
            ps.unfreeze()
        if stage == STAGE_LOCAL:
            parts = {**self.local_params(), "fusion": self.fusion.params}
        else:
            parts = {"bypass_body": self.bypass.body.params, "bypass_head": self.bypass.head.params,
                     "fusion": self.fusion.params}
        return ParamSet.join(parts)


def make_client(client_id: int, widths: Sequence[int], bypass: GlobalBypass, train: Dataset,
                test: Dataset, cfg: ExperimentConfig) -> ClientState:
    """Fresh client with seeded local/fusion init and a private copy of ``bypass``."""
    if not widths:
        raise StructuralError(f"client {client_id}: empty architecture")
    d, n_classes = train.n_features, cfg.n_classes
    rng = stream(cfg.seed, INIT_LOCAL, client_id)
    body = MLP.build(mlp_specs([d, *widths], final_relu=True), rng)
    head = MLP.build(mlp_specs([widths[-1], n_classes], final_relu=False), rng)
    fusion = FusionProjection.init(bypass.feature_dim, widths[-1], stream(cfg.seed, INIT_FUSION, client_id))
    return ClientState(
        id=client_id, local_body=body, local_head=head, fusion=fusion, bypass=bypass.copy(),
        opt_local=OptimizerState(cfg.optimizer, cfg.lr_local),
        opt_global=OptimizerState(cfg.optimizer, cfg.lr_global),
        train=train, test=test, n_classes=n_classes, seed=cfg.seed,
        flags=AblationFlags.from_config(cfg), weights=LossWeights.from_config(cfg),
    )


# -- forward / backward -----------------------------------------------------

@dataclass
class Features:
    x_l: np.ndarray
    x_g: np.ndarray | None
    xg_hat: np.ndarray
    weights: FusionWeights | None
    x_lf: np.ndarray
    x_gf: np.ndarray | None


def forward_pass(client: ClientState, x: np.ndarray, with_global_head: bool = True,
                 record: bool = False) -> tuple[np.ndarray, np.ndarray | None, Features]:
    """Return (local logits, bypass logits or None, intermediate features)."""
    if x.ndim != 2 or x.shape[1] != client.local_body.in_dim:
        raise StructuralError(
            f"client {client.id}: input shape {list(x.shape)} does not match input dim {client.local_body.in_dim}"
        )
    flags, proj = client.flags, client.fusion
    if proj.local_dim != client.local_body.out_dim or proj.global_dim != client.bypass.feature_dim:
        raise StructuralError(f"client {client.id}: fusion projection does not bridge local and bypass features")
    x_l = client.local_body.forward(x, record)
    if flags.no_global_body:
        x_g, xg_hat = None, np.zeros_like(x_l)
    else:
        x_g = client.bypass.body.forward(x, record)
        xg_hat = resample_global(x_g, proj)
    if flags.no_fusion:
        w, x_lf = None, x_l
    else:
        w = fusion_weights(xg_hat, x_l)
        x_lf = fuse_local(xg_hat, x_l, w)
    y_l = client.local_head.forward(x_lf, record)
    y_g = x_gf = None
    if with_global_head and not flags.no_global_head:
        x_gf = resample_fused(x_lf, proj)
        y_g = client.bypass.head.forward(x_gf, record)
    return y_l, y_g, Features(x_l, x_g, xg_hat, w, x_lf, x_gf)


def _add(grads: dict, name: str, g: np.ndarray) -> None:
    grads[name] = grads[name] + g if name in grads else g


def backward_pass(client: ClientState, feats: Features, d_yl: np.ndarray,
                  d_yg: np.ndarray | None) -> dict[str, np.ndarray]:
    """Gradients (namespaced ``part/name``) of a recorded ``forward_pass`` for trainable entries."""
    grads: dict[str, np.ndarray] = {}
    proj = client.fusion.params
    d_xlf = client.local_head.backward(d_yl, grads, "local_head/")
    if d_yg is not None:
        d_xgf = client.bypass.head.backward(d_yg, grads, "bypass_head/")
        dx, dW, db = dense_backward(d_xgf, feats.x_lf, proj["down.W"])
        if proj.is_trainable("down.W"):
            _add(grads, "fusion/down.W", dW)
            _add(grads, "fusion/down.b", db)
        d_xlf = d_xlf + dx
    if feats.weights is None:
        d_xl = d_xlf
    else:
        d_xghat, d_xl = fuse_backward(d_xlf, feats.xg_hat, feats.x_l, feats.weights)
        if feats.x_g is not None:
            body = client.bypass.body
            body_trainable = any(body.params.is_trainable(k) for k in body.params)
            dx_g, dW, db = dense_backward(d_xghat, feats.x_g, proj["up.W"], need_dx=body_trainable)
            if proj.is_trainable("up.W"):
                _add(grads, "fusion/up.W", dW)
                _add(grads, "fusion/up.b", db)
            if body_trainable:
                body.backward(dx_g, grads, "bypass_body/", need_input_grad=False)
    client.local_body.backward(d_xl, grads, "local_body/", need_input_grad=False)
    return grads


def stage_loss(client: ClientState, x: np.ndarray, y: np.ndarray, stage: int,
               with_grad: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted two-head loss of one stage and, optionally, its gradients."""
    w = client.weights
    w_local, w_global = ((w.lambda_l_loc, w.lambda_g_loc) if stage == STAGE_LOCAL
                         else (w.lambda_l_glob, w.lambda_g_glob))
    use_global = w_global != 0.0 and not client.flags.no_global_head
    y_l, y_g, feats = forward_pass(client, x, with_global_head=use_global, record=with_grad)
    loss_l, g_l = cross_entropy_with_grad(y_l, y)
    loss, d_yl, d_yg = w_local * loss_l, w_local * g_l, None
    if use_global:
        loss_g, g_g = cross_entropy_with_grad(y_g, y)
        loss += w_global * loss_g
        d_yg = w_global * g_g
    if not with_grad:
        return loss, {}
    return loss, backward_pass(client, feats, d_yl, d_yg)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _run_stage(client: ClientState, stage: int, epochs: int, batch_size: int, round_idx: int,
               step: Callable[[np.ndarray, np.ndarray], float]) -> float:
    if epochs < 1:
        raise ConfigError(f"client {client.id}: epochs must be >= 1")
    n = len(client.train)
    if n == 0:
        raise ConfigError(f"client {client.id}: empty training shard")
    X, Y = client.train.features, client.train.labels
    losses = []
    for epoch in range(epochs):
        rng = stream(client.seed, SHUFFLE, client.id, round_idx, stage, epoch)
        for idx in _minibatches(n, batch_size, rng):
            losses.append(step(X[idx], Y[idx]))
    return float(np.mean(losses))


def local_stage_train(client: ClientState, epochs: int = 4, batch_size: int = 8, round_idx: int = 0) -> float:
    """Stage a: bypass frozen; local model and fusion projection trained. Returns mean batch loss."""
    view = client.stage_params(STAGE_LOCAL)

    def step(x, y):
        loss, grads = stage_loss(client, x, y, STAGE_LOCAL)
        optimizer_step(view, grads, client.opt_local)
        return loss

    return _run_stage(client, STAGE_LOCAL, epochs, batch_size, round_idx, step)


def global_stage_train(client: ClientState, epochs: int = 1, batch_size: int = 8, round_idx: int = 0) -> float:
    """Stage b: local model frozen; bypass and fusion projection trained."""
    view = client.stage_params(STAGE_GLOBAL)

    def step(x, y):
        loss, grads = stage_loss(client, x, y, STAGE_GLOBAL)
        optimizer_step(view, grads, client.opt_global)
        return loss

    return _run_stage(client, STAGE_GLOBAL, epochs, batch_size, round_idx, step)


# -- aggregation ------------------------------------------------------------

def _average(sets: Sequence[ParamSet], weights: Sequence[float], ids: Sequence[int], group: str) -> ParamSet:
    ref = sets[0]
    for ps, cid in zip(sets[1:], ids[1:]):
        if ps.names() != ref.names():
            raise StructuralError(f"{group}: clients {ids[0]} and {cid} hold different parameter names")
        for name in ref:
            if ps[name].shape != ref[name].shape:
                raise StructuralError(
                    f"{group}/{name}: client {ids[0]} has shape {list(ref[name].shape)}, "
                    f"client {cid} has {list(ps[name].shape)}"
                )
    out = ParamSet()
    for name in ref:
        acc = np.zeros_like(ref[name])
        for ps, wk in zip(sets, weights):
            acc += wk * ps[name]
        stacked = [ps[name] for ps in sets]
        # a weighted mean cannot leave the per-client envelope; clip away rounding
        lo, hi = np.minimum.reduce(stacked), np.maximum.reduce(stacked)
        out.add(name, np.clip(acc, lo, hi))
    return out


def aggregate_params(sets: Sequence[ParamSet], sample_counts: Sequence[float],
                     ids: Sequence[int] | None = None, group: str = "params") -> ParamSet:
    """Sample-count weighted mean of aggregation-compatible ParamSets, summed in id order."""
    if not sets or len(sets) != len(sample_counts):
        raise StructuralError("need one sample count per parameter set")
    if any(not n > 0 for n in sample_counts):
        raise ConfigError("sample counts must be positive")
    ids = list(range(len(sets))) if ids is None else list(ids)
    order = sorted(range(len(sets)), key=lambda k: ids[k])
    total = float(sum(sample_counts))
    return _average([sets[k] for k in order], [sample_counts[k] / total for k in order],
                    [ids[k] for k in order], group)


def aggregate_bypass(bypasses: Sequence[GlobalBypass], sample_counts: Sequence[float],
                     ids: Sequence[int] | None = None) -> GlobalBypass:
    """Average bodies and heads as two separate groups."""
    body = aggregate_params([b.body.params for b in bypasses], sample_counts, ids, "body")
    head = aggregate_params([b.head.params for b in bypasses], sample_counts, ids, "head")
    ref = bypasses[0]
    return GlobalBypass(MLP(ref.body.specs, body), MLP(ref.head.specs, head))


# -- evaluation -------------------------------------------------------------

def predict_logits(client: ClientState, x: np.ndarray) -> np.ndarray:
    """Local-head logits on the fused path; the bypass head is never evaluated."""
    return forward_pass(client, x, with_global_head=False)[0]


def inference_forward(client: ClientState, x: np.ndarray) -> np.ndarray:
    return np.argmax(predict_logits(client, x), axis=1)


def local_model_logits(client: ClientState, x: np.ndarray) -> np.ndarray:
    return client.local_head.forward(client.local_body.forward(x, False), False)


def evaluate(client: ClientState, predict: Callable[[ClientState, np.ndarray], np.ndarray] = inference_forward
             ) -> tuple[float, float]:
    """(ACC, MF1) on the client's held-out split."""
    pred = predict(client, client.test.features)
    cm = confusion_matrix(client.test.labels, pred, client.n_classes)
    return accuracy(cm), macro_f1(cm)


@dataclass
class ClientRoundMetrics:
    client_id: int
    stage_a_loss: float
    stage_b_loss: float | None
    acc: float
    mf1: float


@dataclass
class RoundReport:
    round: int
    clients: list[ClientRoundMetrics]
    aggregated: bool = True

    @property
    def mean_acc(self) -> float:
        return float(np.mean([c.acc for c in self.clients]))

    @property
    def mean_mf1(self) -> float:
        return float(np.mean([c.mf1 for c in self.clients]))

    def averages(self) -> dict[str, float]:
        return {"acc": self.mean_acc, "mf1": self.mean_mf1}


def _map_clients(fn, clients: Sequence[ClientState], executor: Executor | None):
    if executor is None:
        return [fn(c) for c in clients]
    return list(executor.map(fn, clients))


def _weights_for(clients: Sequence[ClientState], cfg: ExperimentConfig) -> list[float]:
    if cfg.aggregation == "uniform":
        return [1.0] * len(clients)
    return [float(c.sample_count) for c in clients]


def run_round(server_bypass: GlobalBypass, clients: Sequence[ClientState], cfg: ExperimentConfig,
              round_idx: int = 0, executor: Executor | None = None) -> tuple[GlobalBypass, RoundReport]:
    """One full round: both training stages per client, aggregation, broadcast, evaluation."""
    clients = sorted(clients, key=lambda c: c.id)
    for c in clients:
        if not c.bypass.equal(server_bypass):
            raise UsageError(f"client {c.id} does not hold the current server bypass")

    def train(c: ClientState) -> tuple[float, float]:
        if cfg.reset_optimizer:
            c.opt_local.reset()
            c.opt_global.reset()
        a = local_stage_train(c, cfg.epochs_local, cfg.batch_size, round_idx)
        b = global_stage_train(c, cfg.epochs_global, cfg.batch_size, round_idx)
        return a, b

    losses = _map_clients(train, clients, executor)
    new_server = aggregate_bypass([c.bypass for c in clients], _weights_for(clients, cfg),
                                  [c.id for c in clients])
    server_bypass.assign(new_server)
    for c in clients:
        c.bypass.assign(server_bypass)
    scores = _map_clients(evaluate, clients, executor)
    rows = [ClientRoundMetrics(c.id, a, b, acc, mf1)
            for c, (a, b), (acc, mf1) in zip(clients, losses, scores)]
    return server_bypass, RoundReport(round_idx, rows)


# -- baselines --------------------------------------------------------------

def local_only_train(client: ClientState, epochs: int, batch_size: int, round_idx: int,
                     stage: int = STAGE_LOCAL) -> float:
    """Plain cross-entropy training of the local model alone."""
    for ps in client.local_params().values():
        ps.unfreeze()
    view = ParamSet.join(client.local_params())

    def step(x, y):
        grads: dict[str, np.ndarray] = {}
        x_l = client.local_body.forward(x)
        loss, d = cross_entropy_with_grad(client.local_head.forward(x_l), y)
        d_xl = client.local_head.backward(d, grads, "local_head/")
        client.local_body.backward(d_xl, grads, "local_body/", need_input_grad=False)
        optimizer_step(view, grads, client.opt_local)
        return loss

    return _run_stage(client, stage, epochs, batch_size, round_idx, step)


def local_only_round(clients: Sequence[ClientState], cfg: ExperimentConfig, round_idx: int = 0,
                     executor: Executor | None = None, epochs: int | None = None) -> RoundReport:
    """One round of isolated training with the same epoch budget as the protocol round."""
    clients = sorted(clients, key=lambda c: c.id)
    budget = cfg.epochs_local + cfg.epochs_global if epochs is None else epochs

    def train(c: ClientState) -> tuple[float, float | None]:
        if cfg.reset_optimizer:
            c.opt_local.reset()
        first = min(cfg.epochs_local, budget)
        a = local_only_train(c, first, cfg.batch_size, round_idx, STAGE_LOCAL)
        b = (local_only_train(c, budget - first, cfg.batch_size, round_idx, STAGE_GLOBAL)
             if budget > first else None)
        return a, b

    losses = _map_clients(train, clients, executor)
    scores = _map_clients(lambda c: evaluate(c, lambda cc, x: np.argmax(local_model_logits(cc, x), axis=1)),
                          clients, executor)
    rows = [ClientRoundMetrics(c.id, a, b, acc, mf1)
            for c, (a, b), (acc, mf1) in zip(clients, losses, scores)]
    return RoundReport(round_idx, rows, aggregated=False)


def baseline_local_only(clients: Sequence[ClientState], cfg: ExperimentConfig, rounds: int | None = None,
                        epochs: int | None = None, executor: Executor | None = None) -> list[RoundReport]:
    return [local_only_round(clients, cfg, r, executor, epochs) for r in range(rounds or cfg.rounds)]


def check_homogeneous(clients: Sequence[ClientState]) -> None:
    ref = clients[0]
    for c in clients[1:]:
        if c.local_body.specs != ref.local_body.specs or c.local_head.specs != ref.local_head.specs:
            raise ConfigError(f"FedAvg requires identical architectures; client {c.id} differs from {ref.id}")


def fedavg_round(server: dict[str, ParamSet], clients: Sequence[ClientState], cfg: ExperimentConfig,
                 round_idx: int = 0, executor: Executor | None = None, finetune: bool = False) -> RoundReport:
    """Download, local training, sample-weighted averaging of the full model, optional fine-tune."""
    clients = sorted(clients, key=lambda c: c.id)
    check_homogeneous(clients)
    for c in clients:
        for key, ps in c.local_params().items():
            ps.assign(server[key])
    budget = cfg.epochs_local + cfg.epochs_global

    def train(c: ClientState) -> float:
        if cfg.reset_optimizer:
            c.opt_local.reset()
        return local_only_train(c, budget, cfg.batch_size, round_idx)

    losses = _map_clients(train, clients, executor)
    weights, ids = _weights_for(clients, cfg), [c.id for c in clients]
    for key in ("local_body", "local_head"):
        server[key].assign(aggregate_params([c.local_params()[key] for c in clients], weights, ids, key))
    for c in clients:
        for key, ps in c.local_params().items():
            ps.assign(server[key])
    ft_losses: list[float | None] = [None] * len(clients)
    if finetune and cfg.finetune_epochs > 0:
        ft_losses = _map_clients(
            lambda c: local_only_train(c, cfg.finetune_epochs, cfg.batch_size, round_idx, STAGE_FINETUNE),
            clients, executor)
    scores = _map_clients(lambda c: evaluate(c, lambda cc, x: np.argmax(local_model_logits(cc, x), axis=1)),
                          clients, executor)
    rows = [ClientRoundMetrics(c.id, a, b, acc, mf1)
            for c, a, b, (acc, mf1) in zip(clients, losses, ft_losses, scores)]
    return RoundReport(round_idx, rows)


def init_fedavg_server(clients: Sequence[ClientState]) -> dict[str, ParamSet]:
    """Server model starts from client 0's initialization."""
    check_homogeneous(clients)
    ref = min(clients, key=lambda c: c.id)
    return {k: ps.copy() for k, ps in ref.local_params().items()}


def baseline_fedavg(clients: Sequence[ClientState], cfg: ExperimentConfig, finetune: bool = False,
                    rounds: int | None = None, executor: Executor | None = None) -> list[RoundReport]:
    server = init_fedavg_server(clients)
    n_rounds = rounds or cfg.rounds
    return [fedavg_round(server, clients, cfg, r, executor, finetune=finetune and r == n_rounds - 1)
            for r in range(n_rounds)]


# -- model size -------------------------------------------------------------

def param_count_report(clients: Sequence[ClientState], bypass: GlobalBypass | None = None,
                       flags: AblationFlags | None = None, check: bool = True) -> list[dict]:
    """Trainable-parameter counts per local model, per fusion projection, and for the bypass."""
    clients = sorted(clients, key=lambda c: c.id)
    bypass = bypass or clients[0].bypass
    flags = flags or clients[0].flags
    rows = []
    for c in clients:
        rows.append({"model": f"client_{c.id}_local",
                     "params": c.local_body.params.num_params() + c.local_head.params.num_params()})
    for c in clients:
        rows.append({"model": f"client_{c.id}_fusion", "params": c.fusion.params.num_params()})
    body = 0 if flags.no_global_body else bypass.body.params.num_params()
    head = 0 if flags.no_global_head else bypass.head.params.num_params()
    rows.append({"model": "bypass_body", "params": body})
    rows.append({"model": "bypass_head", "params": head})
    rows.append({"model": "bypass", "params": body + head})
    smallest = min(r["params"] for r in rows[: len(clients)])
    if check and not body + head < smallest:
        raise StructuralError(f"bypass has {body + head} parameters, smallest local model {smallest}")
    rows.append({"model": "bypass_to_smallest_local_ratio", "params": (body + head) / smallest})
    return rows
