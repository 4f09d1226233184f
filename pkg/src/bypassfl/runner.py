"""Seeded experiment orchestration: data, clients, rounds, artifacts, checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, gen_blobs, partition_dirichlet, partition_iid, resolution_shift, train_test_split
from .errors import BypassFLError, UsageError
from .nn import OptimizerState, ParamSet
from .protocol import (INIT_BYPASS, SPLIT, ClientRoundMetrics, ClientState, GlobalBypass, RoundReport,
                       fedavg_round, init_fedavg_server, local_only_round, make_client,
                       param_count_report, run_round, stream)

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "client_id", "stage_a_loss", "stage_b_loss", "acc", "mf1"]


def client_datasets(cfg: ExperimentConfig) -> list[tuple[Dataset, Dataset]]:
    """(train, test) per client for the configured heterogeneity regime."""
    ds = gen_blobs(cfg.n_samples, cfg.n_features, cfg.n_classes, cfg.separation, cfg.seed)
    if cfg.regime == "label-skew":
        plan = partition_dirichlet(ds, cfg.n_clients, cfg.alpha, cfg.seed)
        shards = [ds.subset(plan[k]) for k in range(cfg.n_clients)]
    else:
        plan = partition_iid(ds, cfg.n_clients, cfg.seed)
        shards = [resolution_shift(ds.subset(plan[k]), f) for k, f in enumerate(cfg.factors)]
    out = []
    for k, shard in enumerate(shards):
        tr, te = train_test_split(len(shard), cfg.test_fraction, stream(cfg.seed, SPLIT, k))
        out.append((shard.subset(tr), shard.subset(te)))
    return out


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("BPFL_THREADS", "1")))
    except ValueError:
        return 1


class Experiment:
    """All mutable state of one run; advances one round at a time."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.bypass = GlobalBypass.build(cfg.n_features, cfg.bypass, cfg.n_classes,
                                         stream(cfg.seed, INIT_BYPASS))
        self.clients: list[ClientState] = [
            make_client(k, cfg.clients[k], self.bypass, train, test, cfg)
            for k, (train, test) in enumerate(client_datasets(cfg))
        ]
        self.fedavg_server = init_fedavg_server(self.clients) if cfg.method.startswith("fedavg") else None
        self.history: list[RoundReport] = []

    @property
    def rounds_done(self) -> int:
        return len(self.history)

    def step(self, executor=None) -> RoundReport:
        cfg, r = self.cfg, self.rounds_done
        if r >= cfg.rounds:
            raise UsageError("all configured rounds are already complete")
        if cfg.method == "mh-pflgb":
            _, report = run_round(self.bypass, self.clients, cfg, r, executor)
        elif cfg.method == "local-only":
            report = local_only_round(self.clients, cfg, r, executor)
        else:
            finetune = cfg.method == "fedavg-ft" and r == cfg.rounds - 1
            report = fedavg_round(self.fedavg_server, self.clients, cfg, r, executor, finetune)
        self.history.append(report)
        return report

    def param_counts(self) -> list[dict]:
        return param_count_report(self.clients, self.bypass, check=self.cfg.method == "mh-pflgb")

    # -- checkpoint state --------------------------------------------------

    def state(self) -> Checkpoint:
        sets: dict[str, ParamSet] = {}
        sets["meta"] = ParamSet({"rounds_done": np.array([float(self.rounds_done)])})
        sets["server/bypass_body"] = self.bypass.body.params
        sets["server/bypass_head"] = self.bypass.head.params
        if self.fedavg_server is not None:
            for key, ps in self.fedavg_server.items():
                sets[f"server/{key}"] = ps
        for c in self.clients:
            p = f"client{c.id}"
            sets[f"{p}/local_body"] = c.local_body.params
            sets[f"{p}/local_head"] = c.local_head.params
            sets[f"{p}/fusion"] = c.fusion.params
            sets[f"{p}/bypass_body"] = c.bypass.body.params
            sets[f"{p}/bypass_head"] = c.bypass.head.params
            for tag, opt in (("opt_local", c.opt_local), ("opt_global", c.opt_global)):
                sets[f"{p}/{tag}/step"] = ParamSet({"step": np.array([float(opt.step_count)])})
                sets[f"{p}/{tag}/m"] = ParamSet(opt.m)
                sets[f"{p}/{tag}/v"] = ParamSet(opt.v)
        sets["history"] = ParamSet({"rows": history_rows(self.history)})
        return Checkpoint(self.cfg.digest(), {k: v.copy() for k, v in sets.items()})

    def load_state(self, ckpt: Checkpoint) -> None:
        sets = ckpt.sets
        self.bypass.body.params.assign(sets["server/bypass_body"])
        self.bypass.head.params.assign(sets["server/bypass_head"])
        if self.fedavg_server is not None:
            for key, ps in self.fedavg_server.items():
                ps.assign(sets[f"server/{key}"])
        for c in self.clients:
            p = f"client{c.id}"
            c.local_body.params.assign(sets[f"{p}/local_body"])
            c.local_head.params.assign(sets[f"{p}/local_head"])
            c.fusion.params.assign(sets[f"{p}/fusion"])
            c.bypass.body.params.assign(sets[f"{p}/bypass_body"])
            c.bypass.head.params.assign(sets[f"{p}/bypass_head"])
            for tag in ("opt_local", "opt_global"):
                opt: OptimizerState = getattr(c, tag)
                opt.step_count = int(sets[f"{p}/{tag}/step"]["step"][0])
                opt.m = {k: v.copy() for k, v in sets[f"{p}/{tag}/m"].items()}
                opt.v = {k: v.copy() for k, v in sets[f"{p}/{tag}/v"].items()}
        self.history = rows_to_history(sets["history"]["rows"])
        if self.rounds_done != int(sets["meta"]["rounds_done"][0]):
            raise UsageError("checkpoint history does not match its round counter")


def history_rows(history: list[RoundReport]) -> np.ndarray:
    """Reports as an (n, 7) array; NaN marks a missing stage-b loss."""
    rows = []
    for rep in history:
        for c in rep.clients:
            b = np.nan if c.stage_b_loss is None else c.stage_b_loss
            rows.append([rep.round, c.client_id, c.stage_a_loss, b, c.acc, c.mf1, float(rep.aggregated)])
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def rows_to_history(rows: np.ndarray) -> list[RoundReport]:
    history: dict[int, RoundReport] = {}
    for r, cid, a, b, acc, mf1, agg in rows:
        rep = history.setdefault(int(r), RoundReport(int(r), [], bool(agg)))
        rep.clients.append(ClientRoundMetrics(int(cid), float(a), None if np.isnan(b) else float(b),
                                              float(acc), float(mf1)))
    return [history[k] for k in sorted(history)]


# -- artifacts --------------------------------------------------------------

def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(history: list[RoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rep in history:
        for c in rep.clients:
            writer.writerow([rep.round, c.client_id, _fmt(c.stage_a_loss), _fmt(c.stage_b_loss),
                             _fmt(c.acc), _fmt(c.mf1)])
    return buf.getvalue()


def summarize(rows: list[dict], extra: dict | None = None) -> dict:
    """Final-round table: one column per client plus the unweighted Average."""
    last = max(int(r["round"]) for r in rows)
    final = sorted((r for r in rows if int(r["round"]) == last), key=lambda r: int(r["client_id"]))
    out = dict(extra or {})
    out["final_round"] = last
    for metric, key in (("ACC", "acc"), ("MF1", "mf1")):
        table = {f"client_{int(r['client_id'])}": float(r[key]) for r in final}
        table["Average"] = float(np.mean([float(r[key]) for r in final]))
        out[metric] = table
    return out


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise BypassFLError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return list(reader)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
                   checkpoint_every: int = 0, stop_after: int | None = None) -> int:
    """Run (or resume) an experiment and write its artifacts. Returns a process exit code."""
    out = Path(out_dir or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", out, exc)
        return 2
    try:
        exp = Experiment(cfg)
        counts = exp.param_counts()
    except BypassFLError as exc:
        log.error("cannot set up experiment: %s", exc)
        return 2
    events: list[str] = []
    if resume is not None:
        try:
            exp.load_state(load_checkpoint(resume, cfg.digest()))
        except (OSError, BypassFLError) as exc:
            log.error("cannot resume from %s: %s", resume, exc)
            return 2
        events.append(f"resumed at round {exp.rounds_done}")
    last = cfg.rounds if stop_after is None else min(cfg.rounds, stop_after)
    threads = thread_count()
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        while exp.rounds_done < last:
            r = exp.rounds_done
            try:
                report = exp.step(executor)
            except BypassFLError as exc:
                log.error("round %d failed: %s", r, exc)
                return 3
            events.append(f"round {r}: trained {len(report.clients)} clients")
            if report.aggregated:
                events.append(f"round {r}: aggregation over {len(report.clients)} clients")
            events.append(f"round {r}: mean acc {report.mean_acc!r} mean mf1 {report.mean_mf1!r}")
            if checkpoint_every and exp.rounds_done % checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_r{exp.rounds_done:04d}.bpfl", exp.state())
    finally:
        if executor is not None:
            executor.shutdown()
    try:
        (out / "metrics.csv").write_text(metrics_csv(exp.history))
        with open(out / "run.log", "a" if resume is not None else "w") as fh:
            fh.writelines(line + "\n" for line in events)
        rows = read_metrics_csv(out / "metrics.csv")
        extra = {"method": cfg.method, "regime": cfg.regime, "seed": cfg.seed, "config_hash": cfg.digest()}
        if cfg.regime == "resolution":
            extra["factors"] = {f"client_{k}": f for k, f in enumerate(cfg.factors)}
        if rows:
            (out / "summary.json").write_text(json.dumps(summarize(rows, extra), indent=2) + "\n")
        (out / "param_count.json").write_text(json.dumps(counts, indent=2) + "\n")
        save_checkpoint(out / "checkpoint.bpfl", exp.state())
    except OSError as exc:
        log.error("cannot write artifacts to %s: %s", out, exc)
        return 2
    return 0
