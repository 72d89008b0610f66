"""Run directories: execute a config, sweep a parameter, re-verify the outputs.

A run directory holds::

    config.yaml      the validated config document
    metrics.csv      one row per task round
    trace.csv        every delivered message
    summary.json     headline numbers
    authority.json   public identity registry (BFEL runs)
    chains/          <chain>.chain (binary) and <chain>.json (readable) per chain

Everything in it is a pure function of the config.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import consensus as pov
from .config import PARAM_ALIASES, ExperimentConfig, from_dict, load_config
from .errors import BFELError, ConfigurationError, InputError
from .federation import METRIC_COLUMNS, Federation, MetricsRow, model_digest, prepare_task
from .identity import Authority
from .ledger import (ChainFileError, TrainingPayload, anchors_on, export_chain_json,
                     load_chain, save_chain, verify_anchor, verify_chain_file)
from .messages import LocalUpdate
from .compression import SparseGradient
from .netsim import communication_cost, read_trace_csv, write_trace_csv

log = logging.getLogger(__name__)

COMPARISON_COLUMNS = ("value", "final_accuracy", "compression_ratio", "exposure_ratio",
                      "total_bytes", "simulated_time_ms")


@dataclass
class RunResult:
    out_dir: Path | None
    summary: dict
    metrics: list[MetricsRow]
    federation: Federation = field(repr=False)

    def summary_line(self) -> str:
        s = self.summary
        line = (f"{s['name']} [{s['scenario']}] rounds={s['rounds']} "
                f"final_accuracy={s['final_accuracy']:.4f} total_bytes={s['total_bytes']} "
                f"simulated_time_ms={s['simulated_time_ms']} "
                f"compression_ratio={s['compression_ratio']:.2f}")
        if s.get("halted"):
            line += f" HALTED: {s['halted']}"
        return line


def _fmt(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else repr(x)
    return str(x)


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row.as_tuple()])


def read_metrics_csv(path) -> list[MetricsRow]:
    types = (str, int, str, float, int, int, float, float, int, int, int)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != METRIC_COLUMNS:
            raise InputError(f"unexpected metrics columns {header}")
        return [MetricsRow(*(t(v) for t, v in zip(types, rec))) for rec in r]


def summarize(fed: Federation) -> dict:
    cfg = fed.cfg
    last = {}
    for row in fed.metrics:
        last[row.task] = row
    entries = sum(rt.sent_entries for rt in fed.tasks)
    sent = sum(rt.sent_updates * rt.data.spec.dim for rt in fed.tasks)
    accs = [last[rt.name].global_test_accuracy for rt in fed.tasks if rt.name in last]
    return {
        "name": cfg.name,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "rounds": max((r.round for r in fed.metrics), default=0),
        "final_accuracy": float(np.mean(accs)) if accs else 0.0,
        "final_accuracy_per_task": {t: r.global_test_accuracy for t, r in sorted(last.items())},
        "total_bytes": sum(r.size_bytes for r in fed.sim.trace),
        "simulated_time_ms": fed.sim.now,
        "compression_ratio": sent / entries if entries else math.inf,
        "exposure_ratio": entries / sent if sent else 0.0,
        "model_parameters": fed.tasks[0].data.spec.dim,
        "committed_rounds": sum(r.status == "committed" for r in fed.metrics),
        "failed_rounds": sum(r.status == "failed" for r in fed.metrics),
        "slashed": sorted(m.entity_id for rt in fed.tasks for m in rt.miners if m.slashed),
        "poisoners": sorted(w for rt in fed.tasks for w in rt.poisoners),
        "poisoned_updates_committed": sum(rt.leaked_poison for rt in fed.tasks),
        "trades": len(fed.trades),
        "halted": fed.halt,
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, keep_trajectory: bool = False) -> RunResult:
    """Run ``cfg`` end to end; write the run directory when ``out_dir`` is given."""
    fed = Federation(cfg, keep_trajectory=keep_trajectory)
    fed.run()
    summary = summarize(fed)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "chains").mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(yaml.safe_dump(cfg.source_dict, sort_keys=True))
        write_metrics_csv(fed.metrics, out / "metrics.csv")
        write_trace_csv(fed.sim.trace, out / "trace.csv")
        fed.authority.save(out / "authority.json")
        for chain in fed.chains:
            save_chain(chain, out / "chains" / f"{chain.chain_id}.chain")
            export_chain_json(chain, out / "chains" / f"{chain.chain_id}.json")
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return RunResult(out, summary, fed.metrics, fed)


# -- sweeps ------------------------------------------------------------------------------

def _sweep_one(args):
    doc, key, value, out_dir = args
    cfg = from_dict(doc).with_overrides(**{key: value})
    res = run_experiment(cfg, out_dir)
    s = res.summary
    return (value, s["final_accuracy"], s["compression_ratio"], s["exposure_ratio"],
            s["total_bytes"], s["simulated_time_ms"])


def sweep(base: ExperimentConfig, parameter: str, values, out_dir=None, jobs: int = 1) -> list[tuple]:
    """One run per value with the shared seed; returns (and writes) the comparison table."""
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    key = PARAM_ALIASES.get(parameter, parameter)
    base.with_overrides(**{key: values[0]})  # fails early when the key is not addressable
    out = Path(out_dir) if out_dir is not None else None
    jobs_args = [(base.source_dict, key, v,
                  None if out is None else out / f"{parameter}={v}") for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_one, jobs_args))
    else:
        rows = [_sweep_one(a) for a in jobs_args]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARISON_COLUMNS)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    return rows


# -- verification ----------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(ok), detail))

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.ok else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else "")
                for c in self.checks]


def _entries_from_size(worker_id: str, size: int, dim: int) -> int:
    """Entry count of an uplink message, recovered from its traced size."""
    empty = SparseGradient(np.zeros(0, dtype=np.int64), np.zeros(0), dim, 0)
    overhead = len(LocalUpdate(worker_id, 0, empty, 0, b"\0" * 32).encode())
    n, rem = divmod(size - overhead, 12)
    if rem or n < 0:
        raise InputError(f"uplink of {size} bytes from {worker_id} is not a whole update")
    return n


def _replay_chain(chain, cfg: ExperimentConfig, task_index: int, authority: Authority) -> str | None:
    """Re-derive every block's model digest from its committed updates; first problem or None."""
    model = prepare_task(cfg, task_index).initial_model
    seen_rounds = set()
    for b in chain.blocks[1:]:
        p = b.payload
        if not isinstance(p, TrainingPayload):
            return f"height {b.height}: not a training block"
        if p.round in seen_rounds:
            return f"height {b.height}: round {p.round} committed twice"
        seen_rounds.add(p.round)
        for u in p.updates:
            if not u.verify(authority) or u.round != p.round:
                return f"height {b.height}: bad update from {u.worker_id}"
        model, _ = pov.compute_global_update(p.updates, model, cfg.training.learning_rate)
        if model_digest(model) != p.model_digest:
            return f"height {b.height}: model digest does not match replayed updates"
    return None


def verify_artifacts(run_dir) -> VerifyReport:
    """Re-check a run directory from its raw files."""
    run = Path(run_dir)
    report = VerifyReport()
    needed = ["config.yaml", "metrics.csv", "trace.csv", "summary.json"]
    missing = [n for n in needed if not (run / n).is_file()]
    if missing:
        raise InputError(f"{run}: missing {', '.join(missing)}")
    cfg = load_config(run / "config.yaml")
    metrics = read_metrics_csv(run / "metrics.csv")
    trace = read_trace_csv(run / "trace.csv")
    summary = json.loads((run / "summary.json").read_text())
    bfel = cfg.scenario == "bfel-gcs"

    # chains and anchors
    chains = {}
    if bfel:
        if not (run / "authority.json").is_file():
            raise InputError(f"{run}: missing authority.json")
        authority = Authority.load(run / "authority.json")
        for path in sorted((run / "chains").glob("*.chain")):
            bad = verify_chain_file(path, authority)
            report.add(f"chain {path.stem}", bad is None,
                       "" if bad is None else f"invalid block at height {bad}")
            if bad is None:
                chains[path.stem] = load_chain(path)
        main = chains.get("main")
        report.add("main chain present", main is not None)
        if main is not None:
            for a in anchors_on(main):
                sub = chains.get(a.subchain_id)
                report.add(f"anchor {a.subchain_id}[{a.from_height}..{a.to_height}]",
                           sub is not None and verify_anchor(a, sub))
            for cid, chain in sorted(chains.items()):
                if chain.kind == "main":
                    continue
                covered = max((a.to_height for a in anchors_on(main, cid)), default=0)
                report.add(f"anchors cover {cid}", covered == chain.height,
                           f"anchored to {covered} of {chain.height}")
        for t in range(cfg.federation.tasks):
            cid = f"t{t + 1}"
            if cid in chains:
                problem = _replay_chain(chains[cid], cfg, t, authority)
                report.add(f"replay {cid} model digests", problem is None, problem or "")

    # byte accounting
    trace_bytes = sum(r.size_bytes for r in trace)
    last = {}
    for row in metrics:
        last[row.task] = row
    report.add("trace bytes = summary total_bytes", trace_bytes == summary["total_bytes"],
               f"{trace_bytes} vs {summary['total_bytes']}")
    report.add("trace bytes = metrics cumulative_bytes",
               trace_bytes == sum(r.cumulative_bytes for r in last.values()))
    per_task = {}
    for row in metrics:
        per_task.setdefault(row.task, []).append(row)
    ok = all(sum(r.bytes_this_round for r in rows) == rows[-1].cumulative_bytes
             for rows in per_task.values())
    report.add("per-round bytes sum to cumulative", ok)

    # time
    if cfg.cost_model.jitter_ms == 0:
        cost = communication_cost(trace, cfg.cost_model, consensus=bfel)
        report.add("simulated time recomputed from trace",
                   cost.total_time_ms == summary["simulated_time_ms"],
                   f"{cost.total_time_ms} vs {summary['simulated_time_ms']}")
    report.add("final metrics time = summary time",
               max((r.simulated_time_ms for r in last.values()), default=0)
               == summary["simulated_time_ms"])

    # compression and exposure
    dim = summary["model_parameters"]
    entries = updates = 0
    try:
        for r in trace:
            if r.msg_type == "update":
                entries += _entries_from_size(r.src, r.size_bytes, dim)
                updates += 1
    except InputError as exc:
        report.add("uplink sizes decode", False, str(exc))
    if entries:
        ratio = dim * updates / entries
        report.add("compression ratio recomputed from trace",
                   math.isclose(ratio, summary["compression_ratio"], rel_tol=1e-12),
                   f"{ratio} vs {summary['compression_ratio']}")
    report.add("exposure = 1/ratio (summary)",
               math.isclose(summary["exposure_ratio"] * summary["compression_ratio"], 1.0,
                            rel_tol=1e-12))
    report.add("exposure = 1/ratio (every metrics row)",
               all(math.isclose(r.exposure_ratio * r.compression_ratio, 1.0, rel_tol=1e-12)
                   for r in metrics))
    return report


def export_metrics(run_dir, fmt: str = "csv", task: str | None = None) -> str:
    rows = read_metrics_csv(Path(run_dir) / "metrics.csv")
    if task is not None:
        rows = [r for r in rows if r.task == task]
    if fmt == "json":
        return json.dumps([dict(zip(METRIC_COLUMNS, r.as_tuple())) for r in rows], indent=1)
    lines = [",".join(METRIC_COLUMNS)]
    lines += [",".join(_fmt(v) for v in r.as_tuple()) for r in rows]
    return "\n".join(lines) + "\n"
