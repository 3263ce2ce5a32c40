"""Metrics over run logs, experiment suites, and report emission.

Metric definitions operate purely on the logged per-round records plus the
oracle poison flags captured in them:

* PRR counts only rounds where at least one poisoned candidate was present;
  a hit is a round whose removed candidate was poisoned.
* BBR counts rounds where a benign survivor newer than the chosen best model
  existed (denominator: all scored rounds).
* BA/MA come from the final forwarded best model; per-round series are kept.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import ConfigError


@dataclass
class MetricReport:
    ba: float
    ma: float
    prr: float | None
    bbr: float
    rounds: int
    aborts: list = field(default_factory=list)
    per_round: list = field(default_factory=list)
    proof_bytes: list = field(default_factory=list)
    proof_ms: list = field(default_factory=list)

    def as_dict(self):
        return {
            "ba": self.ba, "ma": self.ma, "prr": self.prr, "bbr": self.bbr,
            "rounds": self.rounds, "aborts": self.aborts,
            "proof_bytes_total": int(sum(self.proof_bytes)),
            "proof_ms_mean": float(np.mean(self.proof_ms)) if self.proof_ms else 0.0,
        }


def compute_metrics(runlog):
    rounds = [r for r in runlog if r["event"] == "round"]
    evals = [r for r in runlog if r["event"] == "eval"]
    final = next(r for r in runlog if r["event"] == "final")
    eligible = hits = 0
    bbr_bad = 0
    for rec in rounds:
        if any(rec["candidate_flags"]):
            eligible += 1
            if rec["removed_was_poisoned"]:
                hits += 1
        benign_rounds = [rr for rr, flag in zip(rec["queue_rounds"], rec["queue_flags"])
                         if not flag]
        if benign_rounds and rec["bm_round"] < max(benign_rounds):
            bbr_bad += 1
    prr = (hits / eligible) if eligible else None
    bbr = (bbr_bad / len(rounds)) if rounds else 0.0
    return MetricReport(
        ba=final["ba"], ma=final["ma"], prr=prr, bbr=bbr, rounds=len(rounds),
        aborts=[{"round": r["round"], "culprit": r["culprit"], "reason": r["reason"]}
                for r in runlog if r["event"] == "abort"],
        per_round=[{"round": e["round"], "ba": e["ba"], "ma": e["ma"]} for e in evals],
        proof_bytes=[p["bytes"] for p in runlog if p["event"] == "proof"],
        proof_ms=[p["ms"] for p in runlog if p["event"] == "proof"],
    )


def benign_queue_violations(runlog):
    """Rounds after which the forwarded queue held no benign checkpoint."""
    return [r["round"] for r in runlog if r["event"] == "round"
            and not any(not f for f in r["queue_flags"])]


# -- suites -------------------------------------------------------------------

SUITES = ("default", "beta-ablation", "k-ablation", "metric-ablation",
          "pmr-sweep", "pdr-sweep", "scaling")


def _run_cell(args):
    from . import protocol  # imported in the worker
    name, cfg = args
    t0 = time.time()
    log = protocol.run_experiment(cfg)
    report = compute_metrics(log)
    out = report.as_dict()
    out.update({"cell": name, "seed": cfg.seed, "wall_s": time.time() - t0})
    return name, cfg.seed, out, log


def _worker_count():
    cap = os.environ.get("ZKSPLIT_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        workers = max(1, min(workers, int(cap)))
    return workers


def _suite_cells(name, base):
    if name == "default":
        return [("zksl", base), ("none", base.with_overrides(defense="none")),
                ("gold", base.with_overrides(defense="gold"))]
    if name == "beta-ablation":
        return [(f"beta-{num}/{den}", base.with_overrides(beta_num=num, beta_den=den))
                for num, den in ((5, 10), (7, 10), (10, 10))]
    if name == "k-ablation":
        # Queue length matters once score separation is imperfect; the stress
        # cell weakens the attacker and data homogeneity so single-slot queues
        # can cascade a mistake while k=3 recovers.
        stress = base.with_overrides(mal_lr=base.lr, mal_epochs=base.epochs,
                                     pdr=0.5, iid=0.4)
        return [(f"k-{k}", stress.with_overrides(k=k)) for k in (1, 2, 3, 5)]
    if name == "metric-ablation":
        return [(f"metric-{m}",
                 base.with_overrides(defense="metric-ablation", metric=m))
                for m in ("taxicab", "taxicab-float", "l2", "cosine")]
    if name == "pmr-sweep":
        return [(f"pmr-{p:.1f}", base.with_overrides(pmr=p)) for p in (0.0, 0.1, 0.2, 0.4)]
    if name == "pdr-sweep":
        return [(f"pdr-{p:.2f}", base.with_overrides(pdr=p)) for p in (0.25, 0.5, 0.75, 1.0)]
    raise ConfigError(f"unknown suite {name!r}")


def run_suite(name, out_dir, seeds=(1, 2, 3), base=None):
    """Run a seeded grid; emits JSONL cell reports plus an md-table summary."""
    if name not in SUITES:
        raise ConfigError(f"suite must be one of {SUITES}")
    os.makedirs(out_dir, exist_ok=True)
    if name == "scaling":
        return run_scaling_suite(out_dir, seeds)
    base = base or RunConfig()
    jobs = []
    for cell, cfg in _suite_cells(name, base):
        for seed in seeds:
            jobs.append((cell, cfg.with_overrides(seed=seed)))
    results = []
    workers = min(_worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_cell, jobs):
                results.append(res)
    else:
        results = [_run_cell(j) for j in jobs]
    cells = {}
    rows = []
    for cell, seed, summary, log in results:
        cells.setdefault(cell, []).append(summary)
        rows.append(summary)
        emit_jsonl(log, os.path.join(out_dir, f"runlog-{name}-{cell}-s{seed}.jsonl"))
    table = aggregate_cells(cells)
    emit_jsonl(rows, os.path.join(out_dir, f"{name}-cells.jsonl"))
    emit_jsonl(table, os.path.join(out_dir, f"{name}-summary.jsonl"))
    emit_md_table(table, os.path.join(out_dir, f"{name}-summary.md"))
    emit_csv(table, os.path.join(out_dir, f"{name}-summary.csv"))
    return table


def aggregate_cells(cells):
    """Arithmetic mean over seeds per cell; per-seed values retained."""
    table = []
    for cell, entries in sorted(cells.items()):
        row = {"cell": cell, "seeds": [e["seed"] for e in entries]}
        for key in ("ba", "ma", "prr", "bbr"):
            vals = [e[key] for e in entries if e[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
            row[key + "_per_seed"] = [e[key] for e in entries]
            row[key + "_std"] = float(np.std(vals)) if vals else None
        row["proof_bytes_total"] = int(np.sum([e["proof_bytes_total"] for e in entries]))
        table.append(row)
    return table


def run_scaling_suite(out_dir, seeds=(1,), sizes=(10**3, 10**4, 10**5)):
    """Proof cost over synthetic parameter vectors (no training)."""
    from . import scaling
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for size in sizes:
        for seed in seeds:
            rows.append(scaling.measure_proof_cost(size, seed))
    fit = scaling.affine_fit([r["params"] for r in rows], [r["bytes"] for r in rows])
    table = rows + [{"cell": "affine-fit", **fit}]
    emit_jsonl(table, os.path.join(out_dir, "scaling-summary.jsonl"))
    emit_md_table(table, os.path.join(out_dir, "scaling-summary.md"))
    emit_csv(table, os.path.join(out_dir, "scaling-summary.csv"))
    return table


# -- emission -----------------------------------------------------------------


def emit_jsonl(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def emit_csv(table, path):
    if not table:
        open(path, "w").close()
        return path
    cols = sorted({k for row in table for k in row})
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(_csv_cell(row.get(c)) for c in cols) + "\n")
    return path


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return '"' + ";".join(str(x) for x in v) + '"'
    return str(v)


def emit_md_table(table, path):
    if not table:
        open(path, "w").close()
        return path
    cols = [c for c in ("cell", "ba", "ma", "prr", "bbr", "params", "bytes", "seconds",
                        "slope", "intercept", "r2") if any(c in row for row in table)]
    with open(path, "w") as fh:
        fh.write("| " + " | ".join(cols) + " |\n")
        fh.write("|" + "---|" * len(cols) + "\n")
        for row in table:
            cells = []
            for c in cols:
                v = row.get(c)
                cells.append("" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)))
            fh.write("| " + " | ".join(cells) + " |\n")
    return path
