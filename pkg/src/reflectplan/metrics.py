"""Episode metrics and signal-correlation analysis.

All functions read an :class:`~reflectplan.loop.EpisodeLog` (or the plain
records it holds) and never re-simulate.

Metric glossary (CSV column in brackets):

* profitability [P_sys]: total cash across nodes at the final step;
* compliance [RCI]: mean final compliance, 0-100;
* bullwhip [BWI]: per-echelon variance of order quantities over the variance
  of market demand, averaged over echelons;
* operability [OR]: share of (node, step) pairs with positive throughput;
* avg_risk [ARL]: mean node risk over nodes and steps, 0-100;
* resilience [Psi]: (P_sys / P_base) * (100 - ARL).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateDemand,
    IncompleteLog,
    InsufficientSamples,
    ZeroBaseline,
    ZeroVariance,
)

SIGNALS = ("s_llm", "r_wm", "J", "r_exec", "s_retro", "loss")
METRIC_COLUMNS = (
    "episode",
    "seed",
    "variant",
    "P_sys",
    "P_base",
    "RCI",
    "BWI",
    "OR",
    "ARL",
    "Psi",
    "mean_reward",
    "return",
    "steps",
    "updates",
    "collapsed",
)
SIGNAL_COLUMNS = ("episode", "t", "template") + SIGNALS
LOSS_COLUMNS = ("episode", "update", "t", "n_records", "loss", "mean_r", "grad_norm", "theta_norm")


def _records(log) -> list[dict]:
    return log.records if hasattr(log, "records") else list(log)


def _steps(log) -> list[dict]:
    return [r for r in _records(log) if r["type"] == "step"]


def _end(log) -> dict:
    ends = [r for r in _records(log) if r["type"] == "end"]
    if not ends:
        raise IncompleteLog("episode log has no end record")
    return ends[-1]


# ---------------------------------------------------------------------------
# individual metrics


def profitability(log) -> float:
    final = _end(log)["final_states"]
    return float(sum(s["cash"] for s in final.values()))


def compliance(log) -> float:
    final = _end(log)["final_states"]
    return float(sum(s["compliance"] for s in final.values()) / len(final))


def bullwhip_index(orders: Mapping[str, Sequence[float]], demand: Sequence[float]) -> float:
    """Mean over echelons of Var(orders) / Var(demand)."""
    var_d = float(np.var(np.asarray(demand, dtype=float)))
    if var_d <= 0:
        raise DegenerateDemand("market demand has zero variance")
    if not orders:
        return 0.0
    ratios = [float(np.var(np.asarray(q, dtype=float))) / var_d for q in orders.values()]
    return float(np.mean(ratios))


def echelon_orders(log) -> tuple[dict[str, list[float]], list[float]]:
    """Per-echelon order series and the market demand series.

    An echelon's orders are the quantities its members requested from their
    suppliers; source nodes order from themselves (production requests).
    """
    header = _records(log)[0]
    roles = header.get("roles") or {}
    steps = _steps(log)
    if not steps:
        raise IncompleteLog("episode log has no step records")
    echelons = sorted(set(roles.values())) if roles else []
    orders: dict[str, list[float]] = {e: [] for e in echelons}
    demand = []
    for rec in steps:
        demand.append(sum(rec["market_demand"].values()))
        totals = {e: 0.0 for e in echelons}
        for eid, q in rec["action"]["q_buy"].items():
            totals[roles[eid.split("->", 1)[1]]] += q
        for node, q in rec["action"]["produce"].items():
            totals[roles[node]] += q
        for e in echelons:
            orders[e].append(totals[e])
    return orders, demand


def bullwhip(log) -> float:
    orders, demand = echelon_orders(log)
    return bullwhip_index(orders, demand)


def operability(log) -> float:
    steps = _steps(log)
    if not steps:
        return 0.0
    active = total = 0
    for rec in steps:
        fb = rec["feedback"]
        for node in fb["buy"]:
            total += 1
            if fb["buy"][node] + fb["ship"][node] > 0:
                active += 1
    return active / total


def avg_risk(log) -> float:
    vals = [s["risk"] for rec in _steps(log) for s in rec["states"].values()]
    return float(np.mean(vals)) if vals else 0.0


def resilience(p_sys: float, p_base: float, r_avg: float) -> float:
    if p_base == 0:
        raise ZeroBaseline("baseline profitability is zero")
    return (p_sys / p_base) * (100.0 - r_avg)


@dataclass
class MetricReport:
    P_sys: float
    RCI: float
    BWI: float | None
    OR: float
    ARL: float
    Psi: float | None
    P_base: float | None
    mean_reward: float
    ret: float
    steps: int
    updates: int
    collapsed: bool

    def row(self, **extra) -> dict:
        d = asdict(self)
        d["return"] = d.pop("ret")
        d.update(extra)
        return d


def metric_report(log, p_base: float | None = None) -> MetricReport:
    recs = _records(log)
    end = _end(recs)
    if p_base is None:
        p_base = recs[0].get("p_base")
    p_sys = profitability(recs)
    arl = avg_risk(recs)
    try:
        bwi = bullwhip(recs)
    except DegenerateDemand:
        bwi = None
    psi = None
    if p_base:
        psi = resilience(p_sys, p_base, arl)
    return MetricReport(
        P_sys=p_sys,
        RCI=compliance(recs),
        BWI=bwi,
        OR=operability(recs),
        ARL=arl,
        Psi=psi,
        P_base=p_base,
        mean_reward=float(end["mean_reward"]),
        ret=float(end["return"]),
        steps=int(end["steps"]),
        updates=sum(1 for r in recs if r["type"] == "update"),
        collapsed=bool(end["collapsed"]),
    )


# ---------------------------------------------------------------------------
# signals and correlations


def signal_rows(log) -> list[dict]:
    """Per-step signals of the executed candidate.

    ``s_retro`` and ``loss`` come from the update record that re-scored the
    step; they are None when the step was never re-scored.
    """
    recs = _records(log)
    retro = {}
    for r in recs:
        if r["type"] == "update":
            for item in r["records"]:
                retro[item["t"]] = (item["s_retro"], item["loss"])
    rows = []
    for rec in _steps(recs):
        chosen = rec["candidates"][rec["selected"]]
        s_retro, loss = retro.get(rec["t"], (None, None))
        rows.append(
            {
                "t": rec["t"],
                "template": chosen["template"],
                "s_llm": chosen["s_llm"],
                "r_wm": chosen["r_wm"],
                "J": chosen["joint"],
                "r_exec": rec["reward"],
                "s_retro": s_retro,
                "loss": loss,
            }
        )
    return rows


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    scale = max(1.0, float(np.abs(x).max(initial=0.0)), float(np.abs(y).max(initial=0.0)))
    if sx <= 1e-12 * scale * math.sqrt(len(x)) or sy <= 1e-12 * scale * math.sqrt(len(y)):
        raise ZeroVariance("a signal is constant")
    return float(min(1.0, max(-1.0, (dx @ dy) / (sx * sy))))


@dataclass
class CorrelationResult:
    names: tuple[str, ...]
    matrix: np.ndarray  # NaN where undefined
    counts: np.ndarray
    undefined: list[tuple[str, str, str]]


def correlation_matrix(rows: Iterable[Mapping] | object, names: Sequence[str] = SIGNALS) -> CorrelationResult:
    """Pairwise Pearson correlations over the rows where both signals exist.

    Accepts an episode log (or its records) or ready-made signal rows. Pairs
    with fewer than 3 joint samples or a constant signal are NaN and listed
    in ``undefined``; the diagonal is 1 by definition.
    """
    if hasattr(rows, "records") or _looks_like_log(rows):
        rows = signal_rows(rows)
    rows = list(rows)
    scored = [r for r in rows if any(r.get(n) is not None for n in names)]
    if len(scored) < 3:
        raise InsufficientSamples(f"need at least 3 scored steps, got {len(scored)}")
    k = len(names)
    mat = np.full((k, k), np.nan)
    counts = np.zeros((k, k), dtype=int)
    undefined = []
    for i in range(k):
        mat[i, i] = 1.0
        counts[i, i] = sum(1 for r in rows if r.get(names[i]) is not None)
        for j in range(i + 1, k):
            pairs = [(r[names[i]], r[names[j]]) for r in rows if r.get(names[i]) is not None and r.get(names[j]) is not None]
            counts[i, j] = counts[j, i] = len(pairs)
            if len(pairs) < 3:
                undefined.append((names[i], names[j], "fewer than 3 joint samples"))
                continue
            try:
                c = pearson([p[0] for p in pairs], [p[1] for p in pairs])
            except ZeroVariance:
                undefined.append((names[i], names[j], "constant signal"))
                continue
            mat[i, j] = mat[j, i] = c
    return CorrelationResult(tuple(names), mat, counts, undefined)


def _looks_like_log(obj) -> bool:
    return isinstance(obj, list) and bool(obj) and isinstance(obj[0], dict) and obj[0].get("type") == "header"


def loss_rows(log) -> list[dict]:
    out = []
    for i, r in enumerate(rec for rec in _records(log) if rec["type"] == "update"):
        rs = [item["r"] for item in r["records"]]
        out.append(
            {
                "update": i,
                "t": r["t"],
                "n_records": len(rs),
                "loss": r["loss"],
                "mean_r": float(np.mean(rs)) if rs else 0.0,
                "grad_norm": r["grad_norm"],
                "theta_norm": r["theta_norm"],
            }
        )
    return out


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(round(v, 10))
    return str(v)


def to_csv(rows: Iterable[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def correlation_csv(result: CorrelationResult) -> str:
    rows = []
    for i, a in enumerate(result.names):
        row = {"signal": a}
        for j, b in enumerate(result.names):
            row[b] = float(result.matrix[i, j])
        rows.append(row)
    return to_csv(rows, ("signal",) + tuple(result.names))


def write_csv(path: str | Path, text: str) -> None:
    Path(path).write_text(text)
