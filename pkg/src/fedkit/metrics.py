"""Per-round records, experiment reports, and the tables built from them.

Times are stored in seconds internally; hours appear only in rendered
output. The global mean of a score table is the unweighted mean of the
per-site means, with the std taken across sites.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import IoError, ReportError
from .params import EvalScore, ParameterVector


@dataclass(frozen=True)
class ClientRoundStat:
    """One client's share of one round."""

    train_seconds: float
    waiting_seconds: float
    submitted: bool

    def __post_init__(self):
        if self.train_seconds < 0 or self.waiting_seconds < 0:
            raise ReportError("per-client times must be non-negative")


@dataclass(frozen=True)
class RoundRecord:
    """Timing (and optionally score) observations for one aggregated round."""

    round: int
    per_client: Mapping[str, ClientRoundStat]
    aggregation_seconds: float
    global_eval: Optional[Mapping[str, EvalScore]] = None

    def __post_init__(self):
        if self.aggregation_seconds < 0:
            raise ReportError("aggregation_seconds must be non-negative")
        object.__setattr__(self, "per_client", dict(self.per_client))

    @property
    def train_span_seconds(self) -> float:
        """Wall span of the training phase: the slowest submitted client."""
        times = [s.train_seconds for s in self.per_client.values() if s.submitted]
        return max(times) if times else 0.0


@dataclass(frozen=True)
class Totals:
    train: float
    validate: float
    aggregate: float

    @property
    def total(self) -> float:
        return self.train + self.validate + self.aggregate


@dataclass(frozen=True)
class ExperimentReport:
    """Everything one experiment produced: config echo, rounds, totals, scores."""

    config: dict
    rounds: tuple
    totals: Totals
    final_scores: Mapping[str, EvalScore]
    global_mean: EvalScore
    final_global: ParameterVector
    status: str = "completed"

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(self.rounds))
        object.__setattr__(self, "final_scores", dict(self.final_scores))


def score_table_mean(per_site: Mapping[str, EvalScore]) -> EvalScore:
    """Unweighted mean of per-site means; std across sites."""
    if not per_site:
        raise ReportError("cannot average an empty score table")
    names = sorted(per_site)
    means = np.array([per_site[n].mean for n in names])
    metric = per_site[names[0]].metric
    return EvalScore(mean=float(means.mean()), std=float(means.std()), metric=metric)


def summarize(
    records: Sequence[RoundRecord],
    final_scores: Mapping[str, EvalScore],
    *,
    final_global: ParameterVector,
    config: Optional[dict] = None,
    validate_seconds: float = 0.0,
    status: str = "completed",
) -> ExperimentReport:
    """Fold round records and final scores into an :class:`ExperimentReport`.

    Totals are sums over rounds: train is the sum of per-round training
    spans, aggregate the sum of aggregation costs. Validation happens once
    at the end, outside the rounds, so its time arrives as an argument.
    """
    if not records:
        raise ReportError("cannot summarize zero rounds")
    train_total = float(sum(r.train_span_seconds for r in records))
    aggregate_total = float(sum(r.aggregation_seconds for r in records))
    return ExperimentReport(
        config=dict(config or {}),
        rounds=tuple(records),
        totals=Totals(train=train_total, validate=float(validate_seconds), aggregate=aggregate_total),
        final_scores=final_scores,
        global_mean=score_table_mean(final_scores),
        final_global=final_global,
        status=status,
    )


def _mean_of(score) -> float:
    return score.mean if isinstance(score, EvalScore) else float(score)


def compare_global_local(
    global_scores: Mapping[str, object],
    local_cross_scores: Mapping[str, Mapping[str, object]],
) -> dict:
    """Percent-point differences (local - global) of a cross-validation table.

    ``local_cross_scores[t][v]`` is the model trained at site t evaluated on
    site v's validation data. A cell of -1.30 means the local model scores
    1.30 percent points below the global model on that validation site.
    """
    sites = set(global_scores)
    if set(local_cross_scores) != sites:
        raise ReportError(
            f"trained-site set {sorted(local_cross_scores)} does not match "
            f"validation sites {sorted(sites)}"
        )
    table: dict = {}
    for trained in sorted(local_cross_scores):
        row = local_cross_scores[trained]
        if set(row) != sites:
            raise ReportError(
                f"local model {trained!r} evaluated on {sorted(row)}, expected {sorted(sites)}"
            )
        table[trained] = {
            validated: (_mean_of(row[validated]) - _mean_of(global_scores[validated])) * 100.0
            for validated in sorted(row)
        }
    return table


CSV_HEADER = ("round", "site", "train_seconds", "waiting_seconds", "aggregation_seconds", "submitted")


def export_csv(report: ExperimentReport, path: str) -> None:
    """Write one row per (round, site); deterministic bytes for a given report."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for record in report.rounds:
                for site, stat in record.per_client.items():
                    writer.writerow(
                        [
                            record.round,
                            site,
                            repr(stat.train_seconds),
                            repr(stat.waiting_seconds),
                            repr(record.aggregation_seconds),
                            "true" if stat.submitted else "false",
                        ]
                    )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_csv_records(path: str) -> list[RoundRecord]:
    """Parse a file written by :func:`export_csv` back into round records."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != CSV_HEADER:
                raise ReportError(f"unexpected CSV header {header}")
            rows = list(reader)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    by_round: dict = {}
    agg: dict = {}
    for row in rows:
        if len(row) != len(CSV_HEADER):
            raise ReportError(f"malformed CSV row: {row}")
        round_index = int(row[0])
        by_round.setdefault(round_index, {})[row[1]] = ClientRoundStat(
            train_seconds=float(row[2]),
            waiting_seconds=float(row[3]),
            submitted=row[5] == "true",
        )
        agg[round_index] = float(row[4])
    return [
        RoundRecord(round=r, per_client=by_round[r], aggregation_seconds=agg[r])
        for r in sorted(by_round)
    ]


# --- report (de)serialization -------------------------------------------------

def _score_to_dict(score: EvalScore) -> dict:
    return {"mean": score.mean, "std": score.std, "metric": score.metric}


def _score_from_dict(obj: dict) -> EvalScore:
    return EvalScore(mean=obj["mean"], std=obj["std"], metric=obj["metric"])


def report_to_dict(report: ExperimentReport, **extras) -> dict:
    doc = {
        "config": report.config,
        "status": report.status,
        "totals": {
            "train": report.totals.train,
            "validate": report.totals.validate,
            "aggregate": report.totals.aggregate,
        },
        "rounds": [
            {
                "round": r.round,
                "aggregation_seconds": r.aggregation_seconds,
                "per_client": {
                    site: {
                        "train_seconds": s.train_seconds,
                        "waiting_seconds": s.waiting_seconds,
                        "submitted": s.submitted,
                    }
                    for site, s in r.per_client.items()
                },
            }
            for r in report.rounds
        ],
        "final_scores": {site: _score_to_dict(s) for site, s in report.final_scores.items()},
        "global_mean": _score_to_dict(report.global_mean),
        "final_global": report.final_global.tolist(),
    }
    doc.update(extras)
    return doc


def report_from_dict(doc: dict) -> ExperimentReport:
    records = [
        RoundRecord(
            round=r["round"],
            per_client={
                site: ClientRoundStat(
                    train_seconds=s["train_seconds"],
                    waiting_seconds=s["waiting_seconds"],
                    submitted=s["submitted"],
                )
                for site, s in r["per_client"].items()
            },
            aggregation_seconds=r["aggregation_seconds"],
        )
        for r in doc["rounds"]
    ]
    totals = doc["totals"]
    return ExperimentReport(
        config=doc.get("config", {}),
        rounds=tuple(records),
        totals=Totals(train=totals["train"], validate=totals["validate"], aggregate=totals["aggregate"]),
        final_scores={site: _score_from_dict(s) for site, s in doc["final_scores"].items()},
        global_mean=_score_from_dict(doc["global_mean"]),
        final_global=ParameterVector(doc["final_global"]),
        status=doc.get("status", "completed"),
    )


def save_report(doc: dict, path: str) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_report(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot load report {path}: {exc}") from exc


# --- rendering -----------------------------------------------------------------

def _hours(seconds: float) -> str:
    return f"{seconds / 3600.0:.2f} hr"


def render_summary(report: ExperimentReport, *, title: str = "experiment") -> str:
    """Human-readable totals and score table (hours at presentation only)."""
    out = io.StringIO()
    t = report.totals
    print(f"== {title} ({report.status}) ==", file=out)
    print(f"rounds: {len(report.rounds)}", file=out)
    print(
        f"totals: train {_hours(t.train)} | aggregate {_hours(t.aggregate)} "
        f"| validate {_hours(t.validate)} | total {_hours(t.total)}",
        file=out,
    )
    if report.final_scores:
        metric = report.global_mean.metric
        print(f"final {metric} per site:", file=out)
        for site in sorted(report.final_scores):
            s = report.final_scores[site]
            print(f"  {site:<12} {s.mean:.4f} (±{s.std:.4f})", file=out)
        print(
            f"  {'global mean':<12} {report.global_mean.mean:.4f} (±{report.global_mean.std:.4f})",
            file=out,
        )
    return out.getvalue()


def render_loss_table(table: Mapping[str, Mapping[str, float]]) -> str:
    """Render a percent-point table the way the comparison is reported: one
    row per trained site, one column per validation site, cells like -1.30%."""
    sites = sorted(table)
    out = io.StringIO()
    header = "trained\\validated " + " ".join(f"{v:>12}" for v in sites)
    print(header, file=out)
    for trained in sites:
        cells = " ".join(f"{table[trained][v]:>+11.2f}%" for v in sites)
        print(f"{trained:<18} {cells}", file=out)
    return out.getvalue()
