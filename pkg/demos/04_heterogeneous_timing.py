"""Straggler analysis: how one slow site drags the whole federation.

Rounds are synchronous, so each round lasts as long as its slowest
participant; everyone else just waits. We encode three hardware
configurations as per-site time multipliers (slow CPU-class vs fast
GPU-class), reproduce the total-time ordering, and quantify the speedup
of upgrading every site.
"""
import tempfile
from pathlib import Path

from fedkit import (
    AlgorithmConfig,
    FederationConfig,
    HeterogeneityConfig,
    SimScenario,
    SiteSpec,
    TrainerConfig,
    simulate,
    speedup,
)

workdir = Path(tempfile.mkdtemp())
sites = ("basel", "freiburg", "strasbourg")

# per-site round times (integer units): slow means CPU-class hardware.
# "one fast" upgrades the straggler: upgrading anyone else would change
# nothing, because the slowest site sets the round span.
rows = {
    "all slow": {"basel": 58.0, "freiburg": 34.0, "strasbourg": 48.0},
    "one fast": {"basel": 41.0, "freiburg": 34.0, "strasbourg": 48.0},
    "all fast": {"basel": 41.0, "freiburg": 27.0, "strasbourg": 27.0},
}


def run(name, multipliers):
    cfg = FederationConfig(
        sites=tuple(SiteSpec(s) for s in sites),
        rounds=10,
        algorithm=AlgorithmConfig(),
        trainer=TrainerConfig(seed=3),
        heterogeneity=HeterogeneityConfig(base_optimum=[1.0, -1.0], samples_per_site=8),
        checkpoint_path=str(workdir / f"{name.replace(' ', '_')}.json"),
    )
    return simulate(
        SimScenario(
            federation=cfg,
            site_multipliers=multipliers,
            base_round_cost_seconds=60.0,
            aggregation_cost_seconds=5.0,
        )
    )


reports = {name: run(name, mults) for name, mults in rows.items()}

print(f"{'configuration':<12} {'total':>10}   per-site avg waiting (minutes)")
for name, report in reports.items():
    record = report.experiment.rounds[0]
    waits = "  ".join(
        f"{site}: {stat.waiting_seconds / 60:5.1f}" for site, stat in record.per_client.items()
    )
    print(f"{name:<12} {report.experiment.totals.total / 3600:8.2f} hr   {waits}")

print("\nwaiting + own time is the round span for every site:")
record = reports["all slow"].experiment.rounds[0]
for site, stat in record.per_client.items():
    print(f"  {site:<11} {stat.train_seconds:6.0f} + {stat.waiting_seconds:5.0f} "
          f"= {stat.train_seconds + stat.waiting_seconds:6.0f} s")

print("\nspeedup of upgrading all sites:",
      f"{speedup(reports['all slow'], reports['all fast']):.2f}%")
print("speedup of upgrading one site: ",
      f"{speedup(reports['all slow'], reports['one fast']):.2f}%")
