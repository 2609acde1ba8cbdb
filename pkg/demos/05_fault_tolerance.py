"""Fault injection: crashes and disconnects that change nothing.

The round protocol is built so that a server restart (resume from
checkpoint) or a client outage (reconnect, retrain or resubmit) leaves the
final model bit-identical to the undisturbed run, provided the quorum
survives. A schedule that starves the quorum forever is detected and
reported as a hung experiment, not a crash.
"""
import math
import tempfile
from pathlib import Path

from fedkit import (
    AlgorithmConfig,
    FaultEvent,
    FederationConfig,
    HeterogeneityConfig,
    SimScenario,
    SiteSpec,
    TrainerConfig,
    simulate,
)

workdir = Path(tempfile.mkdtemp())


def run(name, faults=(), policy="wait", min_clients=None):
    cfg = FederationConfig(
        sites=(SiteSpec("basel"), SiteSpec("freiburg"), SiteSpec("strasbourg")),
        rounds=8,
        algorithm=AlgorithmConfig(),
        trainer=TrainerConfig(lr=0.1, local_steps=1, seed=21),
        heterogeneity=HeterogeneityConfig(
            base_optimum=[1.0, -2.0, 0.5], shift_scale=0.4, noise_std=0.2, samples_per_site=12
        ),
        checkpoint_path=str(workdir / f"{name}.json"),
        on_client_loss=policy,
        min_clients_per_round=min_clients,
    )
    return simulate(
        SimScenario(
            federation=cfg,
            site_multipliers={"basel": 1.0, "freiburg": 2.0, "strasbourg": 3.0},
            base_round_cost_seconds=30.0,
            aggregation_cost_seconds=1.0,
            faults=tuple(faults),
        )
    )


baseline = run("baseline")
print("fault-free run:", baseline.status, f"({baseline.virtual_seconds:.0f} virtual s)")

# A server crash between rounds: clients keep reconnecting until the
# restarted server (resumed from its checkpoint) is back.
crash = run("server_crash", [FaultEvent(at_round=4, target="server", kind="crash",
                                        downtime_seconds=90.0)])
print("\nserver crash at round 4, 90 s down:")
print("  status:", crash.status, "| reconnects:", crash.reconnects,
      "| extra virtual time:", f"{crash.virtual_seconds - baseline.virtual_seconds:.0f} s")
print("  final model identical:", crash.final_global == baseline.final_global)

# A client that trains but loses its connection before submitting holds the
# update and resubmits after the rejoin - no retraining, same model.
drop = run("client_drop", [FaultEvent(at_round=3, target="freiburg", kind="disconnect",
                                      downtime_seconds=120.0)])
print("\nfreiburg disconnects at round 3, 120 s down:")
print("  status:", drop.status, "| final model identical:",
      drop.final_global == baseline.final_global)

# Under the wait policy a permanently dead client blocks progress; the
# simulation diagnoses the hang instead of spinning forever.
hung = run("starved", [FaultEvent(at_round=2, target="strasbourg", kind="crash",
                                  downtime_seconds=math.inf)])
print("\npermanent loss under the wait policy:")
print("  status:", hung.status)
print("  finding:", hung.diagnosis)

# The continue-without policy drops the dead site each round and finishes,
# renormalizing the average over the survivors.
survived = run("continue", [FaultEvent(at_round=2, target="strasbourg", kind="crash",
                                       downtime_seconds=math.inf)],
               policy="continue_without", min_clients=2)
print("\nsame loss under continue_without (quorum 2):")
print("  status:", survived.status,
      "| strasbourg submitted in round 2:",
      survived.experiment.rounds[2].per_client["strasbourg"].submitted)
print("  model differs from fault-free run (fewer contributors):",
      survived.final_global != baseline.final_global)
