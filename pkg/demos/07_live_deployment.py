"""The real thing: a TCP server and three clients on loopback.

Identical logic to the simulator demos, but over actual sockets with the
length-prefixed JSON wire format, wall-clock timing, and a checkpoint file
on disk. Mid-run we stop the server, wait while the clients retry with
exponential backoff, then resume from the checkpoint; the final model
matches an undisturbed run bit for bit.

(The ``fedkit server`` / ``fedkit client`` CLI wraps exactly this.)
"""
import tempfile
import threading
import time
from pathlib import Path

from fedkit import (
    AlgorithmConfig,
    BackoffPolicy,
    ClientConfig,
    FederationConfig,
    FederationServer,
    HeterogeneityConfig,
    SiteSpec,
    TrainerConfig,
    resume_from_checkpoint,
    run_client,
)

sites = ("basel", "freiburg", "strasbourg")


def make_cfg(workdir):
    return FederationConfig(
        sites=tuple(SiteSpec(s) for s in sites),
        rounds=40,
        algorithm=AlgorithmConfig(),
        trainer=TrainerConfig(lr=0.05, local_steps=25, seed=4),
        heterogeneity=HeterogeneityConfig(
            base_optimum=[1.0, -1.5, 0.5], shift_scale=0.4, noise_std=0.2, samples_per_site=10
        ),
        checkpoint_path=str(workdir / "checkpoint.json"),
    )


def start_clients(cfg, address):
    threads = []
    for site in sites:
        client_cfg = ClientConfig(
            site_name=site,
            server_address=address,
            data_seed=cfg.trainer.seed,
            site_index=cfg.site_index(site),
            reconnect_backoff=BackoffPolicy(initial_seconds=0.1, max_seconds=1.0),
        )
        index = cfg.site_index(site)
        thread = threading.Thread(
            target=run_client,
            args=(client_cfg, cfg.trainer, cfg.site_heterogeneity(index)),
            daemon=True,
        )
        thread.start()
        threads.append(thread)
    return threads


# --- undisturbed run ---------------------------------------------------------
workdir_a = Path(tempfile.mkdtemp())
cfg = make_cfg(workdir_a)
server = FederationServer(cfg, ("127.0.0.1", 0))
print(f"server listening on {server.address[0]}:{server.address[1]}")
clients = start_clients(cfg, server.address)
baseline = server.run()
for t in clients:
    t.join(30.0)
print(f"undisturbed run: {len(baseline.rounds)} rounds, "
      f"train total {baseline.totals.train:.3f} s (wall clock)")

# --- run with a mid-experiment server outage ----------------------------------
workdir_b = Path(tempfile.mkdtemp())
cfg = make_cfg(workdir_b)
server_a = FederationServer(cfg, ("127.0.0.1", 0))
address = server_a.address
holder = {}
threading.Thread(target=lambda: holder.update(r=server_a.run()), daemon=True).start()
clients = start_clients(cfg, address)

while True:  # let a few rounds land in the checkpoint
    try:
        if resume_from_checkpoint(cfg.checkpoint_path)[1] >= 3:
            break
    except Exception:
        pass
    time.sleep(0.02)
server_a.stop()
print("\nserver stopped mid-experiment; clients are now retrying with backoff...")
time.sleep(3.0)

server_b = FederationServer(cfg, address, resume=True)
_, next_round = resume_from_checkpoint(cfg.checkpoint_path)
print(f"restarting from the checkpoint at round {next_round}")
report = server_b.run()
for t in clients:
    t.join(30.0)

print("resumed run completed:", len(report.rounds), "rounds after restart")
print("final model identical to the undisturbed run:",
      report.final_global == baseline.final_global)
