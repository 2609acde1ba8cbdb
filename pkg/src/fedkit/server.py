"""Federation aggregator: lifecycle state machine, round orchestration,
fault policy, and checkpointing.

The :class:`FederationCoordinator` is transport-agnostic. Runtimes feed it
events (join, update, client loss, timeout) and execute the command list it
returns; all round-state mutation happens inside the coordinator, one event
at a time. The TCP runtime here drives it from socket reader threads through
a single queue, so the coordinator itself never blocks on network I/O. The
simulator drives the very same coordinator from a virtual clock, which is
what keeps simulated and deployed round semantics identical.

Rounds are synchronous: round r+1's task is broadcast only after round r's
aggregation completes, and a round aggregates only updates whose round index
matches; stale submissions are discarded, never averaged in.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Union

from .aggregation import AlgorithmConfig, federated_average
from .errors import (
    CheckpointError,
    ConfigError,
    ExperimentAborted,
    FedkitError,
    IoError,
    ProtocolError,
    StartupError,
)
from .metrics import ClientRoundStat, ExperimentReport, RoundRecord, summarize
from .params import ModelUpdate, ParameterVector
from .protocol import (
    Abort,
    FrameDecoder,
    JoinAck,
    Message,
    TaskAssignment,
    encode,
)
from .training import (
    HeterogeneityConfig,
    TrainerConfig,
    evaluate,
    generate_site_data,
    initial_global,
    metric_for,
    with_fraction,
)

logger = logging.getLogger(__name__)

LOSS_POLICIES = ("wait", "continue_without")

# handle_client_loss decisions
WAIT = "wait"
DROP_FOR_ROUND = "drop_for_round"
ABORT = "abort"

CHECKPOINT_FORMAT = "fedkit-checkpoint-v1"


@dataclass(frozen=True)
class SiteSpec:
    """One site of the federation. ``fraction`` optionally overrides the
    heterogeneity config's training-data fraction for this site alone
    (the client data-quantity experiment)."""

    name: str
    expected: bool = True
    fraction: Optional[float] = None

    def __post_init__(self):
        if not self.name:
            raise ConfigError("site name must be non-empty")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"site {self.name!r}: fraction must lie in (0, 1], got {self.fraction}")


@dataclass(frozen=True)
class FederationConfig:
    """Full experiment description shared by server, clients, and simulator."""

    sites: tuple
    rounds: int
    algorithm: AlgorithmConfig
    trainer: TrainerConfig
    heterogeneity: HeterogeneityConfig
    on_client_loss: str = "wait"
    min_clients_per_round: Optional[int] = None
    checkpoint_path: str = "checkpoint.json"
    round_timeout_seconds: Optional[float] = None

    def __post_init__(self):
        sites = tuple(self.sites)
        if not sites:
            raise ConfigError("at least one site is required")
        names = [s.name for s in sites]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate site names: {names}")
        if not any(s.expected for s in sites):
            raise ConfigError("at least one site must be expected")
        object.__setattr__(self, "sites", sites)
        if not isinstance(self.rounds, int) or isinstance(self.rounds, bool) or self.rounds < 1:
            raise ConfigError(f"rounds must be a positive integer, got {self.rounds!r}")
        if self.on_client_loss not in LOSS_POLICIES:
            raise ConfigError(
                f"unknown on_client_loss {self.on_client_loss!r}; expected one of {LOSS_POLICIES}"
            )
        if self.min_clients_per_round is not None:
            quorum = self.min_clients_per_round
            if (
                not isinstance(quorum, int)
                or isinstance(quorum, bool)
                or not 1 <= quorum <= len(sites)
            ):
                raise ConfigError(
                    f"min_clients_per_round must be an integer in [1, {len(sites)}], "
                    f"got {quorum!r}"
                )
        elif self.on_client_loss == "continue_without":
            raise ConfigError("continue_without requires min_clients_per_round")
        if not self.checkpoint_path:
            raise ConfigError("checkpoint_path must be non-empty")
        if self.round_timeout_seconds is not None and self.round_timeout_seconds <= 0:
            raise ConfigError(
                f"round_timeout_seconds must be positive or null, got {self.round_timeout_seconds}"
            )

    @property
    def site_names(self) -> list:
        return [s.name for s in self.sites]

    @property
    def expected_sites(self) -> list:
        return [s.name for s in self.sites if s.expected]

    def site_index(self, name: str) -> int:
        for i, s in enumerate(self.sites):
            if s.name == name:
                return i
        raise ConfigError(f"unknown site {name!r}")

    def site_heterogeneity(self, index: int) -> HeterogeneityConfig:
        return with_fraction(self.heterogeneity, self.sites[index].fraction)


def config_to_dict(cfg: FederationConfig) -> dict:
    """Canonical JSON-ready form; the config echo in reports."""
    return {
        "sites": [
            {"name": s.name, "expected": s.expected, "fraction": s.fraction} for s in cfg.sites
        ],
        "rounds": cfg.rounds,
        "algorithm": {
            "kind": cfg.algorithm.kind,
            "prox_mu": cfg.algorithm.prox_mu,
            "ditto_lambda": cfg.algorithm.ditto_lambda,
            "weighting": cfg.algorithm.weighting,
        },
        "trainer": {
            "trainer": cfg.trainer.trainer,
            "lr": cfg.trainer.lr,
            "local_steps": cfg.trainer.local_steps,
            "batch": cfg.trainer.batch,
            "seed": cfg.trainer.seed,
        },
        "heterogeneity": {
            "base_optimum": list(cfg.heterogeneity.base_optimum),
            "shift_scale": cfg.heterogeneity.shift_scale,
            "noise_std": cfg.heterogeneity.noise_std,
            "samples_per_site": cfg.heterogeneity.samples_per_site,
            "fraction": cfg.heterogeneity.fraction,
        },
        "on_client_loss": cfg.on_client_loss,
        "min_clients_per_round": cfg.min_clients_per_round,
        "checkpoint_path": cfg.checkpoint_path,
        "round_timeout_seconds": cfg.round_timeout_seconds,
    }


def config_hash(cfg: FederationConfig) -> str:
    """Identity of the experiment a checkpoint belongs to.

    Operational knobs (checkpoint path, timeout) are excluded: moving a
    checkpoint file or adjusting a timeout does not change the experiment,
    while resuming under a different algorithm or data config must fail.
    """
    doc = config_to_dict(cfg)
    doc.pop("checkpoint_path")
    doc.pop("round_timeout_seconds")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- checkpointing ---------------------------------------------------------


def save_checkpoint(path: str, round_index: int, params: ParameterVector, cfg_hash: str) -> None:
    """Atomically persist (round, global model): write a temp file in the
    same directory, then rename over the target. A crash at any byte
    boundary leaves either the old or the new checkpoint, never a torn one."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "round": round_index,
        "global": params.tolist(),
        "config_hash": cfg_hash,
    }
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def resume_from_checkpoint(
    path: str, expected_config_hash: Optional[str] = None
) -> tuple[ParameterVector, int]:
    """Load the last aggregated global model and the next round index.

    A restarted server re-broadcasts the task for the returned round. A
    config-hash mismatch is a hard error: resuming under a different
    experiment config would silently corrupt it.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint at {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if set(doc) != {"format", "round", "global", "config_hash"}:
        raise CheckpointError(f"checkpoint {path} has unexpected structure")
    round_index = doc["round"]
    if not isinstance(round_index, int) or round_index < 0:
        raise CheckpointError(f"checkpoint {path} has invalid round {round_index!r}")
    if expected_config_hash is not None and doc["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"checkpoint {path} belongs to a different experiment config "
            f"({doc['config_hash'][:12]}… vs {expected_config_hash[:12]}…)"
        )
    try:
        params = ParameterVector(doc["global"])
    except FedkitError as exc:
        raise CheckpointError(f"checkpoint {path} has invalid parameters: {exc}") from exc
    return params, round_index + 1


# --- round state and loss policy --------------------------------------------


@dataclass
class RoundState:
    """Mutable state of the round being collected."""

    round: int
    global_params: ParameterVector
    received: dict = field(default_factory=dict)  # site -> ModelUpdate
    pending: set = field(default_factory=set)
    started_at: float = 0.0
    per_client_times: dict = field(default_factory=dict)
    arrivals: dict = field(default_factory=dict)
    dropped: set = field(default_factory=set)


def handle_client_loss(state: RoundState, lost: str, cfg: FederationConfig) -> str:
    """Decide what the loss of ``lost`` means for the current round.

    wait policy: block the round until the client rejoins (or the round
    timeout fires). continue_without: drop the client for this round if the
    remaining participants still meet the quorum, otherwise abort.
    """
    if cfg.on_client_loss == "wait":
        return WAIT
    remaining = set(state.received) | (state.pending - {lost})
    quorum = cfg.min_clients_per_round if cfg.min_clients_per_round is not None else 1
    return DROP_FOR_ROUND if len(remaining) >= quorum else ABORT


# --- coordinator commands ----------------------------------------------------


@dataclass(frozen=True)
class Send:
    site: str
    message: Message
    delay: float = 0.0


@dataclass(frozen=True)
class SaveCheckpoint:
    round_index: int
    params: ParameterVector


@dataclass(frozen=True)
class StartTimer:
    round_index: int
    seconds: float


@dataclass(frozen=True)
class Finished:
    status: str  # completed | aborted
    reason: str = ""


Command = Union[Send, SaveCheckpoint, StartTimer, Finished]


class FederationCoordinator:
    """The round state machine, shared by the TCP runtime and the simulator.

    Feed events, execute the returned commands. ``aggregation_cost`` fixes
    the reported aggregation time (virtual-time runtimes); when None the
    coordinator measures its own aggregation wall time.
    """

    def __init__(
        self,
        cfg: FederationConfig,
        *,
        start_round: int = 0,
        start_global: Optional[ParameterVector] = None,
        aggregation_cost: Optional[float] = None,
        clock=time.perf_counter,
    ):
        if start_round >= cfg.rounds:
            raise ConfigError(
                f"start round {start_round} is past the last round {cfg.rounds - 1}"
            )
        self.cfg = cfg
        self._site_order = cfg.site_names
        self._known = set(self._site_order)
        self._expected = set(cfg.expected_sites)
        self._round = start_round
        self._global = start_global if start_global is not None else initial_global(
            cfg.trainer, cfg.heterogeneity
        )
        self._agg_cost = aggregation_cost
        self._clock = clock
        self._cfg_hash = config_hash(cfg)
        self._connected: set = set()
        self._state: Optional[RoundState] = None
        self._phase = "waiting"  # waiting | collecting | finished
        self.records: list = []
        self.round_globals: list = []  # (round_index, ParameterVector)
        self.status: Optional[str] = None
        self.abort_reason = ""
        self.stale_updates = 0

    # -- observers

    @property
    def current_round(self) -> int:
        return self._round

    @property
    def phase(self) -> str:
        return self._phase

    @property
    def global_params(self) -> ParameterVector:
        return self._global

    @property
    def state(self) -> Optional[RoundState]:
        return self._state

    @property
    def connected_sites(self) -> set:
        return set(self._connected)

    @property
    def config_digest(self) -> str:
        return self._cfg_hash

    # -- events

    def on_join(self, site: str, now: float) -> list:
        if site not in self._known:
            return [Send(site, self._ack(site, accepted=False, reason=f"unknown site {site!r}"))]
        self._connected.add(site)
        cmds = [Send(site, self._ack(site, accepted=True))]
        if self._phase == "finished":
            cmds.append(self._closing_message(site))
            return cmds
        if self._phase == "waiting":
            if self._expected <= self._connected:
                cmds += self._open_round(now, delay=0.0)
        elif self._state is not None and site in self._state.pending:
            # A rejoiner that still owes this round gets the current task again.
            cmds.append(self._task_send(site))
        return cmds

    def on_update(self, site: str, update: ModelUpdate, now: float) -> list:
        st = self._state
        if self._phase != "collecting" or st is None or update.round != st.round:
            self.stale_updates += 1
            logger.debug("discarding stale update from %s for round %s", site, update.round)
            return []
        if site not in st.pending:
            self.stale_updates += 1  # duplicate resubmission or dropped-for-round
            return []
        st.pending.discard(site)
        st.received[site] = update
        st.arrivals[site] = now
        st.per_client_times[site] = update.train_seconds
        if not st.pending:
            return self._complete_round(now)
        return []

    def on_client_lost(self, site: str, now: float) -> list:
        self._connected.discard(site)
        if self._phase == "collecting" and self._state is not None and site in self._state.pending:
            return self._apply_loss(site, now)
        return []

    def on_timeout(self, round_index: int, now: float) -> list:
        st = self._state
        if self._phase != "collecting" or st is None or st.round != round_index or not st.pending:
            return []
        if self.cfg.on_client_loss == "wait":
            return self._abort(f"round {round_index} timed out waiting for {sorted(st.pending)}")
        for site in sorted(st.pending):
            st.pending.discard(site)
            st.dropped.add(site)
        quorum = self.cfg.min_clients_per_round if self.cfg.min_clients_per_round is not None else 1
        if len(st.received) >= quorum:
            return self._complete_round(now)
        return self._abort(f"round {round_index} timed out below quorum")

    # -- internals

    def _ack(self, site: str, accepted: bool, reason: str = "") -> Message:
        return Message(
            "join_ack",
            self._round,
            site,
            JoinAck(accepted=accepted, current_round=self._round, reason=reason),
        )

    def _closing_message(self, site: str) -> Send:
        if self.status == "completed":
            return Send(site, Message("experiment_done", self._round, site))
        return Send(site, Message("abort", self._round, site, Abort(self.abort_reason)))

    def _task_send(self, site: str, delay: float = 0.0) -> Send:
        msg = Message(
            "task_assignment",
            self._round,
            site,
            TaskAssignment(params=self._global, algorithm=self.cfg.algorithm),
        )
        return Send(site, msg, delay=delay)

    def _open_round(self, now: float, delay: float) -> list:
        participants = self._expected | (self._connected & self._known)
        quorum = self.cfg.min_clients_per_round
        if quorum is not None and len(participants) < quorum:
            return self._abort(
                f"round {self._round} cannot meet the quorum of {quorum} "
                f"with {len(participants)} participants"
            )
        self._state = RoundState(
            round=self._round,
            global_params=self._global,
            pending=set(participants),
            started_at=now,
        )
        self._phase = "collecting"
        cmds = [
            self._task_send(site, delay=delay)
            for site in self._site_order
            if site in participants and site in self._connected
        ]
        if self.cfg.round_timeout_seconds is not None:
            cmds.append(StartTimer(self._round, self.cfg.round_timeout_seconds))
        # Participants that are currently disconnected are already lost:
        # apply the loss policy right away instead of waiting to notice.
        for site in self._site_order:
            if site in participants and site not in self._connected:
                cmds += self._apply_loss(site, now)
                if self._phase != "collecting":
                    break
        return cmds

    def _apply_loss(self, site: str, now: float) -> list:
        decision = handle_client_loss(self._state, site, self.cfg)
        if decision == WAIT:
            return []
        if decision == DROP_FOR_ROUND:
            logger.info("dropping %s for round %d", site, self._state.round)
            self._state.pending.discard(site)
            self._state.dropped.add(site)
            if not self._state.pending:
                return self._complete_round(now)
            return []
        return self._abort(f"lost {site!r} below quorum in round {self._state.round}")

    def _complete_round(self, now: float) -> list:
        st = self._state
        # Canonical site order, not arrival order: summation order must not
        # depend on timing, or reconnect schedules would perturb the model.
        ordered = [st.received[s] for s in self._site_order if s in st.received]
        t0 = self._clock()
        aggregated = federated_average(ordered, self.cfg.algorithm.weighting)
        if self._agg_cost is not None:
            agg_seconds = self._agg_cost
        else:
            agg_seconds = max(self._clock() - t0, 0.0)
        last_arrival = max(st.arrivals.values())
        per_client = {}
        for site in self._site_order:
            if site in st.received:
                per_client[site] = ClientRoundStat(
                    train_seconds=st.per_client_times[site],
                    waiting_seconds=last_arrival - st.arrivals[site],
                    submitted=True,
                )
            elif site in st.dropped:
                per_client[site] = ClientRoundStat(
                    train_seconds=0.0, waiting_seconds=0.0, submitted=False
                )
        self.records.append(
            RoundRecord(round=st.round, per_client=per_client, aggregation_seconds=agg_seconds)
        )
        self.round_globals.append((st.round, aggregated))
        self._global = aggregated
        cmds: list = [SaveCheckpoint(st.round, aggregated)]
        self._round = st.round + 1
        self._state = None
        if self._round >= self.cfg.rounds:
            self._phase = "finished"
            self.status = "completed"
            delay = self._agg_cost if self._agg_cost is not None else 0.0
            for site in self._site_order:
                if site in self._connected:
                    cmds.append(
                        Send(site, Message("experiment_done", self._round, site), delay=delay)
                    )
            cmds.append(Finished("completed"))
        else:
            delay = self._agg_cost if self._agg_cost is not None else 0.0
            cmds += self._open_round(now, delay=delay)
        return cmds

    def _abort(self, reason: str) -> list:
        logger.warning("aborting experiment: %s", reason)
        self._phase = "finished"
        self.status = "aborted"
        self.abort_reason = reason
        self._state = None
        cmds = [
            Send(site, Message("abort", self._round, site, Abort(reason)))
            for site in self._site_order
            if site in self._connected
        ]
        cmds.append(Finished("aborted", reason))
        return cmds


# --- final evaluation and report assembly -------------------------------------


def evaluate_sites(cfg: FederationConfig, params: ParameterVector) -> dict:
    """Score a model on every site's validation data.

    Site data is synthetic and fully determined by the shared config, so the
    server can regenerate each site's validation draw itself; nothing
    private crosses the wire for evaluation.
    """
    metric = metric_for(cfg.trainer)
    scores = {}
    for index, spec in enumerate(cfg.sites):
        data = generate_site_data(
            cfg.site_heterogeneity(index),
            index,
            cfg.trainer.seed,
            task=cfg.trainer.trainer,
            role="val",
        )
        scores[spec.name] = evaluate(params, data, metric)
    return scores


def build_experiment_report(
    cfg: FederationConfig,
    records: list,
    final_global: ParameterVector,
    *,
    validate_seconds: float = 0.0,
    status: str = "completed",
    final_scores: Optional[dict] = None,
) -> ExperimentReport:
    if final_scores is None:
        final_scores = evaluate_sites(cfg, final_global)
    return summarize(
        records,
        final_scores,
        final_global=final_global,
        config=config_to_dict(cfg),
        validate_seconds=validate_seconds,
        status=status,
    )


# --- TCP runtime ---------------------------------------------------------------


class _Connection:
    """One client socket, owned by a reader thread; sends are serialized."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.site: Optional[str] = None
        self.lost_handled = False  # touched only by the coordinator loop
        self._send_lock = threading.Lock()
        self._closed = False

    def send(self, message: Message) -> None:
        with self._send_lock:
            self.sock.sendall(encode(message))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class FederationServer:
    """Blocking TCP server around a :class:`FederationCoordinator`.

    Socket reader threads translate frames into events on one queue; the
    thread that called :meth:`run` is the coordinator, popping events and
    executing commands. ``stop()`` abandons the run (for restart tests and
    operator interrupts); a later server can resume from the checkpoint.
    """

    def __init__(
        self,
        cfg: FederationConfig,
        listen=("127.0.0.1", 0),
        *,
        resume: bool = False,
        startup_timeout: float = 30.0,
    ):
        self.cfg = cfg
        self._resume = resume
        self._startup_timeout = startup_timeout
        self._events: queue.Queue = queue.Queue()
        self._connections: dict = {}  # site -> _Connection
        self._conn_lock = threading.Lock()
        self._stopped = threading.Event()
        self._threads: list = []
        if isinstance(listen, socket.socket):
            self._listener = listen
        else:
            host, port = listen
            self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()[:2]

    # -- lifecycle

    def run(self) -> Optional[ExperimentReport]:
        """Run the experiment to completion; returns its report.

        Returns None when stopped externally; raises StartupError when no
        client ever joins and ExperimentAborted when the loss policy gives
        up on quorum.
        """
        try:
            start_round, start_global = 0, None
            if self._resume:
                start_global, start_round = resume_from_checkpoint(
                    self.cfg.checkpoint_path, config_hash(self.cfg)
                )
                logger.info("resuming from checkpoint at round %d", start_round)
            coordinator = FederationCoordinator(
                self.cfg, start_round=start_round, start_global=start_global
            )
            accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
            accept_thread.start()
            self._threads.append(accept_thread)
            return self._coordinate(coordinator)
        finally:
            self._shutdown()

    def stop(self) -> None:
        self._stopped.set()
        self._events.put(("stop",))

    # -- coordinator loop

    def _coordinate(self, coordinator: FederationCoordinator) -> Optional[ExperimentReport]:
        started = time.monotonic()
        any_join = False
        timer_deadline: Optional[tuple] = None  # (round_index, monotonic deadline)
        finished: Optional[Finished] = None
        while finished is None:
            if self._stopped.is_set():
                return None
            timeout = 0.2
            if timer_deadline is not None:
                timeout = min(timeout, max(timer_deadline[1] - time.monotonic(), 0.0))
            try:
                event = self._events.get(timeout=timeout)
            except queue.Empty:
                event = None
            now = time.monotonic()
            if timer_deadline is not None and now >= timer_deadline[1]:
                round_index = timer_deadline[0]
                timer_deadline = None
                finished, timer_deadline = self._execute(
                    coordinator, coordinator.on_timeout(round_index, now), timer_deadline
                )
                if finished is not None:
                    break
            if event is None:
                if not any_join and now - started > self._startup_timeout:
                    raise StartupError(
                        f"no client joined within {self._startup_timeout:.0f} s"
                    )
                continue
            if event[0] == "stop":
                return None
            kind, conn, payload = event
            if kind == "join":
                any_join = True
                site = payload
                with self._conn_lock:
                    conn.site = site
                    self._connections[site] = conn
                cmds = coordinator.on_join(site, now)
            elif kind == "update":
                cmds = coordinator.on_update(payload.client_id, payload, now)
            elif kind == "lost":
                site = conn.site
                if site is None or conn.lost_handled:
                    continue
                conn.lost_handled = True
                with self._conn_lock:
                    if self._connections.get(site) is not conn:
                        continue  # a newer connection owns this site; loss is stale
                    self._connections.pop(site, None)
                cmds = coordinator.on_client_lost(site, now)
            else:  # pragma: no cover - defensive
                continue
            finished, timer_deadline = self._execute(coordinator, cmds, timer_deadline)
        if finished.status == "aborted":
            raise ExperimentAborted(finished.reason)
        t0 = time.perf_counter()
        final_scores = evaluate_sites(self.cfg, coordinator.global_params)
        validate_seconds = time.perf_counter() - t0
        return build_experiment_report(
            self.cfg,
            coordinator.records,
            coordinator.global_params,
            validate_seconds=validate_seconds,
            final_scores=final_scores,
        )

    def _execute(self, coordinator, cmds, timer_deadline):
        finished = None
        for cmd in cmds:
            if isinstance(cmd, Send):
                self._send(cmd)
            elif isinstance(cmd, SaveCheckpoint):
                save_checkpoint(
                    self.cfg.checkpoint_path, cmd.round_index, cmd.params, coordinator.config_digest
                )
            elif isinstance(cmd, StartTimer):
                timer_deadline = (cmd.round_index, time.monotonic() + cmd.seconds)
            elif isinstance(cmd, Finished):
                finished = cmd
        return finished, timer_deadline

    def _send(self, cmd: Send) -> None:
        with self._conn_lock:
            conn = self._connections.get(cmd.site)
        if conn is None:
            return
        try:
            conn.send(cmd.message)
        except OSError:
            # Report the loss as an event so its cascade (drop, round
            # completion, abort) runs through the one coordinator loop.
            conn.close()
            self._events.put(("lost", conn, None))

    # -- socket plumbing

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn = _Connection(sock)
            reader = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            reader.start()
            self._threads.append(reader)

    def _read_loop(self, conn: _Connection) -> None:
        decoder = FrameDecoder()
        sock = conn.sock
        sock.settimeout(0.5)
        joined_site = None
        try:
            while not self._stopped.is_set():
                try:
                    chunk = sock.recv(65536)
                except socket.timeout:
                    continue
                if not chunk:
                    break
                for msg in decoder.feed(chunk):
                    if joined_site is None:
                        if msg.kind != "join_request":
                            raise ProtocolError(f"expected join_request, got {msg.kind}")
                        joined_site = msg.client_id
                        self._events.put(("join", conn, joined_site))
                    elif msg.kind == "update_submission":
                        if msg.client_id != joined_site:
                            raise ProtocolError(
                                f"update from {msg.client_id!r} on {joined_site!r}'s connection"
                            )
                        self._events.put(("update", conn, msg.body))
                    elif msg.kind == "heartbeat":
                        continue
                    else:
                        raise ProtocolError(f"unexpected {msg.kind} from client")
        except (OSError, ProtocolError) as exc:
            logger.debug("connection error for %s: %s", conn.site, exc)
        finally:
            conn.close()
            if joined_site is not None:
                self._events.put(("lost", conn, None))

    def _shutdown(self) -> None:
        self._stopped.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._connections.values())
            self._connections.clear()
        for conn in conns:
            conn.close()


def run_experiment(
    cfg: FederationConfig,
    transport=("127.0.0.1", 0),
    *,
    resume: bool = False,
    startup_timeout: float = 30.0,
) -> ExperimentReport:
    """Run a full experiment over TCP and return its report.

    ``transport`` is the connection acceptor: a (host, port) pair or an
    already-bound listening socket.
    """
    server = FederationServer(
        cfg, transport, resume=resume, startup_timeout=startup_timeout
    )
    report = server.run()
    if report is None:
        raise FedkitError("server was stopped before the experiment completed")
    return report
