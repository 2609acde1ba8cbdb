"""One JSON config format shared by server, client, and simulator.

A config file is a single document with the federation keys at the top
level and an optional ``simulator`` block carrying the timing model and
fault schedule. Unknown keys are rejected, every module invariant is
re-checked at load time, and errors name the offending key with a line
anchor into the file wherever one can be found.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional

from .aggregation import AlgorithmConfig
from .errors import ConfigError, FedkitError
from .server import FederationConfig, SiteSpec
from .simulator import FaultEvent, SimScenario
from .training import HeterogeneityConfig, TrainerConfig

_TOP_KEYS = {
    "sites",
    "rounds",
    "algorithm",
    "trainer",
    "heterogeneity",
    "on_client_loss",
    "min_clients_per_round",
    "checkpoint_path",
    "round_timeout_seconds",
    "simulator",
}
_SITE_KEYS = {"name", "expected", "fraction"}
_ALGORITHM_KEYS = {"kind", "prox_mu", "ditto_lambda", "weighting"}
_TRAINER_KEYS = {"trainer", "lr", "local_steps", "batch", "seed"}
_HETEROGENEITY_KEYS = {"base_optimum", "shift_scale", "noise_std", "samples_per_site", "fraction"}
_SIMULATOR_KEYS = {
    "site_multipliers",
    "base_round_cost_seconds",
    "aggregation_cost_seconds",
    "faults",
    "local_baseline",
}
_FAULT_KEYS = {"at_round", "target", "kind", "downtime_seconds"}


@dataclass(frozen=True)
class ConfigDocument:
    """A parsed config file: the federation, plus a scenario when the file
    carries simulator keys."""

    federation: FederationConfig
    scenario: Optional[SimScenario] = None


def _line_of(text: str, key: str) -> Optional[int]:
    # Best-effort anchor: the first line where the key appears quoted.
    pattern = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return number
    return None


class _Context:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def fail(self, key: str, why: str) -> ConfigError:
        line = _line_of(self.text, key.rsplit(".", 1)[-1])
        anchor = f"{self.source}:{line}" if line is not None else self.source
        return ConfigError(f"{anchor}: {key}: {why}")

    def check_keys(self, obj: dict, allowed: set, where: str) -> None:
        if not isinstance(obj, dict):
            raise self.fail(where, f"must be an object, got {type(obj).__name__}")
        for key in obj:
            if key not in allowed:
                raise self.fail(f"{where}.{key}" if where else key, "unknown key")

    def require(self, obj: dict, key: str, where: str = ""):
        if key not in obj:
            path = f"{where}.{key}" if where else key
            raise self.fail(path, "missing required key")
        return obj[key]


def parse_config(text: str, source: str = "<config>") -> ConfigDocument:
    """Parse and validate a config document from its JSON text."""
    ctx = _Context(text, source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    ctx.check_keys(doc, _TOP_KEYS, "")

    sites_doc = ctx.require(doc, "sites")
    if not isinstance(sites_doc, list) or not sites_doc:
        raise ctx.fail("sites", "must be a non-empty array of site objects")
    sites = []
    for entry in sites_doc:
        ctx.check_keys(entry, _SITE_KEYS, "sites")
        try:
            sites.append(
                SiteSpec(
                    name=ctx.require(entry, "name", "sites"),
                    expected=entry.get("expected", True),
                    fraction=entry.get("fraction"),
                )
            )
        except FedkitError as exc:
            raise ctx.fail("sites", str(exc)) from exc

    algorithm = _build(ctx, doc.get("algorithm", {}), _ALGORITHM_KEYS, "algorithm", AlgorithmConfig)
    trainer = _build(ctx, doc.get("trainer", {}), _TRAINER_KEYS, "trainer", TrainerConfig)
    het_doc = ctx.require(doc, "heterogeneity")
    heterogeneity = _build(ctx, het_doc, _HETEROGENEITY_KEYS, "heterogeneity", HeterogeneityConfig)
    if "base_optimum" not in het_doc:
        raise ctx.fail("heterogeneity.base_optimum", "missing required key")

    try:
        federation = FederationConfig(
            sites=tuple(sites),
            rounds=ctx.require(doc, "rounds"),
            algorithm=algorithm,
            trainer=trainer,
            heterogeneity=heterogeneity,
            on_client_loss=doc.get("on_client_loss", "wait"),
            min_clients_per_round=doc.get("min_clients_per_round"),
            checkpoint_path=doc.get("checkpoint_path", "checkpoint.json"),
            round_timeout_seconds=doc.get("round_timeout_seconds"),
        )
    except FedkitError as exc:
        raise ctx.fail("federation", str(exc)) from exc

    scenario = None
    if "simulator" in doc:
        scenario = _build_scenario(ctx, doc["simulator"], federation)
    return ConfigDocument(federation=federation, scenario=scenario)


def _build(ctx: _Context, obj: dict, allowed: set, where: str, factory):
    ctx.check_keys(obj, allowed, where)
    try:
        return factory(**obj)
    except FedkitError as exc:
        raise ctx.fail(where, str(exc)) from exc
    except TypeError as exc:
        raise ctx.fail(where, f"invalid value: {exc}") from exc


def _build_scenario(ctx: _Context, obj: dict, federation: FederationConfig) -> SimScenario:
    ctx.check_keys(obj, _SIMULATOR_KEYS, "simulator")
    faults = []
    for entry in obj.get("faults", []):
        ctx.check_keys(entry, _FAULT_KEYS, "simulator.faults")
        try:
            faults.append(
                FaultEvent(
                    at_round=ctx.require(entry, "at_round", "simulator.faults"),
                    target=ctx.require(entry, "target", "simulator.faults"),
                    kind=entry.get("kind", "crash"),
                    downtime_seconds=entry.get("downtime_seconds", 0.0),
                )
            )
        except FedkitError as exc:
            raise ctx.fail("simulator.faults", str(exc)) from exc
    try:
        return SimScenario(
            federation=federation,
            site_multipliers=obj.get("site_multipliers", {}),
            base_round_cost_seconds=obj.get("base_round_cost_seconds", 1.0),
            aggregation_cost_seconds=obj.get("aggregation_cost_seconds", 0.0),
            faults=tuple(faults),
            local_baseline=obj.get("local_baseline", False),
        )
    except FedkitError as exc:
        raise ctx.fail("simulator", str(exc)) from exc


def load_config(path: str) -> ConfigDocument:
    """Load and validate a config file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)
