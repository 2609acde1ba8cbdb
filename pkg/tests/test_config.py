import json

import pytest

from fedkit import ConfigError
from fedkit.config import load_config, parse_config


def minimal_config(**overrides):
    doc = {
        "sites": [{"name": "a"}, {"name": "b"}, {"name": "c"}],
        "rounds": 3,
        "heterogeneity": {"base_optimum": [1.0, -1.0], "samples_per_site": 8},
    }
    doc.update(overrides)
    return doc


def parse(doc, source="cfg.json"):
    return parse_config(json.dumps(doc, indent=2), source=source)


class TestParseConfig:
    def test_minimal_document(self):
        parsed = parse(minimal_config())
        cfg = parsed.federation
        assert cfg.site_names == ["a", "b", "c"]
        assert cfg.rounds == 3
        assert cfg.algorithm.kind == "fedavg"
        assert parsed.scenario is None

    def test_unknown_top_level_key_named_and_anchored(self):
        with pytest.raises(ConfigError, match=r"cfg\.json:\d+.*frobnicate.*unknown key"):
            parse(minimal_config(frobnicate=1))

    def test_unknown_nested_key(self):
        doc = minimal_config()
        doc["algorithm"] = {"kind": "fedavg", "bogus": 2}
        with pytest.raises(ConfigError, match="algorithm.bogus"):
            parse(doc)

    def test_missing_required_key(self):
        doc = minimal_config()
        del doc["rounds"]
        with pytest.raises(ConfigError, match="rounds"):
            parse(doc)

    def test_invalid_json_reports_line(self):
        with pytest.raises(ConfigError, match=r"cfg\.json:\d+: invalid JSON"):
            parse_config('{"sites": [,]}', source="cfg.json")

    def test_module_invariants_rechecked(self):
        doc = minimal_config()
        doc["trainer"] = {"lr": -0.1}
        with pytest.raises(ConfigError, match="lr"):
            parse(doc)

    def test_continue_without_needs_quorum(self):
        doc = minimal_config(on_client_loss="continue_without")
        with pytest.raises(ConfigError, match="min_clients_per_round"):
            parse(doc)

    def test_site_fraction_override(self):
        doc = minimal_config()
        doc["sites"][0]["fraction"] = 0.2
        cfg = parse(doc).federation
        assert cfg.sites[0].fraction == 0.2
        assert cfg.site_heterogeneity(0).fraction == 0.2
        assert cfg.site_heterogeneity(1).fraction == 1.0

    def test_simulator_block(self):
        doc = minimal_config()
        doc["simulator"] = {
            "site_multipliers": {"a": 2.0},
            "base_round_cost_seconds": 5.0,
            "aggregation_cost_seconds": 0.5,
            "faults": [
                {"at_round": 1, "target": "server", "kind": "crash", "downtime_seconds": 3.0}
            ],
        }
        parsed = parse(doc)
        assert parsed.scenario is not None
        assert parsed.scenario.multiplier("a") == 2.0
        assert parsed.scenario.faults[0].target == "server"

    def test_simulator_fault_validation(self):
        doc = minimal_config()
        doc["simulator"] = {"faults": [{"at_round": 99, "target": "server"}]}
        with pytest.raises(ConfigError, match="at_round"):
            parse(doc)

    def test_unknown_simulator_key(self):
        doc = minimal_config()
        doc["simulator"] = {"bandwidth_model": "lte"}
        with pytest.raises(ConfigError, match="bandwidth_model"):
            parse(doc)


class TestLoadConfig:
    def test_round_trip_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(minimal_config()))
        cfg = load_config(str(path)).federation
        assert cfg.rounds == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "absent.json"))
