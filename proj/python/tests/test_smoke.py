import csv
import io
import json
import os
from pathlib import Path

import pytest

import convplan

NETS = Path(os.environ.get("CONVPLAN_NETS", Path(__file__).resolve().parents[2] / "nets"))


def load(name):
    return (NETS / name).read_text()


@pytest.fixture
def small():
    return convplan.Network.from_json(load("small.json"))


@pytest.fixture
def machine():
    return convplan.MachineModel.from_json(load("machine4.json"))


def test_network_round_trip(small):
    again = convplan.Network.from_json(small.to_json())
    assert again.ids == small.ids
    assert small.output_shape("conv1") == [2, 4, 16, 16]
    assert small.output_shape("pool1") == [2, 4, 8, 8]
    assert small.is_line()


def test_bad_network_raises():
    with pytest.raises(convplan.Error):
        convplan.Network.from_json('{"layers": [{"id": "x", "kind": "conv", "parents": ["y"]}]}')


def test_primitives():
    m = convplan.MachineModel(ranks=4, alpha=2e-6, beta=1e-10)
    assert convplan.ar_cost(m, 1, 1000) == 0.0
    assert convplan.sr_cost(m, 0) == 2e-6


def test_halo_spec_2x2():
    spec = convplan.halo_spec(convplan.LayerDistribution(1, 2, 2), 3, 1, 1, [1, 1, 8, 8])
    assert len(spec) == 4
    assert set(spec[0]) == {"south", "east", "south_east"}
    assert spec[0]["south_east"][3] == 1
    no_halo = convplan.halo_spec(convplan.LayerDistribution(1, 2, 2), 1, 1, 0, [1, 1, 8, 8])
    assert all(not links for links in no_halo)


def test_verify_matches_serial(small):
    for d in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 1)]:
        err = convplan.verify(small, convplan.LayerDistribution(*d), seed=3)
        assert max(err["y"], err["dx"], err["dw"]) <= 1e-9, d


def test_plan_estimate_and_memory(small, machine):
    doc = convplan.plan(small, machine)
    assert len(json.loads(doc)["layers"]) == len(small)
    cost = convplan.estimate(small, doc, machine)
    assert cost["total"] > 0
    whole = convplan.memory_bytes(small, convplan.LayerDistribution(1, 1, 1))
    split = convplan.memory_bytes(small, convplan.LayerDistribution(1, 2, 2))
    assert max(split) < whole[0]


def test_simulate_log(small):
    text = convplan.simulate(small, convplan.LayerDistribution(1, 2, 2))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows
    assert any(r["action"].startswith("halo_send") for r in rows)
