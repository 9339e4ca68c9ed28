"""Conformance ladder classification and safety checklist audit."""

import itertools
from dataclasses import replace

import pytest

from conformance_audit import (
    CHECKLIST,
    CRITERIA,
    LADDER,
    DeploymentDescriptor,
    ItemStatus,
    KeyCustody,
    Level,
    audit_checklist,
    classify,
    load_descriptor,
)
from conftest import fixture_path
from errors import SchemaViolation
from schema_validation import read_json_file

FLAGS = (
    "on_chain_policy_modules",
    "function_allowlist",
    "contract_allowlist",
    "static_spend_limits",
    "off_chain_policy_engine",
    "mandatory_simulation",
    "dynamic_risk_scoring",
    "quorum_for_high_value",
    "recovery_revocation",
    "audit_logging",
    "private_orderflow",
)

LEVEL_RANK = {Level.L0: 0, Level.L1: 1, Level.L2: 2, Level.L3: 3}
CUSTODY_RANK = {KeyCustody.RAW_LOCAL: 0, KeyCustody.SESSION_SCOPED: 0, KeyCustody.MPC: 1, KeyCustody.TEE_HSM: 1}


def descriptor(custody, values):
    return DeploymentDescriptor(key_custody=custody, **dict(zip(FLAGS, values)))


@pytest.fixture(scope="module")
def lattice():
    """Level of every descriptor: all 2^11 flag combinations under each custody."""
    levels = {}
    for custody in KeyCustody:
        for values in itertools.product((False, True), repeat=len(FLAGS)):
            levels[(custody, values)] = classify(descriptor(custody, values))
    return levels


@pytest.mark.parametrize(
    "name, level",
    [("l0_raw_key.json", Level.L0), ("l2_session_key.json", Level.L2), ("l3_mpc.json", Level.L3)],
)
def test_reference_descriptors(name, level):
    report = classify(load_descriptor(fixture_path("descriptors", name)))
    assert report.level == level


def test_l0_lists_the_l1_controls():
    report = classify(load_descriptor(fixture_path("descriptors", "l0_raw_key.json")))
    assert report.satisfied == ()
    assert report.missing_for_next == tuple(cid for cid, lvl, _, _ in CRITERIA if lvl == Level.L1)


def test_l2_lists_what_l3_still_needs():
    report = classify(load_descriptor(fixture_path("descriptors", "l2_session_key.json")))
    assert report.missing_for_next == (
        "L3.hardware-or-mpc-custody",
        "L3.quorum-for-high-value",
        "L3.recovery-revocation",
    )
    doc = report.to_json()
    assert doc["level"] == "L2"
    assert doc["name"] == "session-key agent with policy engine"
    assert "missingForNext" in doc
    assert "Conformance level: L2" in report.to_table()


def test_l3_has_nothing_missing():
    report = classify(load_descriptor(fixture_path("descriptors", "l3_mpc.json")))
    assert report.missing_for_next == ()
    assert len(report.satisfied) == len(CRITERIA)


def test_lattice_is_monotone(lattice):
    for (custody, values), report in lattice.items():
        for i, value in enumerate(values):
            if value:
                continue
            raised = values[:i] + (True,) + values[i + 1:]
            assert LEVEL_RANK[lattice[(custody, raised)].level] >= LEVEL_RANK[report.level]
        for stronger in KeyCustody:
            if CUSTODY_RANK[stronger] > CUSTODY_RANK[custody]:
                assert LEVEL_RANK[lattice[(stronger, values)].level] >= LEVEL_RANK[report.level]


def test_lattice_is_cumulative(lattice):
    for report in lattice.values():
        rank = LEVEL_RANK[report.level]
        met = set(report.satisfied)
        for cid, level, _, _ in CRITERIA:
            if LEVEL_RANK[level] <= rank:
                assert cid in met
        if report.level != Level.L3:
            next_level = LADDER[rank]
            expected = tuple(cid for cid, lvl, _, _ in CRITERIA if lvl == next_level and cid not in met)
            assert report.missing_for_next == expected
            assert expected


def test_orderflow_and_logging_do_not_change_the_level():
    base = load_descriptor(fixture_path("descriptors", "l3_mpc.json"))
    assert classify(replace(base, private_orderflow=False, audit_logging=False)).level == Level.L3


def test_session_keys_do_not_reach_l3():
    base = load_descriptor(fixture_path("descriptors", "l3_mpc.json"))
    assert classify(replace(base, key_custody=KeyCustody.SESSION_SCOPED)).level == Level.L2
    assert classify(replace(base, key_custody=KeyCustody.TEE_HSM)).level == Level.L3


def test_descriptor_schema():
    doc = read_json_file(fixture_path("descriptors", "l2_session_key.json"))
    del doc["recoveryRevocation"]
    with pytest.raises(SchemaViolation) as excinfo:
        load_descriptor(doc)
    assert excinfo.value.pointer == "/recoveryRevocation"

    doc = read_json_file(fixture_path("descriptors", "l2_session_key.json"))
    doc["keyCustody"] = "PAPER_WALLET"
    with pytest.raises(SchemaViolation) as excinfo:
        load_descriptor(doc)
    assert excinfo.value.pointer == "/keyCustody"


# ---------------------------------------------------------------------------
# Checklist
# ---------------------------------------------------------------------------

def test_checklist_shape():
    assert sum(len(q) for q in CHECKLIST.values()) == 45
    assert list(CHECKLIST) == ["Observe", "Reason", "Construct", "Authorize", "Execute", "Verify & Recover", "General"]


def test_checklist_for_session_key_deployment():
    report = audit_checklist(load_descriptor(fixture_path("descriptors", "l2_session_key.json")))
    assert len(report.items) == 45
    assert report.count(ItemStatus.NOT_MACHINE_CHECKABLE) == 31
    failing = {item.item_id for item in report.failures}
    assert "Authorize 7" in failing
    assert failing == {
        "Authorize 5",
        "Authorize 7",
        "Authorize 8",
        "Authorize 10",
        "Verify & Recover 4",
    }
    summary = report.to_json()["summary"]
    assert summary == {"PASS": 9, "FAIL": 5, "NOT_MACHINE_CHECKABLE": 31}


def test_checklist_for_fully_controlled_deployment():
    report = audit_checklist(load_descriptor(fixture_path("descriptors", "l3_mpc.json")))
    assert report.failures == []
    assert report.count(ItemStatus.PASS) == 14


def test_checklist_private_orderflow_item():
    base = load_descriptor(fixture_path("descriptors", "l3_mpc.json"))
    report = audit_checklist(replace(base, private_orderflow=False))
    assert [item.item_id for item in report.failures] == ["Execute 1"]
    assert "Execute 1" in report.to_table()
