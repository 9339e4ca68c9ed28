"""Policy Decision Record parsing, validation, signing payload and claim import."""

import copy
import json
from dataclasses import replace
from decimal import Decimal

import pytest

from canonical_crypto import intent_hash, keccak256, verify_signature
from conftest import AUDIENCE, CS2_CLOCK, CS2_EXPIRY, ISSUER_ADDRESS, ISSUER_ID, fixture_path
from errors import SchemaViolation, UncanonicalizableNumber
from pdr_model import (
    NO_VALUE,
    UNSIGNED,
    Decision,
    Modification,
    Operation,
    Outcome,
    attach_signature,
    format_timestamp,
    import_jwt_claims,
    parse_pdr,
    parse_timestamp,
    pdr_from_document,
    pdr_signing_payload,
    validate_pdr,
)
from schema_validation import read_json_file


def test_case_study_record(cs2_pdr, cs2_intent):
    assert cs2_pdr.issued_at == CS2_CLOCK
    assert cs2_pdr.expires_at == CS2_EXPIRY
    assert cs2_pdr.tis_hash == intent_hash(cs2_intent).to_text()
    assert cs2_pdr.decision.outcome == Outcome.APPROVED
    assert cs2_pdr.decision.risk_score == Decimal("0.5")
    bound = cs2_pdr.decision.bound_constraints
    assert bound.max_gas_price_wei == "60000000000"
    assert bound.tight_deadline == CS2_EXPIRY
    doc = cs2_pdr.to_json()
    assert doc["issuedAt"] == "2026-01-01T01:05:00Z"
    assert doc["expiresAt"] == "2026-01-01T01:10:00Z"
    assert doc["policyEngineSignature"]["alg"] == "ES256K"


def test_signature_covers_record_without_signature_member(cs2_pdr):
    payload = pdr_signing_payload(cs2_pdr)
    assert b"policyEngineSignature" not in payload
    assert b'"riskScore":0.5' in payload
    sig = cs2_pdr.policy_engine_signature
    assert sig.signer == ISSUER_ADDRESS
    assert verify_signature(keccak256(payload), sig.signature, ISSUER_ADDRESS)


def test_parse_of_canonical_bytes_preserves_the_record(cs2_pdr):
    parsed = parse_pdr(cs2_pdr.canonical_bytes())
    assert parsed == cs2_pdr
    assert pdr_signing_payload(parsed) == pdr_signing_payload(cs2_pdr)


def test_timestamps():
    assert format_timestamp(1767229800) == "2026-01-01T01:10:00Z"
    assert parse_timestamp("2026-01-01T01:10:00Z", "/expiresAt") == 1767229800
    for text in ["2026-01-01T01:10:00+00:00", "2026-01-01T01:10:00.000Z", "2026-01-01 01:10:00Z", "2026-13-01T00:00:00Z"]:
        with pytest.raises(SchemaViolation) as excinfo:
            parse_timestamp(text, "/expiresAt")
        assert excinfo.value.pointer == "/expiresAt"


def test_non_canonical_timestamp_in_document(cs2_pdr):
    doc = cs2_pdr.to_json()
    doc["expiresAt"] = "2026-01-01T01:10:00+00:00"
    with pytest.raises(SchemaViolation) as excinfo:
        pdr_from_document(doc)
    assert excinfo.value.pointer == "/expiresAt"


def _pointers(pdr):
    return [f.pointer for f in validate_pdr(pdr).findings]


def test_validate_pdr_findings(cs2_pdr):
    assert validate_pdr(cs2_pdr).ok
    assert _pointers(replace(cs2_pdr, expires_at=cs2_pdr.issued_at)) == ["/expiresAt"]
    assert _pointers(replace(cs2_pdr, pdr_id="nope")) == ["/pdrId"]
    assert _pointers(replace(cs2_pdr, tis_hash="0x1234")) == ["/tisHash"]

    rejected = replace(cs2_pdr.decision, outcome=Outcome.REJECTED, reason=None)
    assert _pointers(replace(cs2_pdr, decision=rejected)) == ["/decision/reason"]

    for risk in [Decimal("1.5"), Decimal("-0.1"), Decimal("0.1234567")]:
        risky = replace(cs2_pdr.decision, risk_score=risk)
        assert _pointers(replace(cs2_pdr, decision=risky)) == ["/decision/riskScore"]


def test_validate_modifications(cs2_pdr):
    test_cases = [
        (Modification("/preferences/privacyMode", Operation.REMOVE, "PRIVATE"), "/decision/modifiedParameters/0/value"),
        (Modification("/preferences", Operation.ADD), "/decision/modifiedParameters/0"),
        (Modification("preferences", Operation.ADD, {}), "/decision/modifiedParameters/0/path"),
        (Modification("/constraints/deadline", Operation.REPLACE, Decimal("1.5")), "/decision/modifiedParameters/0/value"),
    ]
    for mod, pointer in test_cases:
        decision = replace(cs2_pdr.decision, modified_parameters=(mod,))
        assert _pointers(replace(cs2_pdr, decision=decision)) == [pointer]

    ok = replace(cs2_pdr.decision, modified_parameters=(Modification("/preferences", Operation.REMOVE),))
    assert validate_pdr(replace(cs2_pdr, decision=ok)).ok
    assert Modification("/preferences", Operation.REMOVE).value is NO_VALUE
    assert "value" not in Modification("/preferences", Operation.REMOVE).to_json()


def test_risk_score_with_too_many_digits_cannot_be_serialized(cs2_pdr):
    decision = replace(cs2_pdr.decision, risk_score=Decimal("0.1234567"))
    with pytest.raises(UncanonicalizableNumber):
        replace(cs2_pdr, decision=decision).canonical_bytes()


def test_schema_rejects_unknown_members(cs2_pdr):
    doc = cs2_pdr.to_json()
    doc["decision"]["confidence"] = 1
    with pytest.raises(SchemaViolation) as excinfo:
        pdr_from_document(doc)
    assert excinfo.value.pointer == "/decision/confidence"


def test_schema_rejects_unknown_outcome(cs2_pdr):
    doc = cs2_pdr.to_json()
    doc["decision"]["outcome"] = "MAYBE"
    with pytest.raises(SchemaViolation) as excinfo:
        pdr_from_document(doc)
    assert excinfo.value.pointer == "/decision/outcome"


def _put(path, value):
    def mutate(doc):
        target = doc
        for key in path[:-1]:
            target = target[key]
        target[path[-1]] = value
    return mutate


def _drop(path):
    def mutate(doc):
        target = doc
        for key in path[:-1]:
            target = target[key]
        del target[path[-1]]
    return mutate


PDR_SCHEMA_CASES = [
    (_put(["tisHash"], "0x1234"), "/tisHash"),
    (_put(["decision", "riskScore"], 1.5), "/decision/riskScore"),
    (_put(["decision", "riskScore"], -0.1), "/decision/riskScore"),
    (
        _put(["decision", "modifiedParameters"], [{"path": "/preferences", "operation": "MERGE", "value": {}}]),
        "/decision/modifiedParameters/0/operation",
    ),
    (_put(["policyEngineSignature", "signer"], "0xabc"), "/policyEngineSignature/signer"),
    (_put(["policyEngineSignature", "signature"], "0xzz"), "/policyEngineSignature/signature"),
    (_drop(["policyEngineSignature", "signature"]), "/policyEngineSignature/signature"),
    (_drop(["audience"]), "/audience"),
    (_drop(["decision", "policyId"]), "/decision/policyId"),
    (_put(["note"], "hello"), "/note"),
    (_put(["version"], "1.1.0"), "/version"),
    (_put(["issuedAt"], "yesterday"), "/issuedAt"),
    (_put(["expiresAt"], format_timestamp(CS2_CLOCK)), "/expiresAt"),
    (_put(["expiresAt"], format_timestamp(CS2_CLOCK - 60)), "/expiresAt"),
    (_put(["decision", "boundConstraints", "tightDeadline"], 2 ** 53), "/decision/boundConstraints/tightDeadline"),
]


@pytest.mark.parametrize("mutate, pointer", PDR_SCHEMA_CASES)
def test_parse_pdr_names_the_offending_pointer(cs2_pdr, mutate, pointer):
    doc = cs2_pdr.to_json()
    doc["decision"]["riskScore"] = float(doc["decision"]["riskScore"])
    mutate(doc)
    with pytest.raises(SchemaViolation) as excinfo:
        parse_pdr(json.dumps(doc))
    assert excinfo.value.pointer == pointer


@pytest.fixture
def jwt_claims(cs2_intent):
    claims = read_json_file(fixture_path("case_study_2.jwt.json"))
    claims["intent_hash"] = intent_hash(cs2_intent).to_text()
    return claims


def test_import_jwt_claims(jwt_claims, issuer_key):
    doc = import_jwt_claims(jwt_claims, pdr_id="9b2f6d1e-8c4a-4f3b-a2d1-5e6f7a8b9c0d", issued_at=CS2_CLOCK, policy_id="case-study-2-rebalance")
    pdr = pdr_from_document(doc)
    assert pdr.issuer == ISSUER_ID
    assert pdr.audience == AUDIENCE
    assert pdr.subject == "0xUserAddress"
    assert pdr.issued_at == CS2_CLOCK
    assert pdr.expires_at == CS2_EXPIRY
    assert pdr.decision.outcome == Outcome.APPROVED
    assert pdr.decision.bound_constraints.max_gas_price_wei == "60000000000"
    assert pdr.policy_engine_signature == UNSIGNED

    signed = attach_signature(pdr, issuer_key)
    assert verify_signature(keccak256(pdr_signing_payload(signed)), signed.policy_engine_signature.signature, ISSUER_ADDRESS)


def test_import_jwt_rejection_gets_a_reason(jwt_claims):
    claims = copy.deepcopy(jwt_claims)
    claims["decision"] = "REJECT"
    doc = import_jwt_claims(claims, pdr_id="9b2f6d1e-8c4a-4f3b-a2d1-5e6f7a8b9c0d", issued_at=CS2_CLOCK, policy_id="p")
    pdr = pdr_from_document(doc)
    assert pdr.decision.outcome == Outcome.REJECTED
    assert pdr.decision.reason


def test_import_jwt_unknown_decision(jwt_claims):
    jwt_claims["decision"] = "ESCALATE"
    with pytest.raises(SchemaViolation) as excinfo:
        import_jwt_claims(jwt_claims, pdr_id="9b2f6d1e-8c4a-4f3b-a2d1-5e6f7a8b9c0d", issued_at=CS2_CLOCK, policy_id="p")
    assert excinfo.value.pointer == "/decision/outcome"


def test_decision_json_omits_absent_members():
    decision = Decision(outcome=Outcome.REJECTED, policy_id="p", reason="PerTxCap: too much")
    assert decision.to_json() == {"outcome": "REJECTED", "policyId": "p", "reason": "PerTxCap: too much"}
