"""Intent parsing, validation, legacy normalization and preview rendering."""

import copy
import json
from dataclasses import replace

import pytest

from conftest import USDC, fixture_path
from errors import MalformedJson, SchemaViolation, UnsupportedLegacyShape
from intent_model import (
    Constraints,
    Delegate,
    DelegateScope,
    Intent,
    Swap,
    Transfer,
    intent_from_document,
    normalize_legacy_intent,
    parse_intent,
    render_preview,
    validate_intent,
)
from schema_validation import read_json_file


@pytest.fixture
def cs2_doc():
    return read_json_file(fixture_path("case_study_2.tis.json"))


def test_case_study_legacy_normalizes_to_golden(cs2_intent):
    golden = intent_from_document(read_json_file(fixture_path("case_study_2.tis.json")))
    assert cs2_intent == golden
    assert isinstance(cs2_intent.action, Swap)
    assert cs2_intent.action.amount_in == "5000000000"
    assert cs2_intent.action.min_amount_out == "1500000000000000000"
    assert cs2_intent.action.token_in.address == "0xa0b86991c6218b36c1d19d4a2e9eb0ce3606eb48"
    assert cs2_intent.action.token_in.chain_id == 1
    assert cs2_intent.constraints.deadline == 1767230000
    assert cs2_intent.constraints.nonce is None


def test_legacy_transfer_normalizes_to_golden():
    intent = normalize_legacy_intent(read_json_file(fixture_path("legacy_transfer.json")))
    golden = intent_from_document(read_json_file(fixture_path("legacy_transfer.tis.json")))
    assert intent == golden
    assert intent.intent_id == "6f1c2b9e-3d4a-4e5b-8c7d-9e0f1a2b3c4d"
    assert intent.action.amount == "10000000"
    assert intent.action.token.chain_id == 8453
    assert intent.metadata.originator == "billing-agent"


def test_legacy_default_chain_id_is_configurable():
    raw = read_json_file(fixture_path("case_study_2.legacy.json"))
    intent = normalize_legacy_intent(raw, default_chain_id=8453)
    assert intent.action.token_in.chain_id == 8453
    assert intent.action.token_out.chain_id == 8453


def test_legacy_multi_step_action_is_unsupported():
    with pytest.raises(UnsupportedLegacyShape):
        normalize_legacy_intent(read_json_file(fixture_path("legacy_zap.json")))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda raw: raw["outputs"][0].update(constraint="EXACT"),
        lambda raw: raw["inputs"][0].update(constraint="MAXIMUM"),
        lambda raw: raw["inputs"].append(copy.deepcopy(raw["inputs"][0])),
        lambda raw: raw["inputs"][0].update(amount="-5"),
        lambda raw: raw["constraints"].pop("deadline"),
        lambda raw: raw.update(intentId="not-a-uuid"),
    ],
    ids=["exact-output", "maximum-input", "two-inputs", "negative-amount", "no-deadline", "bad-id"],
)
def test_legacy_shapes_outside_the_mapping(mutate):
    raw = read_json_file(fixture_path("case_study_2.legacy.json"))
    mutate(raw)
    with pytest.raises(UnsupportedLegacyShape):
        normalize_legacy_intent(raw)


def test_preview_is_rendered_from_fields(cs2_intent):
    preview = render_preview(cs2_intent)
    assert "SWAP" in preview
    assert "5000000000" in preview
    assert "1500000000000000000" in preview
    assert "2026-01-01T01:13:20Z" in preview
    # the legacy free-text preview is never echoed
    assert "rebalance portfolio" not in preview
    assert render_preview(cs2_intent) == preview


def test_preview_warns_on_unbounded_delegation():
    intent = Intent(
        intent_id="0f0e0d0c-0b0a-4908-8706-050403020100",
        action=Delegate(
            delegatee="0x4444444444444444444444444444444444444444",
            scope=DelegateScope(contracts=("0x5555555555555555555555555555555555555555",)),
        ),
        constraints=Constraints(deadline=1767230000),
    )
    assert "UNBOUNDED" in render_preview(intent)


def test_round_trip_through_canonical_document(cs2_intent):
    assert Intent.from_json(cs2_intent.to_json()) == cs2_intent
    assert "preferences" not in cs2_intent.to_json()
    assert "nonce" not in cs2_intent.to_json()["constraints"]


def test_null_exclusivity_is_not_reemitted(cs2_doc):
    cs2_doc["constraints"]["exclusivity"] = None
    intent = intent_from_document(cs2_doc)
    assert intent.constraints.exclusivity is None
    assert "exclusivity" not in intent.to_json()["constraints"]


def _set(path, value):
    def mutate(doc):
        target = doc
        for key in path[:-1]:
            target = target[key]
        target[path[-1]] = value
    return mutate


def _delete(path):
    def mutate(doc):
        target = doc
        for key in path[:-1]:
            target = target[key]
        del target[path[-1]]
    return mutate


SCHEMA_CASES = [
    (_set(["action", "amountIn"], "12a"), "/action/amountIn"),
    (_set(["action", "amountIn"], "007"), "/action/amountIn"),
    (_set(["action", "amountIn"], 5000000000), "/action/amountIn"),
    (_set(["action", "tokenIn", "address"], "0x1234"), "/action/tokenIn/address"),
    (_set(["action", "tokenIn", "chainId"], 0), "/action/tokenIn/chainId"),
    (_set(["action", "type"], "LEND"), "/action/type"),
    (_delete(["action", "type"]), "/action/type"),
    (_set(["action", "slippageBps"], 10001), "/action/slippageBps"),
    (_set(["foo"], 1), "/foo"),
    (_delete(["constraints", "deadline"]), "/constraints/deadline"),
    (_set(["constraints", "deadline"], -1), "/constraints/deadline"),
    (_set(["constraints", "nonce"], 7), "/constraints/nonce"),
    (_set(["constraints", "validFromBlock"], 10), None),
    (_set(["version"], "2.0.0"), "/version"),
    (_set(["intentId"], "not-a-uuid"), "/intentId"),
    (_set(["preferences"], {"privacyMode": "STEALTH"}), "/preferences/privacyMode"),
    (_set(["metadata"], {"createdAt": "yesterday"}), "/metadata/createdAt"),
    (_set(["metadata"], {"originChainId": 0}), "/metadata/originChainId"),
    (_set(["action", "tokenIn", "decimals"], 256), "/action/tokenIn/decimals"),
    (_set(["action", "tokenIn", "decimals"], 255), None),
    (_set(["action", "tokenOut", "name"], "Wrapped Ether"), "/action/tokenOut/name"),
    (_set(["action", "recipient"], "0xzz"), "/action/recipient"),
    (_set(["preferences"], {"executionSpeed": "TURBO"}), "/preferences/executionSpeed"),
    (_set(["preferences"], {"routing": "CHEAPEST"}), "/preferences/routing"),
    (_set(["constraints", "requiredSigner"], "0x1234"), "/constraints/requiredSigner"),
    (_set(["constraints", "exclusivity"], "solver"), "/constraints/exclusivity"),
    (_set(["action"], {"type": "DELEGATE", "delegatee": "0x" + "5a" * 20}), "/action/scope"),
    (_set(["constraints", "deadline"], 2 ** 53), "/constraints/deadline"),
    (_set(["constraints", "deadline"], 2 ** 53 - 1), None),
    (_set(["action", "tokenIn", "chainId"], 2 ** 60), "/action/tokenIn/chainId"),
]


@pytest.mark.parametrize("mutate, pointer", SCHEMA_CASES)
def test_schema_violations_name_the_offending_pointer(cs2_doc, mutate, pointer):
    mutate(cs2_doc)
    if pointer is None:
        intent_from_document(cs2_doc)
        return
    with pytest.raises(SchemaViolation) as excinfo:
        intent_from_document(cs2_doc)
    assert excinfo.value.pointer == pointer


def test_block_window_order_is_checked(cs2_doc):
    cs2_doc["constraints"].update(validFromBlock=20, validUntilBlock=10)
    with pytest.raises(SchemaViolation) as excinfo:
        intent_from_document(cs2_doc)
    assert excinfo.value.pointer == "/constraints"


def test_fractional_deadline_is_rejected(cs2_doc):
    text = json.dumps(cs2_doc).replace("1767230000", "1767230000.0")
    with pytest.raises(SchemaViolation) as excinfo:
        parse_intent(text)
    assert excinfo.value.pointer == "/constraints/deadline"


@pytest.mark.parametrize(
    "data",
    [
        b"",
        b"   ",
        b"{",
        b"\xff\xfe",
        b'{"version": "1.0.0", "version": "1.0.0"}',
        b'{"deadline": NaN}',
        b"[1, 2] [3]",
    ],
)
def test_malformed_json(data):
    with pytest.raises(MalformedJson):
        parse_intent(data)


def test_validate_intent_reports_programmatic_mistakes():
    intent = Intent(
        intent_id="6F1C2B9E-3D4A-4E5B-8C7D-9E0F1A2B3C4D",
        action=Transfer(token=USDC, to="0x5A5A5A5A5A5A5A5A5A5A5A5A5A5A5A5A5A5A5A5A", amount="0010"),
        constraints=Constraints(deadline=1767230000, max_gas_price_wei="abc"),
    )
    report = validate_intent(intent)
    assert not report.ok
    by_pointer = {f.pointer: f.rule for f in report.findings}
    assert by_pointer == {
        "/intentId": "uuid",
        "/action/to": "SemanticAddress",
        "/action/amount": "UintDecimal",
        "/constraints/maxGasPriceWei": "UintDecimal",
    }
    assert report.to_json()["ok"] is False


def test_validate_intent_accepts_well_formed_values(cs2_intent):
    assert validate_intent(cs2_intent).ok


def test_unsafe_integer_is_rejected_when_parsing_text(cs2_doc):
    text = json.dumps(cs2_doc).replace("1767230000", str(2 ** 53))
    with pytest.raises(SchemaViolation) as excinfo:
        parse_intent(text)
    assert excinfo.value.pointer == "/constraints/deadline"


def test_validate_intent_flags_unsafe_integers(cs2_intent):
    intent = replace(cs2_intent, constraints=replace(cs2_intent.constraints, deadline=2 ** 60))
    report = validate_intent(intent)
    assert [f.pointer for f in report.findings] == ["/constraints/deadline"]
