"""Shared pytest fixtures: deterministic keys, case-study documents, fixed clocks."""

import os

import pytest

from canonical_crypto import keygen
from intent_model import Token, normalize_legacy_intent
from policy_engine import EvaluationContext, evaluate, issue_pdr, load_policy
from schema_validation import read_json_file
from signer_gate import TrustAnchors

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")

# reference material, not part of the suite
collect_ignore = ["examples"]

ISSUER_ID = "https://policy.turnkey.com"
AUDIENCE = "https://signer.fireblocks.com"
ISSUER_ADDRESS = "0x7e5f4552091a69125d5dfcb7b8c2659029395bdf"
ROGUE_ADDRESS = "0x2b5ad5c4795c026514f8317c7a215e218dccd6cf"

USDC = Token(chain_id=1, address="0xa0b86991c6218b36c1d19d4a2e9eb0ce3606eb48", symbol="USDC", decimals=6)
WETH = Token(chain_id=1, address="0xc02aaa39b223fe8d0a0e5c4f27ead9083c756cc2", symbol="WETH", decimals=18)
SERVICE = "0x5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a5a"
SUBSCRIBER = "0x3333333333333333333333333333333333333333"

CS2_CLOCK = 1767229500
CS2_TTL = 300
CS2_DEADLINE = 1767230000
CS2_EXPIRY = 1767229800
CS2_PDR_ID = "9b2f6d1e-8c4a-4f3b-a2d1-5e6f7a8b9c0d"


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def seed(n: int) -> bytes:
    return n.to_bytes(32, "big")


@pytest.fixture
def issuer_key():
    return keygen(seed(1))


@pytest.fixture
def rogue_key():
    return keygen(seed(2))


@pytest.fixture
def anchors():
    return TrustAnchors.load(fixture_path("anchors.json"))


@pytest.fixture
def cs2_intent():
    return normalize_legacy_intent(read_json_file(fixture_path("case_study_2.legacy.json")))


@pytest.fixture
def cs2_policy():
    return load_policy(fixture_path("case_study_2.policy.json"))


@pytest.fixture
def cs1_policy():
    return load_policy(fixture_path("case_study_1.policy.json"))


@pytest.fixture
def cs2_context():
    return EvaluationContext(clock=CS2_CLOCK)


@pytest.fixture
def cs2_pdr(cs2_intent, cs2_policy, cs2_context, issuer_key):
    decision = evaluate(cs2_intent, cs2_policy, cs2_context, ttl_seconds=CS2_TTL)
    return issue_pdr(
        cs2_intent, decision, issuer_key, ISSUER_ID, AUDIENCE, CS2_TTL, cs2_context, pdr_id=CS2_PDR_ID
    )
