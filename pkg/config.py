"""
Configuration for the intent gate toolchain.

Values come from the environment (a local .env is loaded first), see env.sample.
"""

import os

from dotenv import load_dotenv

load_dotenv()

# Home directory for the registry journal, audit log and spend ledger
INTENT_GATE_HOME = os.environ.get(
    "INTENT_GATE_HOME", os.path.join(os.path.expanduser("~"), ".intent-gate")
)
REGISTRY_JOURNAL_FILE = os.environ.get("REGISTRY_JOURNAL_FILE", "registry.jsonl")
AUDIT_LOG_FILE = os.environ.get("AUDIT_LOG_FILE", "audit.jsonl")
SPEND_LEDGER_FILE = os.environ.get("SPEND_LEDGER_FILE", "spend-ledger.jsonl")

LOG_LEVEL = os.environ.get("INTENT_GATE_LOG_LEVEL", "INFO")

# Legacy (inputs/outputs shaped) intents usually omit the chain
LEGACY_DEFAULT_CHAIN_ID = int(os.environ.get("LEGACY_DEFAULT_CHAIN_ID", 1))

# Signer gate
CLOCK_SKEW_SECONDS = int(os.environ.get("CLOCK_SKEW_SECONDS", 30))
SIGNER_IDENTITY = os.environ.get("SIGNER_IDENTITY", "")

# Policy engine
POLICY_ISSUER_ID = os.environ.get("POLICY_ISSUER_ID", "https://policy.example.org")
DEFAULT_PDR_TTL_SECONDS = int(os.environ.get("DEFAULT_PDR_TTL_SECONDS", 300))
SIGNATURE_ALG = "ES256K"

SCHEMA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "schemas")


def home_path(name):
    """Path of a state file under INTENT_GATE_HOME."""
    return os.path.join(INTENT_GATE_HOME, name)
