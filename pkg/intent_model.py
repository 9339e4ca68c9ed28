"""
Transaction Intent Schema (TIS) model.

Typed, immutable intents with:
- parse_intent(): strict wire parsing (schema + typed invariants)
- validate_intent(): findings for programmatically built values
- normalize_legacy_intent(): inputs/outputs shaped payloads to the action variants
- render_preview(): a preview regenerated from structured fields, never trusted from input
"""

import logging
import re
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Tuple, Union

from rfc3339_validator import validate_rfc3339

import config
from errors import SchemaViolation, UnsupportedLegacyShape
from schema_validation import MAX_SAFE_INTEGER, load_json, validate_document

logger = logging.getLogger(__name__)

TIS_VERSION = "1.0.0"

ADDRESS_RE = re.compile(r"^0x[a-fA-F0-9]{40}$")
UINT_RE = re.compile(r"^[0-9]+$")

PRIVACY_MODES = ("PUBLIC", "PRIVATE")
EXECUTION_SPEEDS = ("FAST", "NORMAL", "SLOW")
ROUTINGS = ("BEST_PRICE", "MIN_GAS", "MIN_RISK")


def _drop_none(d: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in d.items() if v is not None}


def _lower(address: Optional[str]) -> Optional[str]:
    return address.lower() if isinstance(address, str) else address


def _tuple(items) -> Optional[tuple]:
    return tuple(items) if items is not None else None


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    chain_id: int
    address: str
    symbol: Optional[str] = None
    decimals: Optional[int] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "chainId": self.chain_id,
            "address": self.address,
            "symbol": self.symbol,
            "decimals": self.decimals,
        })

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "Token":
        return cls(
            chain_id=doc["chainId"],
            address=_lower(doc["address"]),
            symbol=doc.get("symbol"),
            decimals=doc.get("decimals"),
        )

    @property
    def key(self) -> Tuple[int, str]:
        return (self.chain_id, self.address.lower())


@dataclass(frozen=True)
class Swap:
    token_in: Token
    token_out: Token
    amount_in: str
    min_amount_out: str
    slippage_bps: Optional[int] = None
    recipient: Optional[str] = None

    type = "SWAP"

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "type": self.type,
            "tokenIn": self.token_in.to_json(),
            "tokenOut": self.token_out.to_json(),
            "amountIn": self.amount_in,
            "minAmountOut": self.min_amount_out,
            "slippageBps": self.slippage_bps,
            "recipient": self.recipient,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(
            token_in=Token.from_json(doc["tokenIn"]),
            token_out=Token.from_json(doc["tokenOut"]),
            amount_in=doc["amountIn"],
            min_amount_out=doc["minAmountOut"],
            slippage_bps=doc.get("slippageBps"),
            recipient=_lower(doc.get("recipient")),
        )


@dataclass(frozen=True)
class Transfer:
    token: Token
    to: str
    amount: str
    memo: Optional[str] = None

    type = "TRANSFER"

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "type": self.type,
            "token": self.token.to_json(),
            "to": self.to,
            "amount": self.amount,
            "memo": self.memo,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(
            token=Token.from_json(doc["token"]),
            to=_lower(doc["to"]),
            amount=doc["amount"],
            memo=doc.get("memo"),
        )


@dataclass(frozen=True)
class DelegateScope:
    contracts: Optional[Tuple[str, ...]] = None
    functions: Optional[Tuple[str, ...]] = None
    max_value_wei: Optional[str] = None
    valid_until: Optional[int] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "contracts": list(self.contracts) if self.contracts is not None else None,
            "functions": list(self.functions) if self.functions is not None else None,
            "maxValueWei": self.max_value_wei,
            "validUntil": self.valid_until,
        })

    @classmethod
    def from_json(cls, doc):
        contracts = doc.get("contracts")
        return cls(
            contracts=tuple(_lower(c) for c in contracts) if contracts is not None else None,
            functions=_tuple(doc.get("functions")),
            max_value_wei=doc.get("maxValueWei"),
            valid_until=doc.get("validUntil"),
        )


@dataclass(frozen=True)
class Delegate:
    delegatee: str
    scope: Optional[DelegateScope]

    type = "DELEGATE"

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "type": self.type,
            "delegatee": self.delegatee,
            "scope": self.scope.to_json() if self.scope is not None else None,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(delegatee=_lower(doc["delegatee"]), scope=DelegateScope.from_json(doc["scope"]))


Action = Union[Swap, Transfer, Delegate]
ACTION_TYPES = {cls.type: cls for cls in (Swap, Transfer, Delegate)}


@dataclass(frozen=True)
class Constraints:
    deadline: int
    nonce: Optional[str] = None
    valid_from_block: Optional[int] = None
    valid_until_block: Optional[int] = None
    max_gas_price_wei: Optional[str] = None
    required_signer: Optional[str] = None
    exclusivity: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "nonce": self.nonce,
            "deadline": self.deadline,
            "validFromBlock": self.valid_from_block,
            "validUntilBlock": self.valid_until_block,
            "maxGasPriceWei": self.max_gas_price_wei,
            "requiredSigner": self.required_signer,
            "exclusivity": self.exclusivity,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(
            deadline=doc["deadline"],
            nonce=doc.get("nonce"),
            valid_from_block=doc.get("validFromBlock"),
            valid_until_block=doc.get("validUntilBlock"),
            max_gas_price_wei=doc.get("maxGasPriceWei"),
            required_signer=_lower(doc.get("requiredSigner")),
            # null is the same as absent
            exclusivity=_lower(doc.get("exclusivity")),
        )


@dataclass(frozen=True)
class Preferences:
    privacy_mode: Optional[str] = None
    execution_speed: Optional[str] = None
    routing: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "privacyMode": self.privacy_mode,
            "executionSpeed": self.execution_speed,
            "routing": self.routing,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(
            privacy_mode=doc.get("privacyMode"),
            execution_speed=doc.get("executionSpeed"),
            routing=doc.get("routing"),
        )


@dataclass(frozen=True)
class Metadata:
    originator: Optional[str] = None
    created_at: Optional[str] = None
    origin_chain_id: Optional[int] = None
    tags: Optional[Tuple[str, ...]] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "originator": self.originator,
            "createdAt": self.created_at,
            "originChainId": self.origin_chain_id,
            "tags": list(self.tags) if self.tags is not None else None,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(
            originator=doc.get("originator"),
            created_at=doc.get("createdAt"),
            origin_chain_id=doc.get("originChainId"),
            tags=_tuple(doc.get("tags")),
        )


@dataclass(frozen=True)
class Intent:
    intent_id: str
    action: Action
    constraints: Constraints
    version: str = TIS_VERSION
    metadata: Optional[Metadata] = None
    preferences: Optional[Preferences] = None

    def to_json(self) -> Dict[str, Any]:
        """The serialized document (absent optionals omitted)."""
        return _drop_none({
            "version": self.version,
            "intentId": self.intent_id,
            "metadata": self.metadata.to_json() if self.metadata is not None else None,
            "action": self.action.to_json(),
            "constraints": self.constraints.to_json(),
            "preferences": self.preferences.to_json() if self.preferences is not None else None,
        })

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "Intent":
        """Typed view of a schema-valid document; addresses and ids are lowercased."""
        action_cls = ACTION_TYPES[doc["action"]["type"]]
        return cls(
            version=doc["version"],
            intent_id=doc["intentId"].lower(),
            metadata=Metadata.from_json(doc["metadata"]) if "metadata" in doc else None,
            action=action_cls.from_json(doc["action"]),
            constraints=Constraints.from_json(doc["constraints"]),
            preferences=Preferences.from_json(doc["preferences"]) if "preferences" in doc else None,
        )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    pointer: str
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: Tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_json(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "findings": [
                {"pointer": f.pointer, "rule": f.rule, "message": f.message} for f in self.findings
            ],
        }


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


class _Checker:
    """Collects findings while walking a typed value."""

    def __init__(self):
        self.findings: List[Finding] = []

    def add(self, pointer, rule, message):
        self.findings.append(Finding(pointer, rule, message))

    def address(self, pointer, value):
        if not isinstance(value, str) or not ADDRESS_RE.match(value):
            self.add(pointer, "SemanticAddress", f"{value!r} is not a 0x-prefixed 20-byte address")
        elif value != value.lower():
            self.add(pointer, "SemanticAddress", f"{value!r} is not in lowercase canonical form")

    def uint(self, pointer, value):
        if not isinstance(value, str) or not UINT_RE.match(value):
            self.add(pointer, "UintDecimal", f"{value!r} is not a base-10 unsigned integer string")
        elif len(value) > 1 and value.startswith("0"):
            self.add(pointer, "UintDecimal", f"{value!r} has leading zeros")

    def int_range(self, pointer, value, low, high=MAX_SAFE_INTEGER, rule="range"):
        if not _is_int(value):
            self.add(pointer, rule, f"{value!r} is not an integer")
        elif value < low or value > high:
            bound = f"[{low}, {high}]"
            self.add(pointer, rule, f"{value} is outside {bound}")

    def text(self, pointer, value):
        if not isinstance(value, str):
            self.add(pointer, "type", f"{value!r} is not a string")

    def enum(self, pointer, value, allowed):
        if value not in allowed:
            self.add(pointer, "enum", f"{value!r} is not one of {', '.join(allowed)}")

    def token(self, pointer, token):
        if not isinstance(token, Token):
            self.add(pointer, "Token", "token is missing")
            return
        self.int_range(f"{pointer}/chainId", token.chain_id, 1, rule="Token")
        self.address(f"{pointer}/address", token.address)
        if token.symbol is not None:
            self.text(f"{pointer}/symbol", token.symbol)
        if token.decimals is not None:
            self.int_range(f"{pointer}/decimals", token.decimals, 0, 255, rule="Token")


def _check_action(c: _Checker, action):
    if isinstance(action, Swap):
        c.token("/action/tokenIn", action.token_in)
        c.token("/action/tokenOut", action.token_out)
        c.uint("/action/amountIn", action.amount_in)
        c.uint("/action/minAmountOut", action.min_amount_out)
        if action.slippage_bps is not None:
            c.int_range("/action/slippageBps", action.slippage_bps, 0, 10000, rule="slippageBps")
        if action.recipient is not None:
            c.address("/action/recipient", action.recipient)
    elif isinstance(action, Transfer):
        c.token("/action/token", action.token)
        c.address("/action/to", action.to)
        c.uint("/action/amount", action.amount)
        if action.memo is not None:
            c.text("/action/memo", action.memo)
    elif isinstance(action, Delegate):
        c.address("/action/delegatee", action.delegatee)
        scope = action.scope
        if scope is None:
            c.add("/action/scope", "required", "delegate scope is required")
            return
        for i, contract in enumerate(scope.contracts or ()):
            c.address(f"/action/scope/contracts/{i}", contract)
        for i, fn in enumerate(scope.functions or ()):
            c.text(f"/action/scope/functions/{i}", fn)
        if scope.max_value_wei is not None:
            c.uint("/action/scope/maxValueWei", scope.max_value_wei)
        if scope.valid_until is not None:
            c.int_range("/action/scope/validUntil", scope.valid_until, 0)
    else:
        c.add("/action/type", "Action", f"unsupported action {type(action).__name__}")


def _check_constraints(c: _Checker, k: Constraints):
    if not isinstance(k, Constraints):
        c.add("/constraints", "required", "constraints are required")
        return
    c.int_range("/constraints/deadline", k.deadline, 0, rule="deadline")
    if k.nonce is not None:
        c.uint("/constraints/nonce", k.nonce)
    if k.valid_from_block is not None:
        c.int_range("/constraints/validFromBlock", k.valid_from_block, 0)
    if k.valid_until_block is not None:
        c.int_range("/constraints/validUntilBlock", k.valid_until_block, 0)
    if (
        _is_int(k.valid_from_block)
        and _is_int(k.valid_until_block)
        and k.valid_from_block > k.valid_until_block
    ):
        c.add(
            "/constraints",
            "blockWindow",
            f"validFromBlock {k.valid_from_block} is after validUntilBlock {k.valid_until_block}",
        )
    if k.max_gas_price_wei is not None:
        c.uint("/constraints/maxGasPriceWei", k.max_gas_price_wei)
    if k.required_signer is not None:
        c.address("/constraints/requiredSigner", k.required_signer)
    if k.exclusivity is not None:
        c.address("/constraints/exclusivity", k.exclusivity)


def validate_intent(intent: Intent) -> ValidationReport:
    """Re-check every type invariant on an already-typed intent."""
    c = _Checker()
    if intent.version != TIS_VERSION:
        c.add("/version", "version", f"version must be {TIS_VERSION}, got {intent.version!r}")
    try:
        canonical = str(uuid.UUID(intent.intent_id))
        if canonical != intent.intent_id:
            c.add("/intentId", "uuid", f"{intent.intent_id!r} is not in canonical lowercase UUID form")
    except (ValueError, AttributeError, TypeError):
        c.add("/intentId", "uuid", f"{intent.intent_id!r} is not a UUID")

    if intent.metadata is not None:
        m = intent.metadata
        if m.originator is not None:
            c.text("/metadata/originator", m.originator)
        if m.created_at is not None and not (
            isinstance(m.created_at, str) and validate_rfc3339(m.created_at)
        ):
            c.add("/metadata/createdAt", "date-time", f"{m.created_at!r} is not an RFC 3339 timestamp")
        if m.origin_chain_id is not None:
            c.int_range("/metadata/originChainId", m.origin_chain_id, 1)
        for i, tag in enumerate(m.tags or ()):
            c.text(f"/metadata/tags/{i}", tag)

    _check_action(c, intent.action)
    _check_constraints(c, intent.constraints)

    if intent.preferences is not None:
        p = intent.preferences
        if p.privacy_mode is not None:
            c.enum("/preferences/privacyMode", p.privacy_mode, PRIVACY_MODES)
        if p.execution_speed is not None:
            c.enum("/preferences/executionSpeed", p.execution_speed, EXECUTION_SPEEDS)
        if p.routing is not None:
            c.enum("/preferences/routing", p.routing, ROUTINGS)

    return ValidationReport(tuple(c.findings))


def intent_from_document(doc: Any) -> Intent:
    """Schema-check a decoded document and build the typed intent.

    Raises:
        SchemaViolation: first violation in pointer order
    """
    validate_document("tis", doc)
    intent = Intent.from_json(doc)
    report = validate_intent(intent)
    if not report.ok:
        first = report.findings[0]
        raise SchemaViolation(first.pointer, f"{first.rule}: {first.message}")
    return intent


def parse_intent(data: Union[bytes, str]) -> Intent:
    """Parse UTF-8 JSON into a typed Intent.

    Raises:
        MalformedJson: the bytes are not a single strict JSON document
        SchemaViolation: the document breaks a TIS constraint
    """
    return intent_from_document(load_json(data))


# ---------------------------------------------------------------------------
# Legacy normalization
# ---------------------------------------------------------------------------

LEGACY_ACTIONS = ("SWAP", "TRANSFER")
_LEGACY_METADATA_KEYS = ("originator", "createdAt", "originChainId", "tags")


def _legacy_token(raw, chain_id: int, where: str) -> Dict[str, Any]:
    if isinstance(raw, str):
        return {"chainId": chain_id, "address": raw.lower()}
    if isinstance(raw, dict) and "address" in raw:
        token = {k: raw[k] for k in ("chainId", "address", "symbol", "decimals") if k in raw}
        token.setdefault("chainId", chain_id)
        if isinstance(token["address"], str):
            token["address"] = token["address"].lower()
        return token
    raise UnsupportedLegacyShape(f"{where}: token must be an address or a token object")


def _legacy_amount(raw, where: str) -> str:
    if isinstance(raw, str) and UINT_RE.match(raw):
        return str(int(raw))
    if isinstance(raw, int) and not isinstance(raw, bool) and raw >= 0:
        return str(raw)
    raise UnsupportedLegacyShape(f"{where}: amount {raw!r} is not an unsigned integer")


def _legacy_leg(entries, expected: str, where: str) -> Dict[str, Any]:
    if not isinstance(entries, list) or len(entries) != 1:
        raise UnsupportedLegacyShape(f"{where}: exactly one entry is supported")
    entry = entries[0]
    if not isinstance(entry, dict):
        raise UnsupportedLegacyShape(f"{where}/0: entry must be an object")
    constraint = entry.get("constraint")
    if constraint != expected:
        raise UnsupportedLegacyShape(f"{where}/0: constraint {constraint!r} is not supported (need {expected})")
    return entry


def normalize_legacy_intent(raw: Any, default_chain_id: Optional[int] = None) -> Intent:
    """Map an inputs/outputs shaped intent onto the action variants.

    SWAP needs one EXACT input and one MINIMUM output; TRANSFER needs one EXACT
    input and a `recipient` (or `to`). Everything else, multi-step actions
    included, is reported rather than translated.

    Raises:
        UnsupportedLegacyShape
    """
    if isinstance(raw, (bytes, str)):
        raw = load_json(raw)
    if not isinstance(raw, dict):
        raise UnsupportedLegacyShape("legacy intent must be a JSON object")

    action = raw.get("action")
    if action not in LEGACY_ACTIONS:
        raise UnsupportedLegacyShape(f"legacy action {action!r} cannot be expressed as a single action")

    legacy_constraints = raw.get("constraints")
    if not isinstance(legacy_constraints, dict) or "deadline" not in legacy_constraints:
        raise UnsupportedLegacyShape("legacy intent has no constraints.deadline")
    chain_id = legacy_constraints.get("chainId")
    if chain_id is None:
        chain_id = default_chain_id if default_chain_id is not None else config.LEGACY_DEFAULT_CHAIN_ID

    source = _legacy_leg(raw.get("inputs"), "EXACT", "/inputs")
    if action == "SWAP":
        target = _legacy_leg(raw.get("outputs"), "MINIMUM", "/outputs")
        action_doc = {
            "type": "SWAP",
            "tokenIn": _legacy_token(source.get("token"), chain_id, "/inputs/0/token"),
            "tokenOut": _legacy_token(target.get("token"), chain_id, "/outputs/0/token"),
            "amountIn": _legacy_amount(source.get("amount"), "/inputs/0/amount"),
            "minAmountOut": _legacy_amount(target.get("amount"), "/outputs/0/amount"),
        }
        if raw.get("recipient") is not None:
            action_doc["recipient"] = str(raw["recipient"]).lower()
    else:
        if raw.get("outputs"):
            raise UnsupportedLegacyShape("/outputs: a transfer has no expected outputs")
        recipient = raw.get("recipient", raw.get("to"))
        if not isinstance(recipient, str):
            raise UnsupportedLegacyShape("legacy transfer names no recipient")
        action_doc = {
            "type": "TRANSFER",
            "token": _legacy_token(source.get("token"), chain_id, "/inputs/0/token"),
            "to": recipient.lower(),
            "amount": _legacy_amount(source.get("amount"), "/inputs/0/amount"),
        }
        if isinstance(raw.get("memo"), str):
            action_doc["memo"] = raw["memo"]

    constraints = {"deadline": legacy_constraints["deadline"]}
    for key in ("nonce", "maxGasPriceWei", "requiredSigner", "validFromBlock", "validUntilBlock"):
        if legacy_constraints.get(key) is not None:
            constraints[key] = legacy_constraints[key]
    if isinstance(constraints.get("requiredSigner"), str):
        constraints["requiredSigner"] = constraints["requiredSigner"].lower()
    if legacy_constraints.get("exclusivity") is not None:
        constraints["exclusivity"] = str(legacy_constraints["exclusivity"]).lower()

    doc = {
        "version": TIS_VERSION,
        "intentId": raw.get("intentId"),
        "action": action_doc,
        "constraints": constraints,
    }

    legacy_metadata = raw.get("metadata")
    if isinstance(legacy_metadata, dict):
        kept = {k: legacy_metadata[k] for k in _LEGACY_METADATA_KEYS if k in legacy_metadata}
        dropped = sorted(set(legacy_metadata) - set(kept))
        if dropped:
            logger.warning(f"⚠️ Dropping legacy metadata keys: {', '.join(dropped)}")
        if kept:
            doc["metadata"] = kept
    if isinstance(raw.get("preferences"), dict):
        doc["preferences"] = raw["preferences"]

    try:
        intent = intent_from_document(doc)
    except SchemaViolation as e:
        raise UnsupportedLegacyShape(f"normalized intent is invalid at {e.pointer or '(root)'}: {e.reason}") from e
    logger.info(f"✅ Normalized legacy {action} intent {intent.intent_id}")
    return intent


# ---------------------------------------------------------------------------
# Preview
# ---------------------------------------------------------------------------

def format_utc(ts: int) -> str:
    try:
        return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    except (OverflowError, ValueError, OSError):
        return f"unix {ts}"


def _token_label(token: Token) -> str:
    if token.symbol:
        return f"{token.symbol} ({token.address}) on chain {token.chain_id}"
    return f"{token.address} on chain {token.chain_id}"


def render_preview(intent: Intent) -> str:
    """Deterministic one-paragraph description built from structured fields."""
    action = intent.action
    sentences = []
    if isinstance(action, Swap):
        line = (
            f"SWAP amountIn {action.amount_in} of {_token_label(action.token_in)} "
            f"for at least minAmountOut {action.min_amount_out} of {_token_label(action.token_out)}"
        )
        if action.slippage_bps is not None:
            line += f", max slippage {action.slippage_bps} bps"
        if action.recipient:
            line += f", paid to {action.recipient}"
        sentences.append(line)
    elif isinstance(action, Transfer):
        line = f"TRANSFER amount {action.amount} of {_token_label(action.token)} to {action.to}"
        if action.memo:
            line += f' with memo "{action.memo}"'
        sentences.append(line)
    else:
        scope = action.scope or DelegateScope()
        line = (
            f"DELEGATE to {action.delegatee} over {len(scope.contracts or ())} contract(s) "
            f"and {len(scope.functions or ())} function(s)"
        )
        if scope.max_value_wei is not None:
            line += f", value capped at {scope.max_value_wei} wei"
        else:
            line += ", WARNING: value is UNBOUNDED"
        if scope.valid_until is not None:
            line += f", until {format_utc(scope.valid_until)}"
        sentences.append(line)

    k = intent.constraints
    sentences.append(f"Deadline {format_utc(k.deadline)}")
    if k.nonce is not None:
        sentences.append(f"Nonce {k.nonce}")
    if k.max_gas_price_wei is not None:
        sentences.append(f"Gas price at most {k.max_gas_price_wei} wei")
    if k.required_signer is not None:
        sentences.append(f"Must be signed by {k.required_signer}")
    if k.exclusivity is not None:
        sentences.append(f"Exclusive to {k.exclusivity}")
    if intent.preferences is not None and intent.preferences.privacy_mode:
        sentences.append(f"Orderflow {intent.preferences.privacy_mode}")
    return ". ".join(sentences) + "."
