"""
Policy Decision Record (PDR) model.

A PDR is the policy engine's signed statement about exactly one intent hash.
The signature covers the canonical record with the whole
`policyEngineSignature` member removed.
"""

import calendar
import logging
import re
import time
import uuid
from dataclasses import dataclass, replace
from decimal import Decimal
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import config
from canonical_crypto import Keypair, canonicalize, keccak256, sign_digest
from errors import SchemaViolation
from intent_model import ADDRESS_RE, UINT_RE, Finding, ValidationReport
from schema_validation import load_json, validate_document

logger = logging.getLogger(__name__)

PDR_VERSION = "1.0.0"
RISK_SCORE_POINTER = "/decision/riskScore"
FLOAT_POINTERS = frozenset({RISK_SCORE_POINTER})

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$")
_DIGEST_RE = re.compile(r"^0x[a-fA-F0-9]{64}$")
_HEX_RE = re.compile(r"^0x[a-fA-F0-9]+$")


class Outcome(str, Enum):
    APPROVED = "APPROVED"
    REJECTED = "REJECTED"


class Operation(str, Enum):
    ADD = "ADD"
    REPLACE = "REPLACE"
    REMOVE = "REMOVE"


class _NoValue:
    """Marks a modification that carries no `value` member."""

    def __repr__(self):
        return "NO_VALUE"


NO_VALUE = _NoValue()


def format_timestamp(ts: int) -> str:
    return time.strftime(TIMESTAMP_FORMAT, time.gmtime(ts))


def parse_timestamp(text: str, pointer: str) -> int:
    """Unix seconds from the canonical `YYYY-MM-DDTHH:MM:SSZ` spelling only."""
    if not isinstance(text, str) or not _TIMESTAMP_RE.match(text):
        raise SchemaViolation(pointer, f"{text!r} is not a canonical UTC timestamp ({TIMESTAMP_FORMAT})")
    try:
        return calendar.timegm(time.strptime(text, TIMESTAMP_FORMAT))
    except ValueError as e:
        raise SchemaViolation(pointer, f"{text!r} is not a valid timestamp") from e


def _drop_none(d):
    return {k: v for k, v in d.items() if v is not None}


@dataclass(frozen=True)
class Modification:
    path: str
    operation: Operation
    value: Any = NO_VALUE

    def to_json(self) -> Dict[str, Any]:
        doc = {"path": self.path, "operation": Operation(self.operation).value}
        if self.value is not NO_VALUE:
            doc["value"] = self.value
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(
            path=doc["path"],
            operation=Operation(doc["operation"]),
            value=doc["value"] if "value" in doc else NO_VALUE,
        )


@dataclass(frozen=True)
class BoundConstraints:
    max_gas_price_wei: Optional[str] = None
    max_value_wei: Optional[str] = None
    tight_deadline: Optional[int] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "maxGasPriceWei": self.max_gas_price_wei,
            "maxValueWei": self.max_value_wei,
            "tightDeadline": self.tight_deadline,
        })

    @classmethod
    def from_json(cls, doc):
        return cls(
            max_gas_price_wei=doc.get("maxGasPriceWei"),
            max_value_wei=doc.get("maxValueWei"),
            tight_deadline=doc.get("tightDeadline"),
        )

    @property
    def empty(self) -> bool:
        return self.max_gas_price_wei is None and self.max_value_wei is None and self.tight_deadline is None


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    policy_id: str
    reason: Optional[str] = None
    risk_score: Optional[Decimal] = None
    bound_constraints: Optional[BoundConstraints] = None
    modified_parameters: Optional[Tuple[Modification, ...]] = None

    @property
    def approved(self) -> bool:
        return self.outcome == Outcome.APPROVED

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({
            "outcome": Outcome(self.outcome).value,
            "policyId": self.policy_id,
            "reason": self.reason,
            "riskScore": self.risk_score,
            "boundConstraints": self.bound_constraints.to_json() if self.bound_constraints is not None else None,
            "modifiedParameters": (
                [m.to_json() for m in self.modified_parameters]
                if self.modified_parameters is not None
                else None
            ),
        })

    @classmethod
    def from_json(cls, doc):
        risk = doc.get("riskScore")
        mods = doc.get("modifiedParameters")
        return cls(
            outcome=Outcome(doc["outcome"]),
            policy_id=doc["policyId"],
            reason=doc.get("reason"),
            risk_score=Decimal(str(risk)) if risk is not None else None,
            bound_constraints=BoundConstraints.from_json(doc["boundConstraints"]) if "boundConstraints" in doc else None,
            modified_parameters=tuple(Modification.from_json(m) for m in mods) if mods is not None else None,
        )


@dataclass(frozen=True)
class PolicyEngineSignature:
    signer: str
    signature: str
    alg: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        return _drop_none({"signer": self.signer, "alg": self.alg, "signature": self.signature})

    @classmethod
    def from_json(cls, doc):
        return cls(signer=doc["signer"].lower(), signature=doc["signature"], alg=doc.get("alg"))


# Placeholder for records that are not signed yet
UNSIGNED = PolicyEngineSignature(signer="0x" + "00" * 20, signature="0x00")


@dataclass(frozen=True)
class PolicyDecisionRecord:
    pdr_id: str
    issuer: str
    audience: str
    issued_at: int
    expires_at: int
    tis_hash: str
    decision: Decision
    policy_engine_signature: PolicyEngineSignature = UNSIGNED
    subject: Optional[str] = None
    version: str = PDR_VERSION

    def to_json(self, include_signature: bool = True) -> Dict[str, Any]:
        doc = _drop_none({
            "version": self.version,
            "pdrId": self.pdr_id,
            "issuer": self.issuer,
            "subject": self.subject,
            "audience": self.audience,
            "issuedAt": format_timestamp(self.issued_at),
            "expiresAt": format_timestamp(self.expires_at),
            "tisHash": self.tis_hash,
            "decision": self.decision.to_json(),
        })
        if include_signature:
            doc["policyEngineSignature"] = self.policy_engine_signature.to_json()
        return doc

    def canonical_bytes(self) -> bytes:
        return canonicalize(self.to_json(), float_pointers=FLOAT_POINTERS)

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "PolicyDecisionRecord":
        return cls(
            version=doc["version"],
            pdr_id=doc["pdrId"],
            issuer=doc["issuer"],
            subject=doc.get("subject"),
            audience=doc["audience"],
            issued_at=parse_timestamp(doc["issuedAt"], "/issuedAt"),
            expires_at=parse_timestamp(doc["expiresAt"], "/expiresAt"),
            tis_hash=doc["tisHash"],
            decision=Decision.from_json(doc["decision"]),
            policy_engine_signature=PolicyEngineSignature.from_json(doc["policyEngineSignature"]),
        )


# ---------------------------------------------------------------------------
# Validation and parsing
# ---------------------------------------------------------------------------

def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _uint(findings, pointer, value):
    if not isinstance(value, str) or not UINT_RE.match(value) or (len(value) > 1 and value[0] == "0"):
        findings.append(Finding(pointer, "UintDecimal", f"{value!r} is not a canonical unsigned integer string"))


def _has_fraction(value) -> bool:
    if isinstance(value, (float, Decimal)):
        return True
    if isinstance(value, dict):
        return any(_has_fraction(v) for v in value.values())
    if isinstance(value, (list, tuple)):
        return any(_has_fraction(v) for v in value)
    return False


def _check_risk_score(findings, risk):
    pointer = RISK_SCORE_POINTER
    if isinstance(risk, bool) or not isinstance(risk, (int, Decimal)):
        findings.append(Finding(pointer, "riskScore", f"{risk!r} is not a decimal"))
        return
    risk = Decimal(risk)
    if not risk.is_finite() or risk < 0 or risk > 1:
        findings.append(Finding(pointer, "riskScore", f"{risk} is outside [0, 1]"))
    elif risk.normalize().as_tuple().exponent < -6:
        findings.append(Finding(pointer, "riskScore", f"{risk} has more than 6 fractional digits"))


def _check_modifications(findings, mods):
    for i, m in enumerate(mods):
        base = f"/decision/modifiedParameters/{i}"
        if not isinstance(m.path, str) or (m.path and not m.path.startswith("/")):
            findings.append(Finding(f"{base}/path", "JsonPointer", f"{m.path!r} is not an RFC 6901 pointer"))
        try:
            op = Operation(m.operation)
        except ValueError:
            findings.append(Finding(f"{base}/operation", "enum", f"{m.operation!r} is not ADD, REPLACE or REMOVE"))
            continue
        if op == Operation.REMOVE and m.value is not NO_VALUE:
            findings.append(Finding(f"{base}/value", "Modification", "REMOVE carries no value"))
        elif op != Operation.REMOVE and m.value is NO_VALUE:
            findings.append(Finding(base, "Modification", f"{op.value} requires a value"))
        elif m.value is not NO_VALUE and _has_fraction(m.value):
            findings.append(Finding(f"{base}/value", "Modification", "non-integer numbers cannot be canonicalized"))


def validate_pdr(pdr: PolicyDecisionRecord) -> ValidationReport:
    """Re-check every record invariant on a typed value."""
    findings = []
    if pdr.version != PDR_VERSION:
        findings.append(Finding("/version", "version", f"version must be {PDR_VERSION}"))
    try:
        uuid.UUID(pdr.pdr_id)
    except (ValueError, AttributeError, TypeError):
        findings.append(Finding("/pdrId", "uuid", f"{pdr.pdr_id!r} is not a UUID"))
    for pointer, value in (("/issuer", pdr.issuer), ("/audience", pdr.audience)):
        if not isinstance(value, str):
            findings.append(Finding(pointer, "type", f"{value!r} is not a string"))
    if not _is_int(pdr.issued_at) or pdr.issued_at < 0:
        findings.append(Finding("/issuedAt", "date-time", f"{pdr.issued_at!r} is not a Unix timestamp"))
    elif not _is_int(pdr.expires_at) or pdr.expires_at < 0:
        findings.append(Finding("/expiresAt", "date-time", f"{pdr.expires_at!r} is not a Unix timestamp"))
    elif pdr.issued_at >= pdr.expires_at:
        findings.append(Finding("/expiresAt", "expiry", "expiresAt must be later than issuedAt"))
    if not isinstance(pdr.tis_hash, str) or not _DIGEST_RE.match(pdr.tis_hash):
        findings.append(Finding("/tisHash", "Digest32", f"{pdr.tis_hash!r} is not a 32-byte hex digest"))

    d = pdr.decision
    try:
        outcome = Outcome(d.outcome)
    except ValueError:
        findings.append(Finding("/decision/outcome", "enum", f"{d.outcome!r} is not APPROVED or REJECTED"))
        outcome = None
    if outcome == Outcome.REJECTED and not d.reason:
        findings.append(Finding("/decision/reason", "reason", "a REJECTED decision must carry a reason"))
    if not isinstance(d.policy_id, str):
        findings.append(Finding("/decision/policyId", "type", "policyId must be a string"))
    if d.risk_score is not None:
        _check_risk_score(findings, d.risk_score)
    b = d.bound_constraints
    if b is not None:
        if b.max_gas_price_wei is not None:
            _uint(findings, "/decision/boundConstraints/maxGasPriceWei", b.max_gas_price_wei)
        if b.max_value_wei is not None:
            _uint(findings, "/decision/boundConstraints/maxValueWei", b.max_value_wei)
        if b.tight_deadline is not None and (not _is_int(b.tight_deadline) or b.tight_deadline < 0):
            findings.append(Finding("/decision/boundConstraints/tightDeadline", "range", "must be a non-negative integer"))
    if d.modified_parameters is not None:
        _check_modifications(findings, d.modified_parameters)

    sig = pdr.policy_engine_signature
    if not isinstance(sig.signer, str) or not ADDRESS_RE.match(sig.signer) or sig.signer != sig.signer.lower():
        findings.append(Finding("/policyEngineSignature/signer", "SemanticAddress", f"{sig.signer!r} is not a lowercase address"))
    if sig.alg is not None and not isinstance(sig.alg, str):
        findings.append(Finding("/policyEngineSignature/alg", "type", "alg must be a string"))
    if not isinstance(sig.signature, str) or not _HEX_RE.match(sig.signature):
        findings.append(Finding("/policyEngineSignature/signature", "SignatureBytes", "signature must be 0x-prefixed hex"))
    return ValidationReport(tuple(findings))


def pdr_from_document(doc: Any) -> PolicyDecisionRecord:
    validate_document("pdr", doc)
    pdr = PolicyDecisionRecord.from_json(doc)
    report = validate_pdr(pdr)
    if not report.ok:
        first = report.findings[0]
        raise SchemaViolation(first.pointer, f"{first.rule}: {first.message}")
    return pdr


def parse_pdr(data: Union[bytes, str]) -> PolicyDecisionRecord:
    """Parse UTF-8 JSON into a typed record.

    Raises:
        MalformedJson, SchemaViolation
    """
    return pdr_from_document(load_json(data))


# ---------------------------------------------------------------------------
# Signing
# ---------------------------------------------------------------------------

def pdr_signing_payload(pdr: PolicyDecisionRecord) -> bytes:
    """Canonical record bytes without the policyEngineSignature member."""
    return canonicalize(pdr.to_json(include_signature=False), float_pointers=FLOAT_POINTERS)


def attach_signature(pdr: PolicyDecisionRecord, key: Keypair, alg: str = config.SIGNATURE_ALG) -> PolicyDecisionRecord:
    digest = keccak256(pdr_signing_payload(pdr))
    sig = sign_digest(key, digest)
    signed = replace(
        pdr,
        policy_engine_signature=PolicyEngineSignature(signer=key.address, signature=sig.to_text(), alg=alg),
    )
    logger.debug(f"🔏 Signed PDR {pdr.pdr_id} as {key.address}")
    return signed


# ---------------------------------------------------------------------------
# JWT claims import
# ---------------------------------------------------------------------------

_DECISION_NAMES = {"APPROVE": "APPROVED", "APPROVED": "APPROVED", "REJECT": "REJECTED", "REJECTED": "REJECTED"}


def import_jwt_claims(claims: Dict[str, Any], *, pdr_id: str, issued_at: int, policy_id: str) -> Dict[str, Any]:
    """Map JWT-style decision claims onto an (unsigned) record document.

    iss->issuer, sub->subject, aud->audience, exp->expiresAt, iat->issuedAt,
    intent_hash->tisHash, decision->outcome, bound_constraints.max_gas_fee->maxGasPriceWei
    """
    outcome = _DECISION_NAMES.get(str(claims.get("decision", "")).upper())
    if outcome is None:
        raise SchemaViolation("/decision/outcome", f"unknown decision claim {claims.get('decision')!r}")
    decision = {"outcome": outcome, "policyId": policy_id}
    if claims.get("reason"):
        decision["reason"] = claims["reason"]
    elif outcome == "REJECTED":
        decision["reason"] = "rejected by the issuing policy engine"
    bound = claims.get("bound_constraints") or {}
    mapped = _drop_none({
        "maxGasPriceWei": bound.get("max_gas_fee"),
        "maxValueWei": bound.get("max_value"),
        "tightDeadline": bound.get("tight_deadline"),
    })
    if mapped:
        decision["boundConstraints"] = mapped

    doc = {
        "version": PDR_VERSION,
        "pdrId": pdr_id,
        "issuer": claims.get("iss"),
        "audience": claims.get("aud"),
        "issuedAt": format_timestamp(claims.get("iat", issued_at)),
        "expiresAt": format_timestamp(claims["exp"]),
        "tisHash": claims.get("intent_hash"),
        "decision": decision,
        "policyEngineSignature": UNSIGNED.to_json(),
    }
    if claims.get("sub") is not None:
        doc["subject"] = claims["sub"]
    return doc
