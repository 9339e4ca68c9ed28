"""
Signer gate: the executor-side check of an (intent, PDR) pair.

verify_pair() runs the fixed step sequence Signature, IssuerTrust, Audience,
TimeValidity, HashBinding, DecisionOutcome, Replay and stops at the first
failure. gate() additionally applies the PDR's modifications, computes the
effective limits, consumes the replay keys and writes one audit record per call.
"""

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import jsonpatch
from jsonpointer import JsonPointerException
from tabulate import tabulate

import config
from canonical_crypto import Digest32, canonicalize, intent_hash, keccak256, verify_signature
from errors import (
    ForbiddenModification,
    GateRefused,
    MalformedSignature,
    PointerUnresolvable,
    ResultInvalid,
    SchemaViolation,
    UncanonicalizableNumber,
)
from intent_model import Delegate, Intent, intent_from_document
from pdr_model import Modification, Operation, PolicyDecisionRecord, pdr_signing_payload
from schema_validation import read_json_file

logger = logging.getLogger(__name__)

NONCE_POINTER = "/constraints/nonce"


class GateStep(str, Enum):
    SIGNATURE = "Signature"
    ISSUER_TRUST = "IssuerTrust"
    AUDIENCE = "Audience"
    TIME_VALIDITY = "TimeValidity"
    HASH_BINDING = "HashBinding"
    DECISION_OUTCOME = "DecisionOutcome"
    REPLAY = "Replay"
    # audit only: failures while applying modifications after verification
    APPLY_MODIFICATIONS = "ApplyModifications"


VERIFICATION_ORDER = (
    GateStep.SIGNATURE,
    GateStep.ISSUER_TRUST,
    GateStep.AUDIENCE,
    GateStep.TIME_VALIDITY,
    GateStep.HASH_BINDING,
    GateStep.DECISION_OUTCOME,
    GateStep.REPLAY,
)


# ---------------------------------------------------------------------------
# Trust anchors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrustAnchors:
    issuers: Dict[str, str]
    self_identity: str

    @classmethod
    def load(cls, path: str, identity: Optional[str] = None) -> "TrustAnchors":
        """Read `{"issuers": {issuerId: address}, "selfIdentity": ...}`."""
        doc = read_json_file(path)
        issuers = {k: v.lower() for k, v in doc.get("issuers", {}).items()}
        self_identity = identity or doc.get("selfIdentity") or config.SIGNER_IDENTITY
        if not self_identity:
            raise ValueError(f"{path}: no selfIdentity configured")
        return cls(issuers=issuers, self_identity=self_identity)


# ---------------------------------------------------------------------------
# Replay registry
# ---------------------------------------------------------------------------

class NonceRegistry:
    """Consumed (subjectKey, nonce) pairs and pdrIds.

    consume() is linearizable within a process. With a journal path every
    accepted consume is appended before it returns, and open() replays the file.
    """

    def __init__(self, journal_path: Optional[str] = None):
        self.journal_path = journal_path
        self._lock = threading.Lock()
        self._pairs = set()
        self._pdr_ids = set()

    @classmethod
    def open(cls, journal_path: str) -> "NonceRegistry":
        registry = cls(journal_path)
        if os.path.exists(journal_path):
            with open(journal_path, "r", encoding="utf-8") as f:
                for line in f:
                    if not line.strip():
                        continue
                    entry = json.loads(line)
                    registry._remember(entry["subjectKey"], entry.get("nonce"), entry["pdrId"])
            logger.info(f"🔁 Replayed {len(registry)} registry entries from {journal_path}")
        return registry

    def __len__(self):
        return len(self._pdr_ids)

    @property
    def cardinality(self) -> Tuple[int, int]:
        return len(self._pdr_ids), len(self._pairs)

    def _remember(self, subject_key, nonce, pdr_id):
        self._pdr_ids.add(pdr_id.lower())
        if nonce is not None:
            self._pairs.add((subject_key, nonce))

    def is_consumed(self, subject_key: str, nonce: Optional[str], pdr_id: str) -> Optional[str]:
        """Why the keys are already used, or None when both are fresh."""
        with self._lock:
            if pdr_id.lower() in self._pdr_ids:
                return f"pdrId {pdr_id} was already consumed"
            if nonce is not None and (subject_key, nonce) in self._pairs:
                return f"nonce {nonce} was already consumed for {subject_key}"
        return None

    def consume(self, subject_key: str, nonce: Optional[str], pdr_id: str, ts: Optional[int] = None) -> bool:
        with self._lock:
            if pdr_id.lower() in self._pdr_ids:
                return False
            if nonce is not None and (subject_key, nonce) in self._pairs:
                return False
            if self.journal_path:
                entry = {"subjectKey": subject_key, "pdrId": pdr_id, "ts": ts if ts is not None else int(time.time())}
                if nonce is not None:
                    entry["nonce"] = nonce
                directory = os.path.dirname(self.journal_path)
                if directory:
                    os.makedirs(directory, exist_ok=True)
                with open(self.journal_path, "a", encoding="utf-8") as f:
                    f.write(canonicalize(entry).decode("utf-8") + "\n")
                    f.flush()
                    os.fsync(f.fileno())
            self._remember(subject_key, nonce, pdr_id)
            return True


def consume(registry: NonceRegistry, subject_key: str, nonce: Optional[str], pdr_id: str) -> bool:
    """True and recorded iff neither pdrId nor (subjectKey, nonce) was seen before."""
    return registry.consume(subject_key, nonce, pdr_id)


# ---------------------------------------------------------------------------
# Reports, envelopes and audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepResult:
    step: GateStep
    passed: bool
    detail: str


@dataclass(frozen=True)
class VerificationReport:
    steps: Tuple[StepResult, ...]

    @property
    def passed(self) -> bool:
        return len(self.steps) == len(VERIFICATION_ORDER) and all(s.passed for s in self.steps)

    @property
    def failed_step(self) -> Optional[GateStep]:
        for s in self.steps:
            if not s.passed:
                return s.step
        return None

    def to_json(self) -> Dict[str, Any]:
        doc = {
            "outcome": "PASS" if self.passed else "FAIL",
            "steps": [{"check": s.step.value, "passed": s.passed, "detail": s.detail} for s in self.steps],
        }
        if self.failed_step is not None:
            doc["failedStep"] = self.failed_step.value
        return doc

    def to_table(self) -> str:
        rows = [(s.step.value, "✅ pass" if s.passed else "❌ fail", s.detail) for s in self.steps]
        return tabulate(rows, headers=["Check", "Result", "Detail"], tablefmt="github")


@dataclass(frozen=True)
class ExecutionEnvelope:
    intent: Intent
    effective_deadline: int
    pdr_id: str
    issuer: str
    authorized_at: int
    original_tis_hash: str
    subject_key: str
    effective_max_gas_price_wei: Optional[str] = None
    effective_max_value_wei: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        doc = {
            "intent": self.intent.to_json(),
            "effectiveDeadline": self.effective_deadline,
            "pdrId": self.pdr_id,
            "issuer": self.issuer,
            "authorizedAt": self.authorized_at,
            "originalTisHash": self.original_tis_hash,
            "subjectKey": self.subject_key,
        }
        if self.effective_max_gas_price_wei is not None:
            doc["effectiveMaxGasPriceWei"] = self.effective_max_gas_price_wei
        if self.effective_max_value_wei is not None:
            doc["effectiveMaxValueWei"] = self.effective_max_value_wei
        return doc


class AuditLog:
    """Append-only JSON-lines sink with one record per gate call."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def append(self, record: Dict[str, Any]) -> None:
        line = canonicalize(record).decode("utf-8")
        with self._lock:
            self.records.append(record)
            if self.path:
                directory = os.path.dirname(self.path)
                if directory:
                    os.makedirs(directory, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")

    def record(self, ts: int, pdr: PolicyDecisionRecord, failed_step: Optional[GateStep] = None) -> None:
        record = {
            "ts": ts,
            "pdrId": pdr.pdr_id,
            "tisHash": pdr.tis_hash,
            "outcome": "AUTHORIZED" if failed_step is None else "REFUSED",
            "issuer": pdr.issuer,
        }
        if failed_step is not None:
            record["failedStep"] = failed_step.value
        self.append(record)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def subject_key(intent: Intent, pdr: PolicyDecisionRecord) -> str:
    """Replay scope: requiredSigner, else the PDR subject, else "anonymous"."""
    if intent.constraints.required_signer:
        return intent.constraints.required_signer
    if pdr.subject:
        return pdr.subject
    return "anonymous"


def _check_signature(pdr: PolicyDecisionRecord) -> Tuple[bool, str]:
    sig = pdr.policy_engine_signature
    if sig.alg is not None and sig.alg != config.SIGNATURE_ALG:
        return False, f"unsupported alg {sig.alg!r}"
    try:
        digest = keccak256(pdr_signing_payload(pdr))
        if verify_signature(digest, sig.signature, sig.signer):
            return True, f"signed by {sig.signer}"
        return False, f"signature does not recover to {sig.signer}"
    except (MalformedSignature, UncanonicalizableNumber) as e:
        return False, f"malformed: {e}"


def _hash_matches(intent: Intent, pdr: PolicyDecisionRecord) -> Tuple[bool, str]:
    try:
        computed = intent_hash(intent)
    except UncanonicalizableNumber as e:
        return False, f"intent has no canonical form: {e}"
    try:
        claimed = Digest32.from_text(pdr.tis_hash)
    except ValueError:
        return False, f"tisHash {pdr.tis_hash!r} is not a digest"
    if computed != claimed:
        return False, f"intent hashes to {computed}, PDR binds {claimed}"
    return True, str(computed)


def verify_pair(
    intent: Intent,
    pdr: PolicyDecisionRecord,
    anchors: TrustAnchors,
    clock: int,
    registry: Optional[NonceRegistry] = None,
    skew_seconds: int = config.CLOCK_SKEW_SECONDS,
) -> VerificationReport:
    """Run the verification steps in order, stopping after the first failure."""

    def signature():
        return _check_signature(pdr)

    def issuer_trust():
        anchored = anchors.issuers.get(pdr.issuer)
        if anchored is None:
            return False, f"issuer {pdr.issuer!r} is not trusted"
        if anchored != pdr.policy_engine_signature.signer:
            return False, f"issuer {pdr.issuer!r} signs as {anchored}, not {pdr.policy_engine_signature.signer}"
        return True, pdr.issuer

    def audience():
        if pdr.audience != anchors.self_identity:
            return False, f"audience {pdr.audience!r} is not {anchors.self_identity!r}"
        return True, pdr.audience

    def time_validity():
        if pdr.issued_at > clock + skew_seconds:
            return False, f"issuedAt {pdr.issued_at} is beyond clock {clock} + {skew_seconds}s skew"
        if clock >= pdr.expires_at:
            return False, f"expired at {pdr.expires_at} (clock {clock})"
        return True, f"valid until {pdr.expires_at}"

    def hash_binding():
        return _hash_matches(intent, pdr)

    def decision_outcome():
        if not pdr.decision.approved:
            return False, f"decision is {pdr.decision.outcome.value}: {pdr.decision.reason or ''}".rstrip(": ")
        return True, "APPROVED"

    def replay():
        if registry is None:
            return True, "no registry"
        reason = registry.is_consumed(subject_key(intent, pdr), intent.constraints.nonce, pdr.pdr_id)
        if reason is not None:
            return False, reason
        return True, "unseen"

    checks = (signature, issuer_trust, audience, time_validity, hash_binding, decision_outcome, replay)
    steps = []
    for step, check in zip(VERIFICATION_ORDER, checks):
        passed, detail = check()
        steps.append(StepResult(step, passed, detail))
        if not passed:
            logger.debug(f"❌ {step.value} failed for PDR {pdr.pdr_id}: {detail}")
            break
    return VerificationReport(tuple(steps))


# ---------------------------------------------------------------------------
# Modifications
# ---------------------------------------------------------------------------

def _touches_nonce(path: str) -> bool:
    return path == NONCE_POINTER or path.startswith(NONCE_POINTER + "/")


def _nonce_of(doc) -> Any:
    constraints = doc.get("constraints") if isinstance(doc, dict) else None
    return constraints.get("nonce") if isinstance(constraints, dict) else None


def apply_modifications(intent: Intent, mods: Sequence[Modification]) -> Intent:
    """Apply ADD/REPLACE/REMOVE in order and re-validate the result.

    Raises:
        PointerUnresolvable: a pointer does not resolve against the document
        ForbiddenModification: the nonce would change
        ResultInvalid: the result is not a valid intent
    """
    doc = intent.to_json()
    original_nonce = _nonce_of(doc)
    for m in mods:
        if _touches_nonce(m.path):
            raise ForbiddenModification(m.path, "the replay nonce cannot be modified")
        op = {"op": Operation(m.operation).value.lower(), "path": m.path}
        if Operation(m.operation) != Operation.REMOVE:
            op["value"] = m.value
        try:
            doc = jsonpatch.apply_patch(doc, [op])
        except (jsonpatch.JsonPatchException, JsonPointerException) as e:
            raise PointerUnresolvable(m.path, str(e)) from e
        if _nonce_of(doc) != original_nonce:
            raise ForbiddenModification(m.path, "the replay nonce cannot be modified")
    try:
        return intent_from_document(doc)
    except SchemaViolation as e:
        raise ResultInvalid(e) from e


def _min_decimal(*values: Optional[str]) -> Optional[str]:
    present = [int(v) for v in values if v is not None]
    return str(min(present)) if present else None


def gate(
    intent: Intent,
    pdr: PolicyDecisionRecord,
    anchors: TrustAnchors,
    registry: NonceRegistry,
    clock: int,
    audit_log: Optional[AuditLog] = None,
    skew_seconds: int = config.CLOCK_SKEW_SECONDS,
) -> ExecutionEnvelope:
    """Verify, modify, consume and emit an envelope; the registry is untouched on refusal.

    Raises:
        GateRefused, PointerUnresolvable, ResultInvalid
    """
    audit_log = audit_log if audit_log is not None else AuditLog()
    report = verify_pair(intent, pdr, anchors, clock, registry=registry, skew_seconds=skew_seconds)
    if not report.passed:
        audit_log.record(clock, pdr, report.failed_step)
        logger.warning(f"⛔ Gate refused PDR {pdr.pdr_id} at {report.failed_step.value}")
        raise GateRefused(report)

    try:
        effective = apply_modifications(intent, pdr.decision.modified_parameters or ())
    except (PointerUnresolvable, ResultInvalid):
        audit_log.record(clock, pdr, GateStep.APPLY_MODIFICATIONS)
        logger.warning(f"⛔ Gate refused PDR {pdr.pdr_id}: modifications do not apply")
        raise

    key = subject_key(intent, pdr)
    if not registry.consume(key, intent.constraints.nonce, pdr.pdr_id, ts=clock):
        lost = StepResult(GateStep.REPLAY, False, "consumed by a concurrent gate call")
        report = VerificationReport(report.steps[:-1] + (lost,))
        audit_log.record(clock, pdr, GateStep.REPLAY)
        logger.warning(f"⛔ Gate refused PDR {pdr.pdr_id}: lost the consume race")
        raise GateRefused(report)

    bound = pdr.decision.bound_constraints
    deadlines = [intent.constraints.deadline, effective.constraints.deadline]
    if bound is not None and bound.tight_deadline is not None:
        deadlines.append(bound.tight_deadline)
    scope_value = None
    if isinstance(effective.action, Delegate) and effective.action.scope is not None:
        scope_value = effective.action.scope.max_value_wei

    envelope = ExecutionEnvelope(
        intent=effective,
        effective_deadline=min(deadlines),
        pdr_id=pdr.pdr_id,
        issuer=pdr.issuer,
        authorized_at=clock,
        original_tis_hash=pdr.tis_hash,
        subject_key=key,
        effective_max_gas_price_wei=_min_decimal(
            intent.constraints.max_gas_price_wei,
            effective.constraints.max_gas_price_wei,
            bound.max_gas_price_wei if bound is not None else None,
        ),
        effective_max_value_wei=_min_decimal(scope_value, bound.max_value_wei if bound is not None else None),
    )
    audit_log.record(clock, pdr)
    logger.info(f"✅ Gate authorized PDR {pdr.pdr_id} for {key}")
    return envelope
