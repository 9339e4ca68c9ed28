"""
Planner -> policy engine -> signer gate -> executor, in memory.

A Pipeline drives one policy issuer, one signer gate and a MockLedger through
scripted timestamps and records each submission as a PipelineTranscript.
Nothing here reads the wall clock: ids come from a seeded RNG and time from a
ScriptedClock, so the same inputs always give the same transcripts.
"""

import logging
import os
import random
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jsonpatch
from jsonpointer import JsonPointerException

import config
from canonical_crypto import Keypair, canonicalize, intent_hash, keygen
from errors import (
    DeadlineExceeded,
    GateRefused,
    InsufficientBalance,
    PointerUnresolvable,
    ResultInvalid,
    ScenarioConfigError,
    SchemaViolation,
    UnsupportedLegacyShape,
)
from intent_model import (
    Constraints,
    Intent,
    Swap,
    Token,
    Transfer,
    format_utc,
    intent_from_document,
    normalize_legacy_intent,
    render_preview,
    validate_intent,
)
from pdr_model import PolicyDecisionRecord
from policy_engine import EvaluationContext, PolicySet, TokenKey, evaluate, issue_pdr, load_policy, record_spend
from schema_validation import read_json_file
from signer_gate import AuditLog, ExecutionEnvelope, NonceRegistry, TrustAnchors, gate

logger = logging.getLogger(__name__)

# Liquidity account that takes the input side of every swap and pays the output
MOCK_POOL_ADDRESS = "0x0000000000000000000000000000000000000fee"

SUBSCRIPTION_PERIOD_SECONDS = 30 * 24 * 3600
EARLY_ATTEMPT_SECONDS = 29 * 24 * 3600


class Stage(str, Enum):
    OBSERVE = "OBSERVE"
    CONSTRUCT_TIS = "CONSTRUCT_TIS"
    POLICY_EVAL = "POLICY_EVAL"
    PDR_ISSUED = "PDR_ISSUED"
    GATE_VERIFY = "GATE_VERIFY"
    EXECUTE = "EXECUTE"
    VERIFY_STATE = "VERIFY_STATE"


class ScriptedClock:
    """Walks a monotone list of timestamps; advance() holds at the last one."""

    def __init__(self, script: Sequence[int]):
        if not script:
            raise ScenarioConfigError("clock script is empty")
        if any(b < a for a, b in zip(script, script[1:])):
            raise ScenarioConfigError(f"clock script is not monotone: {list(script)}")
        self.script = tuple(script)
        self._index = 0

    @property
    def now(self) -> int:
        return self.script[self._index]

    def advance(self) -> int:
        if self._index < len(self.script) - 1:
            self._index += 1
        return self.now


# ---------------------------------------------------------------------------
# Mock ledger
# ---------------------------------------------------------------------------

def _label(token: TokenKey) -> str:
    return f"{token[1]}@{token[0]}"


@dataclass(frozen=True)
class Receipt:
    pdr_id: str
    intent_id: str
    action: str
    block_time: int
    # (account, token label, balance before, balance after)
    changes: Tuple[Tuple[str, str, int, int], ...]

    def to_json(self) -> Dict[str, Any]:
        return {
            "pdrId": self.pdr_id,
            "intentId": self.intent_id,
            "action": self.action,
            "blockTime": self.block_time,
            "changes": [
                {"account": a, "token": t, "pre": str(pre), "post": str(post)} for a, t, pre, post in self.changes
            ],
        }


@dataclass
class MockLedger:
    balances: Dict[Tuple[str, TokenKey], int] = field(default_factory=dict)
    block_time: int = 0
    receipts: List[Receipt] = field(default_factory=list)

    def mint(self, account: str, token: TokenKey, amount: int) -> None:
        """Setup only; scenario runs never mint."""
        if amount < 0:
            raise ScenarioConfigError(f"cannot mint a negative amount of {_label(token)}")
        key = (account.lower(), (token[0], token[1].lower()))
        self.balances[key] = self.balances.get(key, 0) + amount

    def balance(self, account: str, token: TokenKey) -> int:
        return self.balances.get((account.lower(), token), 0)

    def total(self, token: TokenKey) -> int:
        return sum(amount for (_, t), amount in self.balances.items() if t == token)

    def tokens(self) -> set:
        return {t for (_, t) in self.balances}

    def advance_to(self, ts: int) -> None:
        if ts < self.block_time:
            raise ScenarioConfigError(f"block time cannot move back from {self.block_time} to {ts}")
        self.block_time = ts

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "MockLedger":
        ledger = cls(block_time=doc.get("blockTime", 0))
        for entry in doc.get("balances", []):
            ledger.mint(entry["account"], (entry["chainId"], entry["address"].lower()), int(entry["amount"]))
        return ledger


def _deltas(intent: Intent, account: str) -> Dict[Tuple[str, TokenKey], int]:
    action = intent.action
    deltas: Dict[Tuple[str, TokenKey], int] = {}

    def move(who, token, amount):
        key = (who.lower(), token)
        deltas[key] = deltas.get(key, 0) + amount

    if isinstance(action, Transfer):
        amount = int(action.amount)
        move(account, action.token.key, -amount)
        move(action.to, action.token.key, amount)
    elif isinstance(action, Swap):
        # fills exactly at the minimum acceptable output
        amount_in, amount_out = int(action.amount_in), int(action.min_amount_out)
        move(account, action.token_in.key, -amount_in)
        move(MOCK_POOL_ADDRESS, action.token_in.key, amount_in)
        move(MOCK_POOL_ADDRESS, action.token_out.key, -amount_out)
        move(action.recipient or account, action.token_out.key, amount_out)
    return deltas


def execute_envelope(ledger: MockLedger, env: ExecutionEnvelope, account: Optional[str] = None) -> Receipt:
    """Apply an authorized action all at once or not at all.

    Raises:
        DeadlineExceeded: the effective deadline is before the block time
        InsufficientBalance: any debited account would go negative
    """
    account = account or env.intent.constraints.required_signer
    if account is None:
        raise ScenarioConfigError(f"intent {env.intent.intent_id} names no account to debit")
    if env.effective_deadline < ledger.block_time:
        raise DeadlineExceeded(f"deadline {env.effective_deadline} is before block time {ledger.block_time}")

    deltas = _deltas(env.intent, account)
    for (who, token), delta in sorted(deltas.items()):
        if ledger.balance(who, token) + delta < 0:
            raise InsufficientBalance(
                f"{who} holds {ledger.balance(who, token)} {_label(token)}, needs {-delta}"
            )

    changes = []
    for (who, token), delta in sorted(deltas.items()):
        before = ledger.balance(who, token)
        ledger.balances[(who, token)] = before + delta
        changes.append((who, _label(token), before, before + delta))

    receipt = Receipt(
        pdr_id=env.pdr_id,
        intent_id=env.intent.intent_id,
        action=env.intent.action.type,
        block_time=ledger.block_time,
        changes=tuple(changes),
    )
    ledger.receipts.append(receipt)
    logger.debug(f"⛓️ Executed {receipt.action} {receipt.intent_id} at {receipt.block_time}")
    return receipt


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptEvent:
    stage: Stage
    detail: str
    ts: int

    def to_json(self) -> Dict[str, Any]:
        return {"stage": self.stage.value, "detail": self.detail, "ts": self.ts}


@dataclass
class PipelineTranscript:
    events: List[TranscriptEvent] = field(default_factory=list)
    refused_at: Optional[Stage] = None
    intent_id: Optional[str] = None
    pdr_id: Optional[str] = None
    receipt: Optional[Receipt] = None

    @property
    def executed(self) -> bool:
        return self.refused_at is None and any(e.stage == Stage.EXECUTE for e in self.events)

    @property
    def outcome(self) -> str:
        return "EXECUTED" if self.refused_at is None else f"REFUSED_AT({self.refused_at.value})"

    @property
    def stages(self) -> List[Stage]:
        return [e.stage for e in self.events]

    def add(self, stage: Stage, detail: str, ts: int) -> None:
        self.events.append(TranscriptEvent(stage, detail, ts))

    def refuse(self, stage: Stage, detail: str, ts: int) -> "PipelineTranscript":
        self.add(stage, detail, ts)
        self.refused_at = stage
        return self

    def summary(self) -> Dict[str, Any]:
        doc = {"outcome": self.outcome, "events": len(self.events)}
        if self.intent_id is not None:
            doc["intentId"] = self.intent_id
        if self.pdr_id is not None:
            doc["pdrId"] = self.pdr_id
        if self.receipt is not None:
            doc["receipt"] = self.receipt.to_json()
        return doc

    def to_json_lines(self) -> str:
        lines = [canonicalize(e.to_json()).decode("utf-8") for e in self.events]
        lines.append(canonicalize(self.summary()).decode("utf-8"))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def apply_tamper(intent: Intent, steps: Sequence[Dict[str, Any]]) -> Intent:
    """Mutate an intent document after issuance, the way an attacker in transit would."""
    if not steps:
        return intent
    ops = []
    for step in steps:
        op = {"op": step["op"].lower(), "path": step["path"]}
        if "value" in step:
            op["value"] = step["value"]
        ops.append(op)
    try:
        return intent_from_document(jsonpatch.apply_patch(intent.to_json(), ops))
    except (jsonpatch.JsonPatchException, JsonPointerException, SchemaViolation) as e:
        raise ScenarioConfigError(f"tamper steps do not produce a valid intent: {e}") from e


class Pipeline:
    """One issuer, one gate, one ledger. Evaluation history carries across submissions."""

    def __init__(
        self,
        policy: PolicySet,
        issuer_key: Keypair,
        anchors: TrustAnchors,
        ledger: MockLedger,
        issuer_id: str = config.POLICY_ISSUER_ID,
        ttl_seconds: int = config.DEFAULT_PDR_TTL_SECONDS,
        registry: Optional[NonceRegistry] = None,
        audit_log: Optional[AuditLog] = None,
        context: Optional[EvaluationContext] = None,
        account: Optional[str] = None,
        seed: int = 0,
    ):
        if anchors.issuers.get(issuer_id) != issuer_key.address:
            raise ScenarioConfigError(f"issuer {issuer_id!r} is not anchored to {issuer_key.address}")
        self.policy = policy
        self.issuer_key = issuer_key
        self.issuer_id = issuer_id
        self.anchors = anchors
        self.ledger = ledger
        self.ttl_seconds = ttl_seconds
        self.registry = registry if registry is not None else NonceRegistry()
        self.audit_log = audit_log if audit_log is not None else AuditLog()
        self.context = context if context is not None else EvaluationContext(clock=ledger.block_time)
        self.account = account
        self.rng = random.Random(seed)
        self.last_pair: Optional[Tuple[Intent, PolicyDecisionRecord]] = None

    def new_id(self) -> str:
        return str(uuid.UUID(int=self.rng.getrandbits(128), version=4))

    def _check_tokens(self, intent: Intent) -> None:
        action = intent.action
        if isinstance(action, Transfer):
            tokens = [action.token.key]
        elif isinstance(action, Swap):
            tokens = [action.token_in.key, action.token_out.key]
        else:
            tokens = []
        known = self.ledger.tokens()
        for token in tokens:
            if token not in known:
                raise ScenarioConfigError(f"token {_label(token)} is not set up on the ledger")

    def submit(
        self,
        intent: Intent,
        issued_at: int,
        gated_at: Optional[int] = None,
        tamper: Sequence[Dict[str, Any]] = (),
        transcript: Optional[PipelineTranscript] = None,
    ) -> PipelineTranscript:
        """Evaluate, issue, (optionally tamper), gate and execute one intent."""
        self._check_tokens(intent)
        gated_at = issued_at if gated_at is None else gated_at
        transcript = transcript if transcript is not None else PipelineTranscript()
        transcript.intent_id = intent.intent_id

        report = validate_intent(intent)
        if not report.ok:
            first = report.findings[0]
            logger.info(f"⛔ Constructed intent {intent.intent_id} is invalid at {first.pointer}")
            return transcript.refuse(
                Stage.CONSTRUCT_TIS, f"{first.rule} at {first.pointer}: {first.message}", issued_at
            )
        transcript.add(
            Stage.CONSTRUCT_TIS,
            f"Constructed TIS {intent.intent_id} hash {intent_hash(intent)}: {render_preview(intent)}",
            issued_at,
        )

        ctx = self.context.at(issued_at)
        decision = evaluate(intent, self.policy, ctx, ttl_seconds=self.ttl_seconds)
        if not decision.approved:
            logger.info(f"⛔ Policy rejected {intent.intent_id}: {decision.reason}")
            return transcript.refuse(Stage.POLICY_EVAL, f"REJECTED: {decision.reason}", issued_at)
        transcript.add(Stage.POLICY_EVAL, f"APPROVED under {decision.policy_id} riskScore {decision.risk_score}", issued_at)

        pdr = issue_pdr(
            intent, decision, self.issuer_key, self.issuer_id, self.anchors.self_identity,
            self.ttl_seconds, ctx, pdr_id=self.new_id(),
        )
        transcript.pdr_id = pdr.pdr_id
        transcript.add(
            Stage.PDR_ISSUED,
            f"Received signed PDR (APPROVE) {pdr.pdr_id} from {pdr.issuer}, expires {format_utc(pdr.expires_at)}",
            issued_at,
        )

        presented = apply_tamper(intent, tamper)
        self.last_pair = (presented, pdr)
        return self._gate_and_execute(presented, pdr, gated_at, transcript)

    def replay(self, clock: int) -> PipelineTranscript:
        """Resubmit the last issued pair to the gate."""
        if self.last_pair is None:
            raise ScenarioConfigError("nothing to replay")
        intent, pdr = self.last_pair
        transcript = PipelineTranscript(intent_id=intent.intent_id, pdr_id=pdr.pdr_id)
        return self._gate_and_execute(intent, pdr, clock, transcript)

    def _gate_and_execute(self, intent, pdr, clock, transcript) -> PipelineTranscript:
        self.ledger.advance_to(clock)
        try:
            env = gate(intent, pdr, self.anchors, self.registry, clock, audit_log=self.audit_log)
        except GateRefused as e:
            failed = e.report.steps[-1]
            return transcript.refuse(Stage.GATE_VERIFY, f"{failed.step.value}: {failed.detail}", clock)
        except (PointerUnresolvable, ResultInvalid) as e:
            return transcript.refuse(Stage.GATE_VERIFY, f"ApplyModifications: {e}", clock)
        transcript.add(
            Stage.GATE_VERIFY,
            f"Gate verified PDR {pdr.pdr_id}; signing approval collapsed into the single-key gate",
            clock,
        )

        account = self.account or env.intent.constraints.required_signer
        expected = {}
        if account is not None:
            expected = {
                (who, token): self.ledger.balance(who, token) + delta
                for (who, token), delta in _deltas(env.intent, account).items()
            }
        totals = {token: self.ledger.total(token) for token in self.ledger.tokens()}

        try:
            receipt = execute_envelope(self.ledger, env, self.account)
        except (DeadlineExceeded, InsufficientBalance) as e:
            return transcript.refuse(Stage.EXECUTE, f"{type(e).__name__}: {e}", clock)
        transcript.add(Stage.EXECUTE, f"Executed {receipt.action} {receipt.intent_id} at block time {clock}", clock)

        self.context = record_spend(self.context.at(clock), env.intent, clock, self.policy.retain_seconds)

        transcript.receipt = receipt
        mismatched = [
            f"{who} {_label(token)} expected {want} holds {self.ledger.balance(who, token)}"
            for (who, token), want in sorted(expected.items())
            if self.ledger.balance(who, token) != want
        ]
        mismatched += [
            f"total {_label(token)} moved from {before} to {self.ledger.total(token)}"
            for token, before in sorted(totals.items())
            if self.ledger.total(token) != before
        ]
        if mismatched:
            return transcript.refuse(Stage.VERIFY_STATE, f"state differs from envelope: {'; '.join(mismatched)}", clock)
        summary = ", ".join(f"{who} {label} {pre}->{post}" for who, label, pre, post in receipt.changes)
        transcript.add(Stage.VERIFY_STATE, f"State matches envelope: {summary or 'no balance changes'}", clock)
        logger.info(f"✅ Pipeline executed {receipt.intent_id} ({receipt.action})")
        return transcript


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def run_scenario(
    source: Union[Intent, Dict[str, Any]],
    policy: PolicySet,
    issuer_key: Keypair,
    anchors: TrustAnchors,
    ledger: MockLedger,
    clock: ScriptedClock,
    issuer_id: str = config.POLICY_ISSUER_ID,
    tamper: Sequence[Dict[str, Any]] = (),
    **pipeline_options,
) -> PipelineTranscript:
    """Issue at clock.now, gate at the next scripted timestamp.

    `source` is an Intent or a document holding "intent" or "legacyIntent".
    """
    pipeline = Pipeline(policy, issuer_key, anchors, ledger, issuer_id=issuer_id, **pipeline_options)
    intent = intent_source(source)
    issued_at = clock.now
    return pipeline.submit(intent, issued_at, clock.advance(), tamper=tamper)


def intent_source(source: Union[Intent, Dict[str, Any]]) -> Intent:
    if isinstance(source, Intent):
        return source
    try:
        if "legacyIntent" in source:
            return normalize_legacy_intent(source["legacyIntent"])
        if "intent" in source:
            return intent_from_document(source["intent"])
    except (SchemaViolation, UnsupportedLegacyShape) as e:
        raise ScenarioConfigError(f"scenario intent is invalid: {e}") from e
    raise ScenarioConfigError("scenario names neither an intent nor a legacyIntent")


def subscription_intent(
    rng: random.Random,
    subscriber: str,
    service: str,
    token: Token,
    amount: str,
    at: int,
    sequence: int,
) -> Intent:
    return Intent(
        intent_id=str(uuid.UUID(int=rng.getrandbits(128), version=4)),
        action=Transfer(token=token, to=service.lower(), amount=amount, memo=f"billing cycle {sequence}"),
        constraints=Constraints(
            deadline=at + 3600,
            nonce=str(sequence),
            required_signer=subscriber.lower(),
        ),
    )


def run_subscription_loop(
    policy: PolicySet,
    months: int,
    ledger: MockLedger,
    issuer_key: Keypair,
    anchors: TrustAnchors,
    start: int,
    subscriber: str,
    service: str,
    token: Token,
    amount: str = "10000000",
    step_seconds: int = SUBSCRIPTION_PERIOD_SECONDS,
    early_attempt_seconds: Optional[int] = EARLY_ATTEMPT_SECONDS,
    issuer_id: str = config.POLICY_ISSUER_ID,
    seed: int = 0,
) -> List[PipelineTranscript]:
    """Monthly billing; an extra attempt at start + early_attempt_seconds precedes month two."""
    if months < 1:
        raise ScenarioConfigError(f"months must be at least 1, got {months}")
    pipeline = Pipeline(policy, issuer_key, anchors, ledger, issuer_id=issuer_id, seed=seed)

    schedule = []
    for month in range(months):
        schedule.append((start + month * step_seconds, f"month {month + 1}"))
        if month == 0 and months > 1 and early_attempt_seconds is not None:
            schedule.append((start + early_attempt_seconds, "early attempt"))

    transcripts = []
    for sequence, (at, label) in enumerate(schedule):
        transcript = PipelineTranscript()
        transcript.add(Stage.OBSERVE, f"Triggered billing cycle for account {subscriber.lower()} ({label})", at)
        intent = subscription_intent(pipeline.rng, subscriber, service, token, amount, at, sequence)
        transcripts.append(pipeline.submit(intent, at, transcript=transcript))
    return transcripts


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def _resolve(value, base_dir: str):
    if isinstance(value, str):
        return read_json_file(os.path.join(base_dir, value))
    return value


def load_scenario(path: str) -> Dict[str, Any]:
    """Read a scenario file, inlining every file it references by relative path."""
    scenario = read_json_file(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    for key in ("policy", "intent", "legacyIntent", "ledger", "anchors"):
        if key in scenario:
            scenario[key] = _resolve(scenario[key], base_dir)
    return scenario


def simulate(scenario: Dict[str, Any]) -> List[PipelineTranscript]:
    """Run a loaded scenario, then its replays, and return every transcript."""
    try:
        issuer = scenario["issuer"]
        issuer_key = keygen(bytes.fromhex(issuer["seed"][2:]))
        issuer_id = issuer.get("id", config.POLICY_ISSUER_ID)
        audience = scenario["audience"]
        policy = load_policy(scenario["policy"])
        clock = ScriptedClock(scenario["clock"])
    except (KeyError, ValueError) as e:
        raise ScenarioConfigError(f"scenario is incomplete: {e}") from e

    anchors_doc = scenario.get("anchors")
    if anchors_doc is not None:
        issuers = {k: v.lower() for k, v in anchors_doc["issuers"].items()}
    else:
        issuers = {issuer_id: issuer_key.address}
    anchors = TrustAnchors(issuers=issuers, self_identity=audience)

    ledger = MockLedger.from_json(scenario.get("ledger", {}))
    pipeline = Pipeline(
        policy, issuer_key, anchors, ledger,
        issuer_id=issuer_id,
        ttl_seconds=scenario.get("ttlSeconds", config.DEFAULT_PDR_TTL_SECONDS),
        account=scenario.get("account"),
        seed=scenario.get("seed", 0),
    )
    intent = intent_source(scenario)
    issued_at = clock.now
    transcripts = [pipeline.submit(intent, issued_at, clock.advance(), tamper=scenario.get("tamper", ()))]
    for _ in range(scenario.get("replays", 0)):
        transcripts.append(pipeline.replay(clock.advance()))
    logger.info(f"🎬 Scenario {scenario.get('name', '')} finished: {[t.outcome for t in transcripts]}")
    return transcripts
