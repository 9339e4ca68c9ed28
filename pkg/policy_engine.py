"""
Policy engine: evaluates intents against a rule set and issues signed PDRs.

Rules combine deny-overrides with default-deny (an empty rule list rejects).
evaluate() never mutates its context; spend history only changes through
record_spend() after an execution has been confirmed.
"""

import json
import logging
import os
import uuid
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal
from fnmatch import fnmatchcase
from typing import Any, Dict, FrozenSet, List, Optional, Tuple, Union

from canonical_crypto import Keypair, canonicalize, intent_hash
from errors import ClockInvalid, TimestampRegression
from intent_model import Delegate, Intent, Swap, Transfer
from pdr_model import (
    BoundConstraints,
    Decision,
    Modification,
    Operation,
    Outcome,
    PolicyDecisionRecord,
    attach_signature,
)
from schema_validation import read_json_file, validate_document

logger = logging.getLogger(__name__)

RISK_QUANTUM = Decimal("0.000001")

TokenKey = Tuple[int, str]


def _token_key(doc: Dict[str, Any]) -> TokenKey:
    return (doc["chainId"], doc["address"].lower())


def _token_label(key: TokenKey) -> str:
    return f"{key[1]}@{key[0]}"


def scope_key(intent: Intent) -> str:
    """`<TYPE>:<counterparty>` key that cadence rules and history use."""
    action = intent.action
    if isinstance(action, Transfer):
        return f"TRANSFER:{action.to}"
    if isinstance(action, Swap):
        return f"SWAP:{action.token_in.address}>{action.token_out.address}"
    return f"DELEGATE:{action.delegatee}"


def token_amounts(intent: Intent) -> Dict[TokenKey, int]:
    """Amounts of each token the intent spends."""
    action = intent.action
    if isinstance(action, Transfer):
        return {action.token.key: int(action.amount)}
    if isinstance(action, Swap):
        return {action.token_in.key: int(action.amount_in)}
    return {}


def counterparty(intent: Intent) -> Optional[str]:
    action = intent.action
    if isinstance(action, Transfer):
        return action.to
    if isinstance(action, Swap):
        return action.recipient
    return action.delegatee


# ---------------------------------------------------------------------------
# Evaluation context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpendEntry:
    ts: int
    amount: int


@dataclass(frozen=True)
class EvaluationContext:
    """Clock plus spend and cadence history.

    Callers serialize record_spend per subject; this type does no locking.
    """

    clock: int
    spend_ledger: Dict[TokenKey, Tuple[SpendEntry, ...]] = field(default_factory=dict)
    last_action_at: Dict[str, int] = field(default_factory=dict)

    def at(self, clock: int) -> "EvaluationContext":
        return replace(self, clock=clock)

    def consumed(self, token: TokenKey, window_seconds: int) -> int:
        start = self.clock - window_seconds
        return sum(e.amount for e in self.spend_ledger.get(token, ()) if start < e.ts <= self.clock)


# ---------------------------------------------------------------------------
# Rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionAllowlist:
    types: FrozenSet[str]
    rule = "ActionAllowlist"

    def check(self, intent, ctx):
        if intent.action.type not in self.types:
            return f"action {intent.action.type} is not in the allowlist ({', '.join(sorted(self.types))})"
        return None


@dataclass(frozen=True)
class RecipientAllowlist:
    addresses: FrozenSet[str]
    rule = "RecipientAllowlist"

    def check(self, intent, ctx):
        who = counterparty(intent)
        if who is not None and who.lower() not in self.addresses:
            return f"recipient {who} is not allowlisted"
        return None


@dataclass(frozen=True)
class TokenAllowlist:
    tokens: FrozenSet[TokenKey]
    rule = "TokenAllowlist"

    def check(self, intent, ctx):
        action = intent.action
        if isinstance(action, Transfer):
            used = [action.token]
        elif isinstance(action, Swap):
            used = [action.token_in, action.token_out]
        else:
            return None
        for token in used:
            if token.key not in self.tokens:
                return f"token {_token_label(token.key)} is not allowlisted"
        return None


@dataclass(frozen=True)
class PerTxCap:
    token: TokenKey
    max_amount: int
    rule = "PerTxCap"

    def check(self, intent, ctx):
        amount = token_amounts(intent).get(self.token)
        if amount is not None and amount > self.max_amount:
            return f"amount {amount} of {_token_label(self.token)} exceeds the per-transaction cap {self.max_amount}"
        return None


@dataclass(frozen=True)
class WindowCap:
    token: TokenKey
    max_amount: int
    window_seconds: int
    rule = "WindowCap"

    def check(self, intent, ctx):
        amount = token_amounts(intent).get(self.token)
        if amount is None:
            return None
        used = ctx.consumed(self.token, self.window_seconds)
        if used + amount > self.max_amount:
            return (
                f"{used} + {amount} of {_token_label(self.token)} exceeds {self.max_amount} "
                f"per {self.window_seconds}s window"
            )
        return None


@dataclass(frozen=True)
class CadenceMin:
    """Minimum spacing between actions whose scope key matches a glob pattern."""

    min_seconds_between: int
    scope_key: str
    rule = "CadenceMin"

    def last_action(self, ctx) -> Optional[int]:
        times = [ts for key, ts in ctx.last_action_at.items() if fnmatchcase(key, self.scope_key)]
        return max(times) if times else None

    def check(self, intent, ctx):
        if not fnmatchcase(scope_key(intent), self.scope_key):
            return None
        last = self.last_action(ctx)
        if last is not None and ctx.clock - last < self.min_seconds_between:
            return (
                f"last action on {self.scope_key} was {ctx.clock - last}s ago, "
                f"minimum spacing is {self.min_seconds_between}s"
            )
        return None


@dataclass(frozen=True)
class DeadlineMax:
    max_seconds_ahead: int
    rule = "DeadlineMax"

    def check(self, intent, ctx):
        deadline = intent.constraints.deadline
        if deadline < ctx.clock:
            return f"deadline {deadline} has already elapsed at {ctx.clock}"
        if deadline - ctx.clock > self.max_seconds_ahead:
            return f"deadline is {deadline - ctx.clock}s ahead, limit is {self.max_seconds_ahead}s"
        return None


@dataclass(frozen=True)
class GasCeiling:
    """Never rejects; the ceiling is bound into the decision."""

    max_gas_price_wei: int
    rule = "GasCeiling"

    def check(self, intent, ctx):
        return None


@dataclass(frozen=True)
class DelegateScopeGuard:
    max_contracts: int
    max_value_wei: int
    max_validity_seconds: int
    rule = "DelegateScopeGuard"

    def check(self, intent, ctx):
        action = intent.action
        if not isinstance(action, Delegate):
            return None
        scope = action.scope
        contracts = len(scope.contracts or ())
        if contracts > self.max_contracts:
            return f"delegation covers {contracts} contracts, limit is {self.max_contracts}"
        if scope.max_value_wei is None:
            return "delegation has no value cap"
        if int(scope.max_value_wei) > self.max_value_wei:
            return f"delegated value {scope.max_value_wei} exceeds {self.max_value_wei}"
        if scope.valid_until is None:
            return "delegation has no expiry"
        if scope.valid_until - ctx.clock > self.max_validity_seconds:
            return f"delegation lasts {scope.valid_until - ctx.clock}s, limit is {self.max_validity_seconds}s"
        return None


@dataclass(frozen=True)
class RequireSigner:
    address: str
    rule = "RequireSigner"

    def check(self, intent, ctx):
        signer = intent.constraints.required_signer
        if signer != self.address:
            return f"required signer {signer} is not {self.address}"
        return None


@dataclass(frozen=True)
class ForcePrivateOrderflow:
    """Never rejects; swaps not already private are rewritten to PRIVATE."""

    rule = "ForcePrivateOrderflow"

    def check(self, intent, ctx):
        return None

    def modifications(self, intent) -> List[Modification]:
        if not isinstance(intent.action, Swap):
            return []
        prefs = intent.preferences
        if prefs is None:
            return [Modification("/preferences", Operation.ADD, {"privacyMode": "PRIVATE"})]
        if prefs.privacy_mode != "PRIVATE":
            return [Modification("/preferences/privacyMode", Operation.ADD, "PRIVATE")]
        return []


Rule = Union[
    ActionAllowlist, RecipientAllowlist, TokenAllowlist, PerTxCap, WindowCap, CadenceMin,
    DeadlineMax, GasCeiling, DelegateScopeGuard, RequireSigner, ForcePrivateOrderflow,
]


# ---------------------------------------------------------------------------
# Advisory signals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdvisorySignal:
    kind: str
    name: str
    threshold: Optional[int] = None
    seconds: Optional[int] = None

    def triggered(self, intent: Intent, ctx: EvaluationContext) -> bool:
        action = intent.action
        if self.kind == "AmountAbove":
            amounts = list(token_amounts(intent).values())
            if isinstance(action, Delegate) and action.scope and action.scope.max_value_wei is not None:
                amounts.append(int(action.scope.max_value_wei))
            return any(a > self.threshold for a in amounts)
        if self.kind == "MissingNonce":
            return intent.constraints.nonce is None
        if self.kind == "PublicOrderflow":
            return intent.preferences is not None and intent.preferences.privacy_mode == "PUBLIC"
        if self.kind == "LongDeadline":
            return intent.constraints.deadline - ctx.clock > self.seconds
        if self.kind == "UnboundedDelegation":
            return isinstance(action, Delegate) and (action.scope is None or action.scope.max_value_wei is None)
        if self.kind == "NewCounterparty":
            return scope_key(intent) not in ctx.last_action_at
        raise ValueError(f"unknown advisory signal kind {self.kind!r}")


@dataclass(frozen=True)
class PolicySet:
    policy_id: str
    rules: Tuple[Rule, ...] = ()
    advisory_signals: Tuple[AdvisorySignal, ...] = ()
    description: Optional[str] = None

    @property
    def retain_seconds(self) -> Optional[int]:
        """Longest spend window any rule looks at; None keeps every entry."""
        windows = [r.window_seconds for r in self.rules if isinstance(r, WindowCap)]
        return max(windows) if windows else None


def _rule_from_json(doc: Dict[str, Any]) -> Rule:
    kind = doc["rule"]
    if kind == "ActionAllowlist":
        return ActionAllowlist(frozenset(doc["types"]))
    if kind == "RecipientAllowlist":
        return RecipientAllowlist(frozenset(a.lower() for a in doc["addresses"]))
    if kind == "TokenAllowlist":
        return TokenAllowlist(frozenset(_token_key(t) for t in doc["tokens"]))
    if kind == "PerTxCap":
        return PerTxCap(_token_key(doc["token"]), int(doc["maxAmount"]))
    if kind == "WindowCap":
        return WindowCap(_token_key(doc["token"]), int(doc["maxAmount"]), doc["windowSeconds"])
    if kind == "CadenceMin":
        return CadenceMin(doc["minSecondsBetween"], doc["scopeKey"])
    if kind == "DeadlineMax":
        return DeadlineMax(doc["maxSecondsAhead"])
    if kind == "GasCeiling":
        return GasCeiling(int(doc["maxGasPriceWei"]))
    if kind == "DelegateScopeGuard":
        return DelegateScopeGuard(doc["maxContracts"], int(doc["maxValueWei"]), doc["maxValiditySeconds"])
    if kind == "RequireSigner":
        return RequireSigner(doc["address"].lower())
    if kind == "ForcePrivateOrderflow":
        return ForcePrivateOrderflow()
    raise ValueError(f"unknown rule {kind!r}")


def _signal_from_json(doc: Dict[str, Any]) -> AdvisorySignal:
    threshold = doc.get("threshold")
    return AdvisorySignal(
        kind=doc["kind"],
        name=doc.get("name", doc["kind"]),
        threshold=int(threshold) if threshold is not None else None,
        seconds=doc.get("seconds"),
    )


def load_policy(source: Union[str, Dict[str, Any]]) -> PolicySet:
    """Load a policy file (path) or decoded document, schema-checked.

    Raises:
        MalformedJson, SchemaViolation
    """
    doc = read_json_file(source) if isinstance(source, str) else source
    validate_document("policy", doc)
    policy = PolicySet(
        policy_id=doc["policyId"],
        rules=tuple(_rule_from_json(r) for r in doc["rules"]),
        advisory_signals=tuple(_signal_from_json(s) for s in doc.get("advisorySignals", [])),
        description=doc.get("description"),
    )
    logger.info(f"📜 Loaded policy {policy.policy_id} ({len(policy.rules)} rules, {len(policy.advisory_signals)} signals)")
    return policy


# ---------------------------------------------------------------------------
# Evaluation and issuance
# ---------------------------------------------------------------------------

def risk_score(intent: Intent, policy: PolicySet, ctx: EvaluationContext) -> Decimal:
    """Fraction of advisory signals triggered, half-even to 6 places."""
    if not policy.advisory_signals:
        return Decimal("0")
    hits = sum(1 for s in policy.advisory_signals if s.triggered(intent, ctx))
    return (Decimal(hits) / Decimal(len(policy.advisory_signals))).quantize(RISK_QUANTUM, rounding=ROUND_HALF_EVEN)


def _bound_constraints(intent, policy, ctx, ttl_seconds) -> Optional[BoundConstraints]:
    gas = [r.max_gas_price_wei for r in policy.rules if isinstance(r, GasCeiling)]
    deadline_rules = [r for r in policy.rules if isinstance(r, DeadlineMax)]
    value_caps = [r.max_value_wei for r in policy.rules if isinstance(r, DelegateScopeGuard)]

    tight = None
    if deadline_rules:
        ahead = ttl_seconds if ttl_seconds is not None else min(r.max_seconds_ahead for r in deadline_rules)
        tight = min(intent.constraints.deadline, ctx.clock + ahead)
    max_value = min(value_caps) if value_caps and isinstance(intent.action, Delegate) else None

    bound = BoundConstraints(
        max_gas_price_wei=str(min(gas)) if gas else None,
        max_value_wei=str(max_value) if max_value is not None else None,
        tight_deadline=tight,
    )
    return None if bound.empty else bound


def evaluate(
    intent: Intent,
    policy: PolicySet,
    ctx: EvaluationContext,
    ttl_seconds: Optional[int] = None,
) -> Decision:
    """Deny-overrides evaluation; the reason names the first failing rule."""
    score = risk_score(intent, policy, ctx)
    if not policy.rules:
        return Decision(
            outcome=Outcome.REJECTED,
            policy_id=policy.policy_id,
            reason="default-deny: the policy has no rules",
            risk_score=score,
        )

    for rule in policy.rules:
        failure = rule.check(intent, ctx)
        if failure is not None:
            logger.debug(f"❌ {rule.rule} rejected {intent.intent_id}: {failure}")
            return Decision(
                outcome=Outcome.REJECTED,
                policy_id=policy.policy_id,
                reason=f"{rule.rule}: {failure}",
                risk_score=score,
            )

    mods = []
    for rule in policy.rules:
        if isinstance(rule, ForcePrivateOrderflow):
            mods.extend(rule.modifications(intent))

    return Decision(
        outcome=Outcome.APPROVED,
        policy_id=policy.policy_id,
        risk_score=score,
        bound_constraints=_bound_constraints(intent, policy, ctx, ttl_seconds),
        modified_parameters=tuple(mods) if mods else None,
    )


def issue_pdr(
    intent: Intent,
    decision: Decision,
    issuer_key: Keypair,
    issuer_id: str,
    audience: str,
    ttl_seconds: int,
    ctx: EvaluationContext,
    pdr_id: Optional[str] = None,
) -> PolicyDecisionRecord:
    """Sign a PDR binding `decision` to the hash of `intent`.

    Raises:
        ClockInvalid: non-positive ttl or negative clock
    """
    if ttl_seconds is None or ttl_seconds <= 0:
        raise ClockInvalid(f"ttl must be positive, got {ttl_seconds}")
    if ctx.clock < 0:
        raise ClockInvalid(f"clock must be non-negative, got {ctx.clock}")
    pdr = PolicyDecisionRecord(
        pdr_id=pdr_id or str(uuid.uuid4()),
        issuer=issuer_id,
        subject=intent.constraints.required_signer,
        audience=audience,
        issued_at=ctx.clock,
        expires_at=ctx.clock + ttl_seconds,
        tis_hash=intent_hash(intent).to_text(),
        decision=decision,
    )
    signed = attach_signature(pdr, issuer_key)
    logger.info(f"🔏 Issued PDR {signed.pdr_id} ({decision.outcome.value}) for intent {intent.intent_id}")
    return signed


# ---------------------------------------------------------------------------
# Spend accounting
# ---------------------------------------------------------------------------

def _apply_spend(
    ctx: EvaluationContext,
    key: str,
    spends: Dict[TokenKey, int],
    at: int,
    retain_seconds: Optional[int] = None,
) -> EvaluationContext:
    last = ctx.last_action_at.get(key)
    if last is not None and at < last:
        raise TimestampRegression(f"{key}: {at} is earlier than the recorded {last}")
    for token in spends:
        entries = ctx.spend_ledger.get(token, ())
        if entries and at < entries[-1].ts:
            raise TimestampRegression(f"{_token_label(token)}: {at} is earlier than the recorded {entries[-1].ts}")

    ledger = dict(ctx.spend_ledger)
    for token, amount in spends.items():
        ledger[token] = ledger.get(token, ()) + (SpendEntry(at, amount),)
    if retain_seconds is not None:
        ledger = {
            token: tuple(e for e in entries if e.ts > at - retain_seconds)
            for token, entries in ledger.items()
        }
    history = dict(ctx.last_action_at)
    history[key] = at
    return replace(ctx, spend_ledger=ledger, last_action_at=history)


def record_spend(
    ctx: EvaluationContext,
    intent: Intent,
    at: int,
    retain_seconds: Optional[int] = None,
) -> EvaluationContext:
    """New context that includes an executed intent.

    Raises:
        TimestampRegression: `at` is earlier than the latest entry for the same key
    """
    return _apply_spend(ctx, scope_key(intent), token_amounts(intent), at, retain_seconds)


class SpendJournal:
    """Append-only JSON-lines spend ledger, one record per executed intent."""

    def __init__(self, path: str):
        self.path = path

    def append(self, intent: Intent, at: int) -> None:
        record = {
            "ts": at,
            "intentId": intent.intent_id,
            "scopeKey": scope_key(intent),
            "spends": [
                {"chainId": chain_id, "address": address, "amount": str(amount)}
                for (chain_id, address), amount in sorted(token_amounts(intent).items())
            ],
        }
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(canonicalize(record).decode("utf-8") + "\n")

    def load_context(self, clock: int, retain_seconds: Optional[int] = None) -> EvaluationContext:
        ctx = EvaluationContext(clock=clock)
        if not os.path.exists(self.path):
            return ctx
        count = 0
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                spends = {_token_key(s): int(s["amount"]) for s in record["spends"]}
                ctx = _apply_spend(ctx, record["scopeKey"], spends, record["ts"], retain_seconds)
                count += 1
        logger.info(f"📒 Replayed {count} spend records from {self.path}")
        return replace(ctx, clock=clock)

    def record(self, ctx: EvaluationContext, intent: Intent, at: int, retain_seconds: Optional[int] = None) -> EvaluationContext:
        updated = record_spend(ctx, intent, at, retain_seconds)
        self.append(intent, at)
        return updated
