"""
Conformance audit for agent deployments.

A deployment declares its security controls in a flat descriptor file. classify()
places it on the L0-L3 ladder (each level includes every control of the levels
below it) and audit_checklist() reports the safety checklist items that can be
decided from the descriptor alone.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from tabulate import tabulate

from schema_validation import read_json_file, validate_document

logger = logging.getLogger(__name__)


class KeyCustody(str, Enum):
    RAW_LOCAL = "RAW_LOCAL"
    SESSION_SCOPED = "SESSION_SCOPED"
    MPC = "MPC"
    TEE_HSM = "TEE_HSM"


class Level(str, Enum):
    L0 = "L0"
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"


class ItemStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    NOT_MACHINE_CHECKABLE = "NOT_MACHINE_CHECKABLE"


@dataclass(frozen=True)
class DeploymentDescriptor:
    key_custody: KeyCustody
    on_chain_policy_modules: bool
    function_allowlist: bool
    contract_allowlist: bool
    static_spend_limits: bool
    off_chain_policy_engine: bool
    mandatory_simulation: bool
    dynamic_risk_scoring: bool
    quorum_for_high_value: bool
    recovery_revocation: bool
    audit_logging: bool
    private_orderflow: bool
    name: Optional[str] = None

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "DeploymentDescriptor":
        validate_document("descriptor", doc)
        return cls(
            key_custody=KeyCustody(doc["keyCustody"]),
            on_chain_policy_modules=doc["onChainPolicyModules"],
            function_allowlist=doc["functionAllowlist"],
            contract_allowlist=doc["contractAllowlist"],
            static_spend_limits=doc["staticSpendLimits"],
            off_chain_policy_engine=doc["offChainPolicyEngine"],
            mandatory_simulation=doc["mandatorySimulation"],
            dynamic_risk_scoring=doc["dynamicRiskScoring"],
            quorum_for_high_value=doc["quorumForHighValue"],
            recovery_revocation=doc["recoveryRevocation"],
            audit_logging=doc["auditLogging"],
            private_orderflow=doc["privateOrderflow"],
            name=doc.get("name"),
        )


def load_descriptor(source: Union[str, Dict[str, Any]]) -> DeploymentDescriptor:
    doc = read_json_file(source) if isinstance(source, str) else source
    return DeploymentDescriptor.from_json(doc)


Check = Callable[[DeploymentDescriptor], bool]


def _hardware_custody(d: DeploymentDescriptor) -> bool:
    return d.key_custody in (KeyCustody.MPC, KeyCustody.TEE_HSM)


# (criterion id, level, description, check), in ladder order
CRITERIA: Tuple[Tuple[str, Level, str, Check], ...] = (
    ("L1.function-allowlist", Level.L1, "function selector allowlist", lambda d: d.function_allowlist),
    ("L1.contract-allowlist", Level.L1, "contract address allowlist", lambda d: d.contract_allowlist),
    ("L1.static-spend-limits", Level.L1, "static per-transaction and daily spend limits", lambda d: d.static_spend_limits),
    ("L1.on-chain-policy-modules", Level.L1, "on-chain policy modules or session keys", lambda d: d.on_chain_policy_modules),
    ("L2.off-chain-policy-engine", Level.L2, "off-chain policy engine", lambda d: d.off_chain_policy_engine),
    ("L2.mandatory-simulation", Level.L2, "mandatory pre-flight simulation and revert checks", lambda d: d.mandatory_simulation),
    # anomaly detection is folded into risk scoring
    ("L2.dynamic-risk-scoring", Level.L2, "dynamic risk scoring and anomaly detection", lambda d: d.dynamic_risk_scoring),
    ("L3.hardware-or-mpc-custody", Level.L3, "MPC or TEE/HSM key custody", _hardware_custody),
    ("L3.quorum-for-high-value", Level.L3, "quorum approval for high-value actions", lambda d: d.quorum_for_high_value),
    ("L3.recovery-revocation", Level.L3, "recovery and revocation procedures", lambda d: d.recovery_revocation),
)

LADDER = (Level.L1, Level.L2, Level.L3)


@dataclass(frozen=True)
class ConformanceReport:
    level: Level
    satisfied: Tuple[str, ...]
    missing_for_next: Tuple[str, ...]
    name: Optional[str] = None

    def to_json(self) -> Dict[str, Any]:
        doc = {
            "level": self.level.value,
            "satisfied": list(self.satisfied),
            "missingForNext": list(self.missing_for_next),
        }
        if self.name is not None:
            doc["name"] = self.name
        return doc

    def to_table(self) -> str:
        satisfied = set(self.satisfied)
        rows = [(cid, level.value, text, "✅" if cid in satisfied else "❌") for cid, level, text, _ in CRITERIA]
        header = f"Conformance level: {self.level.value}"
        return header + "\n" + tabulate(rows, headers=["Criterion", "Level", "Control", "Met"], tablefmt="github")


def classify(d: DeploymentDescriptor) -> ConformanceReport:
    """Highest level whose controls, and those of every level below, are all met."""
    satisfied = tuple(cid for cid, _, _, check in CRITERIA if check(d))
    met = set(satisfied)

    level = Level.L0
    for candidate in LADDER:
        required = [cid for cid, lvl, _, _ in CRITERIA if lvl == candidate]
        if not all(cid in met for cid in required):
            break
        level = candidate

    missing: Tuple[str, ...] = ()
    if level != Level.L3:
        next_level = LADDER[LADDER.index(level) + 1] if level != Level.L0 else Level.L1
        missing = tuple(cid for cid, lvl, _, _ in CRITERIA if lvl == next_level and cid not in met)

    logger.debug(f"📋 Classified {d.name or 'deployment'} as {level.value}")
    return ConformanceReport(level=level, satisfied=satisfied, missing_for_next=missing, name=d.name)


# ---------------------------------------------------------------------------
# Safety checklist
# ---------------------------------------------------------------------------

CHECKLIST: Dict[str, Tuple[str, ...]] = {
    "Observe": (
        "Is the agent using multiple independent RPC providers?",
        "Does the agent validate integrity and freshness of off-chain API data?",
        "Does the agent monitor anomalous on-chain events relevant to its positions?",
        "Is the agent robust to oracle manipulation and stale-price hazards?",
        "Does the agent subscribe to security alert feeds for depended-upon protocols?",
    ),
    "Reason": (
        "Is the agent hardened against instruction hijacking through retrieved content?",
        "Does the agent account for MEV and adversarial ordering incentives?",
        "Does the agent maintain an internal model of its permissions and limits?",
        "Are reasoning traces and tool calls logged for audit review?",
        "Does the agent consider gas, fees, and deadline risk in decision-making?",
    ),
    "Construct": (
        "Does the agent generate standardized intents (TIS) rather than ad-hoc calldata?",
        "Does the agent simulate every value-bearing action on a forked state prior to signing?",
        "Does the agent generate a clear human-readable preview of effects (assets, approvals, state changes)?",
        "Does the agent highlight irreversible or high-risk operations (e.g., unlimited approvals)?",
        "Does every constructed operation include a tight deadline and replay protections?",
    ),
    "Authorize": (
        "Does the system use smart accounts (ERC-4337) where suitable?",
        "Are permissions constrained via on-chain modules (session keys, allowlists, limits)?",
        "Is there an off-chain policy engine for higher-order rules?",
        "Is each policy decision recorded as a verifiable PDR bound to the intent hash?",
        "Is signing isolated in TEE/HSM or distributed via MPC?",
        "Are keys segmented by authority level and operational purpose?",
        "Is there a clear revocation process for agent keys and modules?",
        "Are high-value actions gated by multi-party approval or quorum?",
        "Are per-transaction and time-window spending limits enforced?",
        "Are policy changes protected via time-locks or staged rollout?",
    ),
    "Execute": (
        "Are value-bearing transactions routed via private relays or private orderflow when appropriate?",
        "Are intent-based venues used when they reduce MEV risk (e.g., solver-based execution)?",
        "Does the system estimate fees robustly and adapt to congestion?",
        "Does it handle failed or stuck transactions safely (replacement strategy, cancellation, or unwind)?",
        "Is execution monitored in real time with alerting?",
    ),
    "Verify & Recover": (
        "Does the agent verify outcomes by reading state after execution (not only receipts)?",
        "Does it parse events to confirm expected outcomes and detect anomalies?",
        "Does it recover from partial failures in multi-step workflows (compensation or unwind)?",
        "Is there a kill switch that halts operations quickly and reliably?",
        "Is there an incident response runbook with clear escalation steps?",
    ),
    "General": (
        "Is the architecture and trust model documented clearly for users and auditors?",
        "Has critical code (contracts, modules, policy engine) been audited?",
        "Is there a responsible disclosure or bug bounty program?",
        "Are off-chain communications authenticated and encrypted?",
        "Are secrets stored in a secure vault and rotated under a defined process?",
        "Is the host environment hardened, monitored, and regularly patched?",
        "Is there a safe update process for agent logic and policy rules (staging, rollback)?",
        "Are benchmarks and safety evaluations reported in a reproducible manner?",
        "Is there a governance process for policy changes and emergency actions?",
        "Do users have clear risk disclosures and a dispute-resolution pathway?",
    ),
}

# (section, 1-based item number) -> descriptor check
MACHINE_CHECKS: Dict[Tuple[str, int], Check] = {
    ("Reason", 4): lambda d: d.audit_logging,
    ("Construct", 2): lambda d: d.mandatory_simulation,
    ("Authorize", 1): lambda d: d.on_chain_policy_modules,
    ("Authorize", 2): lambda d: d.on_chain_policy_modules and d.function_allowlist and d.contract_allowlist,
    ("Authorize", 3): lambda d: d.off_chain_policy_engine,
    ("Authorize", 4): lambda d: d.off_chain_policy_engine and d.audit_logging,
    ("Authorize", 5): _hardware_custody,
    ("Authorize", 6): lambda d: d.key_custody != KeyCustody.RAW_LOCAL,
    ("Authorize", 7): lambda d: d.recovery_revocation,
    ("Authorize", 8): lambda d: d.quorum_for_high_value,
    ("Authorize", 9): lambda d: d.static_spend_limits,
    ("Authorize", 10): lambda d: d.on_chain_policy_modules and d.quorum_for_high_value,
    ("Execute", 1): lambda d: d.private_orderflow,
    ("Verify & Recover", 4): lambda d: d.recovery_revocation,
}


@dataclass(frozen=True)
class ChecklistItem:
    section: str
    number: int
    text: str
    status: ItemStatus

    @property
    def item_id(self) -> str:
        return f"{self.section} {self.number}"


@dataclass(frozen=True)
class ChecklistReport:
    items: Tuple[ChecklistItem, ...]

    def count(self, status: ItemStatus) -> int:
        return sum(1 for item in self.items if item.status == status)

    @property
    def failures(self) -> List[ChecklistItem]:
        return [item for item in self.items if item.status == ItemStatus.FAIL]

    def to_json(self) -> Dict[str, Any]:
        return {
            "items": [
                {"section": i.section, "number": i.number, "text": i.text, "status": i.status.value}
                for i in self.items
            ],
            "summary": {status.value: self.count(status) for status in ItemStatus},
        }

    def to_table(self) -> str:
        marks = {ItemStatus.PASS: "✅", ItemStatus.FAIL: "❌", ItemStatus.NOT_MACHINE_CHECKABLE: "—"}
        rows = [(i.item_id, marks[i.status], i.text) for i in self.items]
        return tabulate(rows, headers=["Item", "Status", "Question"], tablefmt="github")


def audit_checklist(d: DeploymentDescriptor) -> ChecklistReport:
    items = []
    for section, questions in CHECKLIST.items():
        for number, text in enumerate(questions, start=1):
            check = MACHINE_CHECKS.get((section, number))
            if check is None:
                status = ItemStatus.NOT_MACHINE_CHECKABLE
            else:
                status = ItemStatus.PASS if check(d) else ItemStatus.FAIL
            items.append(ChecklistItem(section, number, text, status))
    report = ChecklistReport(tuple(items))
    if report.failures:
        logger.info(f"⚠️ {len(report.failures)} checklist items fail for {d.name or 'deployment'}")
    return report
