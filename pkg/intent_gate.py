#!/usr/bin/env python3
"""
intent-gate command line.

Every pipeline stage is a subcommand. stdout carries exactly one canonical JSON
document (raw bytes for `canonicalize`, JSON lines for `simulate`); logs go to
stderr. Exit codes: 0 ok, 1 usage, 2 validation, 3 policy REJECTED,
4 gate refusal, 5 I/O or crypto.
"""

import argparse
import fcntl
import logging
import os
import sys
import uuid
from contextlib import contextmanager
from typing import Any, FrozenSet, Optional

import config
from canonical_crypto import canonicalize, intent_hash, keccak256, keygen, read_keyfile, write_keyfile
from conformance_audit import audit_checklist, classify, load_descriptor
from errors import (
    ClockInvalid,
    GateRefused,
    InvalidSeed,
    MalformedJson,
    MalformedSignature,
    PointerUnresolvable,
    ResultInvalid,
    ScenarioConfigError,
    SchemaViolation,
    TimestampRegression,
    UncanonicalizableNumber,
    UnsupportedLegacyShape,
)
from intent_model import Intent, intent_from_document, normalize_legacy_intent, render_preview
from pdr_model import FLOAT_POINTERS, pdr_from_document
from pipeline_sim import load_scenario, simulate
from policy_engine import SpendJournal, evaluate, issue_pdr, load_policy
from schema_validation import read_json_file
from signer_gate import AuditLog, NonceRegistry, TrustAnchors, gate, verify_pair

logger = logging.getLogger("intent_gate")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_REJECTED = 3
EXIT_REFUSED = 4
EXIT_IO = 5

# first match wins
EXIT_CODES = (
    ((GateRefused, PointerUnresolvable, ResultInvalid), EXIT_REFUSED),
    ((ClockInvalid,), EXIT_USAGE),
    (
        (
            MalformedJson,
            SchemaViolation,
            UnsupportedLegacyShape,
            UncanonicalizableNumber,
            ScenarioConfigError,
            TimestampRegression,
        ),
        EXIT_INVALID,
    ),
    ((InvalidSeed, MalformedSignature, OSError), EXIT_IO),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; usage errors are 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _emit(doc: Any, float_pointers: FrozenSet[str] = frozenset()) -> None:
    sys.stdout.write(canonicalize(doc, float_pointers).decode("utf-8") + "\n")


def _emit_text(text: str) -> None:
    sys.stdout.write(text + "\n")


def _read_intent(path: str, legacy: bool = False) -> Intent:
    doc = read_json_file(path)
    if legacy:
        return normalize_legacy_intent(doc, default_chain_id=config.LEGACY_DEFAULT_CHAIN_ID)
    return intent_from_document(doc)


def _detect_kind(doc: Any) -> str:
    if not isinstance(doc, dict):
        raise SchemaViolation("", "document is not an object")
    has_action, has_decision = "action" in doc, "decision" in doc
    if has_action and not has_decision:
        return "tis"
    if has_decision and not has_action:
        return "pdr"
    raise UsageError("cannot tell a TIS from a PDR: expected exactly one of 'action' or 'decision'")


def _derived_pdr_id(tis_hash: str, issued_at: int, policy_id: str) -> str:
    """Stable pdrId for a (tis, clock, policy) triple so `pdr issue` is reproducible."""
    seed = keccak256(f"{tis_hash}|{issued_at}|{policy_id}".encode("utf-8")).value
    return str(uuid.UUID(bytes=seed[:16], version=4))


def _ledger_path(args) -> str:
    return args.ledger or config.home_path(config.SPEND_LEDGER_FILE)


@contextmanager
def _exclusive(path: str):
    """Advisory lock so concurrent `gate` runs against one journal serialize."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path + ".lock", "a") as handle:
        fcntl.flock(handle, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(handle, fcntl.LOCK_UN)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    kind = "tis" if args.legacy else "unknown"
    try:
        doc = read_json_file(args.file)
    except MalformedJson as e:
        _emit({"kind": kind, "valid": False, "reason": str(e)})
        return EXIT_INVALID
    try:
        if args.legacy:
            intent = normalize_legacy_intent(doc, default_chain_id=config.LEGACY_DEFAULT_CHAIN_ID)
        else:
            kind = _detect_kind(doc)
            if kind == "tis":
                intent = intent_from_document(doc)
            else:
                pdr = pdr_from_document(doc)
    except SchemaViolation as e:
        _emit({"kind": kind, "valid": False, "pointer": e.pointer, "reason": e.reason})
        return EXIT_INVALID
    except UnsupportedLegacyShape as e:
        _emit({"kind": kind, "valid": False, "reason": str(e)})
        return EXIT_INVALID
    if kind == "tis":
        _emit({"kind": kind, "valid": True, "tisHash": intent_hash(intent).to_text()})
    else:
        _emit({"kind": kind, "valid": True, "pdrId": pdr.pdr_id})
    return EXIT_OK


def cmd_canonicalize(args) -> int:
    doc = read_json_file(args.file)
    if args.legacy:
        out = canonicalize(normalize_legacy_intent(doc, default_chain_id=config.LEGACY_DEFAULT_CHAIN_ID).to_json())
    elif _detect_kind(doc) == "tis":
        out = canonicalize(intent_from_document(doc).to_json())
    else:
        out = pdr_from_document(doc).canonical_bytes()
    sys.stdout.buffer.write(out)
    sys.stdout.flush()
    return EXIT_OK


def cmd_hash(args) -> int:
    _emit_text(intent_hash(_read_intent(args.file, args.legacy)).to_text())
    return EXIT_OK


def cmd_keygen(args) -> int:
    text = args.seed[2:] if args.seed.startswith("0x") else args.seed
    try:
        seed = bytes.fromhex(text)
    except ValueError as e:
        raise InvalidSeed(f"seed is not hex: {e}") from e
    key = keygen(seed)
    write_keyfile(args.out, key)
    _emit({"address": key.address, "keyfile": args.out})
    return EXIT_OK


def cmd_preview(args) -> int:
    intent = _read_intent(args.file, args.legacy)
    _emit({"intentId": intent.intent_id, "preview": render_preview(intent)})
    return EXIT_OK


def cmd_policy_eval(args) -> int:
    intent = _read_intent(args.tis, args.legacy)
    policy = load_policy(args.policy)
    ctx = SpendJournal(_ledger_path(args)).load_context(args.now, policy.retain_seconds)
    decision = evaluate(intent, policy, ctx, ttl_seconds=args.ttl)
    _emit(decision.to_json(), frozenset({"/riskScore"}))
    return EXIT_OK if decision.approved else EXIT_REJECTED


def cmd_policy_record(args) -> int:
    intent = _read_intent(args.tis, args.legacy)
    retain = load_policy(args.policy).retain_seconds if args.policy else None
    journal = SpendJournal(_ledger_path(args))
    ctx = journal.load_context(args.now, retain)
    journal.record(ctx, intent, args.now, retain)
    _emit({"recorded": intent.intent_id, "at": args.now, "ledger": journal.path})
    return EXIT_OK


def cmd_pdr_issue(args) -> int:
    intent = _read_intent(args.tis, args.legacy)
    policy = load_policy(args.policy)
    key = read_keyfile(args.key)
    ctx = SpendJournal(_ledger_path(args)).load_context(args.now, policy.retain_seconds)
    decision = evaluate(intent, policy, ctx, ttl_seconds=args.ttl)
    pdr_id = args.pdr_id or _derived_pdr_id(intent_hash(intent).to_text(), args.now, policy.policy_id)
    pdr = issue_pdr(intent, decision, key, args.issuer, args.audience, args.ttl, ctx, pdr_id=pdr_id)
    _emit(pdr.to_json(), FLOAT_POINTERS)
    return EXIT_OK if decision.approved else EXIT_REJECTED


def _anchors(args) -> TrustAnchors:
    return TrustAnchors.load(args.anchors, identity=args.identity)


def cmd_pdr_verify(args) -> int:
    intent = _read_intent(args.tis, args.legacy)
    pdr = pdr_from_document(read_json_file(args.pdr))
    registry = NonceRegistry.open(args.registry) if args.registry else None
    report = verify_pair(intent, pdr, _anchors(args), args.now, registry=registry, skew_seconds=args.skew)
    if args.format == "table":
        _emit_text(report.to_table())
    else:
        _emit(report.to_json())
    return EXIT_OK if report.passed else EXIT_REFUSED


def cmd_gate(args) -> int:
    intent = _read_intent(args.tis, args.legacy)
    pdr = pdr_from_document(read_json_file(args.pdr))
    anchors = _anchors(args)
    registry_path = args.registry or config.home_path(config.REGISTRY_JOURNAL_FILE)
    audit_log = AuditLog(args.audit_log or config.home_path(config.AUDIT_LOG_FILE))
    with _exclusive(registry_path):
        registry = NonceRegistry.open(registry_path)
        try:
            envelope = gate(intent, pdr, anchors, registry, args.now, audit_log=audit_log, skew_seconds=args.skew)
        except GateRefused as e:
            _emit(e.report.to_json())
            return EXIT_REFUSED
    _emit(envelope.to_json())
    return EXIT_OK


def cmd_simulate(args) -> int:
    transcripts = simulate(load_scenario(args.scenario))
    for transcript in transcripts:
        sys.stdout.write(transcript.to_json_lines())
    return EXIT_OK


def cmd_audit(args) -> int:
    descriptor = load_descriptor(args.descriptor)
    report = classify(descriptor)
    if args.level_only:
        _emit({"level": report.level.value})
        return EXIT_OK
    checklist = audit_checklist(descriptor)
    if args.format == "table":
        _emit_text(report.to_table() + "\n\n" + checklist.to_table())
    else:
        _emit({"conformance": report.to_json(), "checklist": checklist.to_json()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _tis_flags(p, flag=True):
    if flag:
        p.add_argument("--tis", required=True, help="TIS document")
    p.add_argument("--legacy", action="store_true", help="Input is a legacy inputs/outputs intent")


def _verify_flags(p):
    _tis_flags(p)
    p.add_argument("--pdr", required=True)
    p.add_argument("--anchors", required=True, help="Trust anchors file")
    p.add_argument("--identity", default=None, help="This signer's audience identity")
    p.add_argument("--now", type=int, required=True, help="Unix seconds")
    p.add_argument("--skew", type=int, default=config.CLOCK_SKEW_SECONDS)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="intent-gate", description="Transaction intent and policy decision tooling")
    ap.add_argument("--log-level", default=config.LOG_LEVEL)
    sub = ap.add_subparsers(dest="cmd", required=True)

    v = sub.add_parser("validate", help="Validate a TIS or PDR (auto-detected)")
    v.add_argument("file")
    v.add_argument("--legacy", action="store_true")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("canonicalize", help="Canonical bytes of a TIS or PDR")
    c.add_argument("file")
    c.add_argument("--legacy", action="store_true")
    c.set_defaults(func=cmd_canonicalize)

    h = sub.add_parser("hash", help="keccak-256 of the canonical TIS")
    h.add_argument("file")
    h.add_argument("--legacy", action="store_true")
    h.set_defaults(func=cmd_hash)

    k = sub.add_parser("keygen", help="Derive a secp256k1 keypair from a 32-byte seed")
    k.add_argument("--seed", required=True, help="64 hex characters")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_keygen)

    pv = sub.add_parser("preview", help="Human-readable preview generated from the TIS")
    pv.add_argument("file")
    pv.add_argument("--legacy", action="store_true")
    pv.set_defaults(func=cmd_preview)

    pol = sub.add_parser("policy")
    pol_sub = pol.add_subparsers(dest="policy_cmd", required=True)

    pe = pol_sub.add_parser("eval", help="Evaluate a TIS against a policy")
    _tis_flags(pe)
    pe.add_argument("--policy", required=True)
    pe.add_argument("--ledger", default=None, help="Spend ledger (JSON lines)")
    pe.add_argument("--now", type=int, required=True)
    pe.add_argument("--ttl", type=int, default=None)
    pe.set_defaults(func=cmd_policy_eval)

    pr = pol_sub.add_parser("record", help="Append an executed TIS to the spend ledger")
    _tis_flags(pr)
    pr.add_argument("--ledger", default=None)
    pr.add_argument("--policy", default=None, help="Prune entries outside the policy's widest window")
    pr.add_argument("--now", type=int, required=True)
    pr.set_defaults(func=cmd_policy_record)

    pdr = sub.add_parser("pdr")
    pdr_sub = pdr.add_subparsers(dest="pdr_cmd", required=True)

    pi = pdr_sub.add_parser("issue", help="Evaluate and sign a PDR")
    _tis_flags(pi)
    pi.add_argument("--policy", required=True)
    pi.add_argument("--key", required=True, help="Issuer keyfile")
    pi.add_argument("--audience", required=True)
    pi.add_argument("--ttl", type=int, default=config.DEFAULT_PDR_TTL_SECONDS)
    pi.add_argument("--now", type=int, required=True)
    pi.add_argument("--issuer", default=config.POLICY_ISSUER_ID)
    pi.add_argument("--ledger", default=None)
    pi.add_argument("--pdr-id", default=None)
    pi.set_defaults(func=cmd_pdr_issue)

    pvf = pdr_sub.add_parser("verify", help="Run the signer-gate checks without consuming")
    _verify_flags(pvf)
    pvf.add_argument("--registry", default=None, help="Registry journal for the replay check")
    pvf.add_argument("--format", choices=["json", "table"], default="json")
    pvf.set_defaults(func=cmd_pdr_verify)

    g = sub.add_parser("gate", help="Verify, consume and emit an execution envelope")
    _verify_flags(g)
    g.add_argument("--registry", default=None, help="Registry journal")
    g.add_argument("--audit-log", default=None)
    g.set_defaults(func=cmd_gate)

    s = sub.add_parser("simulate", help="Run a pipeline scenario file")
    s.add_argument("scenario")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("audit", help="Classify a deployment descriptor")
    a.add_argument("--descriptor", required=True)
    a.add_argument("--level-only", action="store_true")
    a.add_argument("--format", choices=["json", "table"], default="json")
    a.set_defaults(func=cmd_audit)

    return ap


def exit_code_for(error: BaseException) -> Optional[int]:
    for types, code in EXIT_CODES:
        if isinstance(error, types):
            return code
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )

    try:
        return args.func(args)
    except UsageError as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except Exception as e:
        code = exit_code_for(e)
        if code is None:
            raise
        logger.error(f"❌ {type(e).__name__}: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
