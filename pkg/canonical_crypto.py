"""
Canonical serialization, keccak-256 hashing and secp256k1 signatures.

This is the binding layer shared by intent hashing and decision record
signatures:
- canonicalize(): RFC 8785 (JCS) bytes, with floats allowed only at named pointers
- keccak256() / intent_hash(): 32-byte digests rendered as 0x + 64 hex
- keygen() / sign_digest() / verify_signature(): recoverable ECDSA over
  secp256k1 with Ethereum-style address derivation
"""

import logging
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, FrozenSet, Optional, Union

import rfc8785
from coincurve import PrivateKey, PublicKey
from Crypto.Hash import keccak as _keccak
from jsonpointer import escape

from errors import InvalidSeed, MalformedSignature, UncanonicalizableNumber

logger = logging.getLogger(__name__)

# secp256k1 group order
CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
HALF_ORDER = CURVE_ORDER // 2

MAX_FRACTION_DIGITS = 6

_DIGEST_RE = re.compile(r"^0x[a-fA-F0-9]{64}$")
_SIGNATURE_RE = re.compile(r"^0x[a-fA-F0-9]+$")
_KEYFILE_RE = re.compile(r"^0x[a-fA-F0-9]{64}$")


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------

def _canonical_float(value, pointer: str) -> float:
    if isinstance(value, float):
        value = Decimal(repr(value))
    if not value.is_finite():
        raise UncanonicalizableNumber(f"{pointer}: non-finite number")
    if value.normalize().as_tuple().exponent < -MAX_FRACTION_DIGITS:
        raise UncanonicalizableNumber(
            f"{pointer}: {value} has more than {MAX_FRACTION_DIGITS} fractional digits"
        )
    return float(value)


def _prepare(value: Any, pointer: str, float_pointers: FrozenSet[str]) -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, (float, Decimal)):
        if pointer not in float_pointers:
            raise UncanonicalizableNumber(f"{pointer or '(root)'}: non-integer number not permitted here")
        return _canonical_float(value, pointer)
    if isinstance(value, dict):
        out = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise TypeError(f"object key {key!r} at {pointer or '(root)'} is not a string")
            out[key] = _prepare(item, f"{pointer}/{escape(key)}", float_pointers)
        return out
    if isinstance(value, (list, tuple)):
        return [_prepare(item, f"{pointer}/{i}", float_pointers) for i, item in enumerate(value)]
    raise TypeError(f"cannot canonicalize {type(value).__name__} at {pointer or '(root)'}")


def canonicalize(value: Any, float_pointers: FrozenSet[str] = frozenset()) -> bytes:
    """Unique UTF-8 serialization of a JSON value.

    Args:
        value: decoded JSON (dict/list/str/int/bool/None)
        float_pointers: RFC 6901 pointers where a non-integer number may appear

    Raises:
        UncanonicalizableNumber: a float outside float_pointers, a float with
            more than six fractional digits, or an integer outside the I-JSON range
    """
    prepared = _prepare(value, "", frozenset(float_pointers))
    try:
        return rfc8785.dumps(prepared)
    except rfc8785.CanonicalizationError as e:
        raise UncanonicalizableNumber(str(e)) from e


# ---------------------------------------------------------------------------
# Digests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Digest32:
    value: bytes

    def __post_init__(self):
        if len(self.value) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(self.value)}")

    def to_text(self) -> str:
        return "0x" + self.value.hex()

    @classmethod
    def from_text(cls, text: str) -> "Digest32":
        if not isinstance(text, str) or not _DIGEST_RE.match(text):
            raise ValueError(f"not a 32-byte hex digest: {text!r}")
        return cls(bytes.fromhex(text[2:]))

    def __str__(self):
        return self.to_text()


def keccak256(data: bytes) -> Digest32:
    """Keccak-256 (the pre-standard padding, not SHA3-256)."""
    h = _keccak.new(digest_bits=256)
    h.update(data)
    return Digest32(h.digest())


def intent_hash(intent) -> Digest32:
    """keccak-256 over the canonical bytes of an intent (typed or raw document)."""
    document = intent.to_json() if hasattr(intent, "to_json") else intent
    return keccak256(canonicalize(document))


# ---------------------------------------------------------------------------
# Keys and signatures
# ---------------------------------------------------------------------------

def public_key_to_address(public: bytes) -> str:
    """Address = last 20 bytes of keccak-256 over the 64-byte x||y public key."""
    if len(public) == 65:
        public = public[1:]
    if len(public) != 64:
        raise ValueError(f"expected 64-byte public key, got {len(public)}")
    return "0x" + keccak256(public).value[12:].hex()


@dataclass(frozen=True)
class Keypair:
    secret: bytes = field(repr=False)
    public: bytes
    address: str


def keygen(seed: bytes) -> Keypair:
    """Deterministic keypair from a 32-byte seed reduced modulo the curve order."""
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise InvalidSeed("seed must be exactly 32 bytes")
    scalar = int.from_bytes(seed, "big") % CURVE_ORDER
    if scalar == 0:
        raise InvalidSeed("seed reduces to zero modulo the curve order")
    secret = scalar.to_bytes(32, "big")
    public = PrivateKey(secret).public_key.format(compressed=False)[1:]
    return Keypair(secret=secret, public=public, address=public_key_to_address(public))


@dataclass(frozen=True)
class SignatureBytes:
    r: int
    s: int
    v: int

    def to_bytes(self) -> bytes:
        return self.r.to_bytes(32, "big") + self.s.to_bytes(32, "big") + bytes([self.v])

    def to_text(self) -> str:
        return "0x" + self.to_bytes().hex()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SignatureBytes":
        if len(raw) != 65:
            raise MalformedSignature(f"signature must be 65 bytes, got {len(raw)}")
        return cls(
            r=int.from_bytes(raw[:32], "big"),
            s=int.from_bytes(raw[32:64], "big"),
            v=raw[64],
        )

    @classmethod
    def from_text(cls, text: str) -> "SignatureBytes":
        if not isinstance(text, str) or not _SIGNATURE_RE.match(text) or len(text) % 2:
            raise MalformedSignature(f"not a hex signature: {text!r}")
        return cls.from_bytes(bytes.fromhex(text[2:]))

    def check(self) -> None:
        """Range checks; high-s signatures are rejected as malleable."""
        if not 1 <= self.r < CURVE_ORDER:
            raise MalformedSignature("r out of range")
        if not 1 <= self.s < CURVE_ORDER:
            raise MalformedSignature("s out of range")
        if self.s > HALF_ORDER:
            raise MalformedSignature("s is not low-s normalized")
        if self.v not in (0, 1):
            raise MalformedSignature(f"recovery id must be 0 or 1, got {self.v}")


def sign_digest(key: Keypair, digest: Digest32) -> SignatureBytes:
    # libsecp256k1 derives the nonce per RFC 6979 and emits low-s
    raw = PrivateKey(key.secret).sign_recoverable(digest.value, hasher=None)
    return SignatureBytes.from_bytes(raw)


def recover_address(digest: Digest32, sig: SignatureBytes) -> Optional[str]:
    """Signer address, or None when no public key recovers."""
    sig.check()
    try:
        public = PublicKey.from_signature_and_message(sig.to_bytes(), digest.value, hasher=None)
    except Exception as e:
        logger.debug(f"⚠️ Public key recovery failed: {e}")
        return None
    return public_key_to_address(public.format(compressed=False))


def verify_signature(digest: Digest32, sig: Union[SignatureBytes, str], expected: str) -> bool:
    """True iff the address recovered from (digest, sig) equals expected.

    Raises:
        MalformedSignature: wrong length, r/s out of range, high s or bad recovery id
    """
    if isinstance(sig, str):
        sig = SignatureBytes.from_text(sig)
    recovered = recover_address(digest, sig)
    return recovered is not None and recovered == expected.lower()


# ---------------------------------------------------------------------------
# Key files
# ---------------------------------------------------------------------------

def write_keyfile(path: str, key: Keypair) -> None:
    """Single line 0x-hex secret, readable by the owner only."""
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write("0x" + key.secret.hex() + "\n")
    os.chmod(path, 0o600)
    logger.info(f"🔐 Wrote key for {key.address} to {path}")


def read_keyfile(path: str) -> Keypair:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read().strip()
    if not _KEYFILE_RE.match(text):
        raise InvalidSeed(f"{path} does not hold a 0x-prefixed 32-byte hex secret")
    return keygen(bytes.fromhex(text[2:]))
