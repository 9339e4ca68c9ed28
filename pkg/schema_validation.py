"""
Draft-07 schema validation with RFC 6901 pointer addressed findings.

Every document kind (tis, pdr, policy, descriptor) has a JSON Schema file in
schemas/. Validation errors from jsonschema are reduced to a single
(pointer, reason) pair that names the offending location as precisely as the
schema allows.
"""

import json
import logging
import os
from decimal import Decimal
from functools import lru_cache
from typing import Any, List, Optional, Tuple, Union

from jsonpointer import JsonPointer
from jsonschema import Draft7Validator, FormatChecker

import config
from errors import MalformedJson, SchemaViolation

logger = logging.getLogger(__name__)

# I-JSON: larger integers do not survive a round trip through an IEEE double
MAX_SAFE_INTEGER = 2 ** 53 - 1


def _reject_constant(name):
    raise MalformedJson(f"{name} is not valid JSON")


def _no_duplicate_keys(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise MalformedJson(f"duplicate object key {key!r}")
        obj[key] = value
    return obj


def load_json(data: Union[bytes, str]) -> Any:
    """Strict wire decoding shared by every document kind.

    Non-integral numbers decode as Decimal so that 1.0 or 1e3 never satisfy an
    integer-typed field.
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedJson(f"input is not UTF-8: {e}") from e
    else:
        text = data
    if not text.strip():
        raise MalformedJson("empty document")
    try:
        return json.loads(
            text,
            parse_float=Decimal,
            parse_constant=_reject_constant,
            object_pairs_hook=_no_duplicate_keys,
        )
    except json.JSONDecodeError as e:
        raise MalformedJson(str(e)) from e


def read_json_file(path: str) -> Any:
    with open(path, "rb") as f:
        return load_json(f.read())

SCHEMA_FILES = {
    "tis": "tis.schema.json",
    "pdr": "pdr.schema.json",
    "policy": "policy.schema.json",
    "descriptor": "descriptor.schema.json",
}


@lru_cache(maxsize=None)
def get_validator(kind: str) -> Draft7Validator:
    """Load (once) the validator for a document kind."""
    if kind not in SCHEMA_FILES:
        raise KeyError(f"unknown schema kind: {kind}")
    path = os.path.join(config.SCHEMA_DIR, SCHEMA_FILES[kind])
    with open(path, "r", encoding="utf-8") as f:
        schema = json.load(f)
    Draft7Validator.check_schema(schema)
    logger.debug(f"📐 Loaded {kind} schema from {path}")
    # FormatChecker() carries every registered format, uuid included
    return Draft7Validator(schema, format_checker=FormatChecker())


def to_pointer(parts) -> str:
    return JsonPointer.from_parts([str(p) for p in parts]).path


def _sort_key(parts) -> Tuple:
    return tuple((0, p, "") if isinstance(p, int) else (1, 0, str(p)) for p in parts)


def _describe(error) -> Tuple[List[Any], str]:
    """Location parts and reason for one (leaf) jsonschema error."""
    parts = list(error.absolute_path)
    instance = error.instance

    if error.validator == "additionalProperties" and isinstance(instance, dict):
        allowed = set(error.schema.get("properties", {}))
        extras = sorted(k for k in instance if k not in allowed)
        if extras:
            return parts + [extras[0]], f"additional property '{extras[0]}' is not allowed"

    if error.validator == "required" and isinstance(instance, dict):
        missing = [k for k in error.validator_value if k not in instance]
        if missing:
            return parts + [missing[0]], f"required property '{missing[0]}' is missing"

    if error.validator == "oneOf" and isinstance(instance, dict):
        return _describe_one_of(error, parts)

    return parts, error.message


def _is_discriminator_error(e) -> bool:
    return e.validator == "const" and len(e.relative_path) == 1


def _missing_everywhere(branches) -> Optional[str]:
    """A required key every branch reports missing (the absent discriminator)."""
    missing_sets = []
    for errs in branches:
        missing = []
        for e in errs:
            if e.validator == "required" and not e.relative_path:
                missing.extend(k for k in e.validator_value if k not in e.instance)
        missing_sets.append(missing)
    if not missing_sets:
        return None
    common = [k for k in missing_sets[0] if all(k in m for m in missing_sets[1:])]
    return common[0] if common else None


def _describe_one_of(error, parts) -> Tuple[List[Any], str]:
    """Pick the branch whose const discriminator matches and report inside it.

    Tagged variants (action `type`, policy `rule`, signal `kind`) are oneOf
    branches that each pin one property with const.
    """
    instance = error.instance
    branches = {}
    for sub in error.context:
        branches.setdefault(sub.relative_schema_path[0], []).append(sub)

    candidates = [errs for errs in branches.values() if not any(_is_discriminator_error(e) for e in errs)]
    if len(candidates) == 1 and len(branches) > 1:
        return _first_of(candidates[0])

    absent = _missing_everywhere(branches.values())
    if absent is not None:
        return parts + [absent], f"required property '{absent}' is missing"

    keys = sorted({e.relative_path[0] for errs in branches.values() for e in errs if _is_discriminator_error(e)})
    if keys:
        key = keys[0]
        return parts + [key], f"{instance.get(key)!r} is not a supported {key}"
    return parts, error.message


def _first_of(errors) -> Tuple[List[Any], str]:
    described = [_describe(e) for e in errors]
    described.sort(key=lambda d: _sort_key(d[0]))
    return described[0]


def find_violation(kind: str, document: Any) -> Optional[Tuple[str, str]]:
    """First violation of the schema in pointer order, or None when valid."""
    errors = list(get_validator(kind).iter_errors(document))
    if not errors:
        return None
    parts, reason = _first_of(errors)
    return to_pointer(parts), reason


def _unsafe_integers(value, parts):
    if isinstance(value, int) and not isinstance(value, bool):
        if abs(value) > MAX_SAFE_INTEGER:
            yield parts
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _unsafe_integers(item, parts + [key])
    elif isinstance(value, list):
        for i, item in enumerate(value):
            yield from _unsafe_integers(item, parts + [i])


def find_unsafe_integer(document: Any) -> Optional[Tuple[str, str]]:
    """First integer, in pointer order, that cannot be canonicalized."""
    found = sorted(_unsafe_integers(document, []), key=_sort_key)
    if not found:
        return None
    return to_pointer(found[0]), f"integer exceeds {MAX_SAFE_INTEGER} (2^53 - 1)"


def validate_document(kind: str, document: Any) -> None:
    """Raise SchemaViolation at the first offending pointer."""
    violation = find_violation(kind, document) or find_unsafe_integer(document)
    if violation is not None:
        pointer, reason = violation
        logger.debug(f"❌ {kind} schema violation at {pointer or '(root)'}: {reason}")
        raise SchemaViolation(pointer, reason)
