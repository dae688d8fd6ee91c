"""Canonical textual object encoding and content digests.

Everything that crosses a process boundary (snapshots, wire frames, auth
envelopes) is encoded with this one function so byte-identical output is
guaranteed for equal objects: JSON with lexicographically sorted keys, no
whitespace, ASCII-escaped strings. Only ints, strings, bools, None, lists
and string-keyed dicts are allowed; floats are rejected to keep the
encoding deterministic.
"""

import hashlib
import json

DIGEST_ALG = "sha256"


def _reject_floats(obj):
    if isinstance(obj, float):
        raise ValueError("floats are not canonically encodable")
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise ValueError("object keys must be strings")
            _reject_floats(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _reject_floats(v)


def encode(obj) -> bytes:
    """Canonical byte encoding of a plain object tree."""
    _reject_floats(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def decode(data: bytes):
    return json.loads(data.decode("utf-8"))


def digest(obj) -> str:
    """Lowercase hex content hash of the canonical encoding."""
    return digest_bytes(encode(obj))


def digest_bytes(data: bytes) -> str:
    return hashlib.new(DIGEST_ALG, data).hexdigest()
