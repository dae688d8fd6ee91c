"""Identity-based authentication, delegation chains, policies, and quotas.

Identities are time-limited "name@domain" strings issued by a per-domain
key generator that holds the master secret (deliberate key escrow).
Verification is a pure function of (domain params, token, payload, clock):
no registries, no revocation lists; revocation happens by expiry alone.

The shipped signature backend is a deterministic keyed digest (HMAC-SHA256
with domain-escrowed secrets). It is NOT cryptographically meaningful for
mutually distrusting domains and exists so that envelope formats, expiry
and delegation semantics are exercised end to end; a pairing-based backend
can replace it behind the same opaque byte fields.
"""

from __future__ import annotations

import base64
import fnmatch
import hashlib
import hmac
from dataclasses import dataclass

from . import canon
from .errors import InvalidWindow, UnknownCounter, WindowNotNested, WrongDomain

BACKEND = "hmac-sha256"

# verification outcomes
ACCEPT = "ACCEPT"
EXPIRED = "Expired"
NOT_YET_VALID = "NotYetValid"
SIGNATURE_INVALID = "SignatureInvalid"
CHAIN_BROKEN = "ChainBroken"
CHAIN_EXPIRED = "ChainExpired"

PERMIT = "PERMIT"
DENY = "DENY"

OK = "OK"
EXCEEDED = "EXCEEDED"

KNOWN_COUNTERS = ("steps", "threads", "messages", "inbox")


@dataclass(frozen=True)
class IdentityKey:
    identity: str
    not_before: int
    not_after: int
    secret: bytes
    domain: str
    backend: str = BACKEND


@dataclass(frozen=True)
class IdentityToken:
    identity: str
    not_before: int
    not_after: int
    payload_digest: str
    signature: str        # hex


@dataclass(frozen=True)
class DelegationLink:
    parent: str
    child: str
    not_before: int
    not_after: int
    signature: str


@dataclass(frozen=True)
class DelegationChain:
    links: tuple[DelegationLink, ...]


@dataclass(frozen=True)
class PkgState:
    domain: str
    master: bytes


def _split_identity(identity: str) -> tuple[str, str]:
    parts = identity.split("@")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise WrongDomain(f"malformed identity {identity!r}")
    return parts[0], parts[1]


def pkg_init(domain: str, seed: str = "") -> PkgState:
    """Deterministic per (domain, seed) so a generator can be re-created."""
    master = hashlib.sha256(f"dget-pkg|{domain}|{seed}".encode()).digest()
    return PkgState(domain, master)


def domain_params(pkg: PkgState) -> dict:
    return {"domain": pkg.domain, "backend": BACKEND, "master": pkg.master.hex()}


def _derive_secret(master: bytes, identity: str) -> bytes:
    return hmac.new(master, f"key|{identity}".encode(), hashlib.sha256).digest()


def issue_identity(pkg: PkgState, identity: str, not_before: int, not_after: int) -> IdentityKey:
    _, dom = _split_identity(identity)
    if dom != pkg.domain:
        raise WrongDomain(f"{identity!r} not in domain {pkg.domain!r}")
    if not_before >= not_after:
        raise InvalidWindow(f"[{not_before}, {not_after}]")
    return IdentityKey(identity, not_before, not_after,
                       _derive_secret(pkg.master, identity), pkg.domain)


def sign(key: IdentityKey, payload: bytes, now: int) -> IdentityToken:
    if not key.not_before <= now <= key.not_after:
        raise InvalidWindow(f"signing time {now} outside key window")
    digest = canon.digest_bytes(payload)
    mac = hmac.new(
        key.secret,
        f"sig|{digest}|{key.identity}|{key.not_before}|{key.not_after}".encode(),
        hashlib.sha256,
    ).hexdigest()
    return IdentityToken(key.identity, key.not_before, key.not_after, digest, mac)


def verify(params: dict, token: IdentityToken, payload: bytes, now: int) -> str:
    """ACCEPT or the rejection reason. Consults only its arguments."""
    master = bytes.fromhex(params["master"])
    secret = _derive_secret(master, token.identity)
    digest = canon.digest_bytes(payload)
    want = hmac.new(
        secret,
        f"sig|{digest}|{token.identity}|{token.not_before}|{token.not_after}".encode(),
        hashlib.sha256,
    ).hexdigest()
    if digest != token.payload_digest or not hmac.compare_digest(want, token.signature):
        return SIGNATURE_INVALID
    if now < token.not_before:
        return NOT_YET_VALID
    if now > token.not_after:
        return EXPIRED
    return ACCEPT


def delegate(parent: IdentityKey, child_identity: str, not_before: int,
             not_after: int, now: int | None = None) -> DelegationLink:
    """Create one chain link; the child window must narrow the parent's."""
    if now is not None and not parent.not_before <= now <= parent.not_after:
        raise InvalidWindow(f"delegation time {now} outside parent window")
    if not_before >= not_after:
        raise InvalidWindow(f"[{not_before}, {not_after}]")
    if not_before < parent.not_before or not_after > parent.not_after:
        raise WindowNotNested(
            f"[{not_before},{not_after}] not within parent [{parent.not_before},{parent.not_after}]"
        )
    _split_identity(child_identity)
    mac = hmac.new(
        parent.secret,
        f"dlg|{parent.identity}|{child_identity}|{not_before}|{not_after}".encode(),
        hashlib.sha256,
    ).hexdigest()
    return DelegationLink(parent.identity, child_identity, not_before, not_after, mac)


def delegated_key(pkg_or_params, child_identity: str) -> bytes:
    master = pkg_or_params.master if isinstance(pkg_or_params, PkgState) \
        else bytes.fromhex(pkg_or_params["master"])
    return _derive_secret(master, child_identity)


def verify_chain(params: dict, chain: DelegationChain, token: IdentityToken,
                 payload: bytes, now: int) -> str:
    """ACCEPT iff every link verifies, linkage holds, the token belongs to the
    last child, and `now` lies in the intersection of all windows."""
    master = bytes.fromhex(params["master"])
    lo, hi = None, None
    prev_child = None
    for link in chain.links:
        if prev_child is not None and link.parent != prev_child:
            return CHAIN_BROKEN
        parent_secret = _derive_secret(master, link.parent)
        want = hmac.new(
            parent_secret,
            f"dlg|{link.parent}|{link.child}|{link.not_before}|{link.not_after}".encode(),
            hashlib.sha256,
        ).hexdigest()
        if not hmac.compare_digest(want, link.signature):
            return SIGNATURE_INVALID
        lo = link.not_before if lo is None else max(lo, link.not_before)
        hi = link.not_after if hi is None else min(hi, link.not_after)
        prev_child = link.child
    if prev_child is not None and token.identity != prev_child:
        return CHAIN_BROKEN
    leaf = verify(params, token, payload, now)
    if leaf == SIGNATURE_INVALID:
        return SIGNATURE_INVALID
    lo = token.not_before if lo is None else max(lo, token.not_before)
    hi = token.not_after if hi is None else min(hi, token.not_after)
    if lo > hi or not lo <= now <= hi:
        return CHAIN_EXPIRED
    return ACCEPT


# --- wire / file representations -----------------------------------------

def token_to_json(token: IdentityToken) -> dict:
    return {
        "identity": token.identity,
        "not_before": token.not_before,
        "not_after": token.not_after,
        "payload_digest": token.payload_digest,
        "signature": token.signature,
    }


def token_from_json(obj: dict) -> IdentityToken:
    return IdentityToken(obj["identity"], int(obj["not_before"]), int(obj["not_after"]),
                         obj["payload_digest"], obj["signature"])


def chain_to_json(chain: DelegationChain) -> list:
    return [
        {"parent": l.parent, "child": l.child, "not_before": l.not_before,
         "not_after": l.not_after, "signature": l.signature}
        for l in chain.links
    ]


def chain_from_json(items: list) -> DelegationChain:
    return DelegationChain(tuple(
        DelegationLink(o["parent"], o["child"], int(o["not_before"]),
                       int(o["not_after"]), o["signature"])
        for o in items
    ))


def key_to_json(key: IdentityKey) -> dict:
    return {
        "identity": key.identity,
        "not_before": key.not_before,
        "not_after": key.not_after,
        "backend": key.backend,
        "domain": key.domain,
        "secret": base64.b64encode(key.secret).decode(),
    }


def key_from_json(obj: dict) -> IdentityKey:
    return IdentityKey(obj["identity"], int(obj["not_before"]), int(obj["not_after"]),
                       base64.b64decode(obj["secret"]), obj["domain"],
                       obj.get("backend", BACKEND))


def save_key(path: str, key: IdentityKey):
    with open(path, "wb") as f:
        f.write(canon.encode(key_to_json(key)))


def load_key(path: str) -> IdentityKey:
    with open(path, "rb") as f:
        return key_from_json(canon.decode(f.read()))


# --- policy engine --------------------------------------------------------

@dataclass(frozen=True)
class PolicyRule:
    subject: str      # glob over identity
    action: str       # operation name or lifecycle verb, glob allowed
    resource: str     # entity-name glob
    effect: str       # PERMIT | DENY


def rule_from_json(obj: dict) -> PolicyRule:
    effect = obj["effect"].upper()
    if effect not in (PERMIT, DENY):
        raise ValueError(f"bad effect {obj['effect']!r}")
    return PolicyRule(obj["subject"], obj["action"], obj["resource"], effect)


def rule_to_json(rule: PolicyRule) -> dict:
    return {"subject": rule.subject, "action": rule.action,
            "resource": rule.resource, "effect": rule.effect}


def evaluate_policy(rules, subject: str, action: str, resource: str) -> str:
    """First-applicable combining, default deny."""
    for rule in rules:
        if (fnmatch.fnmatchcase(subject, rule.subject)
                and fnmatch.fnmatchcase(action, rule.action)
                and fnmatch.fnmatchcase(resource, rule.resource)):
            return rule.effect
    return DENY


# --- quotas ---------------------------------------------------------------

def charge_quota(usage: dict, limits: dict, name: str, amount: int) -> str:
    """Increment a usage counter; EXCEEDED when it passes its limit, which
    obliges the caller to soft-terminate the entity."""
    if name not in KNOWN_COUNTERS:
        raise UnknownCounter(name)
    if amount < 0:
        raise ValueError("negative quota charge")
    usage[name] = usage.get(name, 0) + amount
    limit = limits.get(name)
    if limit is not None and usage[name] > limit:
        return EXCEEDED
    return OK
