"""Unstructured peer-to-peer overlay: gossip membership, resource adverts,
TTL-scoped query flooding, and entity location records.

Nodes keep a flat peer table refreshed by periodic HELLO/PEERS gossip with a
random fanout. Resource adverts and location updates are flooded with a hop
TTL and per-frame dedup; queries flood the same way and matching nodes send
hits straight back to the query origin. There are no special servers: every
node runs the same handlers.

The node is a pure state machine over (frame, now): `handle_frame` and
`tick` return the frames to transmit and never touch sockets or wall
clocks, so the same code runs under a simulated transport in tests and
behind real connections in a nucleus.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .errors import MalformedField

HELLO = "HELLO"
PEERS = "PEERS"
ADVERT = "ADVERT"
QUERY = "QUERY"
QUERY_HIT = "QUERY_HIT"
LOCATE = "LOCATE"
LOCATE_HIT = "LOCATE_HIT"

OVERLAY_FRAME_TYPES = frozenset(
    {HELLO, PEERS, ADVERT, QUERY, QUERY_HIT, LOCATE, LOCATE_HIT}
)

_OPS = ("!=", "~=", "=", "<", ">")


@dataclass
class Advert:
    origin: str                  # advertising nucleus address
    descriptor: dict             # attribute map, string/number values
    seqno: int
    expires: int

    def to_json(self):
        return {"origin": self.origin, "descriptor": dict(self.descriptor),
                "seqno": self.seqno, "expires": self.expires}

    @staticmethod
    def from_json(obj):
        return Advert(obj["origin"], dict(obj["descriptor"]),
                      int(obj["seqno"]), int(obj["expires"]))


@dataclass
class LocationRecord:
    entity: str
    addr: str
    version: int
    expires: int


# --- query expressions ----------------------------------------------------

def parse_expr(expr: str) -> list[tuple[str, str, str]]:
    """Conjunction of attribute predicates, clauses joined by ',' or '&&'.

    Supported operators: = != < > and ~= (string prefix)."""
    clauses = []
    for part in expr.replace("&&", ",").split(","):
        part = part.strip()
        if not part:
            continue
        for op in _OPS:
            idx = part.find(op)
            if idx > 0:
                key = part[:idx].strip()
                val = part[idx + len(op):].strip()
                if not key or not val:
                    raise MalformedField(f"bad query clause {part!r}")
                clauses.append((key, op, val))
                break
        else:
            raise MalformedField(f"bad query clause {part!r}")
    if not clauses:
        raise MalformedField(f"empty query expression {expr!r}")
    return clauses


def _as_int(v):
    try:
        return int(v)
    except (TypeError, ValueError):
        return None


def _clause_matches(dval, op: str, qval: str) -> bool:
    di, qi = _as_int(dval), _as_int(qval)
    numeric = di is not None and qi is not None
    if op == "=":
        return di == qi if numeric else str(dval) == qval
    if op == "!=":
        return di != qi if numeric else str(dval) != qval
    if op == "<":
        return numeric and di < qi
    if op == ">":
        return numeric and di > qi
    if op == "~=":
        return str(dval).startswith(qval)
    raise MalformedField(f"unknown operator {op!r}")


def matches(descriptor: dict, clauses) -> bool:
    for key, op, qval in clauses:
        if key not in descriptor or not _clause_matches(descriptor[key], op, qval):
            return False
    return True


# --- the node state machine -----------------------------------------------

class OverlayNode:
    """Per-nucleus overlay state. Single-owner: one task drives it."""

    def __init__(self, addr: str, rng: random.Random | None = None, fanout=3,
                 peer_cap=16, peer_timeout=60, advert_lifetime=120,
                 location_lifetime=600, dedup_lifetime=120, default_ttl=4):
        self.addr = addr
        self.rng = rng or random.Random()
        self.fanout = fanout
        self.peer_cap = peer_cap
        self.peer_timeout = peer_timeout
        self.advert_lifetime = advert_lifetime
        self.location_lifetime = location_lifetime
        self.dedup_lifetime = dedup_lifetime
        self.default_ttl = default_ttl

        self.peers: dict[str, int] = {}           # addr -> last heard from
        self.adverts: dict[str, Advert] = {}      # origin -> newest advert
        self.locations: dict[str, LocationRecord] = {}
        self._seen: dict[str, int] = {}           # flood-id -> expiry
        self._results: dict[str, list] = {}       # qid -> collected hits
        self._seqno = 0
        self._uid = 0

    # -- local views (copies; safe to hand to other components) -----------

    def peer_list(self) -> list[str]:
        return sorted(self.peers)

    def advert_list(self) -> list[dict]:
        return [a.to_json() for _, a in sorted(self.adverts.items())]

    def location_of(self, entity: str) -> tuple[str, int] | None:
        rec = self.locations.get(entity)
        return (rec.addr, rec.version) if rec else None

    def collect_hits(self, qid: str) -> list:
        return list(self._results.get(qid, []))

    # -- membership --------------------------------------------------------

    def add_peer(self, addr: str, now: int = 0):
        if addr != self.addr:
            self.peers[addr] = now
            self._trim_peers()

    def _trim_peers(self):
        while len(self.peers) > self.peer_cap:
            oldest = min(self.peers, key=lambda a: (self.peers[a], a))
            del self.peers[oldest]

    def _hello_body(self):
        return {"from": self.addr, "peers": self.peer_list()}

    def tick(self, now: int) -> list[tuple[str, dict]]:
        """Periodic maintenance: purge expired state, gossip to a sample."""
        for origin in [o for o, a in self.adverts.items() if a.expires <= now]:
            del self.adverts[origin]
        for ent in [e for e, r in self.locations.items() if r.expires <= now]:
            del self.locations[ent]
        for fid in [f for f, exp in self._seen.items() if exp <= now]:
            del self._seen[fid]
        for addr in [a for a, seen in self.peers.items()
                     if now - seen > self.peer_timeout]:
            del self.peers[addr]

        targets = sorted(self.peers)
        if len(targets) > self.fanout:
            targets = self.rng.sample(targets, self.fanout)
        body = self._hello_body()
        return [(a, {"type": HELLO, "sender": self.addr, "body": body})
                for a in targets]

    # -- local actions that start floods -----------------------------------

    def _flood(self, ftype: str, body: dict, exclude=()) -> list[tuple[str, dict]]:
        frame = {"type": ftype, "sender": self.addr, "body": body}
        return [(a, frame) for a in sorted(self.peers) if a not in exclude]

    def _mark_seen(self, fid: str, now: int) -> bool:
        """True if already processed."""
        if fid in self._seen:
            return True
        self._seen[fid] = now + self.dedup_lifetime
        return False

    def advertise(self, descriptor: dict, now: int, ttl=None) -> list:
        """Publish this node's host characteristics to the overlay."""
        self._seqno += 1
        adv = Advert(self.addr, dict(descriptor), self._seqno,
                     now + self.advert_lifetime)
        self.adverts[self.addr] = adv
        body = {"advert": adv.to_json(), "ttl": ttl or self.default_ttl}
        self._mark_seen(f"a|{self.addr}|{self._seqno}", now)
        return self._flood(ADVERT, body)

    def query(self, expr: str, now: int, ttl=None) -> tuple[str, list]:
        """Start a resource query; hits accumulate under the returned id."""
        clauses = parse_expr(expr)
        self._uid += 1
        qid = f"{self.addr}|q{self._uid}"
        self._results[qid] = [a.to_json() for a in self.adverts.values()
                              if matches(a.descriptor, clauses)]
        self._mark_seen(qid, now)
        body = {"qid": qid, "expr": expr, "ttl": ttl or self.default_ttl,
                "origin": self.addr}
        return qid, self._flood(QUERY, body)

    def locate(self, entity: str, now: int, ttl=None) -> tuple[str, list]:
        """Start a location query for an entity id."""
        self._uid += 1
        qid = f"{self.addr}|l{self._uid}"
        rec = self.locations.get(entity)
        self._results[qid] = (
            [{"entity": entity, "addr": rec.addr, "version": rec.version}]
            if rec else []
        )
        self._mark_seen(qid, now)
        body = {"qid": qid, "entity": entity, "ttl": ttl or self.default_ttl,
                "origin": self.addr}
        return qid, self._flood(LOCATE, body)

    def update_location(self, entity: str, addr: str, version: int,
                        now: int, ttl=None) -> list:
        """Install a location record and flood it (deploy / post-migration)."""
        if not self._install_location(entity, addr, version, now):
            return []
        self._uid += 1
        uid = f"{self.addr}|u{self._uid}"
        self._mark_seen(uid, now)
        body = {"entity": entity, "addr": addr, "version": version,
                "uid": uid, "ttl": ttl or self.default_ttl}
        return self._flood(LOCATE_HIT, body)

    def _install_location(self, entity, addr, version, now) -> bool:
        """Last-writer-wins by version; equal versions keep the incumbent."""
        rec = self.locations.get(entity)
        if rec is not None and rec.version >= version:
            if rec.version == version and rec.addr == addr:
                rec.expires = now + self.location_lifetime  # refresh
            return False
        self.locations[entity] = LocationRecord(
            entity, addr, version, now + self.location_lifetime
        )
        return True

    # -- frame handling ----------------------------------------------------

    def handle_frame(self, frame: dict, now: int):
        """Process one overlay frame; returns (reply | None, forwards)."""
        ftype = frame.get("type")
        sender = frame.get("sender", "")
        body = frame.get("body") or {}
        # membership is learned only through gossip; other frames just
        # refresh liveness of peers we already track
        if sender in self.peers:
            self.peers[sender] = now

        if ftype == HELLO:
            self.add_peer(sender, now)
            for a in body.get("peers", []):
                self.add_peer(a, now)
            return ({"type": PEERS, "sender": self.addr,
                     "body": self._hello_body()}, [])

        if ftype == PEERS:
            for a in body.get("peers", []):
                self.add_peer(a, now)
            return None, []

        if ftype == ADVERT:
            adv = Advert.from_json(body["advert"])
            ttl = int(body.get("ttl", 1))
            if self._mark_seen(f"a|{adv.origin}|{adv.seqno}", now):
                return None, []
            held = self.adverts.get(adv.origin)
            if held is None or adv.seqno > held.seqno:
                self.adverts[adv.origin] = adv
            if ttl > 1:
                return None, self._flood(
                    ADVERT, {"advert": body["advert"], "ttl": ttl - 1},
                    exclude={sender, adv.origin},
                )
            return None, []

        if ftype == QUERY:
            qid, ttl = body["qid"], int(body.get("ttl", 1))
            if self._mark_seen(qid, now):
                return None, []
            clauses = parse_expr(body["expr"])
            hits = [a.to_json() for a in self.adverts.values()
                    if matches(a.descriptor, clauses)]
            sends = []
            if hits:
                sends.append((body["origin"], {
                    "type": QUERY_HIT, "sender": self.addr,
                    "body": {"qid": qid, "hits": hits},
                }))
            if ttl > 1:
                sends.extend(self._flood(
                    QUERY, dict(body, ttl=ttl - 1),
                    exclude={sender, body["origin"]},
                ))
            return None, sends

        if ftype == QUERY_HIT:
            bucket = self._results.get(body.get("qid"))
            if bucket is not None:
                known = {h["origin"] for h in bucket if "origin" in h}
                for h in body.get("hits", []):
                    if h.get("origin") not in known:
                        bucket.append(h)
                        known.add(h.get("origin"))
            return None, []

        if ftype == LOCATE:
            qid, ttl = body["qid"], int(body.get("ttl", 1))
            if self._mark_seen(qid, now):
                return None, []
            rec = self.locations.get(body["entity"])
            sends = []
            if rec is not None:
                sends.append((body["origin"], {
                    "type": LOCATE_HIT, "sender": self.addr,
                    "body": {"qid": qid, "entity": rec.entity,
                             "addr": rec.addr, "version": rec.version,
                             "ttl": 1},
                }))
            if ttl > 1:
                sends.extend(self._flood(
                    LOCATE, dict(body, ttl=ttl - 1),
                    exclude={sender, body["origin"]},
                ))
            return None, sends

        if ftype == LOCATE_HIT:
            entity = body["entity"]
            installed = self._install_location(
                entity, body["addr"], int(body["version"]), now
            )
            qid = body.get("qid")
            if qid and qid in self._results:
                hit = {"entity": entity, "addr": body["addr"],
                       "version": int(body["version"])}
                if hit not in self._results[qid]:
                    self._results[qid].append(hit)
            ttl = int(body.get("ttl", 1))
            uid = body.get("uid")
            if uid and not self._mark_seen(uid, now) and installed and ttl > 1:
                return None, self._flood(
                    LOCATE_HIT, dict(body, ttl=ttl - 1), exclude={sender}
                )
            return None, []

        raise MalformedField(f"not an overlay frame type: {ftype!r}")
