"""Node runtime: entity lifecycle, message routing, migration, admin API.

A nucleus hosts entities (instrumented programs running in green-thread
interpreters), speaks the inter-nucleus wire protocol, participates in the
gossip overlay, and serves an HTTP admin API for CLIs and consoles. Every
entity is wrapped in a shell record whose state machine is
CREATED → RUNNING ↔ SUSPENDED → MIGRATING → TERMINATED (with FAILED for
faults); all transitions are checked.

Migration is offer / suspend-to-quiescence / state transfer / ack: any
failure before the ack resumes the entity locally, so there is always
exactly one live copy. After a successful transfer the source forwards
in-flight messages to the new home for a grace period and floods a
higher-version location record.

Concurrency: one scheduler thread steps all VMs and drives the overlay;
wire and admin requests run in per-connection threads; shared state is
guarded by one lock, with per-entity locks serializing lifecycle actions.
"""

from __future__ import annotations

import base64
import errno
import json
import os
import random
import socketserver
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import authz, canon, overlay as overlay_mod, snapshot as snapshot_mod
from . import vm as vm_mod, wire
from .errors import (
    AddressInUse,
    AuthFailed,
    BadConfig,
    DgetError,
    DuplicateEntity,
    IllegalTransition,
    InvokeTimeout,
    MalformedField,
    PolicyDenied,
    QuiescenceTimeout,
    RuntimeFault,
    TargetRefused,
    TransferFailed,
    UnknownEntity,
    UnknownOperation,
)
from .instrument import instrument
from .ir import parse_assembly, value_from_json, value_to_json

# shell states
CREATED = "CREATED"
RUNNING = "RUNNING"
SUSPENDED = "SUSPENDED"
MIGRATING = "MIGRATING"
TERMINATED = "TERMINATED"
FAILED = "FAILED"

_LEGAL_TRANSITIONS = frozenset({
    (CREATED, RUNNING),
    (RUNNING, SUSPENDED),
    (SUSPENDED, RUNNING),
    (RUNNING, MIGRATING),
    (SUSPENDED, MIGRATING),
    (MIGRATING, TERMINATED),
    (MIGRATING, RUNNING),       # rollback when a transfer fails
    (RUNNING, TERMINATED),
    (SUSPENDED, TERMINATED),
    (RUNNING, FAILED),
})

OPERATION_DRIVEN = "OPERATION_DRIVEN"
DATA_DRIVEN = "DATA_DRIVEN"
HYBRID = "HYBRID"
_KINDS = (OPERATION_DRIVEN, DATA_DRIVEN, HYBRID)

SYSTEM_ENTITY_NAMES = (
    "entity-manager", "security", "resource-discovery", "location-discovery",
)


@dataclass(frozen=True)
class Manifest:
    """Deployment descriptor: what to run and under which rules."""

    name: str
    entry: str = "main"
    kind: str = DATA_DRIVEN
    owner: str = "anonymous@local"
    policies: tuple = ()
    limits: dict = field(default_factory=dict)
    operations: tuple = ()      # (name, arity) pairs for typed invocation


def parse_manifest(obj: dict) -> Manifest:
    if not isinstance(obj, dict) or not obj.get("name"):
        raise MalformedField("manifest needs a non-empty name")
    kind = obj.get("kind", DATA_DRIVEN)
    if kind not in _KINDS:
        raise MalformedField(f"unknown entity kind {kind!r}")
    operations = tuple(
        (str(o[0]), int(o[1])) for o in obj.get("operations", [])
    )
    if kind in (OPERATION_DRIVEN, HYBRID) and not operations:
        raise MalformedField(f"{kind} entities must expose operations")
    limits = {str(k): int(v) for k, v in (obj.get("limits") or {}).items()}
    if any(v < 0 for v in limits.values()):
        raise MalformedField("limits must be non-negative")
    policies = tuple(authz.rule_from_json(r) for r in obj.get("policies", []))
    return Manifest(
        name=str(obj["name"]),
        entry=str(obj.get("entry", "main")),
        kind=kind,
        owner=str(obj.get("owner", "anonymous@local")),
        policies=policies,
        limits=limits,
        operations=operations,
    )


def manifest_to_json(m: Manifest) -> dict:
    return {
        "name": m.name,
        "entry": m.entry,
        "kind": m.kind,
        "owner": m.owner,
        "policies": [authz.rule_to_json(r) for r in m.policies],
        "limits": dict(m.limits),
        "operations": [list(o) for o in m.operations],
    }


@dataclass
class Config:
    listen: str = "127.0.0.1:0"
    admin_listen: str = "127.0.0.1:0"
    peers: list = field(default_factory=list)
    domain: str = "grid"
    domain_seed: str = ""
    identity: str = ""                   # default: nucleus-<port>@<domain>
    key_path: str = ""
    key_window: tuple = (0, 2**40)
    require_auth: bool = False
    policy: list = field(default_factory=lambda: [
        authz.PolicyRule("*", "*", "*", authz.PERMIT)
    ])
    limits: dict = field(default_factory=dict)
    grace_period: float = 30.0
    inbox_bound: int = 64
    fanout: int = 3
    tick_interval: float = 1.0
    advertise_interval: float = 20.0
    default_ttl: int = 4
    quiescence_timeout: float = 5.0
    invoke_timeout: float = 10.0
    step_budget: int = 200
    descriptor: dict = field(default_factory=dict)
    rng_seed: int | None = None


_CONFIG_KEYS = {
    "listen", "admin_listen", "peers", "domain", "domain_seed", "identity",
    "key_path", "key_window", "require_auth", "policy", "limits",
    "grace_period", "inbox_bound", "fanout", "tick_interval",
    "advertise_interval", "default_ttl", "quiescence_timeout",
    "invoke_timeout", "step_budget", "descriptor", "rng_seed",
}


def load_config(path: str | None = None, overrides: dict | None = None) -> Config:
    """Read a JSON config file; DGET_CONFIG supplies the path when omitted."""
    obj: dict = {}
    path = path or os.environ.get("DGET_CONFIG")
    if path:
        try:
            with open(path) as f:
                obj = json.load(f)
        except OSError as exc:
            raise BadConfig(f"cannot read config {path!r}: {exc}") from None
        except ValueError as exc:
            raise BadConfig(f"config {path!r} is not valid JSON: {exc}") from None
    if overrides:
        obj.update(overrides)
    unknown = set(obj) - _CONFIG_KEYS
    if unknown:
        raise BadConfig(f"unknown config keys: {sorted(unknown)}")
    cfg = Config()
    for key, value in obj.items():
        if key == "policy":
            value = [authz.rule_from_json(r) if isinstance(r, dict) else r
                     for r in value]
        if key == "key_window":
            value = (int(value[0]), int(value[1]))
        setattr(cfg, key, value)
    return cfg


@dataclass
class EntityRecord:
    id: str
    manifest: Manifest
    state: str
    vm: vm_mod.VmInstance | None = None
    version: int = 1                     # location record version
    system: bool = False
    stopping: bool = False
    op_lock: threading.Lock = field(default_factory=threading.Lock)


class _HostServices:
    """The services an entity reaches through its SYS instructions.

    query/locate answer from the overlay caches held by this nucleus; they
    never block on network traffic (flood queries are driven from the admin
    API, whose results land in the same caches)."""

    def __init__(self, nucleus: "Nucleus", entity_id: str):
        self.nucleus = nucleus
        self.entity_id = entity_id

    def sys_publish(self, descriptor_text: str):
        self.nucleus._publish_descriptor(descriptor_text)

    def sys_query(self, expr: str, ttl: int) -> str:
        try:
            clauses = overlay_mod.parse_expr(expr)
        except MalformedField:
            return "[]"
        node = self.nucleus.overlay
        hits = [a.to_json() for a in node.adverts.values()
                if overlay_mod.matches(a.descriptor, clauses)]
        return canon.encode(hits).decode()

    def sys_locate(self, entity_id: str) -> str:
        return self.nucleus._locate_cached(entity_id) or ""


class Nucleus:
    """One grid node. Construct, then `start()`; always `stop()` when done."""

    def __init__(self, config: Config):
        self.config = config
        self.records: dict[str, EntityRecord] = {}
        self.imported_ids: set[str] = set()
        self.forwards: dict[str, tuple[str, float]] = {}
        self.events: list[dict] = []
        self.event_seq = 0
        self.dropped_frames = 0
        self.dropped_messages = 0
        self._next_ordinal = 0
        self._lock = threading.RLock()
        self._event_cond = threading.Condition(self._lock)
        self._outgoing: list[tuple[str, dict]] = []
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._wire_server = None
        self._admin_server = None

        self.pkg = authz.pkg_init(config.domain, config.domain_seed)
        self.params = authz.domain_params(self.pkg)
        self.key: authz.IdentityKey | None = None
        self.overlay: overlay_mod.OverlayNode | None = None
        self.addr = ""
        self.admin_addr = ""

    # --- lifecycle --------------------------------------------------------

    def start(self) -> "Nucleus":
        cfg = self.config
        try:
            self._wire_server = _WireServer(_split_addr(cfg.listen), self)
            self._admin_server = _AdminServer(_split_addr(cfg.admin_listen), self)
        except OSError as exc:
            self.stop()
            if exc.errno == errno.EADDRINUSE:
                raise AddressInUse(f"{cfg.listen} / {cfg.admin_listen}") from None
            raise BadConfig(str(exc)) from None

        host = _split_addr(cfg.listen)[0]
        self.addr = f"{host}:{self._wire_server.server_address[1]}"
        ahost = _split_addr(cfg.admin_listen)[0]
        self.admin_addr = f"{ahost}:{self._admin_server.server_address[1]}"

        if cfg.key_path and os.path.exists(cfg.key_path):
            self.key = authz.load_key(cfg.key_path)
        else:
            identity = cfg.identity or f"nucleus-{self.addr.rsplit(':', 1)[1]}@{cfg.domain}"
            self.key = authz.issue_identity(self.pkg, identity, *cfg.key_window)
            if cfg.key_path:
                authz.save_key(cfg.key_path, self.key)

        rng = random.Random(cfg.rng_seed)
        self.overlay = overlay_mod.OverlayNode(
            self.addr, rng=rng, fanout=cfg.fanout, default_ttl=cfg.default_ttl,
        )
        now = time.time()
        for peer in cfg.peers:
            self.overlay.add_peer(peer, int(now))

        for name in SYSTEM_ENTITY_NAMES:
            eid = f"{name}@{self.addr}"
            self.records[eid] = EntityRecord(
                id=eid,
                manifest=Manifest(name=name, kind=OPERATION_DRIVEN,
                                  owner=f"system@{cfg.domain}",
                                  operations=(("describe", 0),)),
                state=RUNNING,
                system=True,
            )

        for t in (
            threading.Thread(target=self._wire_server.serve_forever,
                             kwargs={"poll_interval": 0.05}, daemon=True),
            threading.Thread(target=self._admin_server.serve_forever,
                             kwargs={"poll_interval": 0.05}, daemon=True),
            threading.Thread(target=self._scheduler, daemon=True),
        ):
            t.start()
            self._threads.append(t)

        # introduce ourselves to the bootstrap peers right away
        hello = {"type": overlay_mod.HELLO, "sender": self.addr,
                 "body": {"from": self.addr, "peers": [self.addr]}}
        for peer in cfg.peers:
            self._queue_send(peer, hello)
        self._emit("nucleus-started", entity="", state="", addr=self.addr)
        return self

    def stop(self):
        self._stop.set()
        for server in (self._wire_server, self._admin_server):
            if server is not None:
                try:
                    server.shutdown()
                    server.server_close()
                except Exception:
                    pass
        with self._lock:
            self._event_cond.notify_all()
        for t in self._threads:
            t.join(timeout=2)
        self._threads.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # --- events -----------------------------------------------------------

    def _emit(self, event: str, entity: str, state: str, **extra):
        with self._lock:
            self.event_seq += 1
            rec = {"seq": self.event_seq, "event": event,
                   "entity": entity, "state": state}
            rec.update(extra)
            self.events.append(rec)
            if len(self.events) > 2000:
                del self.events[:len(self.events) - 2000]
            self._event_cond.notify_all()

    def events_since(self, seq: int) -> list[dict]:
        with self._lock:
            return [e for e in self.events if e["seq"] > seq]

    # --- shell state machine ----------------------------------------------

    def _transition(self, record: EntityRecord, new_state: str):
        if (record.state, new_state) not in _LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{record.id}: {record.state} -> {new_state}")
        record.state = new_state
        self._emit("shell-state", entity=record.id, state=new_state)

    def _record(self, entity_id: str) -> EntityRecord:
        rec = self.records.get(entity_id)
        if rec is None:
            raise UnknownEntity(entity_id)
        return rec

    def _admission(self, subject: str, action: str, resource: str):
        decision = authz.evaluate_policy(self.config.policy, subject,
                                         action, resource)
        if decision != authz.PERMIT:
            raise PolicyDenied(f"{subject} {action} {resource}")

    # --- deployment -------------------------------------------------------

    def deploy(self, manifest_obj: dict, program_text: str,
               caller: str = "anonymous@local") -> str:
        manifest = parse_manifest(manifest_obj)
        self._admission(caller, "deploy", manifest.name)
        program = parse_assembly(program_text)
        if manifest.entry != program.entry:
            program.entry = manifest.entry
        entry = program.methods.get(program.entry)
        if entry is None or entry.nargs != 0:
            raise MalformedField(
                f"entry method {program.entry!r} must exist and take no arguments"
            )
        for op_name, arity in manifest.operations:
            m = program.methods.get(op_name)
            if m is None or m.nargs != arity:
                raise MalformedField(
                    f"manifest exposes {op_name}/{arity} not defined by the program"
                )
        instrumented = instrument(program)
        limits = dict(self.config.limits)
        limits.update(manifest.limits)
        with self._lock:
            self._next_ordinal += 1
            eid = f"e{self._next_ordinal}@{self.addr}"
            instance = vm_mod.load(instrumented, limits=limits,
                                   host=_HostServices(self, eid),
                                   inbox_bound=self.config.inbox_bound)
            record = EntityRecord(id=eid, manifest=manifest, state=CREATED,
                                  vm=instance)
            self.records[eid] = record
            self._transition(record, RUNNING)
            now = time.time()
            self._outgoing.extend(
                self.overlay.update_location(eid, self.addr, record.version,
                                             int(now))
            )
        return eid

    # --- lifecycle actions ------------------------------------------------

    def entity_info(self, record: EntityRecord) -> dict:
        info = {
            "id": record.id,
            "name": record.manifest.name,
            "kind": "SYSTEM" if record.system else record.manifest.kind,
            "state": record.state,
            "owner": record.manifest.owner,
            "home": self.addr,
            "usage": dict(record.vm.usage) if record.vm else {},
            "limits": dict(record.vm.limits) if record.vm else {},
            "globals": {k: value_to_json(v)
                        for k, v in record.vm.globals.items()}
            if record.vm else {},
        }
        return info

    def list_entities(self) -> list[dict]:
        with self._lock:
            return [self.entity_info(r) for r in self.records.values()]

    def stop_entity(self, entity_id: str, caller: str = "anonymous@local") -> str:
        with self._lock:
            record = self._record(entity_id)
            self._admission(caller, "stop", record.manifest.name)
            if record.system:
                raise IllegalTransition(f"{entity_id} is a system entity")
            if record.state not in (RUNNING, SUSPENDED):
                raise IllegalTransition(f"stop from {record.state}")
        with record.op_lock:
            with self._lock:
                if record.vm is not None:
                    record.vm.request_terminate()
                record.stopping = True
            deadline = time.time() + self.config.quiescence_timeout
            while time.time() < deadline:
                with self._lock:
                    if record.vm is None or record.vm.all_done():
                        break
                time.sleep(0.002)
            with self._lock:
                if record.state != TERMINATED:  # scheduler may drain it first
                    self._transition(record, TERMINATED)
        return TERMINATED

    def suspend_entity(self, entity_id: str, caller: str = "anonymous@local") -> str:
        with self._lock:
            record = self._record(entity_id)
            self._admission(caller, "suspend", record.manifest.name)
            if record.system or record.state != RUNNING:
                raise IllegalTransition(f"suspend from {record.state}")
        with record.op_lock:
            self._suspend_to_quiescence(record)
            with self._lock:
                if record.state == TERMINATED:
                    return TERMINATED
                if record.vm.all_done():
                    self._transition(record, TERMINATED)
                    return TERMINATED
                self._transition(record, SUSPENDED)
        return SUSPENDED

    def resume_entity(self, entity_id: str, caller: str = "anonymous@local") -> str:
        with self._lock:
            record = self._record(entity_id)
            self._admission(caller, "resume", record.manifest.name)
            if record.system or record.state != SUSPENDED:
                raise IllegalTransition(f"resume from {record.state}")
            record.vm.resume()
            self._transition(record, RUNNING)
        return RUNNING

    def _suspend_to_quiescence(self, record: EntityRecord):
        """Flip the flag and wait for every thread to park; rolls back on
        timeout so the entity keeps running."""
        with self._lock:
            if record.vm.flag == vm_mod.RUNNING:
                record.vm.request_suspend()
        deadline = time.time() + self.config.quiescence_timeout
        while time.time() < deadline:
            with self._lock:
                if record.vm.quiescent() or record.vm.all_done():
                    return
            time.sleep(0.002)
        with self._lock:
            record.vm.resume()
        raise QuiescenceTimeout(record.id)

    # --- migration --------------------------------------------------------

    def migrate(self, entity_id: str, target: str,
                caller: str = "anonymous@local") -> dict:
        with self._lock:
            record = self._record(entity_id)
            self._admission(caller, "migrate", record.manifest.name)
            if record.system or record.state not in (RUNNING, SUSPENDED):
                raise IllegalTransition(f"migrate from {record.state}")
            was_suspended = record.state == SUSPENDED
            manifest_json = manifest_to_json(record.manifest)

        with record.op_lock:
            offer = wire.make_frame(
                wire.MIGRATE_OFFER, self.addr,
                {"entity": entity_id, "manifest": manifest_json},
                key=self.key, now=self._auth_now(),
            )
            try:
                reply = wire.request(target, offer, timeout=5)
            except (OSError, MalformedField) as exc:
                raise TargetRefused(f"{target}: {exc}") from None
            if reply.get("type") != wire.REPLY or not reply["body"].get("accept"):
                raise TargetRefused(
                    f"{target}: {reply.get('body', {}).get('reason', 'refused')}"
                )

            self._suspend_to_quiescence(record)
            with self._lock:
                if record.vm.all_done():
                    self._transition(record, TERMINATED)
                    return {"id": entity_id, "state": TERMINATED,
                            "target": target}
                self._transition(record, MIGRATING)
                snap = snapshot_mod.capture(record.vm)
                blob = snapshot_mod.encode(snap)
                next_version = record.version + 1

            state_frame = wire.make_frame(
                wire.MIGRATE_STATE, self.addr,
                {
                    "entity": entity_id,
                    "manifest": manifest_json,
                    "snapshot": base64.b64encode(blob).decode(),
                    "version": next_version,
                },
                key=self.key, now=self._auth_now(),
            )
            try:
                ack = wire.request(target, state_frame, timeout=15)
            except (OSError, MalformedField) as exc:
                self._rollback_migration(record, was_suspended)
                raise TransferFailed(f"{target}: {exc}") from None
            if ack.get("type") != wire.MIGRATE_ACK:
                self._rollback_migration(record, was_suspended)
                raise TransferFailed(
                    f"{target}: {ack.get('body', {}).get('reason', 'no ack')}"
                )

            with self._lock:
                now = time.time()
                self.forwards[entity_id] = (target, now + self.config.grace_period)
                self.overlay._install_location(entity_id, target, next_version,
                                               int(now))
                record.vm = None
                self._transition(record, TERMINATED)
                self._emit("migrated", entity=entity_id, state=TERMINATED,
                           target=target)
        return {"id": entity_id, "state": "MIGRATED", "target": target}

    def _rollback_migration(self, record: EntityRecord, was_suspended: bool):
        """Any pre-ack failure leaves a runnable entity at the source."""
        with self._lock:
            self._transition(record, RUNNING)
            if was_suspended:
                self._transition(record, SUSPENDED)
            else:
                record.vm.resume()

    def _import_entity(self, body: dict) -> str:
        entity_id = body.get("entity")
        if not entity_id:
            raise MalformedField("MIGRATE_STATE without entity id")
        manifest = parse_manifest(body.get("manifest") or {})
        self._admission(manifest.owner, "migrate", manifest.name)
        with self._lock:
            if entity_id in self.records or entity_id in self.imported_ids:
                raise DuplicateEntity(entity_id)
        try:
            blob = base64.b64decode(body["snapshot"], validate=True)
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedField(f"bad snapshot field: {exc}") from None
        snap = snapshot_mod.decode(blob)
        instance = snapshot_mod.restore(
            snap, host=_HostServices(self, entity_id)
        )
        version = int(body.get("version", 1))
        with self._lock:
            if entity_id in self.records or entity_id in self.imported_ids:
                raise DuplicateEntity(entity_id)
            self.imported_ids.add(entity_id)
            record = EntityRecord(id=entity_id, manifest=manifest,
                                  state=CREATED, vm=instance, version=version)
            instance.host = _HostServices(self, entity_id)
            self.records[entity_id] = record
            self._transition(record, RUNNING)
            now = time.time()
            self._outgoing.extend(
                self.overlay.update_location(entity_id, self.addr, version,
                                             int(now))
            )
        return entity_id

    # --- typed invocation -------------------------------------------------

    def invoke(self, entity_id: str, op: str, args: list,
               caller: str = "anonymous@local"):
        with self._lock:
            record = self._record(entity_id)
            manifest = record.manifest
            if record.system:
                if op == "describe":
                    return canon.encode(self.entity_info(record)).decode()
                raise UnknownOperation(op)
            if manifest.kind not in (OPERATION_DRIVEN, HYBRID):
                raise UnknownOperation(f"{entity_id} accepts no invocations")
            if (op, len(args)) not in manifest.operations:
                raise UnknownOperation(f"{op}/{len(args)}")
            decision = authz.evaluate_policy(manifest.policies, caller, op,
                                             manifest.name)
            if decision != authz.PERMIT:
                raise PolicyDenied(f"{caller} {op} {manifest.name}")
            if record.state != RUNNING:
                raise IllegalTransition(f"invoke on {record.state} entity")
            tid = record.vm.start_invocation(op, [value_from_json(a) for a in args])
        deadline = time.time() + self.config.invoke_timeout
        while time.time() < deadline:
            with self._lock:
                done, result = record.vm.invocation_result(tid)
                if done:
                    return None if result is None else value_to_json(result)
            time.sleep(0.002)
        raise InvokeTimeout(f"{entity_id}.{op}")

    # --- scheduler --------------------------------------------------------

    def _scheduler(self):
        last_tick = 0.0
        last_advert = 0.0
        while not self._stop.is_set():
            now = time.time()
            did_work = False
            sends: list[tuple[str, dict]] = []
            with self._lock:
                if now - last_tick >= self.config.tick_interval:
                    last_tick = now
                    sends.extend(self.overlay.tick(int(now)))
                    for eid in [e for e, (_, exp) in self.forwards.items()
                                if exp <= now]:
                        del self.forwards[eid]
                if now - last_advert >= self.config.advertise_interval:
                    last_advert = now
                    sends.extend(self.overlay.advertise(
                        dict(self.config.descriptor, addr=self.addr), int(now)
                    ))
                for record in list(self.records.values()):
                    if record.system or record.vm is None:
                        continue
                    if record.state not in (RUNNING, SUSPENDED):
                        continue
                    try:
                        outcome, ran = record.vm.step(self.config.step_budget)
                    except RuntimeFault as fault:
                        self._transition(record, FAILED)
                        self._emit("fault", entity=record.id, state=FAILED,
                                   tag=fault.tag)
                        continue
                    did_work = did_work or ran > 0
                    for msg in record.vm.take_outbox():
                        self._route_message(record.id, msg["target"],
                                            msg["payload"], sends)
                    if outcome in (vm_mod.ALL_DONE, vm_mod.OUT_TERMINATED) \
                            and record.state in (RUNNING, SUSPENDED):
                        self._transition(record, TERMINATED)
                sends.extend(self._outgoing)
                self._outgoing.clear()
            for addr, frame in sends:
                self._send_frame(addr, frame)
            if not did_work:
                time.sleep(0.002)

    def _route_message(self, source: str, target: str, payload, sends: list):
        if target in self.records and self.records[target].vm is not None:
            self.records[target].vm.deliver_message(payload)
            return
        fwd = self.forwards.get(target)
        addr = None
        if fwd and fwd[1] > time.time():
            addr = fwd[0]
        else:
            loc = self.overlay.location_of(target)
            addr = loc[0] if loc else None
        if addr is None or addr == self.addr:
            self.dropped_messages += 1
            return
        sends.append((addr, wire.make_frame(
            wire.MSG, self.addr,
            {"entity": target, "payload": value_to_json(payload),
             "source": source},
            key=self.key, now=self._auth_now(),
        )))

    def _queue_send(self, addr: str, frame: dict):
        with self._lock:
            self._outgoing.append((addr, frame))

    def _send_frame(self, addr: str, frame: dict):
        if frame.get("auth") is None and self.key is not None:
            frame = wire.make_frame(frame["type"], frame["sender"],
                                    frame["body"], key=self.key,
                                    now=self._auth_now())
        try:
            reply = wire.request(addr, frame, timeout=3)
        except (OSError, MalformedField, DgetError):
            return  # overlay traffic is best-effort; peers age out naturally
        # synchronous replies can carry overlay payloads (e.g. PEERS for HELLO)
        if reply.get("type") in overlay_mod.OVERLAY_FRAME_TYPES:
            now = self._auth_now()
            if self.config.require_auth and \
                    wire.check_auth(self.params, reply, now) != authz.ACCEPT:
                with self._lock:
                    self.dropped_frames += 1
                return
            with self._lock:
                _, fw = self.overlay.handle_frame(
                    {"type": reply["type"], "sender": reply.get("sender", ""),
                     "body": reply.get("body") or {}}, now)
                self._outgoing.extend(fw)

    def _auth_now(self) -> int:
        return int(time.time())

    # --- overlay-backed helpers -------------------------------------------

    def _publish_descriptor(self, text: str):
        descriptor = dict(self.config.descriptor, addr=self.addr)
        for part in text.replace("&&", ",").split(","):
            if "=" in part:
                k, v = part.split("=", 1)
                descriptor[k.strip()] = v.strip()
        with self._lock:
            self._outgoing.extend(
                self.overlay.advertise(descriptor, int(time.time()))
            )

    def _locate_cached(self, entity_id: str) -> str | None:
        with self._lock:
            rec = self.records.get(entity_id)
            if rec is not None and rec.state in (RUNNING, SUSPENDED, CREATED):
                return self.addr
            loc = self.overlay.location_of(entity_id)
            return loc[0] if loc else None

    def admin_query(self, expr: str, ttl: int | None = None,
                    wait: float = 0.4) -> list:
        with self._lock:
            qid, sends = self.overlay.query(expr, int(time.time()), ttl)
        for addr, frame in sends:
            self._send_frame(addr, frame)
        time.sleep(wait)
        with self._lock:
            return self.overlay.collect_hits(qid)

    def admin_locate(self, entity_id: str, ttl: int | None = None,
                     wait: float = 0.4) -> str | None:
        cached = self._locate_cached(entity_id)
        if cached:
            return cached
        with self._lock:
            qid, sends = self.overlay.locate(entity_id, int(time.time()), ttl)
        for addr, frame in sends:
            self._send_frame(addr, frame)
        time.sleep(wait)
        with self._lock:
            hits = self.overlay.collect_hits(qid)
        if not hits:
            return None
        best = max(hits, key=lambda h: h["version"])
        return best["addr"]

    # --- wire dispatch ----------------------------------------------------

    def handle_wire_frame(self, frame: dict) -> dict | None:
        now = self._auth_now()
        if self.config.require_auth:
            status = wire.check_auth(self.params, frame, now)
            if status != authz.ACCEPT:
                with self._lock:
                    self.dropped_frames += 1
                return wire.error_frame(self.addr, "AuthFailed", status)

        ftype = frame.get("type")
        body = frame.get("body") or {}
        try:
            if ftype in overlay_mod.OVERLAY_FRAME_TYPES:
                with self._lock:
                    reply, fw = self.overlay.handle_frame(
                        {"type": ftype, "sender": frame.get("sender", ""),
                         "body": body}, now)
                    self._outgoing.extend(fw)
                if reply is not None:
                    return {"type": reply["type"], "sender": self.addr,
                            "auth": None, "body": reply["body"]}
                return {"type": wire.REPLY, "sender": self.addr,
                        "auth": None, "body": {}}

            if ftype == wire.MSG:
                return self._handle_msg(body)

            if ftype == wire.INVOKE:
                caller = body.get("caller", "anonymous@local")
                result = self.invoke(body["entity"], body["op"],
                                     body.get("args", []), caller)
                return {"type": wire.REPLY, "sender": self.addr, "auth": None,
                        "body": {"result": result}}

            if ftype == wire.MIGRATE_OFFER:
                manifest = parse_manifest(body.get("manifest") or {})
                entity_id = body.get("entity", "")
                with self._lock:
                    duplicate = (entity_id in self.records
                                 or entity_id in self.imported_ids)
                if duplicate:
                    return wire.error_frame(self.addr, "DuplicateEntity",
                                            entity_id)
                try:
                    self._admission(manifest.owner, "migrate", manifest.name)
                except PolicyDenied as exc:
                    return wire.error_frame(self.addr, "PolicyDenied", str(exc))
                return {"type": wire.REPLY, "sender": self.addr, "auth": None,
                        "body": {"accept": True}}

            if ftype == wire.MIGRATE_STATE:
                entity_id = self._import_entity(body)
                return {"type": wire.MIGRATE_ACK, "sender": self.addr,
                        "auth": None,
                        "body": {"entity": entity_id, "addr": self.addr}}

            return wire.error_frame(self.addr, "UnknownFrameType", str(ftype))
        except DgetError as exc:
            return wire.error_frame(self.addr, type(exc).__name__, str(exc))

    def _handle_msg(self, body: dict) -> dict:
        target = body.get("entity", "")
        with self._lock:
            record = self.records.get(target)
            if record is not None and record.vm is not None:
                record.vm.deliver_message(value_from_json(body["payload"]))
                return {"type": wire.REPLY, "sender": self.addr, "auth": None,
                        "body": {"delivered": True}}
            fwd = self.forwards.get(target)
        if fwd and fwd[1] > time.time():
            forwarded = wire.make_frame(wire.MSG, self.addr, body,
                                        key=self.key, now=self._auth_now())
            try:
                return wire.request(fwd[0], forwarded, timeout=3)
            except (OSError, MalformedField) as exc:
                return wire.error_frame(self.addr, "TransferFailed", str(exc))
        with self._lock:
            self.dropped_messages += 1
        return wire.error_frame(self.addr, "UnknownEntity", target)


# --- servers ---------------------------------------------------------------


def _split_addr(addr: str) -> tuple[str, int]:
    host, port = addr.rsplit(":", 1)
    return host, int(port)


class _WireServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, nucleus: Nucleus):
        self.nucleus = nucleus
        super().__init__(address, _WireHandler)


class _WireHandler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            frame = wire.read_frame(self.request)
        except MalformedField:
            return
        if frame is None:
            return
        nucleus = self.server.nucleus
        reply = nucleus.handle_wire_frame(frame)
        if reply is not None and reply.get("auth") is None and nucleus.key:
            reply = wire.make_frame(reply["type"], reply["sender"],
                                    reply["body"], key=nucleus.key,
                                    now=nucleus._auth_now())
        if reply is not None:
            try:
                wire.write_frame(self.request, reply)
            except OSError:
                pass


class _AdminServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, nucleus: Nucleus):
        self.nucleus = nucleus
        super().__init__(address, _AdminHandler)


_HTTP_STATUS = {
    "AuthFailed": 401,
    "PolicyDenied": 403,
    "UnknownEntity": 404,
    "UnknownOperation": 404,
    "IllegalTransition": 409,
    "IllegalFlagTransition": 409,
    "DuplicateEntity": 409,
    "TargetRefused": 502,
    "TransferFailed": 502,
    "QuiescenceTimeout": 504,
    "InvokeTimeout": 504,
}


class _AdminHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):
        pass

    @property
    def nucleus(self) -> Nucleus:
        return self.server.nucleus

    # -- plumbing ----------------------------------------------------------

    def _send_json(self, status: int, obj: dict):
        data = canon.encode(obj)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _send_error_obj(self, exc: Exception):
        name = type(exc).__name__
        status = _HTTP_STATUS.get(name, 400 if isinstance(exc, DgetError) else 500)
        self._send_json(status, {"error": name, "reason": str(exc)})

    def _body_json(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            obj = json.loads(raw)
        except ValueError as exc:
            raise MalformedField(f"request body is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise MalformedField("request body must be an object")
        return obj

    def _caller(self) -> str:
        """Authenticate the request when the nucleus demands it."""
        n = self.nucleus
        header = self.headers.get("X-DGET-Token")
        if not n.config.require_auth:
            return "anonymous@local" if not header else self._token_identity(header)
        if not header:
            raise AuthFailed("missing X-DGET-Token header")
        return self._token_identity(header)

    def _token_identity(self, header: str) -> str:
        n = self.nucleus
        try:
            token = authz.token_from_json(
                canon.decode(base64.b64decode(header, validate=True))
            )
        except (ValueError, KeyError, TypeError):
            raise AuthFailed("malformed admin token") from None
        status = authz.verify(n.params, token, b"admin", n._auth_now())
        if status != authz.ACCEPT:
            raise AuthFailed(status)
        return token.identity

    # -- routes ------------------------------------------------------------

    def do_GET(self):
        try:
            url = urllib.parse.urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            query = urllib.parse.parse_qs(url.query)
            self._caller()
            n = self.nucleus

            if parts == ["v1", "entities"]:
                self._send_json(200, {"entities": n.list_entities()})
            elif len(parts) == 3 and parts[:2] == ["v1", "entities"]:
                with n._lock:
                    record = n._record(parts[2])
                    self._send_json(200, n.entity_info(record))
            elif parts == ["v1", "peers"]:
                with n._lock:
                    self._send_json(200, {"peers": n.overlay.peer_list(),
                                          "addr": n.addr})
            elif parts == ["v1", "query"]:
                expr = (query.get("expr") or [""])[0]
                ttl = int((query.get("ttl") or [n.config.default_ttl])[0])
                hits = n.admin_query(expr, ttl)
                self._send_json(200, {"hits": hits})
            elif len(parts) == 3 and parts[:2] == ["v1", "locate"]:
                addr = n.admin_locate(
                    parts[2],
                    int((query.get("ttl") or [n.config.default_ttl])[0]),
                )
                if addr is None:
                    self._send_json(404, {"error": "UnknownEntity",
                                          "reason": parts[2]})
                else:
                    self._send_json(200, {"id": parts[2], "addr": addr})
            elif parts == ["v1", "events"]:
                self._serve_events(query)
            else:
                self._send_json(404, {"error": "NotFound", "reason": url.path})
        except Exception as exc:  # every route answers; nothing is fatal
            try:
                self._send_error_obj(exc)
            except OSError:
                pass

    def do_POST(self):
        try:
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            caller = self._caller()
            n = self.nucleus
            body = self._body_json()

            if parts == ["v1", "entities"]:
                eid = n.deploy(body.get("manifest") or {},
                               body.get("program") or "", caller)
                self._send_json(201, {"id": eid, "state": RUNNING})
            elif len(parts) == 4 and parts[:2] == ["v1", "entities"]:
                eid, action = parts[2], parts[3]
                if action == "stop":
                    state = n.stop_entity(eid, caller)
                    self._send_json(200, {"id": eid, "state": state})
                elif action == "suspend":
                    state = n.suspend_entity(eid, caller)
                    self._send_json(200, {"id": eid, "state": state})
                elif action == "resume":
                    state = n.resume_entity(eid, caller)
                    self._send_json(200, {"id": eid, "state": state})
                elif action == "migrate":
                    target = body.get("target")
                    if not target:
                        raise MalformedField("migrate needs a target address")
                    receipt = n.migrate(eid, target, caller)
                    self._send_json(200, receipt)
                elif action == "invoke":
                    result = n.invoke(eid, body.get("op", ""),
                                      body.get("args", []), caller)
                    self._send_json(200, {"id": eid, "result": result})
                else:
                    self._send_json(404, {"error": "NotFound", "reason": action})
            else:
                self._send_json(404, {"error": "NotFound", "reason": self.path})
        except Exception as exc:
            try:
                self._send_error_obj(exc)
            except OSError:
                pass

    def _serve_events(self, query: dict):
        n = self.nucleus
        since = int((query.get("since") or [0])[0])
        accept = self.headers.get("Accept", "")
        if "text/event-stream" not in accept:
            wait = float((query.get("wait") or [0])[0])
            events = n.events_since(since)
            if not events and wait > 0:
                with n._event_cond:
                    n._event_cond.wait(timeout=wait)
                events = n.events_since(since)
            self._send_json(200, {"events": events})
            return

        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.end_headers()
        last = since
        try:
            while not n._stop.is_set():
                events = n.events_since(last)
                if not events:
                    with n._event_cond:
                        n._event_cond.wait(timeout=2.0)
                    events = n.events_since(last)
                if not events:
                    self.wfile.write(b": keep-alive\n\n")
                    self.wfile.flush()
                    continue
                for event in events:
                    chunk = (f"id: {event['seq']}\n"
                             f"data: {canon.encode(event).decode()}\n\n")
                    self.wfile.write(chunk.encode())
                    last = event["seq"]
                self.wfile.flush()
        except OSError:
            pass
