"""Nucleus integration tests over real sockets: deployment, lifecycle,
migration, message forwarding, policy, auth, and the admin HTTP API."""

import base64
import socket
import time

import pytest
import requests

from dget import authz, canon, instrument, ir, nucleus, overlay, snapshot, vm, wire
from dget.errors import PolicyDenied, TargetRefused

from conftest import suspend_to_quiescence

SLOW_COUNTER = """
.program counter
.entry main
.method main 0 1
  CONST 60
  STORE 0
loop:
  LOAD 0
  JZ out
  SLEEP 3
  LOAD 0
  CONST 1
  SUB
  STORE 0
  JMP loop
out:
  CONST 1
  GSET done
  RET
.end
"""

ADDER = """
.program adder
.entry main
.method main 0 0
  SYS recv 0
  GSET got
  RET
.end
.method add 2 2
  LOAD 0
  LOAD 1
  ADD
  RETV
.end
"""

RECV_COUNTER = """
.program counter
.entry main
.method main 0 1
  SYS recv 0
  STORE 0
loop:
  LOAD 0
  JZ out
  LOAD 0
  CONST 1
  SUB
  STORE 0
  JMP loop
out:
  CONST 1
  GSET done
  RET
.end
"""

MANIFEST = {"name": "counter", "owner": "alice@grid"}
ADDER_MANIFEST = {
    "name": "adder", "owner": "alice@grid", "kind": "HYBRID",
    "operations": [["add", 2]],
    "policies": [{"subject": "*", "action": "*", "resource": "*",
                  "effect": "PERMIT"}],
}


def make_nucleus(**overrides):
    cfg = nucleus.load_config(overrides=dict(
        {"domain": "grid", "domain_seed": "itest", "tick_interval": 0.05,
         "advertise_interval": 5.0, "grace_period": 10.0}, **overrides))
    return nucleus.Nucleus(cfg)


@pytest.fixture()
def node():
    with make_nucleus() as n:
        yield n


@pytest.fixture()
def pair():
    with make_nucleus() as a:
        with make_nucleus(peers=[a.addr]) as b:
            deadline = time.time() + 5
            while time.time() < deadline:
                if a.addr in b.overlay.peer_list() \
                        and b.addr in a.overlay.peer_list():
                    break
                time.sleep(0.02)
            else:
                raise AssertionError("peers never discovered each other")
            yield a, b


def api(n):
    return f"http://{n.admin_addr}"


def wait_for(predicate, timeout=10.0, message="condition never became true"):
    deadline = time.time() + timeout
    while time.time() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(0.02)
    raise AssertionError(message)


def send_payload(n, eid, value):
    msg = wire.make_frame(wire.MSG, "client:0",
                          {"entity": eid, "payload": ["i", value]})
    return wire.request(n.addr, msg)


def entity_state(n, eid):
    r = requests.get(f"{api(n)}/v1/entities/{eid}", timeout=5)
    return r.json().get("state") if r.ok else None


# --- wire conformance -------------------------------------------------------

def test_frame_encode_decode_fixpoint():
    frame = wire.make_frame(wire.MSG, "127.0.0.1:1", {"entity": "e1", "k": [1, 2]})
    blob = wire.encode_frame(frame)
    # the first four bytes are the length prefix; the payload is canonical
    assert wire.encode_frame(wire.decode_frame(blob[4:])) == blob


def test_signed_frame_verifies_and_tamper_is_detected():
    pkg = authz.pkg_init("grid", seed="wire")
    params = authz.domain_params(pkg)
    key = authz.issue_identity(pkg, "node@grid", 0, 1000)
    frame = wire.make_frame(wire.MSG, "a:1", {"entity": "e1", "payload": ["i", 5]},
                            key=key, now=10)
    assert wire.check_auth(params, frame, now=10) == authz.ACCEPT
    tampered = dict(frame, body={"entity": "e2", "payload": ["i", 5]})
    assert wire.check_auth(params, tampered, now=10) != authz.ACCEPT


def test_frames_travel_over_a_socket_pair():
    left, right = socket.socketpair()
    try:
        frame = wire.make_frame(wire.REPLY, "a:1", {"n": 7})
        wire.write_frame(left, frame)
        wire.write_frame(left, frame)
        assert wire.read_frame(right) == frame
        assert wire.read_frame(right) == frame
        left.close()
        assert wire.read_frame(right) is None  # clean EOF
    finally:
        right.close()


def test_live_wire_port_answers_hello_with_peers(node):
    hello = wire.make_frame(overlay.HELLO, "203.0.113.9:1",
                            {"from": "203.0.113.9:1", "peers": []})
    reply = wire.request(node.addr, hello)
    assert reply["type"] == overlay.PEERS
    assert reply["body"]["from"] == node.addr


def test_unknown_frame_type_yields_error_frame(node):
    # the sender-side encoder refuses unknown types, so write raw bytes
    payload = canon.encode({"type": "BOGUS", "sender": "x:1", "auth": None,
                            "body": {}})
    host, port = node.addr.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=5) as sock:
        sock.sendall(len(payload).to_bytes(4, "big") + payload)
        reply = wire.read_frame(sock)
    assert reply["type"] == wire.ERROR
    assert reply["body"]["reason"] == "UnknownFrameType"


# --- deployment and lifecycle ----------------------------------------------

def test_system_entities_exist_at_boot(node):
    names = {e["name"] for e in node.list_entities()}
    assert set(nucleus.SYSTEM_ENTITY_NAMES) <= names
    assert all(e["state"] == nucleus.RUNNING for e in node.list_entities())


def test_deploy_runs_to_completion(node):
    r = requests.post(f"{api(node)}/v1/entities",
                      json={"manifest": MANIFEST, "program": SLOW_COUNTER},
                      timeout=5)
    assert r.status_code == 201
    eid = r.json()["id"]
    assert r.json()["state"] == nucleus.RUNNING

    wait_for(lambda: entity_state(node, eid) == nucleus.TERMINATED)
    with node._lock:
        record = node.records[eid]
        assert record.vm.globals == {"done": 1}

    events = requests.get(f"{api(node)}/v1/events?since=0", timeout=5).json()
    kinds = [(e["event"], e["state"]) for e in events["events"]
             if e.get("entity") == eid]
    assert ("shell-state", nucleus.RUNNING) in kinds
    assert ("shell-state", nucleus.TERMINATED) in kinds


def test_entity_listing_schema(node):
    requests.post(f"{api(node)}/v1/entities",
                  json={"manifest": MANIFEST, "program": SLOW_COUNTER},
                  timeout=5)
    listing = requests.get(f"{api(node)}/v1/entities", timeout=5).json()
    assert set(listing) == {"entities"}
    for e in listing["entities"]:
        assert {"id", "name", "kind", "state", "owner", "home",
                "usage", "limits"} <= set(e)


def test_suspend_and_resume(node):
    eid = node.deploy(MANIFEST, RECV_COUNTER)
    r = requests.post(f"{api(node)}/v1/entities/{eid}/suspend", timeout=5)
    assert r.json()["state"] == nucleus.SUSPENDED
    state_a = entity_state(node, eid)
    time.sleep(0.2)
    assert entity_state(node, eid) == state_a == nucleus.SUSPENDED

    # resuming a second time is an illegal transition
    r = requests.post(f"{api(node)}/v1/entities/{eid}/resume", timeout=5)
    assert r.json()["state"] == nucleus.RUNNING
    r = requests.post(f"{api(node)}/v1/entities/{eid}/resume", timeout=5)
    assert r.status_code == 409

    send_payload(node, eid, 40)
    wait_for(lambda: entity_state(node, eid) == nucleus.TERMINATED)
    with node._lock:
        assert node.records[eid].vm.globals == {"done": 1}


def test_stop_terminates_early(node):
    eid = node.deploy(MANIFEST, RECV_COUNTER)
    r = requests.post(f"{api(node)}/v1/entities/{eid}/stop", timeout=5)
    assert r.ok
    wait_for(lambda: entity_state(node, eid) == nucleus.TERMINATED)
    with node._lock:
        assert "done" not in node.records[eid].vm.globals


def test_unknown_entity_is_404(node):
    assert requests.get(f"{api(node)}/v1/entities/e99@nowhere",
                        timeout=5).status_code == 404
    assert requests.post(f"{api(node)}/v1/entities/e99@nowhere/stop",
                         timeout=5).status_code == 404


def test_invoke_typed_operation(node):
    eid = node.deploy(ADDER_MANIFEST, ADDER)
    r = requests.post(f"{api(node)}/v1/entities/{eid}/invoke",
                      json={"op": "add", "args": [["i", 19], ["i", 23]]},
                      timeout=5)
    assert r.ok
    assert r.json()["result"] == ["i", 42]


def test_invoke_unknown_operation_is_404(node):
    eid = node.deploy(ADDER_MANIFEST, ADDER)
    r = requests.post(f"{api(node)}/v1/entities/{eid}/invoke",
                      json={"op": "subtract", "args": []}, timeout=5)
    assert r.status_code == 404


# --- policy and auth --------------------------------------------------------

def test_admission_policy_denies_deploy():
    deny = [{"subject": "*", "action": "deploy", "resource": "*",
             "effect": "DENY"},
            {"subject": "*", "action": "*", "resource": "*",
             "effect": "PERMIT"}]
    with make_nucleus(policy=deny) as n:
        r = requests.post(f"{api(n)}/v1/entities",
                          json={"manifest": MANIFEST, "program": SLOW_COUNTER},
                          timeout=5)
        assert r.status_code == 403
        with pytest.raises(PolicyDenied):
            n.deploy(MANIFEST, SLOW_COUNTER)
        # nothing was admitted
        names = {e["name"] for e in n.list_entities()}
        assert "counter" not in names


def test_require_auth_rejects_unsigned_wire_frames():
    with make_nucleus(require_auth=True) as n:
        frame = {"type": wire.MSG, "sender": "x:1", "auth": None,
                 "body": {"entity": "nobody", "payload": ["i", 1]}}
        reply = wire.request(n.addr, frame)
        assert reply["type"] == wire.ERROR
        assert reply["body"]["reason"] == "AuthFailed"
        assert n.dropped_frames >= 1


def test_require_auth_guards_admin_api():
    with make_nucleus(require_auth=True) as n:
        assert requests.get(f"{api(n)}/v1/entities",
                            timeout=5).status_code == 401
        token = authz.sign(n.key, b"admin", n._auth_now())
        header = base64.b64encode(canon.encode(authz.token_to_json(token)))
        r = requests.get(f"{api(n)}/v1/entities",
                         headers={"X-DGET-Token": header.decode()}, timeout=5)
        assert r.status_code == 200


# --- migration --------------------------------------------------------------

def test_migration_moves_a_running_entity(pair):
    a, b = pair
    eid = a.deploy(MANIFEST, RECV_COUNTER)
    wait_for(lambda: entity_state(a, eid) == nucleus.RUNNING)

    r = requests.post(f"{api(a)}/v1/entities/{eid}/migrate",
                      json={"target": b.addr}, timeout=20)
    assert r.ok, r.text
    assert r.json()["target"] == b.addr

    # source side: terminated shell plus a migrated event
    assert entity_state(a, eid) == nucleus.TERMINATED
    events = requests.get(f"{api(a)}/v1/events?since=0", timeout=5).json()
    assert any(e["event"] == "migrated" and e["entity"] == eid
               for e in events["events"])

    # target side: same id finishes the countdown with its state intact
    assert entity_state(b, eid) == nucleus.RUNNING
    send_payload(b, eid, 30)
    wait_for(lambda: entity_state(b, eid) == nucleus.TERMINATED)
    with b._lock:
        assert b.records[eid].vm.globals == {"done": 1}

    # location discovery converges on the new home
    r = requests.get(f"{api(a)}/v1/locate/{eid}", timeout=5)
    assert r.ok and r.json()["addr"] == b.addr


def test_migration_refused_by_target_policy():
    deny = [{"subject": "*", "action": "migrate", "resource": "*",
             "effect": "DENY"},
            {"subject": "*", "action": "*", "resource": "*",
             "effect": "PERMIT"}]
    with make_nucleus() as a:
        with make_nucleus(policy=deny, peers=[a.addr]) as b:
            eid = a.deploy(MANIFEST, RECV_COUNTER)
            with pytest.raises(TargetRefused):
                a.migrate(eid, b.addr)
            # the refused entity keeps running at the source
            assert entity_state(a, eid) == nucleus.RUNNING
            send_payload(a, eid, 10)
            wait_for(lambda: entity_state(a, eid) == nucleus.TERMINATED,
                     timeout=15)
            with a._lock:
                assert a.records[eid].vm.globals == {"done": 1}


def test_duplicate_migrate_state_rejected(pair):
    a, b = pair
    ip = instrument.instrument(ir.parse_assembly(SLOW_COUNTER))
    inst = vm.load(ip)
    inst.step(40)
    suspend_to_quiescence(inst)
    blob = base64.b64encode(snapshot.encode(snapshot.capture(inst))).decode()
    body = {"entity": "e77@fake", "manifest": MANIFEST,
            "snapshot": blob, "version": 2}
    frame = wire.make_frame(wire.MIGRATE_STATE, a.addr, body, key=a.key,
                            now=a._auth_now())
    first = wire.request(b.addr, frame)
    assert first["type"] == wire.MIGRATE_ACK
    second = wire.request(b.addr, frame)
    assert second["type"] == wire.ERROR
    assert second["body"]["reason"] == "DuplicateEntity"


def test_messages_forward_during_the_grace_period(pair):
    a, b = pair
    eid = a.deploy(ADDER_MANIFEST, ADDER)
    requests.post(f"{api(a)}/v1/entities/{eid}/migrate",
                  json={"target": b.addr}, timeout=20).raise_for_status()

    reply = send_payload(a, eid, 5)     # sent to the OLD home
    assert reply["type"] == wire.REPLY
    assert reply["body"].get("delivered") is True
    wait_for(lambda: entity_state(b, eid) == nucleus.TERMINATED)
    with b._lock:
        assert b.records[eid].vm.globals == {"got": 5}


# --- discovery through the admin api ---------------------------------------

def test_admin_query_reaches_peer_adverts(pair):
    a, b = pair
    b._publish_descriptor("role=worker,cpus=8")
    wait_for(lambda: b.addr in {h.get("origin")
                                for h in a.admin_query("role=worker", ttl=2)},
             message="peer advert never reached the querier")
    r = requests.get(f"{api(a)}/v1/query", params={"expr": "cpus>4"},
                     timeout=5)
    assert r.ok
    assert any(h["origin"] == b.addr for h in r.json()["hits"])


def test_admin_locate_unknown_entity_is_404(node):
    r = requests.get(f"{api(node)}/v1/locate/e12@unknown", timeout=5)
    assert r.status_code == 404


def test_peers_endpoint_lists_neighbours(pair):
    a, b = pair
    r = requests.get(f"{api(a)}/v1/peers", timeout=5)
    assert r.ok
    assert r.json()["addr"] == a.addr
    assert b.addr in r.json()["peers"]


def test_event_stream_over_sse(node):
    eid = node.deploy(MANIFEST, SLOW_COUNTER)
    with requests.get(f"{api(node)}/v1/events", stream=True, timeout=5,
                      headers={"Accept": "text/event-stream"}) as r:
        assert r.status_code == 200
        assert r.headers["Content-Type"].startswith("text/event-stream")
        saw = []
        for line in r.iter_lines(decode_unicode=True):
            if line.startswith("data:"):
                saw.append(line)
                if eid in line:
                    break
            if len(saw) > 50:
                break
    assert any(eid in line for line in saw)
