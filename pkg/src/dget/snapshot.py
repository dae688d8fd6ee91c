"""Checkpoint capture and restore for suspended interpreter instances.

A snapshot is taken only at quiescence: every live thread is parked at a
checkpoint or at a blocking instruction, so operand stacks are empty and
frames can be recorded as (method, locals, resumption ordinal) with no
instruction pointers or stack contents. The program itself travels inside
the snapshot as its canonical instrumented text and is re-verified on
restore.

Restore rebuilds blocked-state membership (monitor entry/wait sets, the
receive queue) by launching threads one at a time in a specific order while
the instance is still suspending; each thread replays its frame chain via
the dispatch tables and re-blocks where it was captured. Launch order
matters: waiters must be back in their wait sets before any thread that
might notify them runs. `launch_order="reversed"` exists to demonstrate
the failure mode and must never be used in production.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import canon, vm as vm_mod
from .errors import DigestMismatch, MalformedField, NotQuiescent, UnsupportedVersion
from .instrument import InstrumentedProgram, parse_instrumented
from .ir import value_from_json, value_to_json

VERSION = "dget-snapshot/1"

LAUNCH_RECORDED = "recorded"
LAUNCH_REVERSED = "reversed"

_BLOCKED = vm_mod.BLOCKED_STATUSES | {vm_mod.DONE}


@dataclass(frozen=True)
class Snapshot:
    """Decoded snapshot: program text plus the serialized machine state."""

    program_text: str
    state: dict
    digest: str

    def thread_ids(self):
        return [t["id"] for t in self.state["threads"]]


def _tid_key(tid: str) -> tuple:
    return (0, int(tid[1:])) if tid[1:].isdigit() else (1, tid)


def capture(instance: vm_mod.VmInstance) -> Snapshot:
    """Serialize a suspended, quiescent instance. The instance is unchanged."""
    if instance.flag != vm_mod.SUSPENDING or not instance.quiescent():
        raise NotQuiescent(f"flag={instance.flag}")

    threads = []
    for t in instance.threads.values():
        if t.status not in _BLOCKED:
            raise NotQuiescent(f"thread {t.id} is {t.status}")
        frames = []
        for pos, f in enumerate(t.frames):
            # Only the parked top frame must be empty. A caller frame mid-CALL
            # still holds its reloaded below-the-arguments values; replay
            # rebuilds those from the spilled locals, so they are not recorded.
            if f.stack and pos == len(t.frames) - 1:
                raise NotQuiescent(f"thread {t.id} has a non-empty operand stack")
            frames.append({
                "method": f.method,
                "locals": [value_to_json(v) for v in f.locals],
                "apc": f.apc,
            })
        threads.append({
            "id": t.id,
            "status": t.status,
            "detail": t.detail,
            "frames": frames,
            "result": None if t.result is None else value_to_json(t.result),
        })

    monitors = [
        {
            "id": m.id,
            "owner": m.owner,
            "entry_count": m.entry_count,
            "entry_set": list(m.entry_set),
            "wait_set": list(m.wait_set),
        }
        for m in sorted(instance.monitors.values(), key=lambda m: m.id)
    ]

    state = {
        "threads": threads,
        "monitors": monitors,
        "recv_queue": list(instance.recv_queue),
        "globals": {k: value_to_json(v) for k, v in instance.globals.items()},
        "inbox": [value_to_json(v) for v in instance.inbox],
        "outbox": [
            {"target": m["target"], "seq": m["seq"],
             "payload": value_to_json(m["payload"])}
            for m in instance.outbox
        ],
        "log": list(instance.log),
        "usage": dict(instance.usage),
        "limits": dict(instance.limits),
        "inbox_bound": instance.inbox_bound,
        "dropped_messages": instance.dropped_messages,
        "send_seq": instance.send_seq,
    }
    text = instance.program.emit()
    digest = canon.digest(_digest_view(text, state))
    return Snapshot(text, state, digest)


def _digest_view(program_text: str, state: dict) -> dict:
    return {
        "version": VERSION,
        "digest_alg": canon.DIGEST_ALG,
        "program": program_text,
        "state": state,
    }


def encode(snap: Snapshot) -> bytes:
    obj = _digest_view(snap.program_text, snap.state)
    obj["digest"] = snap.digest
    return canon.encode(obj)


def decode(data: bytes) -> Snapshot:
    """Parse and authenticate a snapshot; any integrity failure raises."""
    try:
        obj = canon.decode(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedField(f"snapshot is not canonical text: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedField("snapshot must be an object")
    version = obj.get("version")
    if version != VERSION:
        raise UnsupportedVersion(repr(version))
    if obj.get("digest_alg") != canon.DIGEST_ALG:
        raise UnsupportedVersion(f"digest_alg {obj.get('digest_alg')!r}")
    for key in ("program", "state", "digest"):
        if key not in obj:
            raise MalformedField(f"snapshot missing {key!r}")
    want = canon.digest(_digest_view(obj["program"], obj["state"]))
    if want != obj["digest"]:
        raise DigestMismatch(f"expected {want}, snapshot claims {obj['digest']}")
    state = obj["state"]
    for key in ("threads", "monitors", "recv_queue", "globals", "inbox",
                "usage", "limits"):
        if key not in state:
            raise MalformedField(f"snapshot state missing {key!r}")
    for trec in state["threads"]:
        if trec.get("status") not in _BLOCKED:
            raise MalformedField(
                f"thread {trec.get('id')!r} has status {trec.get('status')!r}"
            )
        if trec["status"] != vm_mod.DONE and not trec.get("frames"):
            raise MalformedField(f"live thread {trec['id']!r} has no frames")
    return Snapshot(obj["program"], state, obj["digest"])


def _launch_order(state: dict, mode: str) -> list[str]:
    """Order in which restored threads are stepped back to their block sites.

    Wait-set members first (so notifications cannot outrun them), then
    threads parked at checkpoints, then monitor contenders and receivers in
    their recorded queue order, then everything else.
    """
    by_status = {t["id"]: t["status"] for t in state["threads"]
                 if t["status"] != vm_mod.DONE}
    order: list[str] = []

    def take(tid):
        if tid in by_status and tid not in order:
            order.append(tid)

    monitors = sorted(state["monitors"], key=lambda m: m["id"])
    for m in monitors:
        for tid in m["wait_set"]:
            take(tid)
    for tid in sorted(by_status, key=_tid_key):
        if by_status[tid] == vm_mod.EXEC_WAIT:
            take(tid)
    for m in monitors:
        for tid in m["entry_set"]:
            take(tid)
    for tid in state["recv_queue"]:
        take(tid)
    for tid in sorted(by_status, key=_tid_key):
        take(tid)

    if mode == LAUNCH_REVERSED:
        return list(reversed(order))
    if mode != LAUNCH_RECORDED:
        raise MalformedField(f"unknown launch order {mode!r}")
    return order


def restore(snap: Snapshot, host=None, launch_order: str = LAUNCH_RECORDED,
            program: InstrumentedProgram | None = None) -> vm_mod.VmInstance:
    """Rebuild a running instance from a snapshot.

    The embedded program text is re-parsed, re-verified and re-scanned
    (so a snapshot whose program handles the termination tag is rejected
    here, before any state is touched). Returns the instance with the
    execution flag back at RUNNING.
    """
    if program is None:
        program = parse_instrumented(snap.program_text)
    state = snap.state

    inst = vm_mod.VmInstance(program, limits=state["limits"], host=host,
                             inbox_bound=state.get("inbox_bound", 64))
    inst.threads.clear()
    inst.globals = {k: value_from_json(v) for k, v in state["globals"].items()}
    inst.inbox = [value_from_json(v) for v in state["inbox"]]
    inst.outbox = [
        {"target": m["target"], "seq": m["seq"],
         "payload": value_from_json(m["payload"])}
        for m in state.get("outbox", [])
    ]
    inst.log = list(state.get("log", []))
    inst.usage = dict(state["usage"])
    inst.dropped_messages = state.get("dropped_messages", 0)
    inst.send_seq = state.get("send_seq", 0)

    # Monitors come back with ownership only; entry/wait membership is
    # re-established as each blocked thread replays into its block site.
    inst.monitors.clear()
    for m in state["monitors"]:
        inst.monitors[m["id"]] = vm_mod.MonitorState(
            m["id"], owner=m["owner"], entry_count=m["entry_count"]
        )

    wrong_mode = launch_order == LAUNCH_REVERSED
    inst.flag = vm_mod.RUNNING if wrong_mode else vm_mod.SUSPENDING

    records = {t["id"]: t for t in state["threads"]}
    for trec in state["threads"]:
        if trec["status"] == vm_mod.DONE:
            done = vm_mod.GreenThread(trec["id"], [], status=vm_mod.DONE)
            if trec.get("result") is not None:
                done.result = value_from_json(trec["result"])
            inst.threads[trec["id"]] = done
        else:
            frames = [
                {
                    "method": f["method"],
                    "locals": [value_from_json(v) for v in f["locals"]],
                    "apc": f["apc"],
                }
                for f in trec["frames"]
            ]
            inst.add_restored_thread(trec["id"], frames,
                                     trec["status"], trec["detail"])

    for tid in _launch_order(state, launch_order):
        t = inst.threads[tid]
        if records[tid]["status"] == vm_mod.EXEC_WAIT and not wrong_mode:
            # replays to its checkpoint and parks there
            inst.run_restore_launch(t)
            if t.status != vm_mod.EXEC_WAIT and t.status != vm_mod.DONE:
                raise MalformedField(f"thread {tid} did not settle at a checkpoint")
        else:
            inst.run_restore_launch(t)

    if not wrong_mode:
        inst.resume()
    else:
        inst._pump_inbox()
    return inst
