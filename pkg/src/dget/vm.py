"""Cooperative green-thread interpreter for instrumented ghost programs.

Scheduling is deterministic: round-robin over runnable threads in creation
order, one instruction per thread per rotation. Sleep is virtual time that
only advances when nothing is runnable, so identical inputs always produce
identical traces. Monitors are plain serializable records (owner, entry
count, FIFO entry and wait sets) rather than host locks.

The same interpreter performs snapshot replay: a restored thread carries a
chain of frame records and a pending blocked state; DISPATCH branches by
the frame's APC, CALLs re-enter the saved frames, and the thread re-blocks
exactly where it was captured.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import authz, canon
from .errors import (
    ApcOutOfRange,
    IllegalFlagTransition,
    MalformedField,
    RuntimeFault,
)
from .instrument import InstrumentedProgram, scan_termination_handlers
from .ir import (
    INSTRUMENTED,
    TERMINATION_TAG,
    MonitorRef,
    ThreadRef,
    verify,
    wrap_i64,
)

# execution flag
RUNNING = "RUNNING"
SUSPENDING = "SUSPENDING"
TERMINATED = "TERMINATED"

# thread statuses
RUNNABLE = "RUNNABLE"
EXEC_WAIT = "EXEC_WAIT"
MONITOR_ENTRY = "MONITOR_ENTRY"
MONITOR_WAIT = "MONITOR_WAIT"
JOIN_WAIT = "JOIN_WAIT"
SLEEPING = "SLEEPING"
RECV_WAIT = "RECV_WAIT"
DONE = "DONE"

BLOCKED_STATUSES = frozenset(
    {EXEC_WAIT, MONITOR_ENTRY, MONITOR_WAIT, JOIN_WAIT, SLEEPING, RECV_WAIT}
)

# step outcomes
QUIESCENT = "QUIESCENT"
RAN = "RAN"
ALL_DONE = "ALL_DONE"
OUT_TERMINATED = "TERMINATED"

_PENDING_OP = {
    MONITOR_ENTRY: "LOCK",
    MONITOR_WAIT: "WAIT",
    JOIN_WAIT: "JOIN",
    SLEEPING: "SLEEP",
    RECV_WAIT: "SYS",
}


@dataclass
class Frame:
    method: str
    locals: list
    ip: int = 0
    stack: list = field(default_factory=list)
    apc: int | None = None          # last resumption-site ordinal, ENTRY = None
    restore_flag: bool = False


@dataclass
class GreenThread:
    id: str
    frames: list[Frame]
    status: str = RUNNABLE
    detail: dict | None = None
    result: object = None
    # snapshot replay state
    restoring: bool = False
    restore_chain: list = field(default_factory=list)
    pending_block: tuple | None = None   # (status, detail)


@dataclass
class MonitorState:
    id: str
    owner: str | None = None
    entry_count: int = 0
    entry_set: list[str] = field(default_factory=list)
    wait_set: list[str] = field(default_factory=list)


class VmInstance:
    """One loaded entity program. Confined: step from a single executor."""

    def __init__(self, program: InstrumentedProgram, limits=None, host=None,
                 inbox_bound=64):
        self.program = program
        self.threads: dict[str, GreenThread] = {}
        self.monitors: dict[str, MonitorState] = {
            m: MonitorState(m) for m in program.program.declared_monitors
        }
        self.globals: dict = {}
        self.inbox: list = []
        self.outbox: list = []
        self.log: list[str] = []
        self.recv_queue: list[str] = []
        self.flag = RUNNING
        self.usage = {"steps": 0, "threads": 0, "messages": 0}
        self.limits = dict(limits or {})
        self.host = host
        self.inbox_bound = self.limits.get("inbox", inbox_bound)
        self.dropped_messages = 0
        self.send_seq = 0
        self.fault: RuntimeFault | None = None
        self._rotation: list[str] = []

    # --- lifecycle --------------------------------------------------------

    def request_suspend(self):
        if self.flag != RUNNING:
            raise IllegalFlagTransition(f"suspend from {self.flag}")
        self.flag = SUSPENDING

    def resume(self):
        if self.flag != SUSPENDING:
            raise IllegalFlagTransition(f"resume from {self.flag}")
        self.flag = RUNNING
        for t in self.threads.values():
            if t.status == EXEC_WAIT:
                t.status = RUNNABLE
                t.detail = None
        self._pump_inbox()

    def request_terminate(self):
        if self.flag == TERMINATED:
            return
        self.flag = TERMINATED
        for t in self.threads.values():
            if t.status in BLOCKED_STATUSES:
                self._kill_thread(t)

    def quiescent(self) -> bool:
        if self.flag != SUSPENDING:
            return False
        return all(
            t.status in BLOCKED_STATUSES
            for t in self.threads.values()
            if t.status != DONE
        )

    def all_done(self) -> bool:
        return all(t.status == DONE for t in self.threads.values())

    # --- messaging --------------------------------------------------------

    def deliver_message(self, payload):
        if len(self.inbox) >= self.inbox_bound:
            self.dropped_messages += 1
            return
        self.inbox.append(payload)
        if self.flag == RUNNING:
            self._pump_inbox()

    def _pump_inbox(self):
        """Hand queued messages to receive-blocked threads, FIFO both sides."""
        while self.inbox and self.recv_queue:
            tid = self.recv_queue.pop(0)
            t = self.threads[tid]
            t.frames[-1].stack.append(self.inbox.pop(0))
            t.frames[-1].ip += 1
            t.status = RUNNABLE
            t.detail = None

    def take_outbox(self):
        out, self.outbox = self.outbox, []
        return out

    def take_log(self):
        out, self.log = self.log, []
        return out

    # --- typed invocations ------------------------------------------------

    def start_invocation(self, op: str, args: list) -> str:
        m = self.program.program.methods.get(op)
        if m is None or m.nargs != len(args):
            raise MalformedField(f"no operation {op}/{len(args)}")
        return self._spawn_thread(op, list(args))

    def invocation_result(self, tid: str):
        t = self.threads[tid]
        return t.status == DONE, t.result

    # --- scheduling -------------------------------------------------------

    def step(self, budget: int):
        """Run up to `budget` instructions round-robin; returns (outcome, ran)."""
        ran = 0
        while ran < budget:
            if not self._rotation:
                runnable = [t.id for t in self.threads.values()
                            if t.status == RUNNABLE]
                if not runnable:
                    if self.flag == RUNNING and self._advance_sleep():
                        continue
                    break
                # the rotation persists across step() calls so budget
                # boundaries never skip a thread's turn
                self._rotation = runnable
            t = self.threads.get(self._rotation.pop(0))
            if t is None or t.status != RUNNABLE:
                continue
            self._exec_one(t)
            ran += 1
        if self.all_done():
            return (OUT_TERMINATED if self.flag == TERMINATED else ALL_DONE), ran
        if ran == 0:
            return QUIESCENT, ran
        return RAN, ran

    def run_to_completion(self, max_steps=2_000_000):
        total = 0
        while total < max_steps:
            outcome, ran = self.step(1000)
            total += ran
            if outcome in (ALL_DONE, OUT_TERMINATED):
                return outcome
            if outcome == QUIESCENT:
                raise MalformedField("deadlock: no runnable or sleeping thread")
        raise MalformedField(f"program exceeded {max_steps} steps")

    def _advance_sleep(self) -> bool:
        sleepers = [t for t in self.threads.values() if t.status == SLEEPING]
        if not sleepers:
            return False
        delta = min(t.detail["remaining"] for t in sleepers)
        for t in sleepers:
            t.detail["remaining"] -= delta
            if t.detail["remaining"] <= 0:
                t.status = RUNNABLE
                t.detail = None
                t.frames[-1].ip += 1
        return True

    # --- thread / monitor internals ---------------------------------------

    def _spawn_thread(self, method: str, args: list) -> str:
        if self._charge("threads", 1):
            return ""
        tid = f"t{self.usage['threads'] - 1}"
        m = self.program.program.methods[method]
        locals_ = list(args) + [0] * (m.nlocals - len(args))
        self.threads[tid] = GreenThread(tid, [Frame(method, locals_)])
        return tid

    def _charge(self, name: str, amount: int) -> bool:
        """Charge quota; on breach soft-terminate and return True."""
        if authz.charge_quota(self.usage, self.limits, name, amount) == authz.EXCEEDED:
            self.request_terminate()
            return True
        return False

    def _monitor(self, ref) -> MonitorState:
        if not isinstance(ref, MonitorRef):
            raise _Signal("monitor")
        if ref.id not in self.monitors:
            self.monitors[ref.id] = MonitorState(ref.id)
        return self.monitors[ref.id]

    def _grant_next(self, mon: MonitorState):
        """Hand a free monitor to the head of its entry set."""
        if mon.owner is None and mon.entry_set:
            tid = mon.entry_set.pop(0)
            t = self.threads[tid]
            mon.owner = tid
            mon.entry_count = t.detail["count"]
            t.status = RUNNABLE
            t.detail = None
            t.frames[-1].ip += 1

    def _kill_thread(self, t: GreenThread):
        """Termination signal: unwind immediately, bypassing all handlers."""
        for mon in self.monitors.values():
            if mon.owner == t.id:
                mon.owner = None
                mon.entry_count = 0
                self._grant_next(mon)
            if t.id in mon.entry_set:
                mon.entry_set.remove(t.id)
            if t.id in mon.wait_set:
                mon.wait_set.remove(t.id)
        if t.id in self.recv_queue:
            self.recv_queue.remove(t.id)
        t.frames = []
        t.detail = None
        t.status = DONE
        self._wake_joiners(t.id)

    def _finish_thread(self, t: GreenThread):
        t.status = DONE
        t.frames = []
        self._wake_joiners(t.id)

    def _wake_joiners(self, tid: str):
        for other in self.threads.values():
            if other.status == JOIN_WAIT and other.detail["thread"] == tid:
                other.status = RUNNABLE
                other.detail = None
                other.frames[-1].ip += 1

    def _throw(self, t: GreenThread, tag: str):
        if tag == TERMINATION_TAG:
            self._kill_thread(t)
            return
        methods = self.program.program.methods
        top = True
        while t.frames:
            frame = t.frames[-1]
            at = frame.ip if top else frame.ip - 1  # callers sit just past their CALL
            for h in methods[frame.method].handlers:
                if h.start <= at < h.end and (h.tag == tag or h.tag == "*"):
                    frame.stack = [tag]
                    frame.ip = h.handler
                    return
            t.frames.pop()
            top = False
        fault = RuntimeFault(tag, t.id, "?", -1)
        t.status = DONE
        self._wake_joiners(t.id)
        self.fault = fault
        raise fault

    # --- instruction execution --------------------------------------------

    def _exec_one(self, t: GreenThread):
        frame = t.frames[-1]
        method = self.program.program.methods[frame.method]
        instr = method.body[frame.ip]
        op = instr.op

        # Observation points for the termination signal: checkpoints, returns,
        # and every op that could block (a thread must not park itself after
        # the terminate-time sweep has already run).
        if self.flag == TERMINATED and (
                op in ("CHECK", "RET", "RETV", "LOCK", "WAIT", "JOIN", "SLEEP")
                or (op == "SYS" and instr.args[0] == "recv")):
            self._kill_thread(t)
            return
        if not t.restoring and self.flag != TERMINATED:
            if self._charge("steps", 1):
                # quota breached on this instruction: skip it, let the thread
                # run on to the next checkpoint where the signal is observed
                return

        try:
            self._dispatch_op(t, frame, instr)
        except _Signal as sig:
            fault_at = (frame.method, frame.ip)
            try:
                self._throw(t, sig.tag)
            except RuntimeFault:
                self.fault = RuntimeFault(sig.tag, t.id, fault_at[0], fault_at[1])
                raise self.fault from None

    def _dispatch_op(self, t: GreenThread, frame: Frame, instr):
        op = instr.op
        args = instr.args
        stack = frame.stack
        program = self.program

        if op == "CONST":
            stack.append(args[0])
            frame.ip += 1
        elif op == "LOAD":
            stack.append(frame.locals[args[0]])
            frame.ip += 1
        elif op == "STORE":
            frame.locals[args[0]] = stack.pop()
            frame.ip += 1
        elif op in ("ADD", "SUB", "MUL", "DIV"):
            b, a = stack.pop(), stack.pop()
            if isinstance(a, bool) or isinstance(b, bool) or \
                    not isinstance(a, int) or not isinstance(b, int):
                raise _Signal("type")
            if op == "ADD":
                r = a + b
            elif op == "SUB":
                r = a - b
            elif op == "MUL":
                r = a * b
            else:
                if b == 0:
                    raise _Signal("arith")
                r = abs(a) // abs(b)
                if (a < 0) != (b < 0):
                    r = -r
            stack.append(wrap_i64(r))
            frame.ip += 1
        elif op == "CMP":
            b, a = stack.pop(), stack.pop()
            ints = all(isinstance(x, int) and not isinstance(x, bool) for x in (a, b))
            strs = all(isinstance(x, str) for x in (a, b))
            if not (ints or strs):
                raise _Signal("type")
            stack.append(-1 if a < b else (1 if a > b else 0))
            frame.ip += 1
        elif op == "JMP":
            frame.ip = args[0]
        elif op == "JZ":
            v = stack.pop()
            if isinstance(v, bool):
                taken = not v
            elif isinstance(v, int):
                taken = v == 0
            else:
                raise _Signal("type")
            frame.ip = args[0] if taken else frame.ip + 1
        elif op == "CALL":
            target, nargs = args
            callee = program.program.methods[target]
            call_args = stack[len(stack) - nargs:] if nargs else []
            del stack[len(stack) - nargs:]
            frame.ip += 1  # return lands after the call
            if t.restoring and t.restore_chain:
                rec = t.restore_chain.pop(0)
                if rec["method"] != target:
                    raise MalformedField(
                        f"restore chain expects {rec['method']!r}, call hits {target!r}"
                    )
                locals_ = list(rec["locals"]) + [0] * (callee.nlocals - len(rec["locals"]))
                new = Frame(target, locals_, apc=rec["apc"], restore_flag=True)
            else:
                new = Frame(target, list(call_args) + [0] * (callee.nlocals - nargs))
            t.frames.append(new)
        elif op == "RET":
            t.frames.pop()
            if not t.frames:
                self._finish_thread(t)
        elif op == "RETV":
            v = stack.pop()
            t.frames.pop()
            if t.frames:
                t.frames[-1].stack.append(v)
            else:
                t.result = v
                self._finish_thread(t)
        elif op == "SPAWN":
            target, nargs = args
            call_args = stack[len(stack) - nargs:] if nargs else []
            del stack[len(stack) - nargs:]
            if self._charge("threads", 1):
                # quota breached: no thread is created, a dead ref keeps the
                # stack shape until the termination signal lands
                stack.append(ThreadRef(""))
                frame.ip += 1
                return
            tid = f"t{self.usage['threads'] - 1}"
            callee = program.program.methods[target]
            locals_ = list(call_args) + [0] * (callee.nlocals - nargs)
            self.threads[tid] = GreenThread(tid, [Frame(target, locals_)])
            stack.append(ThreadRef(tid))
            frame.ip += 1
        elif op == "LOCK":
            if self._maybe_apply_pending(t, MONITOR_ENTRY):
                return
            mon = self._monitor(frame.locals[args[0]])
            if mon.owner in (None, t.id):
                mon.owner = t.id
                mon.entry_count += 1
                frame.ip += 1
            else:
                mon.entry_set.append(t.id)
                t.status = MONITOR_ENTRY
                t.detail = {"monitor": mon.id, "count": 1}
        elif op == "UNLOCK":
            mon = self._monitor(frame.locals[args[0]])
            if mon.owner != t.id:
                raise _Signal("monitor")
            mon.entry_count -= 1
            if mon.entry_count == 0:
                mon.owner = None
                self._grant_next(mon)
            frame.ip += 1
        elif op == "WAIT":
            # a thread notified before capture is parked at its WAIT but
            # already queued for entry, so both states can land here
            if self._maybe_apply_pending(t, (MONITOR_WAIT, MONITOR_ENTRY)):
                return
            mon = self._monitor(frame.locals[args[0]])
            if mon.owner != t.id:
                raise _Signal("monitor")
            saved = mon.entry_count
            mon.owner = None
            mon.entry_count = 0
            self._grant_next(mon)
            mon.wait_set.append(t.id)
            t.status = MONITOR_WAIT
            t.detail = {"monitor": mon.id, "count": saved}
        elif op in ("NOTIFY", "NOTIFYALL"):
            mon = self._monitor(frame.locals[args[0]])
            if mon.owner != t.id:
                raise _Signal("monitor")
            moves = len(mon.wait_set) if op == "NOTIFYALL" else min(1, len(mon.wait_set))
            for _ in range(moves):
                wid = mon.wait_set.pop(0)
                self.threads[wid].status = MONITOR_ENTRY
                mon.entry_set.append(wid)
            frame.ip += 1
        elif op == "JOIN":
            if self._maybe_apply_pending(t, JOIN_WAIT):
                return
            ref = frame.locals[args[0]]
            if not isinstance(ref, ThreadRef):
                raise _Signal("type")
            target = self.threads.get(ref.id)
            if target is None or target.status == DONE:
                frame.ip += 1
            else:
                t.status = JOIN_WAIT
                t.detail = {"thread": ref.id}
        elif op == "SLEEP":
            if self._maybe_apply_pending(t, SLEEPING):
                return
            ms = args[0]
            if ms <= 0:
                frame.ip += 1
            else:
                t.status = SLEEPING
                t.detail = {"remaining": ms}
        elif op == "GGET":
            stack.append(self.globals.get(args[0], 0))
            frame.ip += 1
        elif op == "GSET":
            self.globals[args[0]] = stack.pop()
            frame.ip += 1
        elif op == "SYS":
            self._sys(t, frame, args[0], args[1])
        elif op == "THROW":
            raise _Signal(args[0])
        elif op == "CHECK":
            t.restoring = False
            if self.flag == RUNNING:
                frame.ip += 1
            else:  # SUSPENDING; TERMINATED was handled before dispatch
                t.status = EXEC_WAIT
                t.detail = None
        elif op == "SETAPC":
            frame.apc = args[0]
            frame.ip += 1
        elif op == "DISPATCH":
            if frame.restore_flag:
                frame.restore_flag = False
                table = program.tables[frame.method]
                if frame.apc is None:
                    frame.ip = table["default"]
                else:
                    if frame.apc not in table["sites"]:
                        raise ApcOutOfRange(
                            f"APC {frame.apc} out of range in {frame.method}"
                        )
                    frame.ip = table["sites"][frame.apc]
            else:
                frame.ip += 1
        else:
            raise MalformedField(f"unknown opcode {op}")

    def _sys(self, t: GreenThread, frame: Frame, name: str, nargs: int):
        stack = frame.stack
        if name == "recv":
            if self._maybe_apply_pending(t, RECV_WAIT):
                return
            if self.inbox:
                stack.append(self.inbox.pop(0))
                frame.ip += 1
            else:
                t.status = RECV_WAIT
                t.detail = None
                self.recv_queue.append(t.id)
            return
        args = stack[len(stack) - nargs:] if nargs else []
        del stack[len(stack) - nargs:]
        if name == "send":
            target, payload = args
            if self._charge("messages", 1):
                frame.ip += 1
                return
            self.send_seq += 1
            self.outbox.append({"target": str(target), "payload": payload,
                                "seq": self.send_seq})
        elif name == "log":
            self.log.append(args[0] if isinstance(args[0], str) else repr(args[0]))
        elif name == "publish":
            if self.host is not None:
                self.host.sys_publish(str(args[0]))
        elif name == "query":
            res = self.host.sys_query(str(args[0]), args[1]) if self.host else "[]"
            stack.append(res)
        elif name == "locate":
            res = self.host.sys_locate(str(args[0])) if self.host else ""
            stack.append(res)
        elif name == "limits":
            stack.append(canon.encode(self.limits).decode())
        elif name == "usage":
            stack.append(canon.encode(self.usage).decode())
        else:
            raise MalformedField(f"unknown syscall {name}")
        frame.ip += 1

    # --- snapshot replay --------------------------------------------------

    def _maybe_apply_pending(self, t: GreenThread, want_status) -> bool:
        """During replay, re-establish the captured blocked state instead of
        executing the blocking instruction."""
        if not (t.restoring and t.pending_block and not t.restore_chain):
            return False
        status, detail = t.pending_block
        want = want_status if isinstance(want_status, tuple) else (want_status,)
        if status not in want:
            raise MalformedField(f"captured status {status} at a {want_status} site")
        t.pending_block = None
        t.restoring = False
        frame = t.frames[-1]
        if status == MONITOR_ENTRY:
            self.monitors[detail["monitor"]].entry_set.append(t.id)
        elif status == MONITOR_WAIT:
            self.monitors[detail["monitor"]].wait_set.append(t.id)
        elif status == JOIN_WAIT:
            target = self.threads.get(detail["thread"])
            if target is None or target.status == DONE:
                frame.ip += 1  # join target finished before capture: resolve now
                return True
        elif status == RECV_WAIT:
            self.recv_queue.append(t.id)
        t.status = status
        t.detail = dict(detail) if detail is not None else None
        return True

    def add_restored_thread(self, tid: str, frame_records: list, status: str,
                            detail) -> GreenThread:
        """Create a thread poised to replay its saved frame stack."""
        chain = list(frame_records)
        bottom = chain.pop(0)
        m = self.program.program.methods.get(bottom["method"])
        if m is None:
            raise MalformedField(f"unknown method {bottom['method']!r} in snapshot")
        locals_ = list(bottom["locals"]) + [0] * (m.nlocals - len(bottom["locals"]))
        frame = Frame(bottom["method"], locals_, apc=bottom["apc"], restore_flag=True)
        t = GreenThread(tid, [frame], restoring=True, restore_chain=chain)
        if status != EXEC_WAIT:
            t.pending_block = (status, detail)
        self.threads[tid] = t
        return t

    def run_restore_launch(self, t: GreenThread, max_steps=1_000_000):
        """Step one restored thread until it re-blocks (or finishes)."""
        steps = 0
        while t.status == RUNNABLE:
            self._exec_one(t)
            steps += 1
            if steps > max_steps:
                raise MalformedField(f"restore of thread {t.id} did not settle")


class _Signal(Exception):
    """Internal: a catchable ghost exception identified by its tag."""

    def __init__(self, tag):
        super().__init__(tag)
        self.tag = tag


def load(ip: InstrumentedProgram, limits=None, host=None, inbox_bound=64) -> VmInstance:
    """Verify, scan, and load an instrumented program with one entry thread."""
    verify(ip.program, INSTRUMENTED, ip.tables)
    scan_termination_handlers(ip.program)
    vm = VmInstance(ip, limits=limits, host=host, inbox_bound=inbox_bound)
    vm._spawn_thread(ip.program.entry, [])
    return vm
