"""Load-time transformation pipeline that makes ghost programs suspendable.

Pipeline: spill -> checkpoint injection -> synchronization registration ->
dispatch construction. The output is an InstrumentedProgram whose methods
all start with DISPATCH, carry a SETAPC before every resumption site, and
are guaranteed (and verified) to have operand-stack depth 0 at every
checkpoint and dispatch target.

Passes work on a symbolic node form (branch operands and handler bounds
reference nodes, not indices) so insertions never corrupt targets.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from . import canon
from .errors import AlreadyInstrumented, LoadRejected, VerificationFailed
from .ir import (
    BRANCH_OPS,
    CATCH_ALL,
    INSTRUMENTATION_OPS,
    INSTRUMENTED,
    SOURCE,
    TERMINATION_TAG,
    GhostProgram,
    HandlerEntry,
    Instruction,
    MethodDef,
    emit_assembly,
    emit_with_tables,
    is_blocking,
    parse_with_tables,
    verify,
)

SITE_CHECK = "CHECK_SITE"
SITE_CALL = "CALL_SITE"


@dataclass
class InstrumentedProgram:
    """A post-pipeline program plus its per-method dispatch tables."""

    program: GhostProgram
    tables: dict[str, dict]          # method -> {"default": int, "sites": {ordinal: index}}
    source_digest: str
    catch_all_handlers: list[tuple[str, int]] = field(default_factory=list)

    def emit(self) -> str:
        return emit_with_tables(self.program, self.tables, self.source_digest)


def parse_instrumented(text: str) -> InstrumentedProgram:
    program, tables, source_digest = parse_with_tables(text)
    if tables is None or source_digest is None:
        raise VerificationFailed("not an instrumented program (missing dispatch metadata)")
    for name in program.methods:
        tables.setdefault(name, {"default": 1, "sites": {}})
    verify(program, INSTRUMENTED, tables)
    marks = scan_termination_handlers(program)
    return InstrumentedProgram(program, tables, source_digest, marks)


# --- symbolic node form ---------------------------------------------------

class _Node:
    __slots__ = ("op", "args", "target")

    def __init__(self, instr: Instruction):
        self.op = instr.op
        self.args = list(instr.args)
        self.target: _Node | None = None  # branch target as a node reference

    @classmethod
    def plain(cls, op, *args):
        return cls(Instruction(op, tuple(args)))


class _Body:
    """Mutable method body where branches and handler bounds reference nodes."""

    def __init__(self, m: MethodDef):
        self.method = m
        self.nodes = [_Node(i) for i in m.body]
        for node in self.nodes:
            if node.op in BRANCH_OPS:
                node.target = self.nodes[node.args[0]]
        n = len(self.nodes)
        # handler bounds: (start_node, end_node_or_None(=body end), handler_node, tag)
        self.handlers = [
            [self.nodes[h.start], self.nodes[h.end] if h.end < n else None,
             self.nodes[h.handler], h.tag]
            for h in m.handlers
        ]

    def insert_before(self, anchor: _Node, new_nodes: list[_Node], redirect: bool):
        """Insert nodes before anchor; optionally retarget branches/handler
        boundaries that referenced the anchor to the first new node."""
        if not new_nodes:
            return
        pos = self.nodes.index(anchor)
        self.nodes[pos:pos] = new_nodes
        if redirect:
            head = new_nodes[0]
            for node in self.nodes:
                if node.target is anchor:
                    node.target = head
            for h in self.handlers:
                for slot in (0, 1, 2):
                    if h[slot] is anchor:
                        h[slot] = head

    def index_of(self, node: _Node) -> int:
        return self.nodes.index(node)

    def freeze(self) -> MethodDef:
        index = {id(n): i for i, n in enumerate(self.nodes)}
        body = []
        for node in self.nodes:
            args = list(node.args)
            if node.op in BRANCH_OPS:
                args[0] = index[id(node.target)]
            body.append(Instruction(node.op, tuple(args)))
        handlers = [
            HandlerEntry(
                index[id(h[0])],
                index[id(h[1])] if h[1] is not None else len(self.nodes),
                index[id(h[2])],
                h[3],
            )
            for h in self.handlers
        ]
        m = self.method
        return MethodDef(m.name, m.nargs, m.nlocals, body, handlers)


def _spill_seq(m: MethodDef, depth: int) -> tuple[list[_Node], list[_Node]]:
    """Fresh STORE/LOAD node runs saving then restoring `depth` stack values."""
    base = m.nlocals
    m.nlocals += depth
    stores = [_Node.plain("STORE", base + j) for j in range(depth - 1, -1, -1)]
    loads = [_Node.plain("LOAD", base + j) for j in range(depth)]
    return stores, loads


def _back_edge_targets(m: MethodDef) -> list[int]:
    """Distinct targets of branches that jump backwards (or to themselves)."""
    targets = {
        instr.args[0]
        for idx, instr in enumerate(m.body)
        if instr.op in BRANCH_OPS and instr.args[0] <= idx
    }
    return sorted(targets)


# --- passes ---------------------------------------------------------------

def spill_pass(p: GhostProgram) -> GhostProgram:
    """Store-and-reload the whole operand stack before every CALL/SPAWN so
    depth is 0 at the head of each reload sequence."""
    depths = verify(p, SOURCE).depths
    p = copy.deepcopy(p)
    for name, m in p.methods.items():
        body = _Body(m)
        calls = [(i, n) for i, n in enumerate(body.nodes) if n.op in ("CALL", "SPAWN")]
        for orig_index, call in calls:
            d = depths[name][orig_index]
            if d == 0:
                continue
            stores, loads = _spill_seq(m, d)
            body.insert_before(call, stores + loads, redirect=True)
        p.methods[name] = body.freeze()
    return p


def inject_checkpoints(p: GhostProgram) -> GhostProgram:
    """CHECK at every method entry and every back-edge target.

    A back-edge target with live stack values gets the checkpoint wrapped in
    a store/reload pair so the CHECK itself sits at depth 0; resuming at the
    CHECK replays only the reloads.
    """
    depths = verify(p, SOURCE).depths
    p = copy.deepcopy(p)
    for name, m in p.methods.items():
        body = _Body(m)
        # capture anchor nodes before any insertion shifts positions
        anchors = [(body.nodes[t], depths[name][t]) for t in _back_edge_targets(m)]
        for anchor, d in anchors:
            stores, loads = _spill_seq(m, d) if d else ([], [])
            body.insert_before(anchor, stores + [_Node.plain("CHECK")] + loads, redirect=True)
        body.insert_before(body.nodes[0], [_Node.plain("CHECK")], redirect=False)
        p.methods[name] = body.freeze()
    return p


def rewrite_sync(p: GhostProgram) -> GhostProgram:
    """Register every monitor literal in declared_monitors. All monitor
    operations already route through the VM's serializable monitor table."""
    p = copy.deepcopy(p)
    found = set(p.declared_monitors)
    for m in p.methods.values():
        for instr in m.body:
            if instr.op == "CONST" and hasattr(instr.args[0], "id"):
                found.add(instr.args[0].id)
    p.declared_monitors = sorted(found)
    return p


def sync_warnings(p: GhostProgram) -> list[str]:
    """Non-fatal: wait/notify present but no LOCK anywhere in the program."""
    has_wait = any(
        i.op in ("WAIT", "NOTIFY", "NOTIFYALL") for m in p.methods.values() for i in m.body
    )
    has_lock = any(i.op == "LOCK" for m in p.methods.values() for i in m.body)
    if has_wait and not has_lock:
        return ["UnknownMonitor: wait/notify used but no LOCK in program"]
    return []


def _site_nodes(body: _Body, depths: list[int]) -> list[tuple[_Node, str, _Node]]:
    """(site instruction, kind, anchor) per resumption site, in body order.

    Anchor is where the site's SETAPC goes: the site itself for checkpoints
    and blocking instructions, the head of the reload sequence for calls.
    """
    sites = []
    for idx, node in enumerate(body.nodes):
        if node.op == "CHECK":
            sites.append((node, SITE_CHECK, node))
        elif node.op in ("CALL", "SPAWN"):
            d = depths[idx]
            anchor = body.nodes[idx - d] if d else node
            for k in range(idx - d, idx):
                if body.nodes[k].op != "LOAD":
                    raise VerificationFailed(
                        f"{body.method.name}: call at {idx} lacks a reload sequence"
                    )
            sites.append((node, SITE_CALL, anchor))
        elif is_blocking(node.op, tuple(node.args)):
            sites.append((node, SITE_CHECK, node))
    return sites


def build_dispatch(p: GhostProgram) -> InstrumentedProgram:
    """Prepend DISPATCH, emit SETAPC before every resumption site, and build
    the per-method ordinal -> target tables."""
    depths = verify(p, INSTRUMENTED).depths
    p = copy.deepcopy(p)
    tables: dict[str, dict] = {}
    for name, m in p.methods.items():
        body = _Body(m)
        setapcs = []
        for ordinal, (_site, _kind, anchor) in enumerate(_site_nodes(body, depths[name])):
            node = _Node.plain("SETAPC", ordinal)
            body.insert_before(anchor, [node], redirect=True)
            setapcs.append(node)
        body.insert_before(body.nodes[0], [_Node.plain("DISPATCH")], redirect=False)
        frozen = body.freeze()
        p.methods[name] = frozen
        tables[name] = {
            "default": 1,
            "sites": {k: body.index_of(node) for k, node in enumerate(setapcs)},
        }
    digest = canon.digest_bytes(emit_assembly(p).encode("utf-8"))
    return InstrumentedProgram(p, tables, digest)


def scan_termination_handlers(p: GhostProgram) -> list[tuple[str, int]]:
    """Reject explicit handlers for the termination tag; return the catch-all
    handlers, which load fine but are bypassed for the termination signal."""
    marks = []
    for name, m in p.methods.items():
        for idx, h in enumerate(m.handlers):
            if h.tag == TERMINATION_TAG:
                raise LoadRejected(name, idx)
            if h.tag == CATCH_ALL:
                marks.append((name, idx))
    return marks


def instrument(p: GhostProgram) -> InstrumentedProgram:
    """Full pipeline. Rejects programs that are already instrumented or that
    try to catch the termination signal."""
    for m in p.methods.values():
        for instr in m.body:
            if instr.op in INSTRUMENTATION_OPS:
                raise AlreadyInstrumented(f"method {m.name!r} contains {instr.op}")
    verify(p, SOURCE)
    marks = scan_termination_handlers(p)
    source_digest = canon.digest_bytes(emit_assembly(p).encode("utf-8"))
    staged = rewrite_sync(inject_checkpoints(spill_pass(p)))
    ip = build_dispatch(staged)
    ip.source_digest = source_digest
    ip.catch_all_handlers = marks
    verify(ip.program, INSTRUMENTED, ip.tables)
    return ip


# --- static step bounds ---------------------------------------------------

def max_intercheck_distance(ip: InstrumentedProgram) -> int:
    """Longest number of instructions any thread can execute before it hits a
    CHECK or observes the termination signal at a method boundary (RET/RETV).

    CALL counts as reaching the callee's entry CHECK (DISPATCH, SETAPC,
    CHECK). Every loop contains a CHECK so the walk terminates.
    """
    best = 0
    for name, m in ip.program.methods.items():
        memo: dict[int, int] = {}
        on_stack: set[int] = set()

        def dist(i: int, m=m) -> int:
            if i in memo:
                return memo[i]
            if i in on_stack:
                raise VerificationFailed(f"{m.name}: checkpoint-free cycle at {i}")
            on_stack.add(i)
            instr = m.body[i]
            op = instr.op
            if op in ("CHECK", "RET", "RETV"):
                out = 1
            elif op == "CALL":
                out = 4  # CALL + callee DISPATCH, SETAPC, CHECK
            elif op == "THROW":
                covering = [h for h in m.handlers if h.start <= i < h.end]
                out = 1 + max((dist(h.handler) for h in covering), default=0)
            elif op == "JMP":
                out = 1 + dist(instr.args[0])
            elif op == "JZ":
                out = 1 + max(dist(instr.args[0]), dist(i + 1))
            else:
                out = 1 + dist(i + 1)
            on_stack.discard(i)
            memo[i] = out
            return out

        for i in range(len(m.body)):
            best = max(best, dist(i))
    return best
