"""Ghost instruction set: values, programs, assembly format, verification.

A GhostProgram is a set of named methods over a small stack machine. The
textual form (".ghost") is line oriented:

    .program NAME
    .entry NAME
    .monitor NAME
    .method NAME NARGS NLOCALS
      CONST 1
    loop:
      JZ done
      JMP loop
    done:
      RET
    .handler FROM TO TARGET TAG
    .end

Branch targets are labels in the text and instruction indices once parsed.
`#` starts a comment (outside string literals). Instrumented programs
additionally carry `.source_digest HEX` and per-method `.dispatch ORD TARGET`
lines; those never appear in source programs.

Verification runs a forward abstract interpretation of operand-stack depth
and doubles as the structural checker (call targets, local bounds, handler
ranges, reachability).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import (
    AsmSyntaxError,
    DuplicateMethod,
    ForbiddenOpcodeInSource,
    InconsistentStackDepth,
    NonZeroDepthAtCheckpoint,
    NonZeroDepthAtTarget,
    StackUnderflow,
    UnknownLabel,
    UnreachableCode,
    VerificationFailed,
)

SOURCE = "SOURCE"
INSTRUMENTED = "INSTRUMENTED"

TERMINATION_TAG = "dget.terminated"
CATCH_ALL = "*"

# --- values ---------------------------------------------------------------

INT64_MASK = (1 << 64) - 1
INT64_SIGN = 1 << 63


def wrap_i64(n: int) -> int:
    """Two's-complement wraparound to signed 64 bit."""
    n &= INT64_MASK
    return n - (1 << 64) if n & INT64_SIGN else n


@dataclass(frozen=True)
class MonitorRef:
    id: str


@dataclass(frozen=True)
class ThreadRef:
    id: str


# Runtime values are: int (signed 64-bit), str, bool, MonitorRef, ThreadRef.

def value_to_json(v):
    if isinstance(v, bool):
        return ["b", v]
    if isinstance(v, int):
        return ["i", v]
    if isinstance(v, str):
        return ["s", v]
    if isinstance(v, MonitorRef):
        return ["m", v.id]
    if isinstance(v, ThreadRef):
        return ["t", v.id]
    raise TypeError(f"not a ghost value: {v!r}")


def value_from_json(j):
    tag, payload = j
    if tag == "b":
        return bool(payload)
    if tag == "i":
        return wrap_i64(int(payload))
    if tag == "s":
        return str(payload)
    if tag == "m":
        return MonitorRef(str(payload))
    if tag == "t":
        return ThreadRef(str(payload))
    raise ValueError(f"unknown value tag {tag!r}")


# --- instructions ---------------------------------------------------------

# operand kinds: lit (value literal), idx (local slot), label (branch
# target; an instruction index once parsed), name (identifier), int
OP_SPECS = {
    "CONST": ("lit",),
    "LOAD": ("idx",),
    "STORE": ("idx",),
    "ADD": (),
    "SUB": (),
    "MUL": (),
    "DIV": (),
    "CMP": (),
    "JMP": ("label",),
    "JZ": ("label",),
    "CALL": ("name", "int"),
    "SPAWN": ("name", "int"),
    "RET": (),
    "RETV": (),
    "LOCK": ("idx",),
    "UNLOCK": ("idx",),
    "WAIT": ("idx",),
    "NOTIFY": ("idx",),
    "NOTIFYALL": ("idx",),
    "JOIN": ("idx",),
    "SLEEP": ("int",),
    "GGET": ("name",),
    "GSET": ("name",),
    "SYS": ("name", "int"),
    "THROW": ("name",),
    "CHECK": (),
    "SETAPC": ("int",),
    "DISPATCH": (),
}

INSTRUMENTATION_OPS = {"CHECK", "SETAPC", "DISPATCH"}
BRANCH_OPS = {"JMP", "JZ"}
TERMINATOR_OPS = {"JMP", "RET", "RETV", "THROW"}

# Instructions that can block the executing thread. The verifier demands
# operand-stack depth 0 at these so a captured frame never needs its stack.
def is_blocking(op: str, args: tuple) -> bool:
    if op in ("LOCK", "WAIT", "JOIN", "SLEEP"):
        return True
    return op == "SYS" and args and args[0] == "recv"


# name -> (argument count, result count)
SYS_TABLE = {
    "send": (2, 0),
    "recv": (0, 1),
    "publish": (1, 0),
    "query": (2, 1),
    "locate": (1, 1),
    "log": (1, 0),
    "limits": (0, 1),
    "usage": (0, 1),
}


@dataclass(frozen=True)
class Instruction:
    op: str
    args: tuple = ()


@dataclass(frozen=True)
class HandlerEntry:
    start: int          # first covered instruction index
    end: int            # exclusive
    handler: int        # handler entry index
    tag: str            # exception tag or "*"


@dataclass
class MethodDef:
    name: str
    nargs: int
    nlocals: int
    body: list[Instruction] = field(default_factory=list)
    handlers: list[HandlerEntry] = field(default_factory=list)


@dataclass
class GhostProgram:
    name: str = "anon"
    methods: dict[str, MethodDef] = field(default_factory=dict)
    entry: str = "main"
    declared_monitors: list[str] = field(default_factory=list)


# --- tokenizing -----------------------------------------------------------

def _tokenize(line: str, lineno: int) -> list[str]:
    tokens = []
    i, n = 0, len(line)
    while i < n:
        c = line[i]
        if c in " \t":
            i += 1
            continue
        if c == "#":
            break
        if c == '"':
            j = i + 1
            buf = []
            while j < n:
                ch = line[j]
                if ch == "\\":
                    if j + 1 >= n:
                        raise AsmSyntaxError(lineno, "dangling escape in string")
                    esc = line[j + 1]
                    mapped = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc)
                    if mapped is None:
                        raise AsmSyntaxError(lineno, f"bad escape \\{esc}")
                    buf.append(mapped)
                    j += 2
                elif ch == '"':
                    break
                else:
                    buf.append(ch)
                    j += 1
            else:
                raise AsmSyntaxError(lineno, "unterminated string literal")
            tokens.append('"' + "".join(buf))  # keep marker so literals stay typed
            i = j + 1
        else:
            j = i
            while j < n and line[j] not in ' \t#"':
                j += 1
            tokens.append(line[i:j])
            i = j
    return tokens


def _parse_literal(tok: str, lineno: int):
    if tok.startswith('"'):
        return tok[1:]
    if tok == "true":
        return True
    if tok == "false":
        return False
    if tok.startswith("mon:"):
        name = tok[4:]
        if not name:
            raise AsmSyntaxError(lineno, "empty monitor name")
        return MonitorRef(name)
    try:
        return wrap_i64(int(tok, 10))
    except ValueError:
        raise AsmSyntaxError(lineno, f"bad literal {tok!r}") from None


def _emit_literal(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        out = v.replace("\\", "\\\\").replace('"', '\\"')
        out = out.replace("\n", "\\n").replace("\t", "\\t")
        return f'"{out}"'
    if isinstance(v, MonitorRef):
        return f"mon:{v.id}"
    raise TypeError(f"literal not emittable: {v!r}")


# --- parsing --------------------------------------------------------------

def parse_with_tables(text: str):
    """Parse assembly, returning (program, dispatch_tables_or_None, source_digest_or_None).

    Dispatch tables are raw: {method: {"default": int, "sites": {ordinal: index}}}.
    """
    program = GhostProgram()
    tables: dict[str, dict] = {}
    source_digest = None
    saw_program_dir = False

    cur: MethodDef | None = None
    pending_labels: list[tuple[str, int]] = []
    labels: dict[str, int] = {}
    raw_branches: list[tuple[int, str, int]] = []  # (instr index, label token, lineno)
    raw_handlers: list[tuple[str, str, str, str, int]] = []
    cur_table: dict | None = None

    def finish_method(lineno):
        nonlocal cur, cur_table
        if pending_labels:
            # labels at the very end point past the body; reject
            raise AsmSyntaxError(lineno, f"label {pending_labels[0][0]!r} has no instruction")
        for idx, lbl, lno in raw_branches:
            if lbl not in labels:
                raise UnknownLabel(f"line {lno}: unknown label {lbl!r} in method {cur.name!r}")
            instr = cur.body[idx]
            cur.body[idx] = Instruction(instr.op, (labels[lbl],) + instr.args[1:])
        for start_tok, end_tok, target_tok, tag, lno in raw_handlers:
            def resolve(tok):
                if tok in labels:
                    return labels[tok]
                try:
                    return int(tok)
                except ValueError:
                    raise UnknownLabel(
                        f"line {lno}: unknown label {tok!r} in .handler"
                    ) from None
            cur.handlers.append(HandlerEntry(
                resolve(start_tok), resolve(end_tok), resolve(target_tok), tag
            ))
        raw_handlers.clear()
        if not cur.body:
            raise AsmSyntaxError(lineno, f"method {cur.name!r} has empty body")
        if cur.name in program.methods:
            raise DuplicateMethod(cur.name)
        program.methods[cur.name] = cur
        if cur_table is not None:
            tables[cur.name] = cur_table
        cur = None
        cur_table = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokenize(raw, lineno)
        if not toks:
            continue
        head = toks[0]

        if head == ".program":
            if len(toks) != 2:
                raise AsmSyntaxError(lineno, ".program takes one name")
            if saw_program_dir:
                raise AsmSyntaxError(lineno, "duplicate .program directive")
            program.name = toks[1]
            saw_program_dir = True
            continue
        if head == ".entry":
            if len(toks) != 2:
                raise AsmSyntaxError(lineno, ".entry takes one name")
            program.entry = toks[1]
            continue
        if head == ".monitor":
            if len(toks) != 2:
                raise AsmSyntaxError(lineno, ".monitor takes one name")
            if toks[1] not in program.declared_monitors:
                program.declared_monitors.append(toks[1])
            continue
        if head == ".source_digest":
            if len(toks) != 2:
                raise AsmSyntaxError(lineno, ".source_digest takes one value")
            source_digest = toks[1]
            continue
        if head == ".method":
            if cur is not None:
                raise AsmSyntaxError(lineno, "nested .method")
            if len(toks) != 4:
                raise AsmSyntaxError(lineno, ".method NAME NARGS NLOCALS")
            try:
                nargs, nlocals = int(toks[2]), int(toks[3])
            except ValueError:
                raise AsmSyntaxError(lineno, "bad .method counts") from None
            if nargs < 0 or nlocals < nargs:
                raise AsmSyntaxError(lineno, "need 0 <= nargs <= nlocals")
            cur = MethodDef(toks[1], nargs, nlocals)
            pending_labels.clear()
            labels.clear()
            raw_branches.clear()
            raw_handlers.clear()
            continue
        if head == ".end":
            if cur is None:
                raise AsmSyntaxError(lineno, ".end outside method")
            finish_method(lineno)
            continue

        if cur is None:
            raise AsmSyntaxError(lineno, f"unexpected {head!r} outside method")

        if head == ".handler":
            if len(toks) != 5:
                raise AsmSyntaxError(lineno, ".handler FROM TO TARGET TAG")
            # FROM/TO/TARGET may be instruction indices or labels; labels
            # resolve once the whole body is known
            raw_handlers.append((toks[1], toks[2], toks[3], toks[4], lineno))
            continue
        if head == ".dispatch":
            if len(toks) != 3:
                raise AsmSyntaxError(lineno, ".dispatch ORDINAL TARGET")
            if cur_table is None:
                cur_table = {"default": 1, "sites": {}}
            try:
                cur_table["sites"][int(toks[1])] = int(toks[2])
            except ValueError:
                raise AsmSyntaxError(lineno, "bad .dispatch operands") from None
            continue
        if head.endswith(":") and len(toks) == 1:
            name = head[:-1]
            if not name:
                raise AsmSyntaxError(lineno, "empty label")
            if name in labels or any(n == name for n, _ in pending_labels):
                raise AsmSyntaxError(lineno, f"duplicate label {name!r}")
            pending_labels.append((name, lineno))
            continue

        op = head
        spec = OP_SPECS.get(op)
        if spec is None:
            raise AsmSyntaxError(lineno, f"unknown opcode {op!r}")
        operands = toks[1:]
        if len(operands) != len(spec):
            raise AsmSyntaxError(lineno, f"{op} takes {len(spec)} operand(s)")
        args = []
        branch_label = None
        for kind, tok in zip(spec, operands):
            if kind == "lit":
                args.append(_parse_literal(tok, lineno))
            elif kind in ("idx", "int"):
                try:
                    n = int(tok, 10)
                except ValueError:
                    raise AsmSyntaxError(lineno, f"bad integer operand {tok!r}") from None
                if kind == "idx" and n < 0:
                    raise AsmSyntaxError(lineno, "negative local index")
                args.append(n)
            elif kind == "label":
                branch_label = tok
                args.append(-1)  # patched after the method closes
            elif kind == "name":
                if tok.startswith('"'):
                    tok = tok[1:]
                if not tok:
                    raise AsmSyntaxError(lineno, "empty name operand")
                args.append(tok)
        idx = len(cur.body)
        for name, _ in pending_labels:
            labels[name] = idx
        pending_labels.clear()
        if branch_label is not None:
            raw_branches.append((idx, branch_label, lineno))
        cur.body.append(Instruction(op, tuple(args)))

    if cur is not None:
        raise AsmSyntaxError(len(text.splitlines()) or 1, "missing .end")
    if not program.methods:
        raise AsmSyntaxError(1, "no methods defined")
    return program, (tables or None), source_digest


def parse_assembly(text: str) -> GhostProgram:
    """Parse source assembly. Instrumentation-only directives are rejected."""
    program, tables, source_digest = parse_with_tables(text)
    if tables is not None or source_digest is not None:
        raise AsmSyntaxError(1, "instrumentation directives in source assembly")
    return program


# --- emission -------------------------------------------------------------

def emit_with_tables(p: GhostProgram, tables=None, source_digest=None) -> str:
    lines = [f".program {p.name}", f".entry {p.entry}"]
    if source_digest is not None:
        lines.append(f".source_digest {source_digest}")
    for mon in sorted(set(p.declared_monitors)):
        lines.append(f".monitor {mon}")
    for name in sorted(p.methods):
        m = p.methods[name]
        lines.append(f".method {m.name} {m.nargs} {m.nlocals}")
        targets = sorted(
            {i.args[0] for i in m.body if i.op in BRANCH_OPS}
        )
        label_of = {t: f"L{k}" for k, t in enumerate(targets)}
        for idx, instr in enumerate(m.body):
            if idx in label_of:
                lines.append(f"{label_of[idx]}:")
            parts = [instr.op]
            for kind, arg in zip(OP_SPECS[instr.op], instr.args):
                if kind == "lit":
                    parts.append(_emit_literal(arg))
                elif kind == "label":
                    parts.append(label_of[arg])
                else:
                    parts.append(str(arg))
            lines.append("  " + " ".join(parts))
        for h in sorted(m.handlers, key=lambda h: (h.start, h.end, h.handler, h.tag)):
            lines.append(f".handler {h.start} {h.end} {h.handler} {h.tag}")
        if tables and name in tables:
            t = tables[name]
            for ordinal in sorted(t["sites"]):
                lines.append(f".dispatch {ordinal} {t['sites'][ordinal]}")
        lines.append(".end")
    return "\n".join(lines) + "\n"


def emit_assembly(p: GhostProgram) -> str:
    """Canonical source emission: methods in name order, labels normalized."""
    return emit_with_tables(p)


# --- verification ---------------------------------------------------------

@dataclass
class VerificationReport:
    """Per-method operand-stack depth maps plus non-fatal warnings."""

    depths: dict[str, list[int]]
    warnings: list[str] = field(default_factory=list)


def returns_value(m: MethodDef) -> bool:
    has_ret = any(i.op == "RET" for i in m.body)
    has_retv = any(i.op == "RETV" for i in m.body)
    if has_ret and has_retv:
        raise VerificationFailed(f"method {m.name!r} mixes RET and RETV", m.name)
    return has_retv


def stack_effect(instr: Instruction, p: GhostProgram, method: str) -> tuple[int, int]:
    """(pops, pushes) for one instruction in program context."""
    op = instr.op
    if op == "CONST" or op == "LOAD" or op == "GGET":
        return 0, 1
    if op in ("STORE", "GSET", "JZ", "RETV"):
        return 1, 0
    if op in ("ADD", "SUB", "MUL", "DIV", "CMP"):
        return 2, 1
    if op in ("CALL", "SPAWN"):
        target, nargs = instr.args
        callee = p.methods.get(target)
        if callee is None:
            raise VerificationFailed(f"{method}: call to unknown method {target!r}", method)
        if callee.nargs != nargs:
            raise VerificationFailed(
                f"{method}: {op} {target} expects {callee.nargs} args, got {nargs}", method
            )
        if op == "SPAWN":
            return nargs, 1
        return nargs, (1 if returns_value(callee) else 0)
    if op == "SYS":
        name, nargs = instr.args
        if name not in SYS_TABLE:
            raise VerificationFailed(f"{method}: unknown syscall {name!r}", method)
        want_args, results = SYS_TABLE[name]
        if nargs != want_args:
            raise VerificationFailed(
                f"{method}: SYS {name} takes {want_args} args, got {nargs}", method
            )
        return nargs, results
    # JMP, RET, THROW, LOCK/UNLOCK/WAIT/NOTIFY/NOTIFYALL/JOIN/SLEEP,
    # CHECK/SETAPC/DISPATCH
    return 0, 0


def _check_structure(p: GhostProgram, m: MethodDef):
    n = len(m.body)
    for idx, instr in enumerate(m.body):
        for kind, arg in zip(OP_SPECS[instr.op], instr.args):
            if kind == "idx" and arg >= m.nlocals:
                raise VerificationFailed(
                    f"{m.name}: local index {arg} out of range", m.name, idx
                )
            if kind == "label" and not (0 <= arg < n):
                raise UnknownLabel(f"{m.name}: branch target {arg} out of range")
    for h in m.handlers:
        if not (0 <= h.start < h.end <= n) or not (0 <= h.handler < n):
            raise VerificationFailed(
                f"{m.name}: handler range ({h.start},{h.end},{h.handler}) out of bounds",
                m.name,
            )
        if not h.tag:
            raise VerificationFailed(f"{m.name}: empty handler tag", m.name)


def verify(p: GhostProgram, mode: str, tables=None) -> VerificationReport:
    """Abstract-interpret stack depths and check structural invariants.

    SOURCE mode rejects instrumentation opcodes. INSTRUMENTED mode requires
    depth 0 at every CHECK and (when tables are supplied) at every dispatch
    target. Blocking instructions require depth 0 in both modes so a
    captured frame never carries operand-stack state.
    """
    if mode not in (SOURCE, INSTRUMENTED):
        raise ValueError(f"bad mode {mode!r}")
    entry = p.methods.get(p.entry)
    if entry is None:
        raise VerificationFailed(f"entry method {p.entry!r} missing")
    if entry.nargs != 0:
        raise VerificationFailed(f"entry method {p.entry!r} must take 0 args")

    depths: dict[str, list[int]] = {}
    warnings: list[str] = []

    for name, m in p.methods.items():
        _check_structure(p, m)
        returns_value(m)  # raises on mixed returns
        n = len(m.body)
        depth: list[int | None] = [None] * n
        seeded_handlers: set[int] = set()
        work: list[tuple[int, int]] = [(0, 0)]

        while work:
            idx, d = work.pop()
            instr = m.body[idx]
            if depth[idx] is not None:
                if depth[idx] != d:
                    raise InconsistentStackDepth(
                        f"{name}:{idx} merge depth {depth[idx]} vs {d}", name, idx
                    )
                continue
            depth[idx] = d
            op = instr.op

            if mode == SOURCE and op in INSTRUMENTATION_OPS:
                raise ForbiddenOpcodeInSource(f"{name}:{idx} {op} in source program", name, idx)
            if op == "DISPATCH" and idx != 0:
                raise VerificationFailed(f"{name}:{idx} DISPATCH not at method entry", name, idx)
            if op == "CHECK" and mode == INSTRUMENTED and d != 0:
                raise NonZeroDepthAtCheckpoint(f"{name}:{idx} depth {d} at CHECK", name, idx)
            if is_blocking(op, instr.args) and d != 0:
                raise NonZeroDepthAtCheckpoint(
                    f"{name}:{idx} depth {d} at blocking {op}", name, idx
                )

            pops, pushes = stack_effect(instr, p, name)
            if d < pops:
                raise StackUnderflow(f"{name}:{idx} {op} pops {pops} from depth {d}", name, idx)
            d_out = d - pops + pushes

            if op in ("RET", "RETV") and d_out > 0:
                warnings.append(f"NonEmptyStackAtReturn: {name}:{idx} depth {d_out}")

            # seed handlers covering this (reachable) instruction
            for h in m.handlers:
                if h.start <= idx < h.end and id(h) not in seeded_handlers:
                    seeded_handlers.add(id(h))
                    work.append((h.handler, 1))  # stack is [exception tag] at entry

            if op in ("RET", "RETV", "THROW"):
                continue
            if op == "JMP":
                work.append((instr.args[0], d_out))
                continue
            if op == "JZ":
                work.append((instr.args[0], d_out))
            if idx + 1 >= n:
                raise VerificationFailed(f"{name}:{idx} control falls off method end", name, idx)
            work.append((idx + 1, d_out))

        for idx, d in enumerate(depth):
            if d is None:
                raise UnreachableCode(f"{name}:{idx} unreachable instruction", name, idx)
        depths[name] = depth  # type: ignore[assignment]

    if mode == INSTRUMENTED and tables:
        for name, table in tables.items():
            m = p.methods.get(name)
            if m is None:
                raise VerificationFailed(f"dispatch table for unknown method {name!r}")
            for ordinal, target in table["sites"].items():
                if not (0 <= target < len(m.body)):
                    raise NonZeroDepthAtTarget(
                        f"{name}: dispatch target {target} out of range", name
                    )
                if depths[name][target] != 0:
                    raise NonZeroDepthAtTarget(
                        f"{name}: dispatch target {target} has depth {depths[name][target]}",
                        name,
                        target,
                    )
    return VerificationReport(depths, warnings)
