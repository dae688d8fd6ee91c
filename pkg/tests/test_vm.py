"""Interpreter behaviour tests: differential runs against the reference
dispatcher, monitor discipline, faults, quotas, and message handling."""

import pytest

from dget import instrument, ir, vm
from dget.errors import RuntimeFault

import reference_interp
from conftest import pump, run_vm


def build(text: str) -> instrument.InstrumentedProgram:
    return instrument.instrument(ir.parse_assembly(text))


# --- corpus differential ----------------------------------------------------

def test_vm_matches_reference_on_corpus(corpus_program):
    ref = reference_interp.run(corpus_program, loopback=True)
    inst = run_vm(instrument.instrument(corpus_program))
    assert ref.completed and inst.all_done()
    assert inst.log == ref.log
    assert inst.globals == ref.globals
    for tid, value in ref.thread_results.items():
        got = inst.threads[tid].result
        if isinstance(value, reference_interp._ThreadRefLike):
            assert isinstance(got, ir.ThreadRef) and got.id == value.id
        else:
            assert got == value


def test_instrumented_reference_matches_vm_step_for_step(corpus_program):
    """Three-way check: the reference run of the *instrumented* program must
    agree with the live interpreter on observable outputs."""
    ip = instrument.instrument(corpus_program)
    ref = reference_interp.run(ip.program, loopback=True)
    inst = run_vm(ip)
    assert inst.log == ref.log
    assert inst.globals == ref.globals


# --- monitors ---------------------------------------------------------------

FIFO = """
.program fifo
.entry main
.monitor m
.method main 0 4
  CONST mon:m
  STORE 0
  LOCK 0
  CONST 1
  SPAWN worker 1
  STORE 1
  CONST 2
  SPAWN worker 1
  STORE 2
  CONST 3
  SPAWN worker 1
  STORE 3
  SLEEP 50
  UNLOCK 0
  JOIN 1
  JOIN 2
  JOIN 3
  RET
.end
.method worker 1 2
  CONST mon:m
  STORE 1
  LOCK 1
  LOAD 0
  SYS log 1
  UNLOCK 1
  RET
.end
"""


def test_contended_monitor_grants_in_arrival_order():
    inst = run_vm(build(FIFO))
    assert inst.log == ["1", "2", "3"]


REENTRANT_HANDOFF = """
.program reentrant
.entry main
.monitor m
.method main 0 2
  CONST mon:m
  STORE 0
  LOCK 0
  LOCK 0
  SPAWN worker 0
  STORE 1
  SLEEP 10
  UNLOCK 0
  CONST "still_held"
  SYS log 1
  SLEEP 10
  UNLOCK 0
  JOIN 1
  RET
.end
.method worker 0 1
  CONST mon:m
  STORE 0
  LOCK 0
  CONST "worker_in"
  SYS log 1
  UNLOCK 0
  RET
.end
"""


def test_reentrant_lock_releases_only_at_matching_unlock():
    inst = run_vm(build(REENTRANT_HANDOFF))
    assert inst.log == ["still_held", "worker_in"]


def test_monitor_misuse_raises_fault():
    text = """
.program bad
.entry main
.monitor m
.method main 0 1
  CONST mon:m
  STORE 0
  UNLOCK 0
  RET
.end
"""
    inst = vm.load(build(text))
    with pytest.raises(RuntimeFault) as exc:
        inst.run_to_completion()
    assert exc.value.tag == "monitor"


# --- arithmetic and faults --------------------------------------------------

def run_expr(lines: str) -> dict:
    text = f"""
.program expr
.entry main
.method main 0 1
{lines}
  RET
.end
"""
    return run_vm(build(text)).globals


@pytest.mark.parametrize("a, b, want", [
    (7, 2, 3), (-7, 2, -3), (7, -2, -3), (-7, -2, 3),
])
def test_division_truncates_toward_zero(a, b, want):
    out = run_expr(f"  CONST {a}\n  CONST {b}\n  DIV\n  GSET q")
    assert out["q"] == want


def test_arithmetic_wraps_to_signed_64_bit():
    big = (1 << 63) - 1
    out = run_expr(f"  CONST {big}\n  CONST 1\n  ADD\n  GSET w")
    assert out["w"] == -(1 << 63)


def test_division_by_zero_is_catchable():
    text = """
.program dz
.entry main
.method main 0 1
.handler 0 5 catch arith
  CONST 1
  CONST 0
  DIV
  GSET never
  JMP fin
catch:
  GSET seen
fin:
  RET
.end
"""
    inst = run_vm(build(text))
    assert inst.globals == {"seen": "arith"}


def test_boolean_in_arithmetic_faults():
    text = """
.program bt
.entry main
.method main 0 0
  CONST true
  CONST 1
  ADD
  GSET never
  RET
.end
"""
    inst = vm.load(build(text))
    with pytest.raises(RuntimeFault) as exc:
        inst.run_to_completion()
    assert exc.value.tag == "type"
    assert "never" not in inst.globals


def test_unhandled_throw_surfaces_as_fault():
    text = """
.program uh
.entry main
.method main 0 0
  GGET mode
  JZ boom
  RET
boom:
  THROW disk
.end
"""
    inst = vm.load(build(text))
    with pytest.raises(RuntimeFault) as exc:
        inst.run_to_completion()
    assert exc.value.tag == "disk"
    assert inst.fault is exc.value


# --- deadlock detection -----------------------------------------------------

def test_cyclic_lock_wait_reports_quiescent_not_progress():
    text = """
.program dl
.entry main
.monitor a
.monitor b
.method main 0 3
  CONST mon:a
  STORE 0
  CONST mon:b
  STORE 1
  SPAWN other 0
  STORE 2
  LOCK 0
  SLEEP 20
  LOCK 1
  UNLOCK 1
  UNLOCK 0
  JOIN 2
  RET
.end
.method other 0 2
  CONST mon:a
  STORE 0
  CONST mon:b
  STORE 1
  LOCK 1
  SLEEP 20
  LOCK 0
  UNLOCK 0
  UNLOCK 1
  RET
.end
"""
    inst = vm.load(build(text))
    for _ in range(100):
        outcome, _ran = inst.step(100)
        if outcome == vm.QUIESCENT:
            break
    assert outcome == vm.QUIESCENT
    assert not inst.all_done()


# --- quotas and termination -------------------------------------------------

SPIN = """
.program spin
.entry main
.method main 0 1
  CONST 100000
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
  GSET finished
  RET
.end
"""


def test_step_quota_soft_terminates():
    inst = vm.load(build(SPIN), limits={"steps": 500})
    outcome = inst.run_to_completion()
    assert outcome == vm.OUT_TERMINATED
    assert inst.flag == vm.TERMINATED
    assert inst.all_done()
    assert "finished" not in inst.globals


def test_thread_quota_stops_spawning():
    text = """
.program tq
.entry main
.method main 0 2
  CONST 0
  STORE 0
loop:
  SPAWN worker 0
  STORE 1
  JMP loop
.end
.method worker 0 0
  SLEEP 5
  RET
.end
"""
    inst = vm.load(build(text), limits={"threads": 4})
    inst.run_to_completion()
    assert inst.flag == vm.TERMINATED
    assert len([t for t in inst.threads.values()]) <= 4


def test_termination_signal_bypasses_catch_all():
    text = """
.program guard
.entry main
.method main 0 1
.handler 1 8 catch *
  CONST 0
  STORE 0
loop:
  LOAD 0
  CONST 1
  ADD
  STORE 0
  JMP loop
catch:
  GSET cleanup_saw
  RET
.end
"""
    inst = vm.load(build(text))
    inst.step(50)
    inst.request_terminate()
    inst.run_to_completion()
    assert inst.all_done()
    assert "cleanup_saw" not in inst.globals


def test_termination_observed_within_static_bound():
    ip = build(SPIN)
    bound = instrument.max_intercheck_distance(ip)
    inst = vm.load(ip)
    inst.step(37)
    inst.request_terminate()
    _outcome, ran = inst.step(10 * bound)
    assert inst.all_done()
    assert ran <= bound


# --- messaging --------------------------------------------------------------

def test_inbox_bound_drops_overflow():
    text = """
.program ib
.entry main
.method main 0 0
  SLEEP 1000
  RET
.end
"""
    inst = vm.load(build(text), inbox_bound=3)
    for n in range(5):
        inst.deliver_message(n)
    assert inst.inbox == [0, 1, 2]
    assert inst.dropped_messages == 2


def test_send_records_target_and_sequence():
    text = """
.program snd
.entry main
.method main 0 0
  CONST "peer"
  CONST 41
  SYS send 2
  CONST "peer"
  CONST 42
  SYS send 2
  RET
.end
"""
    inst = vm.load(build(text))
    inst.run_to_completion()
    out = inst.take_outbox()
    assert [(m["target"], m["payload"]) for m in out] == [("peer", 41), ("peer", 42)]
    assert [m["seq"] for m in out] == [1, 2]
    assert inst.take_outbox() == []


def test_receive_blocks_until_delivery():
    text = """
.program rcv
.entry main
.method main 0 0
  SYS recv 0
  GSET got
  RET
.end
"""
    inst = vm.load(build(text))
    inst.step(100)
    outcome, _ = inst.step(100)
    assert outcome == vm.QUIESCENT
    inst.deliver_message(99)
    inst.run_to_completion()
    assert inst.globals == {"got": 99}
