"""Instrumentation pipeline tests: checkpoint placement, resumption tables,
and load-time screening of termination-tag handlers."""

import pytest

from dget import instrument, ir
from dget.errors import AlreadyInstrumented, LoadRejected, VerificationFailed

import reference_interp
from conftest import CORPUS


def back_edge_targets(method: ir.MethodDef) -> set[int]:
    """Independent control-flow oracle: a back edge is any branch whose
    target index does not lie past the branch itself."""
    targets = set()
    for idx, instr in enumerate(method.body):
        if instr.op in ("JMP", "JZ") and instr.args[0] <= idx:
            targets.add(instr.args[0])
    return targets


def test_checkpoint_count_matches_cfg_oracle(corpus_program):
    expected = {
        name: 1 + len(back_edge_targets(m))
        for name, m in corpus_program.methods.items()
    }
    ip = instrument.instrument(corpus_program)
    actual = {
        name: sum(1 for i in m.body if i.op == "CHECK")
        for name, m in ip.program.methods.items()
    }
    assert actual == expected


def test_entry_checkpoint_sits_right_after_dispatch(corpus_program):
    ip = instrument.instrument(corpus_program)
    for m in ip.program.methods.values():
        assert m.body[0].op == "DISPATCH"
        ops = [i.op for i in m.body[:4]]
        assert "CHECK" in ops


def test_verifier_sees_depth_zero_at_every_checkpoint(corpus_program):
    ip = instrument.instrument(corpus_program)
    report = ir.verify(ip.program, ir.INSTRUMENTED, ip.tables)
    for name, m in ip.program.methods.items():
        for idx, instr in enumerate(m.body):
            if instr.op == "CHECK":
                assert report.depths[name][idx] == 0
        for target in ip.tables[name]["sites"].values():
            assert report.depths[name][target] == 0


def test_runtime_probe_sees_depth_zero_at_every_checkpoint(corpus_program):
    ip = instrument.instrument(corpus_program)
    res = reference_interp.run(ip.program, loopback=True)
    assert res.completed
    assert res.check_depths, "fixture never reached a checkpoint"
    assert all(d == 0 for _m, d in res.check_depths)


def test_instrumented_emit_parses_back_identically(corpus_program):
    ip = instrument.instrument(corpus_program)
    text = ip.emit()
    back = instrument.parse_instrumented(text)
    assert back.emit() == text
    assert back.source_digest == ip.source_digest
    assert back.tables == ip.tables


def test_instrumentation_preserves_source_behaviour(corpus_program):
    plain = reference_interp.run(corpus_program, loopback=True)
    ip = instrument.instrument(corpus_program)
    staged = reference_interp.run(ip.program, loopback=True)
    assert staged.completed and plain.completed
    assert staged.log == plain.log
    assert staged.globals == plain.globals
    assert staged.thread_results == plain.thread_results


def test_double_instrumentation_rejected(corpus_program):
    ip = instrument.instrument(corpus_program)
    with pytest.raises(AlreadyInstrumented):
        instrument.instrument(ip.program)


def test_dispatch_tables_have_expected_shape(corpus_program):
    ip = instrument.instrument(corpus_program)
    assert set(ip.tables) == set(ip.program.methods)
    for name, table in ip.tables.items():
        assert table["default"] == 1
        body = ip.program.methods[name].body
        ordinals = sorted(table["sites"])
        assert ordinals == list(range(len(ordinals)))
        for target in table["sites"].values():
            # every recorded resumption target lands on a SETAPC so the
            # replayed thread re-records its position before continuing
            assert body[target].op == "SETAPC"


def test_termination_tag_handler_rejected_at_load():
    text = """
.program t
.entry main
.method main 0 1
.handler 0 3 3 dget.terminated
  GGET mode
  JZ fin
  THROW io
  STORE 0
fin:
  RET
.end
"""
    with pytest.raises(LoadRejected):
        instrument.instrument(ir.parse_assembly(text))


def test_catch_all_handlers_load_and_are_marked():
    text = """
.program t
.entry main
.method main 0 1
.handler 0 3 catch *
  GGET mode
  JZ fin
  THROW io
catch:
  STORE 0
fin:
  RET
.end
"""
    ip = instrument.instrument(ir.parse_assembly(text))
    assert ("main", 0) in ip.catch_all_handlers


def test_parse_instrumented_rejects_plain_source():
    with pytest.raises(VerificationFailed):
        instrument.parse_instrumented("""
.program t
.entry main
.method main 0 0
  RET
.end
""")


def test_max_intercheck_distance_is_finite_over_corpus():
    for path in CORPUS:
        ip = instrument.instrument(ir.parse_assembly(path.read_text()))
        bound = instrument.max_intercheck_distance(ip)
        assert 0 < bound < 10_000


def test_max_intercheck_distance_grows_with_straightline_code():
    def program(n):
        body = "\n".join("  CONST 1\n  GSET g" for _ in range(n))
        return ir.parse_assembly(f"""
.program t
.entry main
.method main 0 0
{body}
  RET
.end
""")

    short = instrument.max_intercheck_distance(instrument.instrument(program(2)))
    long = instrument.max_intercheck_distance(instrument.instrument(program(30)))
    assert long > short
