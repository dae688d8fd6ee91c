"""Shared fixtures: the program corpus, execution harnesses, and the
acceptance reporter that prints one line per acceptance criterion at the
end of the run."""

from __future__ import annotations

import pathlib
import random
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from dget import instrument, ir, snapshot, vm  # noqa: E402

CORPUS_DIR = pathlib.Path(__file__).parent / "corpus"
CORPUS = sorted(CORPUS_DIR.glob("*.ghost"))

assert len(CORPUS) >= 20, "fixture corpus shrank below the required size"


def corpus_ids():
    return [p.stem for p in CORPUS]


@pytest.fixture(params=CORPUS, ids=corpus_ids())
def corpus_program(request):
    text = request.param.read_text()
    return ir.parse_assembly(text)


@pytest.fixture(params=CORPUS, ids=corpus_ids())
def corpus_path(request):
    return request.param


def compile_fixture(path: pathlib.Path):
    program = ir.parse_assembly(path.read_text())
    return program, instrument.instrument(ir.parse_assembly(path.read_text()))


def pump(inst: vm.VmInstance):
    """Loop every outgoing message straight back into the instance."""
    for msg in inst.take_outbox():
        inst.deliver_message(msg["payload"])


def run_vm(ip, limits=None, max_steps=2_000_000) -> vm.VmInstance:
    """Run an instrumented program to completion with message loopback."""
    inst = vm.load(ip, limits=limits or {})
    total = 0
    while total < max_steps:
        outcome, ran = inst.step(100)
        total += ran
        pump(inst)
        if inst.all_done():
            return inst
        if outcome == vm.QUIESCENT and not inst.inbox:
            raise AssertionError("fixture deadlocked")
    raise AssertionError("fixture exceeded step budget")


def suspend_to_quiescence(inst: vm.VmInstance, max_steps=500_000):
    inst.request_suspend()
    total = 0
    while not (inst.quiescent() or inst.all_done()):
        outcome, ran = inst.step(200)
        pump(inst)
        total += ran
        if outcome == vm.QUIESCENT and not (inst.quiescent() or inst.all_done()):
            raise AssertionError("suspension stalled without quiescence")
        if total > max_steps:
            raise AssertionError("suspension exceeded step budget")


def run_with_interrupts(ip, rng: random.Random, limits=None,
                        max_interrupts=3) -> vm.VmInstance:
    """Run to completion, injecting random suspend/capture/encode/decode/
    restore cycles along the way."""
    inst = vm.load(ip, limits=limits or {})
    interrupts = 0
    total = 0
    while total < 2_000_000:
        outcome, ran = inst.step(rng.randint(1, 150))
        total += ran
        pump(inst)
        if inst.all_done():
            return inst
        if outcome == vm.QUIESCENT and not inst.inbox:
            raise AssertionError("fixture deadlocked")
        if interrupts < max_interrupts and rng.random() < 0.4:
            suspend_to_quiescence(inst)
            if inst.all_done():
                inst.resume()
                return inst
            blob = snapshot.encode(snapshot.capture(inst))
            inst = snapshot.restore(snapshot.decode(blob))
            pump(inst)
            interrupts += 1
    raise AssertionError("fixture exceeded step budget")


def observable_state(inst: vm.VmInstance) -> tuple:
    """What migration must preserve: outputs, globals, termination status."""
    return (
        tuple(inst.log),
        tuple(sorted((k, v) for k, v in inst.globals.items())),
        inst.all_done(),
        inst.flag,
    )


# --- acceptance reporting --------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def __enter__(self):
        _ACCEPTANCE[self.number] = (self.title, "FAIL")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            _ACCEPTANCE[self.number] = (self.title, "PASS")
        return False


class AcceptanceReporter:
    def criterion(self, number: int, title: str) -> _Criterion:
        return _Criterion(number, title)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceReporter()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{verdict} criterion {number}: {title}")
