import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schedq.simcore import (BUSY_LOOP, IDLE, Engine, SiblingLoad, ThreadProgram, UnknownQueue,
                            effective_capacity, run_counter_sweep, run_probe, trace_header,
                            write_trace_csv)
from schedq.uarch import (ConfigError, UnknownInstruction, load_machine_config,
                          lookup_instruction, phase1_filter, instruction_table)

MACHINES = ["Zen2", "Zen3", "Zen4"]
machines = st.sampled_from(MACHINES).map(load_machine_config)


def prog(cfg, mnemonic, k, **kw):
    return ThreadProgram.for_instruction(lookup_instruction(cfg, mnemonic), k, **kw)


def test_zen3_capacity_24(zen3):
    assert run_probe(zen3, prog(zen3, "imul", 24)).reordered
    assert not run_probe(zen3, prog(zen3, "imul", 25)).reordered


def test_k_zero_is_trivially_reordered(zen3):
    r = run_probe(zen3, prog(zen3, "imul", 0))
    assert r.reordered and r.bingo_updates == 0


def test_flushed_operand(zen3):
    r = run_probe(zen3, ThreadProgram(priming=("imul-mem", 1), flush_operand=True))
    assert not r.reordered
    assert r.bingo_updates == zen3.mem_miss_updates
    assert r.cause == "memory-order"


def test_address_dependent_operand_blocks(zen3):
    r = run_probe(zen3, ThreadProgram(priming=("imul-memdep", 1)))
    assert not r.reordered and r.bingo_updates > 0


@pytest.mark.parametrize("name,busy,want", [
    ("Zen3", True, 20), ("Zen2", True, 16), ("Zen3", False, 24), ("Zen4", True, 20)])
def test_effective_capacity(name, busy, want):
    assert effective_capacity(load_machine_config(name), "Int1", busy) == want


def test_effective_capacity_unknown_queue(zen3):
    with pytest.raises(UnknownQueue):
        effective_capacity(zen3, "Int7", False)


def test_unknown_mnemonic(zen3):
    with pytest.raises(UnknownInstruction):
        run_probe(zen3, ThreadProgram(priming=("nope", 1)))


def test_timer_needs_calibration(zen4):
    with pytest.raises(ConfigError):
        run_probe(zen4, prog(zen4, "imul", 3, probe="timer"))


def test_invalid_program():
    with pytest.raises(ValueError):
        ThreadProgram(priming=("imul", -1))
    with pytest.raises(ValueError):
        ThreadProgram(probe="laser")
    with pytest.raises(ValueError):
        SiblingLoad("program")


def test_counter_sweep_imul(zen3):
    rows = dict(run_counter_sweep(zen3, "imul", [10, 22, 23]))
    assert all(v == 0 for v in rows[10].values())
    assert all(v == 0 for v in rows[22].values())
    assert rows[23]["Int1"] > 0
    assert all(v == 0 for q, v in rows[23].items() if q != "Int1")


def test_counter_sweep_rol_hits_both_queues(zen3):
    # least-occupied placement splits rol evenly, so both queues fill together
    rows = dict(run_counter_sweep(zen3, "rol", [30, 47]))
    assert all(v == 0 for v in rows[30].values())
    assert rows[47]["Int1"] > 0 and rows[47]["Int2"] > 0


def test_zeroing_idioms_never_stall(zen3):
    for mnemonic in ("xor-zero", "mov-reg"):
        for _, stalls in run_counter_sweep(zen3, mnemonic, range(0, 200, 7)):
            assert all(v == 0 for v in stalls.values())


@pytest.mark.parametrize("k,fillers", [(k, f) for k in (22, 23, 24) for f in range(31)])
def test_spurious_stall_truth_table(zen3, k, fillers):
    want = k == 22 or (k == 23 and fillers <= 4) or (k == 24 and fillers <= 3)
    assert run_probe(zen3, prog(zen3, "imul", k, fillers=("pxor", fillers))).reordered == want


def test_zen2_has_no_spurious_window(zen2):
    for f in range(31):
        assert run_probe(zen2, prog(zen2, "imul", 16, fillers=("pxor", f))).reordered


def test_noise_injection_is_seeded(zen3):
    e = Engine(zen3, spurious_stall_prob=0.2)
    p = prog(zen3, "imul", 10)
    a = e.run_probe(p, trials=5000, seed=3, record=True)
    b = e.run_probe(p, trials=5000, seed=3, record=True)
    assert np.array_equal(a.per_trial_reordered, b.per_trial_reordered)
    assert a.reorder_rate == pytest.approx(0.8, abs=0.03)
    assert (a.per_trial_updates[~a.per_trial_reordered] > 0).all()


def test_trace_csv(zen3):
    p = prog(zen3, "imul", 25)
    r = run_probe(zen3, p, trials=3, record=True)
    buf = io.StringIO()
    write_trace_csv(buf, zen3, p, r)
    lines = buf.getvalue().split("\n")
    assert lines[0].split(",") == trace_header(zen3)
    assert lines[0].startswith("trial,k,fillers,reordered,bingo_updates,stall_Int0")
    assert len(lines) == 5 and lines[-1] == ""
    with pytest.raises(ValueError):
        write_trace_csv(buf, zen3, p, run_probe(zen3, p))


# -- properties ---------------------------------------------------------------

CANDIDATES = ["imul", "div", "stosb", "lodsb", "rol", "add", "vaddsd", "cvtsi2sd", "imul-mem"]
pairs = machines.flatmap(lambda cfg: st.tuples(st.just(cfg), st.sampled_from(
    [m for m in CANDIDATES if m in {s.mnemonic for s in instruction_table(cfg)}])))
siblings = st.sampled_from(["idle", "busy"])


@settings(max_examples=60, deadline=None)
@given(pair=pairs, sib=siblings, fillers=st.integers(0, 10))
def test_reordered_is_monotone_in_k(pair, sib, fillers):
    cfg, mnemonic = pair
    sibling = IDLE if sib == "idle" else BUSY_LOOP
    spec = lookup_instruction(cfg, mnemonic)
    seen_stall = False
    for k in range(0, 140, 3):
        r = run_probe(cfg, ThreadProgram.for_instruction(spec, k, fillers=("pxor", fillers)),
                      sibling)
        if seen_stall:
            assert not r.reordered, k
        seen_stall |= not r.reordered


@settings(max_examples=50, deadline=None)
@given(cfg=machines, data=st.data())
def test_watermark_arithmetic(cfg, data):
    q = data.draw(st.sampled_from(cfg.queue_ids))
    assert effective_capacity(cfg, q, True) == \
        effective_capacity(cfg, q, False) - cfg.watermark_reserve


@settings(max_examples=50, deadline=None)
@given(pair=pairs, k=st.integers(0, 130), seed=st.integers(0, 2**32),
       p=st.floats(0, 1))
def test_determinism(pair, k, seed, p):
    cfg, mnemonic = pair
    program = prog(cfg, mnemonic, k)
    a = Engine(cfg, p).run_probe(program, trials=50, seed=seed, record=True)
    b = Engine(cfg, p).run_probe(program, trials=50, seed=seed, record=True)
    assert a.bingo_updates == b.bingo_updates and a.reordered == b.reordered
    assert np.array_equal(a.per_trial_updates, b.per_trial_updates)


@settings(max_examples=80, deadline=None)
@given(pair=pairs, k=st.integers(0, 130), sib=siblings)
def test_noiseless_reorder_iff_zero_updates(pair, k, sib):
    cfg, mnemonic = pair
    r = run_probe(cfg, prog(cfg, mnemonic, k), IDLE if sib == "idle" else BUSY_LOOP)
    assert r.reordered == (r.bingo_updates == 0)
    assert all(v >= 0 for v in r.queue_stall_cycles.values())


@settings(max_examples=80, deadline=None)
@given(pair=pairs, k=st.integers(0, 130), sib=siblings)
def test_overflow_shows_in_counters(pair, k, sib):
    cfg, mnemonic = pair
    sibling = IDLE if sib == "idle" else BUSY_LOOP
    spec = lookup_instruction(cfg, mnemonic)
    r = run_probe(cfg, ThreadProgram.for_instruction(spec, k), sibling)
    if r.cause == "overflow":
        (_, stalls), = run_counter_sweep(cfg, mnemonic, [k], sibling)
        assert any(stalls[q] > 0 for q in spec.queues)


@settings(max_examples=40, deadline=None)
@given(cfg=st.sampled_from(["Zen2", "Zen3"]).map(load_machine_config), k=st.integers(1, 40))
def test_memory_ordering_rules(cfg, k):
    flushed = run_probe(cfg, ThreadProgram(priming=("imul-mem", k), flush_operand=True))
    assert not flushed.reordered and flushed.bingo_updates >= cfg.mem_miss_updates
    cached = run_probe(cfg, ThreadProgram(priming=("imul-mem", k)))
    reg = run_probe(cfg, ThreadProgram(priming=("imul", k)))
    assert (cached.reordered, cached.bingo_updates) == (reg.reordered, reg.bingo_updates)


@settings(max_examples=30, deadline=None)
@given(cfg=st.sampled_from(["Zen3", "Zen4"]).map(load_machine_config), k=st.integers(0, 30))
def test_sibling_program_adds_occupancy(cfg, k):
    imul = lookup_instruction(cfg, "imul")
    other = ThreadProgram.for_instruction(imul, 20)
    with_prog = run_probe(cfg, ThreadProgram.for_instruction(imul, k), SiblingLoad.running(other))
    busy = run_probe(cfg, ThreadProgram.for_instruction(imul, k), BUSY_LOOP)
    # a sibling program never leaves more room than an empty busy loop
    assert with_prog.reordered <= busy.reordered


def test_every_candidate_runs(zen3):
    for spec in phase1_filter(instruction_table(zen3)):
        run_probe(zen3, ThreadProgram.for_instruction(spec, 5))
