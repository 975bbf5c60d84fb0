"""Behavioral dispatch model of the scheduler queues.

One measuring thread runs: first probe read, a long-latency delay chain,
``k`` priming instructions that depend on the chain, optional filler
instructions, second probe read. Uops are dispatched in order into the
configured queues; the second read executes out of order unless dispatch
stalls before it. A stall comes from one of three rules:

* overflow: a priming/filler uop finds every allowed queue full;
* spurious: an integer queue ends priming at an occupancy listed in the
  machine's ``spurious_budget`` and more queue-bypassing dispatch slots were
  used since priming began than the budget allows (Zen 3/4 only);
* memory ordering: the priming instruction has a flushed or
  address-dependent memory operand, which the bingo load must wait for.

Time is in abstract cycles. Delayed uops become ready when the chain
completes; a stalled read resumes one cycle later.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import IO, Iterable, Sequence

import numpy as np

from .rng import make_rng
from .uarch import (ConfigError, InstructionSpec, MachineConfig,
                    lookup_instruction)

PROBES = ("bingo", "timer", "counters", "none")

INT_DELAY_CHAIN = (("sqrtsd", 12),)
FP_DELAY_CHAIN = (("div", 18), ("cvtsi2sd", 1))


class UnknownQueue(KeyError):
    pass


@dataclass(frozen=True)
class ThreadProgram:
    priming: tuple[str, int] = ("imul", 0)
    delay_chain: tuple[tuple[str, int], ...] = INT_DELAY_CHAIN
    fillers: tuple[str, int] = ("pxor", 0)
    probe: str = "bingo"
    flush_operand: bool = False

    def __post_init__(self):
        if self.priming[1] < 0 or self.fillers[1] < 0:
            raise ValueError("repetition counts must be >= 0")
        if any(n < 0 for _, n in self.delay_chain):
            raise ValueError("delay chain length must be >= 0")
        if self.probe not in PROBES:
            raise ValueError(f"probe must be one of {PROBES}")

    @property
    def k(self) -> int:
        return self.priming[1]

    @classmethod
    def for_instruction(cls, spec: InstructionSpec, k: int, **kw) -> "ThreadProgram":
        """Program priming with ``spec``, using an integer-side delay chain
        for FP instructions so the chain does not touch the primed queues."""
        kw.setdefault("delay_chain", FP_DELAY_CHAIN if spec.is_fp else INT_DELAY_CHAIN)
        return cls(priming=(spec.mnemonic, k), **kw)


@dataclass(frozen=True)
class SiblingLoad:
    kind: str = "idle"
    program: ThreadProgram | None = None

    def __post_init__(self):
        if self.kind not in ("idle", "busy_loop", "program"):
            raise ValueError(f"bad sibling kind {self.kind!r}")
        if (self.kind == "program") != (self.program is not None):
            raise ValueError("a program sibling needs exactly one program")

    @property
    def busy(self) -> bool:
        return self.kind != "idle"

    @classmethod
    def running(cls, program: ThreadProgram) -> "SiblingLoad":
        return cls("program", program)


IDLE = SiblingLoad("idle")
BUSY_LOOP = SiblingLoad("busy_loop")


@dataclass
class ProbeResult:
    """Outcome of ``trials`` repetitions of one measurement.

    ``bingo_updates`` is the probe's delay signal averaged over trials: bingo
    updates for the bingo probe, excess cycles for the timer probe, total
    stalled cycles for the counters probe.
    """
    bingo_updates: float
    reordered: bool
    queue_stall_cycles: dict[str, float]
    trials: int
    reorder_rate: float = 1.0
    cause: str = "none"
    per_trial_reordered: np.ndarray | None = field(default=None, repr=False)
    per_trial_updates: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class TrialOutcome:
    reordered: bool
    cause: str
    signal: float
    noise_signal: float
    stall_cycles: tuple[tuple[str, float], ...]


def effective_capacity(config: MachineConfig, queue: str, sibling_busy: bool) -> int:
    try:
        cap = config.queue(queue).capacity
    except KeyError:
        raise UnknownQueue(queue) from None
    return cap - (config.watermark_reserve if sibling_busy else 0)


class _Queues:
    """Occupancy bookkeeping for one core's scheduler queues."""

    def __init__(self, config: MachineConfig, sibling_busy: bool):
        self.config = config
        self.limit = {q: effective_capacity(config, q, sibling_busy)
                      for q in config.queue_ids}
        self.occ = dict.fromkeys(config.queue_ids, 0)
        self.nsq_free = config.fp_nsq_capacity

    def place(self, choices: Sequence[str]) -> bool:
        best, best_free = None, 0
        for q in choices:
            free = self.limit[q] - self.occ[q]
            if free > best_free:
                best, best_free = q, free
        if best is not None:
            self.occ[best] += 1
            return True
        if all(q in self.config.fp_queue_ids for q in choices) and self.nsq_free > 0:
            self.nsq_free -= 1
            return True
        return False


def _chain_latency(config: MachineConfig, chain) -> int:
    return sum(lookup_instruction(config, m).latency_cycles * n for m, n in chain)


def _chain_residents(config: MachineConfig, chain):
    """Placements of chain instructions still waiting when priming starts
    (every instance but the first, which is executing)."""
    out = []
    first = True
    for mnem, n in chain:
        spec = lookup_instruction(config, mnem)
        for _ in range(n):
            if first:
                first = False
                continue
            for p in spec.placements:
                out.extend([p.queues] * p.uops)
    return out


def _sibling_resident(config: MachineConfig, program: ThreadProgram) -> dict[str, int]:
    # a looping sibling holds its primed uops resident in steady state
    qs = _Queues(config, sibling_busy=True)
    for choices in _chain_residents(config, program.delay_chain):
        qs.place(choices)
    spec = lookup_instruction(config, program.priming[0])
    for _ in range(program.k):
        for p in spec.placements:
            for _ in range(p.uops):
                qs.place(p.queues)
    return qs.occ


@lru_cache(maxsize=4096)
def _trial_outcome(config: MachineConfig, program: ThreadProgram,
                   sibling: SiblingLoad) -> TrialOutcome:
    if program.probe == "timer" and config.timer_read_cycles is None:
        raise ConfigError(f"{config.name} has no calibrated timer_read_cycles")
    spec = lookup_instruction(config, program.priming[0])
    filler = lookup_instruction(config, program.fillers[0])
    k, n_fill = program.k, program.fillers[1]
    t_ready = _chain_latency(config, program.delay_chain)

    qs = _Queues(config, sibling.busy)
    if sibling.program is not None:
        for q, n in _sibling_resident(config, sibling.program).items():
            qs.occ[q] += n
    slot = sum(lookup_instruction(config, m).total_uops * n for m, n in program.delay_chain)
    for choices in _chain_residents(config, program.delay_chain):
        qs.place(choices)
    if k > 0 and spec.placements:
        for _ in range(spec.scaffold_entries):
            qs.place(spec.placements[0].queues)

    stall = dict.fromkeys(config.queue_ids, 0.0)
    bypass = 0
    blocked: Sequence[str] = ()

    def run(instr: InstructionSpec, count: int) -> bool:
        nonlocal slot, bypass, blocked
        for _ in range(count):
            for p in instr.placements:
                for _ in range(p.uops):
                    if not qs.place(p.queues):
                        blocked = p.queues
                        return False
                    slot += 1
            bypass += instr.bypass_uops
            slot += instr.bypass_uops
        return True

    fits = run(spec, k) and run(filler, n_fill)
    t_now = slot // config.dispatch_width
    wait = max(t_ready + 1 - t_now, 1)
    cause = "none"
    if not fits:
        cause = "overflow"
        for q in blocked:
            stall[q] += wait
    else:
        consumed = bypass + (config.timer_read_cycles if program.probe == "timer" else 0)
        for q in config.int_queue_ids:
            budget = config.spurious_window(qs.occ[q])
            if budget is None:
                continue
            # the back-end stalls about a cycle later either way; the read is
            # only hit if the window is used up before it dispatches
            stall[q] += wait
            if consumed > budget:
                cause = "spurious"

    mem_wait = None
    if k > 0 and program.probe == "bingo":
        if spec.mem_operand == "uncached" or (
                program.flush_operand and spec.mem_operand == "cached"):
            if config.mem_miss_updates is None:
                raise ConfigError(f"{config.name} has no calibrated mem_miss_updates")
            mem_wait = config.mem_miss_updates
        elif spec.mem_operand == "address_dependent":
            mem_wait = (t_ready + config.l1_latency) * config.bingo_update_rate

    total_stall = float(sum(stall.values()))
    if program.probe == "bingo":
        stalled_signal = wait * config.bingo_update_rate
    elif program.probe == "timer":
        stalled_signal = float(wait)
    else:
        stalled_signal = total_stall
    if mem_wait is not None:
        stalled_signal = max(stalled_signal, mem_wait)
        if cause == "none":
            cause = "memory-order"
            stalled_signal = mem_wait

    if program.probe == "counters":
        reordered = total_stall == 0
    elif program.probe == "none":
        reordered, stalled_signal = True, 0.0
    else:
        reordered = cause == "none"
    return TrialOutcome(reordered, cause, 0.0 if reordered else stalled_signal,
                        stalled_signal, tuple(stall.items()))


class Engine:
    """Probe runner bound to one machine config and a noise setting.

    ``spurious_stall_prob`` injects, per trial, an extra back-end stall that
    prevents reordering (default 0: noiseless).
    """

    def __init__(self, config: MachineConfig, spurious_stall_prob: float = 0.0):
        if not 0.0 <= spurious_stall_prob <= 1.0:
            raise ValueError("spurious_stall_prob must be in [0, 1]")
        self.config = config
        self.spurious_stall_prob = spurious_stall_prob

    def outcome(self, program: ThreadProgram, sibling: SiblingLoad = IDLE) -> TrialOutcome:
        return _trial_outcome(self.config, program, sibling)

    def run_probe(self, program: ThreadProgram, sibling: SiblingLoad = IDLE,
                  trials: int = 1, seed: int = 0, record: bool = False) -> ProbeResult:
        if trials < 1:
            raise ValueError("trials must be >= 1")
        out = self.outcome(program, sibling)
        reordered = np.full(trials, out.reordered)
        updates = np.full(trials, out.signal, dtype=float)
        if self.spurious_stall_prob > 0 and program.probe in ("bingo", "timer"):
            hit = make_rng(seed, "spurious").random(trials) < self.spurious_stall_prob
            hit &= reordered
            reordered &= ~hit
            updates[hit] = out.noise_signal
        rate = float(reordered.mean())
        return ProbeResult(
            bingo_updates=float(updates.mean()),
            reordered=rate >= 0.5,
            queue_stall_cycles=dict(out.stall_cycles),
            trials=trials,
            reorder_rate=rate,
            cause=out.cause if rate < 1.0 or not out.reordered else "none",
            per_trial_reordered=reordered if record else None,
            per_trial_updates=updates if record else None,
        )


def run_probe(config: MachineConfig, program: ThreadProgram, sibling: SiblingLoad = IDLE,
              trials: int = 1, seed: int = 0, spurious_stall_prob: float = 0.0,
              record: bool = False) -> ProbeResult:
    return Engine(config, spurious_stall_prob).run_probe(program, sibling, trials, seed, record)


def run_counter_sweep(config: MachineConfig, mnemonic: str, k_range: Iterable[int],
                      sibling: SiblingLoad = IDLE) -> list[tuple[int, dict[str, float]]]:
    spec = lookup_instruction(config, mnemonic)
    engine = Engine(config)
    rows = []
    for k in k_range:
        prog = ThreadProgram.for_instruction(spec, k, probe="counters")
        rows.append((k, dict(engine.outcome(prog, sibling).stall_cycles)))
    return rows


TRACE_COLUMNS = ("trial", "k", "fillers", "reordered", "bingo_updates")


def trace_header(config: MachineConfig) -> list[str]:
    return list(TRACE_COLUMNS) + [f"stall_{q}" for q in config.queue_ids]


def write_trace_csv(fh: IO[str], config: MachineConfig, program: ThreadProgram,
                    result: ProbeResult, header: bool = True) -> None:
    """Per-trial dump; ``result`` must come from ``run_probe(..., record=True)``."""
    if result.per_trial_reordered is None:
        raise ValueError("result has no per-trial record")
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(trace_header(config))
    stalls = [f"{result.queue_stall_cycles[q]:g}" for q in config.queue_ids]
    for i, (r, u) in enumerate(zip(result.per_trial_reordered, result.per_trial_updates)):
        w.writerow([i, program.k, program.fillers[1], int(bool(r)), f"{u:.3f}", *stalls])
