"""Second-phase priming-instruction classification.

Each candidate is swept against the simulator: the largest repetition count
that still lets the probe read reorder, plus the stall counters that rise
around that point, decide whether it is targeted, single-uop and
single-queue.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .simcore import IDLE, Engine, SiblingLoad, ThreadProgram, run_counter_sweep
from .uarch import (InstructionSpec, MachineConfig, instruction_table,
                    lookup_instruction, phase1_filter)

METHODS = ("bingo", "timer")


class NotACandidate(ValueError):
    pass


@dataclass(frozen=True)
class Classification:
    mnemonic: str
    observed_k: int | None
    affected_queues: tuple[str, ...]
    targeted: bool
    single_uop: bool
    single_queue: bool
    uops_per_target: int
    reference_capacity: int
    timer_k: int | None = None

    @property
    def verdicts(self) -> dict[str, bool]:
        return {"targeted": self.targeted, "single_uop": self.single_uop,
                "single_queue": self.single_queue}


def sweep_limit(config: MachineConfig) -> int:
    """Upper bound on k: enough to overflow every queue with one uop each."""
    return sum(q.capacity for q in config.queues) + config.fp_nsq_capacity + 1


def capacity_sweep(config: MachineConfig, mnemonic: str, method: str = "bingo",
                   sibling: SiblingLoad = IDLE, k_max: int | None = None) -> int | None:
    """Largest k for which the probe still reorders; None if it never stalls
    up to ``k_max`` (instructions that use no queue)."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    spec = lookup_instruction(config, mnemonic)
    engine = Engine(config)
    k_max = sweep_limit(config) if k_max is None else k_max
    for k in range(k_max + 1):
        prog = ThreadProgram.for_instruction(spec, k, probe=method)
        if not engine.outcome(prog, sibling).reordered:
            return k - 1
    return None


def reference_capacity(config: MachineConfig, spec: InstructionSpec) -> int:
    """Capacity a targeted instruction would be able to fill.

    For FP instructions this is one FP scheduler plus the non-scheduling
    queue in front of it.
    """
    if spec.is_fp:
        return config.fp_nsq_capacity + max(q.capacity for q in config.fp_queues)
    for p in spec.placements:
        if p.is_targeted:
            return config.queue(p.queues[0]).capacity
    return config.int_queues[0].capacity


def affected_queues(config: MachineConfig, mnemonic: str, k_hi: int) -> tuple[str, ...]:
    hit: set[str] = set()
    for _, stalls in run_counter_sweep(config, mnemonic, range(k_hi + 1)):
        hit.update(q for q, v in stalls.items() if v > 0)
    return tuple(q for q in config.queue_ids if q in hit)


def classify_candidate(config: MachineConfig, mnemonic: str) -> Classification:
    spec = lookup_instruction(config, mnemonic)
    if not phase1_filter([spec]):
        raise NotACandidate(f"{mnemonic} fails the delayable/non-serializing/"
                            f"unprivileged requirements")
    k = capacity_sweep(config, mnemonic, "bingo")
    timer_k = (capacity_sweep(config, mnemonic, "timer")
               if config.timer_read_cycles is not None else None)
    ref = reference_capacity(config, spec)
    if k is None:
        queues: tuple[str, ...] = ()
        per_target = 0
    else:
        queues = affected_queues(config, mnemonic, k + 1)
        per_target = ref // k if k > 0 else ref
    return Classification(
        mnemonic=mnemonic,
        observed_k=k,
        affected_queues=queues,
        targeted=k is not None and k <= ref and len(queues) == 1,
        single_uop=per_target < 2,
        single_queue=len(queues) <= 1,
        uops_per_target=per_target,
        reference_capacity=ref,
        timer_k=timer_k,
    )


def phase2_order(candidates: Iterable[InstructionSpec]) -> list[InstructionSpec]:
    # fewest uops first; ties keep table order
    return sorted(candidates, key=lambda s: s.total_uops)


def find_priming_instruction(config: MachineConfig, queue: str) -> Classification | None:
    """First candidate that is targeted, single-uop and single-queue on ``queue``."""
    for spec in phase2_order(phase1_filter(instruction_table(config))):
        if queue not in spec.queues:
            continue
        c = classify_candidate(config, spec.mnemonic)
        if c.targeted and c.single_uop and c.single_queue and c.affected_queues == (queue,):
            return c
    return None


# -- reports ----------------------------------------------------------------

REPORT_COLUMNS = ("mnemonic", "asm", "observed_k", "timer_k", "queues",
                  "targeted", "single_uop", "single_queue", "uops_per_target")


def table_report(config: MachineConfig, mnemonics: Sequence[str] | None = None) -> list[dict]:
    """One row per instruction; non-candidates get ``-`` and their counter
    footprint over a full sweep (``none`` if nothing ever stalls)."""
    specs = instruction_table(config)
    if mnemonics is not None:
        specs = [lookup_instruction(config, m) for m in mnemonics]
    rows = []
    for spec in specs:
        if phase1_filter([spec]):
            c = classify_candidate(config, spec.mnemonic)
            rows.append({
                "mnemonic": spec.mnemonic, "asm": spec.asm,
                "observed_k": "-" if c.observed_k is None else c.observed_k,
                "timer_k": "-" if c.timer_k is None else c.timer_k,
                "queues": "/".join(c.affected_queues) or "none",
                "targeted": c.targeted, "single_uop": c.single_uop,
                "single_queue": c.single_queue, "uops_per_target": c.uops_per_target,
            })
        else:
            queues = affected_queues(config, spec.mnemonic, sweep_limit(config))
            rows.append({
                "mnemonic": spec.mnemonic, "asm": spec.asm, "observed_k": "-",
                "timer_k": "-", "queues": "/".join(queues) or "none",
                "targeted": False, "single_uop": spec.flags.single_uop,
                "single_queue": len(queues) <= 1, "uops_per_target": 0,
            })
    return rows


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in REPORT_COLUMNS})
    return buf.getvalue()


def report_text(rows: Sequence[dict]) -> str:
    table = [list(REPORT_COLUMNS)] + [[_fmt(r[k]) for k in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in table) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    return str(v)
