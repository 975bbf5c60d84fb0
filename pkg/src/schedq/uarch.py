"""Machine configurations and the instruction table for Zen 2/3/4 back-ends.

Both are shipped as YAML under ``schedq/data``; see the header of
``instructions.yaml`` for the table schema.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import yaml


class ConfigError(ValueError):
    pass


class UnknownInstruction(KeyError):
    pass


class Machine(str, enum.Enum):
    ZEN2 = "Zen2"
    ZEN3 = "Zen3"
    ZEN4 = "Zen4"

    @classmethod
    def parse(cls, name: "str | Machine") -> "Machine":
        if isinstance(name, Machine):
            return name
        for m in cls:
            if m.value.lower() == str(name).lower():
                return m
        raise ConfigError(f"unknown machine {name!r}; expected one of "
                          f"{[m.value for m in cls]}")


MEM_OPERANDS = ("none", "cached", "uncached", "address_dependent")


@dataclass(frozen=True)
class QueueSpec:
    id: str
    capacity: int
    attached_units: tuple[str, ...]
    authoritative: bool = True

    def to_dict(self) -> dict:
        d = {"id": self.id, "capacity": self.capacity,
             "attached_units": list(self.attached_units)}
        if not self.authoritative:
            d["authoritative"] = False
        return d


@dataclass(frozen=True)
class MachineConfig:
    name: str
    int_queues: tuple[QueueSpec, ...]
    fp_queues: tuple[QueueSpec, ...]
    fp_nsq_capacity: int
    watermark_reserve: int
    fpu_dispatch_width: int
    spurious_budget: tuple[tuple[int, int], ...]
    timer_read_cycles: int | None
    mem_miss_updates: float | None
    multi_queue_offset: int
    dispatch_width: int = 6
    bingo_update_rate: float = 1.0
    l1_latency: int = 4

    @property
    def queues(self) -> tuple[QueueSpec, ...]:
        return self.int_queues + self.fp_queues

    @property
    def queue_ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.queues)

    @property
    def int_queue_ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.int_queues)

    @property
    def fp_queue_ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.fp_queues)

    def queue(self, qid: str) -> QueueSpec:
        for q in self.queues:
            if q.id == qid:
                return q
        raise KeyError(f"{self.name} has no queue {qid!r}")

    def is_int_queue(self, qid: str) -> bool:
        return qid in self.int_queue_ids

    def spurious_window(self, occupancy: int) -> int | None:
        """Bypass-slot budget at ``occupancy``, or None outside the window."""
        return dict(self.spurious_budget).get(occupancy)

    def validate(self) -> "MachineConfig":
        if len(self.int_queues) != 4:
            raise ConfigError(f"{self.name}: expected 4 integer queues")
        ids = self.queue_ids
        if len(set(ids)) != len(ids):
            raise ConfigError(f"{self.name}: duplicate queue ids {ids}")
        for q in self.queues:
            if q.capacity <= 0:
                raise ConfigError(f"{self.name}/{q.id}: capacity must be > 0")
            if not q.attached_units:
                raise ConfigError(f"{self.name}/{q.id}: no attached units")
        min_cap = min(q.capacity for q in self.int_queues)
        if not 0 <= self.watermark_reserve < min_cap:
            raise ConfigError(f"{self.name}: watermark_reserve out of range")
        int_cap = self.int_queues[0].capacity
        for occ, budget in self.spurious_budget:
            if not int_cap - 1 <= occ <= int_cap or budget < 0:
                raise ConfigError(
                    f"{self.name}: spurious_budget entry {occ}->{budget} invalid")
        return self

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("int_queues", "fp_queues"):
                v = [q.to_dict() for q in v]
            elif f.name == "spurious_budget":
                v = {int(k): int(b) for k, b in v}
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MachineConfig":
        d = dict(d)
        try:
            for key in ("int_queues", "fp_queues"):
                d[key] = tuple(
                    QueueSpec(id=q["id"], capacity=int(q["capacity"]),
                              attached_units=tuple(q["attached_units"]),
                              authoritative=bool(q.get("authoritative", True)))
                    for q in d[key])
            d["spurious_budget"] = tuple(sorted(
                (int(k), int(v)) for k, v in (d.get("spurious_budget") or {}).items()))
            return cls(**d).validate()
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed machine config: {exc}") from exc


def _data_text(name: str) -> str:
    return resources.files("schedq.data").joinpath(name).read_text("utf-8")


@lru_cache(maxsize=None)
def _load_builtin(machine: Machine) -> MachineConfig:
    raw = yaml.safe_load(_data_text(f"{machine.value.lower()}.yaml"))
    return MachineConfig.from_dict(raw)


def load_machine_config(name: "str | Machine") -> MachineConfig:
    """Return the shipped, validated configuration for ``name``."""
    return _load_builtin(Machine.parse(name))


def load_machine_config_file(path: str | Path) -> MachineConfig:
    with open(path, encoding="utf-8") as fh:
        return MachineConfig.from_dict(yaml.safe_load(fh))


def dump_machine_config(config: MachineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


# -- instruction table -------------------------------------------------------

@dataclass(frozen=True)
class Flags:
    delayable: bool
    targeted: bool
    single_queue: bool
    single_uop: bool
    non_serializing: bool
    unprivileged: bool


@dataclass(frozen=True)
class Placement:
    queues: tuple[str, ...]
    uops: int

    @property
    def is_targeted(self) -> bool:
        return len(self.queues) == 1


@dataclass(frozen=True)
class InstructionSpec:
    mnemonic: str
    asm: str
    total_uops: int
    placements: tuple[Placement, ...]
    latency_cycles: int
    flags: Flags
    mem_operand: str = "none"
    serializing_side_effect: bool = False
    scaffold_entries: int = 0
    documented: str = ""

    @property
    def queued_uops(self) -> int:
        return sum(p.uops for p in self.placements)

    @property
    def bypass_uops(self) -> int:
        """Uops that are dispatched but never enter a scheduler queue."""
        return self.total_uops - self.queued_uops

    @property
    def queues(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for p in self.placements:
            seen.update(dict.fromkeys(p.queues))
        return tuple(seen)

    @property
    def is_fp(self) -> bool:
        return bool(self.placements) and all(
            q.startswith("FP") for q in self.placements[0].queues)


def _resolve_queues(names: Iterable[str], config: MachineConfig) -> tuple[str, ...]:
    out: list[str] = []
    for n in names:
        if n == "@int":
            out.extend(config.int_queue_ids)
        elif n == "@fp":
            out.extend(config.fp_queue_ids)
        else:
            config.queue(n)
            out.append(n)
    return tuple(out)


def _build_spec(raw: Mapping, config: MachineConfig) -> InstructionSpec:
    placements = tuple(
        Placement(_resolve_queues(p["queues"], config), int(p["uops"]))
        for p in raw.get("placements", []))
    scaffold = raw.get("scaffold", {}).get(config.name)
    if scaffold is None:
        spans_int = any(set(p.queues) == set(config.int_queue_ids)
                        for p in placements)
        scaffold = config.multi_queue_offset if spans_int else 0
    spec = InstructionSpec(
        mnemonic=raw["mnemonic"],
        asm=raw.get("asm", raw["mnemonic"]),
        total_uops=int(raw["total_uops"]),
        placements=placements,
        latency_cycles=int(raw["latency"]),
        flags=Flags(**raw["flags"]),
        mem_operand=raw.get("mem_operand", "none"),
        serializing_side_effect=bool(raw.get("serializing_side_effect", False)),
        scaffold_entries=int(scaffold),
        documented=raw.get("documented", ""),
    )
    _check_spec(spec, config)
    return spec


def _check_spec(spec: InstructionSpec, config: MachineConfig) -> None:
    where = f"{config.name}/{spec.mnemonic}"
    if spec.queued_uops > spec.total_uops:
        raise ConfigError(f"{where}: placements exceed total_uops")
    if spec.mem_operand not in MEM_OPERANDS:
        raise ConfigError(f"{where}: bad mem_operand {spec.mem_operand!r}")
    if spec.flags.targeted:
        # the Zen 2 FP placeholder is non-authoritative and does not count
        singletons = [p for p in spec.placements if p.is_targeted
                      and config.queue(p.queues[0]).authoritative]
        if len(singletons) != 1:
            raise ConfigError(f"{where}: targeted needs exactly one singleton placement")
        if spec.flags.single_uop and singletons[0].uops > 1:
            raise ConfigError(f"{where}: single_uop but {singletons[0].uops} targeted uops")


@lru_cache(maxsize=None)
def _raw_table() -> tuple:
    return tuple(yaml.safe_load(_data_text("instructions.yaml")))


def instruction_table(config: MachineConfig) -> list[InstructionSpec]:
    """All instructions available on ``config``, in file order."""
    return list(_table_for_config(config).values())


@lru_cache(maxsize=64)
def _table_for_config(config: MachineConfig) -> dict[str, InstructionSpec]:
    table: dict[str, InstructionSpec] = {}
    for raw in _raw_table():
        if config.name not in raw["archs"]:
            continue
        if raw["mnemonic"] in table:
            raise ConfigError(f"duplicate entry for {raw['mnemonic']} on {config.name}")
        table[raw["mnemonic"]] = _build_spec(raw, config)
    return table


def lookup_instruction(config: MachineConfig, mnemonic: str) -> InstructionSpec:
    table = _table_for_config(config)
    try:
        return table[mnemonic]
    except KeyError:
        raise UnknownInstruction(
            f"{mnemonic!r} is not in the {config.name} instruction table") from None


def phase1_filter(table: Iterable[InstructionSpec]) -> list[InstructionSpec]:
    """Keep delayable, non-serializing, unprivileged instructions (order kept)."""
    return [i for i in table
            if i.flags.delayable and i.flags.non_serializing
            and i.flags.unprivileged and not i.serializing_side_effect]
