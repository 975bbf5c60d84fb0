import dataclasses

import pytest
import yaml

from schedq.uarch import (ConfigError, Machine, MachineConfig, UnknownInstruction,
                          dump_machine_config, instruction_table, load_machine_config,
                          load_machine_config_file, lookup_instruction, phase1_filter)

MACHINES = ["Zen2", "Zen3", "Zen4"]


def test_zen3_queues(zen3):
    assert [q.capacity for q in zen3.int_queues] == [24] * 4
    assert zen3.watermark_reserve == 4
    assert zen3.timer_read_cycles == 17
    assert zen3.fp_nsq_capacity == 64
    assert zen3.fpu_dispatch_width == 6
    assert dict(zen3.spurious_budget) == {23: 4, 24: 3}
    assert zen3.mem_miss_updates == pytest.approx(443.839)


def test_zen2_queues(zen2):
    assert [q.capacity for q in zen2.int_queues] == [16] * 4
    assert zen2.watermark_reserve == 0
    assert zen2.spurious_budget == ()
    assert zen2.mem_miss_updates == pytest.approx(198.395)
    assert not zen2.fp_queues[0].authoritative


def test_zen4_matches_zen3_layout(zen3, zen4):
    assert zen4.int_queues == zen3.int_queues
    assert zen4.spurious_budget == zen3.spurious_budget
    assert zen4.timer_read_cycles is None


@pytest.mark.parametrize("name", ["zen3", "ZEN3", Machine.ZEN3])
def test_machine_name_parsing(name):
    assert load_machine_config(name).name == "Zen3"


def test_unknown_machine():
    with pytest.raises(ConfigError):
        load_machine_config("Zen5")


@pytest.mark.parametrize("name", MACHINES)
def test_config_round_trip(name, tmp_path):
    cfg = load_machine_config(name)
    path = tmp_path / "m.yaml"
    path.write_text(dump_machine_config(cfg))
    assert load_machine_config_file(path) == cfg
    assert MachineConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("name", MACHINES)
def test_configs_hashable_and_deterministic(name):
    assert hash(load_machine_config(name)) == hash(load_machine_config(name))


def _mutated(cfg, **changes):
    d = cfg.to_dict()
    d.update(changes)
    return d


@pytest.mark.parametrize("changes", [
    {"watermark_reserve": 24},
    {"spurious_budget": {20: 1}},
    {"int_queues": [{"id": "Int0", "capacity": 24, "attached_units": ["ALU0"]}]},
])
def test_invalid_configs_rejected(zen3, changes):
    with pytest.raises(ConfigError):
        MachineConfig.from_dict(_mutated(zen3, **changes))


def test_zero_capacity_rejected(zen3):
    d = zen3.to_dict()
    d["int_queues"][0]["capacity"] = 0
    with pytest.raises(ConfigError):
        MachineConfig.from_dict(d)


def test_duplicate_and_unitless_queues_rejected(zen3):
    d = zen3.to_dict()
    d["int_queues"][1]["id"] = "Int0"
    with pytest.raises(ConfigError):
        MachineConfig.from_dict(d)
    d = zen3.to_dict()
    d["fp_queues"][0]["attached_units"] = []
    with pytest.raises(ConfigError):
        MachineConfig.from_dict(d)


def test_missing_field_is_config_error(zen3):
    d = zen3.to_dict()
    del d["fp_queues"]
    with pytest.raises(ConfigError):
        MachineConfig.from_dict(d)


def test_stosb(zen3):
    s = lookup_instruction(zen3, "stosb")
    assert s.total_uops == 3
    assert [(p.queues, p.uops) for p in s.placements] == [(("Int2",), 1)]
    assert s.bypass_uops == 2


def test_bsf_differs_between_zen3_and_zen4(zen3, zen4):
    z3, z4 = lookup_instruction(zen3, "bsf"), lookup_instruction(zen4, "bsf")
    assert z3.total_uops == 3 and z3.placements[0].queues == ("Int3",)
    assert z3.placements[0].uops == 3 and not z3.flags.single_uop
    assert z4.total_uops == 1 and set(z4.placements[0].queues) == set(zen4.int_queue_ids)
    assert not z4.flags.targeted


def test_unknown_mnemonic(zen3):
    with pytest.raises(UnknownInstruction):
        lookup_instruction(zen3, "vfmadd231pd")


def test_idiv_absent_on_zen2(zen2):
    with pytest.raises(UnknownInstruction):
        lookup_instruction(zen2, "idiv")


# expected scheduler column per mnemonic (Zen3)
SCHEDULER_COLUMN = {
    "imul": {"Int1"}, "idiv": {"Int0"}, "div": {"Int0"}, "movd": {"Int0"},
    "vmovd": {"Int0"}, "cvtsi2sd": {"Int0", "FP0", "FP1"}, "stosb": {"Int2"},
    "lodsb": {"Int3"}, "lodsw": {"Int3"}, "lodsd": {"Int3"}, "lodsq": {"Int3"},
    "bsf": {"Int3"}, "bsr": {"Int3"}, "rol": {"Int1", "Int2"}, "shr": {"Int1", "Int2"},
    "add": {"Int0", "Int1", "Int2", "Int3"}, "vaddsd": {"FP0", "FP1"},
    "divsd": {"FP0", "FP1"}, "sqrtsd": {"FP0", "FP1"}, "xor-zero": set(), "mov-reg": set(),
}


@pytest.mark.parametrize("mnemonic,queues", sorted(SCHEDULER_COLUMN.items()))
def test_scheduler_column(zen3, mnemonic, queues):
    assert set(lookup_instruction(zen3, mnemonic).queues) == queues


@pytest.mark.parametrize("name", MACHINES)
def test_table_invariants(name):
    cfg = load_machine_config(name)
    for spec in instruction_table(cfg):
        assert spec.queued_uops <= spec.total_uops
        for q in spec.queues:
            cfg.queue(q)
        if spec.flags.targeted:
            singles = [p for p in spec.placements if len(p.queues) == 1
                       and cfg.queue(p.queues[0]).authoritative]
            assert len(singles) == 1
            if spec.flags.single_uop:
                assert singles[0].uops <= 1


def test_phase1_filter(zen3):
    table = instruction_table(zen3)
    kept = phase1_filter(table)
    names = [s.mnemonic for s in kept]
    assert "imul" in names
    assert "date-now" not in names and "rdpru" not in names
    assert names == [s.mnemonic for s in table if s in kept]
    assert phase1_filter([]) == []


def test_serializing_side_effect_excluded(zen3):
    imul = lookup_instruction(zen3, "imul")
    fake = dataclasses.replace(imul, serializing_side_effect=True)
    assert phase1_filter([imul, fake]) == [imul]


def test_instruction_file_schema():
    from importlib import resources
    raw = yaml.safe_load(resources.files("schedq.data").joinpath("instructions.yaml").read_text())
    flags = {"delayable", "targeted", "single_queue", "single_uop", "non_serializing",
             "unprivileged"}
    for entry in raw:
        assert set(entry["flags"]) == flags
        assert entry["archs"]
