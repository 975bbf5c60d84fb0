"""Measured reference values the model is calibrated against and checked
against. Keys are machine names and mnemonics of the instruction table."""
from __future__ import annotations

CAPACITY = {
    ("Zen2", "idle"): 16, ("Zen2", "busy"): 16,
    ("Zen3", "idle"): 24, ("Zen3", "busy"): 20,
    ("Zen4", "idle"): 24, ("Zen4", "busy"): 20,
}

TIMER_K = {("Zen3", "imul"): 22}

_T, _F = True, False

# mnemonic -> (observed_k, targeted, single_uop, single_queue)
CLASSIFICATION = {
    "Zen3": {
        "imul": (24, _T, _T, _T), "idiv": (23, _T, _T, _T), "div": (24, _T, _T, _T),
        "movd": (23, _T, _T, _T), "vmovd": (23, _T, _T, _T), "cvtsi2sd": (23, _T, _T, _T),
        "stosb": (22, _T, _T, _T), "lodsb": (22, _T, _T, _T), "lodsw": (22, _T, _T, _T),
        "lodsd": (22, _T, _T, _T), "lodsq": (22, _T, _T, _T),
        "bsf": (7, _T, _F, _T), "bsr": (7, _T, _F, _T),
        "rol": (46, _F, _T, _F), "shr": (46, _F, _T, _F), "add": (90, _F, _T, _F),
        "vaddsd": (127, _F, _T, _F), "divsd": (127, _F, _T, _F), "sqrtsd": (127, _F, _T, _F),
    },
    "Zen4": {
        "imul": (24, _T, _T, _T), "idiv": (23, _T, _T, _T), "div": (24, _T, _T, _T),
        "movd": (23, _T, _T, _T), "vmovd": (23, _T, _T, _T), "cvtsi2sd": (22, _T, _T, _T),
        "stosb": (22, _T, _T, _T), "lodsb": (22, _T, _T, _T), "lodsw": (22, _T, _T, _T),
        "lodsd": (22, _T, _T, _T), "lodsq": (22, _T, _T, _T),
        "bsf": (89, _F, _T, _F), "bsr": (89, _F, _T, _F),
        "rol": (46, _F, _T, _F), "shr": (46, _F, _T, _F), "add": (89, _F, _T, _F),
        "vaddsd": (124, _F, _T, _F), "divsd": (124, _F, _T, _F), "sqrtsd": (124, _F, _T, _F),
    },
}

MEM_MISS_UPDATES = {"Zen3": 443.839, "Zen2": 198.395}


def pxor_reorders(k: int, fillers: int) -> bool:
    """Expected outcome of k imul followed by ``fillers`` pxor on Zen 3."""
    if k <= 22:
        return True
    if k == 23:
        return fillers <= 4
    if k == 24:
        return fillers <= 3
    return False


KEYSTROKE = {"runs": 20, "keys": 100, "min_f1": 0.995, "max_errors": 1,
             "min_passing": 19, "max_jitter_ms": 4.0}

CHANNEL_NOISE = 0.007
