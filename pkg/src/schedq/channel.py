"""Time-sliced covert channel over scheduler-queue contention.

A sender either idles (bit 0) or runs a dependent imul chain (bit 1) for a
whole slice. Every other hardware thread runs a receiver that primes the
imul queue and probes it; the receiver sharing a core with the sender sees
the bit, receivers paired with each other see constant contention and the
one paired with the bingo thread sees none. The decoder picks the receiver
with the second-lowest average contention.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import make_rng
from .simcore import BUSY_LOOP, IDLE, Engine, SiblingLoad, ThreadProgram
from .uarch import ConfigError, MachineConfig, lookup_instruction

LOST = -1
PREAMBLE = (1, 0) * 8
SEQ_BITS = 16


class LostChannelError(RuntimeError):
    """Every placement tried for a packet co-located sender and bingo."""


@dataclass(frozen=True)
class ChannelConfig:
    slice_ms: float = 1.0
    cores: int = 8
    smt_per_core: int = 2
    message_bytes: int = 5000
    packets_per_message: int = 10
    threshold: float | None = None
    noise_flip_prob: float = 0.0
    sender_priming: tuple[int, int] = (20, 12)
    receiver_priming: int = 20
    samples_per_slice: int = 8
    lost_band: float = 0.15
    max_retries: int = 20

    def __post_init__(self):
        if self.slice_ms <= 0:
            raise ValueError("slice_ms must be > 0")
        if self.packets_per_message <= 0 or self.message_bytes % self.packets_per_message:
            raise ValueError("packets_per_message must divide message_bytes")
        if not 0 <= self.noise_flip_prob < 0.5:
            raise ValueError("noise_flip_prob must be in [0, 0.5)")
        if self.cores * self.smt_per_core < 3:
            raise ValueError("need at least 3 hardware threads")
        if self.samples_per_slice <= 0:
            raise ValueError("samples_per_slice must be > 0")

    @property
    def n_threads(self) -> int:
        return self.cores * self.smt_per_core

    @property
    def n_receivers(self) -> int:
        return self.n_threads - 2

    @property
    def raw_rate_bps(self) -> float:
        return 1000.0 / self.slice_ms


@dataclass(frozen=True)
class Placement:
    """``threads[i]`` is the (core, thread) of task i; tasks are sender,
    bingo, then the receivers."""
    threads: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.threads)) != len(self.threads):
            raise ValueError("placement is not a bijection")
        if len(self.threads) < 3:
            raise ValueError("placement needs a sender, a bingo thread and a receiver")

    @property
    def sender(self) -> tuple[int, int]:
        return self.threads[0]

    @property
    def bingo(self) -> tuple[int, int]:
        return self.threads[1]

    @property
    def receivers(self) -> tuple[tuple[int, int], ...]:
        return self.threads[2:]

    @property
    def sender_with_bingo(self) -> bool:
        return self.sender[0] == self.bingo[0]


@dataclass
class ChannelReport:
    sent_bits: np.ndarray = field(repr=False)
    received_bits: np.ndarray = field(repr=False)
    ber: float
    lost_packets: int
    raw_rate_bps: float
    true_capacity_bps: float
    packets: int = 0
    header_errors: int = 0

    @property
    def n_bits(self) -> int:
        return int(self.sent_bits.size)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("sent_bits", "received_bits")}
        d["n_bits"] = self.n_bits
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Transmission:
    levels: np.ndarray          # (receivers, slices) fraction of stalled samples
    clock_log: list[float]      # coarse clock readings, one per slice boundary
    placement: Placement


# -- framing -----------------------------------------------------------------

def _bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def frame_message(message: bytes, config: ChannelConfig) -> list[np.ndarray]:
    if len(message) != config.message_bytes:
        raise ValueError(f"message is {len(message)} bytes, expected {config.message_bytes}")
    size = config.message_bytes // config.packets_per_message
    if config.packets_per_message >= 1 << SEQ_BITS:
        raise ValueError("too many packets for a 16-bit sequence number")
    packets = []
    for i in range(config.packets_per_message):
        seq = np.array([(i >> b) & 1 for b in range(SEQ_BITS - 1, -1, -1)], dtype=np.uint8)
        payload = _bytes_to_bits(message[i * size:(i + 1) * size])
        packets.append(np.concatenate([np.array(PREAMBLE, dtype=np.uint8), seq, payload]))
    return packets


def split_packet(bits: np.ndarray) -> tuple[int, np.ndarray]:
    """Sequence number and payload bits of one packet."""
    head = len(PREAMBLE)
    seq_bits = np.asarray(bits[head:head + SEQ_BITS], dtype=np.int64)
    if seq_bits.size != SEQ_BITS:
        raise ValueError("packet shorter than its header")
    seq = int(np.dot(seq_bits, 1 << np.arange(SEQ_BITS - 1, -1, -1)))
    return seq, np.asarray(bits[head + SEQ_BITS:], dtype=np.uint8)


def deframe(packets: list[np.ndarray]) -> bytes:
    ordered = sorted((split_packet(p) for p in packets), key=lambda sp: sp[0])
    payload = np.concatenate([p for _, p in ordered]) if ordered else np.empty(0, np.uint8)
    if payload.size % 8:
        raise ValueError("payload is not a whole number of bytes")
    return np.packbits(payload).tobytes()


# -- placement and transmission ---------------------------------------------

def place_threads(config: ChannelConfig, seed: int, *stream: object) -> Placement:
    """Uniform random bijection of tasks onto hardware threads."""
    slots = [(c, t) for c in range(config.cores) for t in range(config.smt_per_core)]
    perm = make_rng(seed, "placement", *stream).permutation(len(slots))
    return Placement(tuple(slots[i] for i in perm))


@dataclass(frozen=True)
class _Levels:
    """Stall probability of a receiver probe for each kind of sibling."""
    receiver: float
    bingo: float
    sender_one: float
    sender_zero: float


def _levels(machine: MachineConfig, engine: Engine, config: ChannelConfig) -> _Levels:
    imul = lookup_instruction(machine, "imul")
    recv = ThreadProgram.for_instruction(imul, config.receiver_priming)
    n_imul, n_sqrt = config.sender_priming
    sender = ThreadProgram.for_instruction(imul, n_imul, delay_chain=(("sqrtsd", n_sqrt),))

    def stall(sibling: SiblingLoad) -> float:
        return 1.0 - engine.run_probe(recv, sibling, trials=1000, seed=0).reorder_rate

    lv = _Levels(stall(SiblingLoad.running(recv)), stall(BUSY_LOOP),
                 stall(SiblingLoad.running(sender)), stall(IDLE))
    if not (lv.sender_one > 0.5 > lv.sender_zero and lv.receiver > 0.5 > lv.bingo):
        raise ConfigError(f"{machine.name}: receiver priming of {config.receiver_priming} "
                          f"cannot separate contention levels ({lv})")
    return lv


class CoarseClock:
    """The only time source receivers get: it advances in whole slices."""

    def __init__(self, slice_ms: float):
        self.slice_ms = slice_ms
        self._slice = 0
        self.log: list[float] = []

    def tick(self) -> None:
        self._slice += 1

    def now(self) -> float:
        t = self._slice * self.slice_ms
        self.log.append(t)
        return t


def transmit(machine: MachineConfig, engine: Engine, bits: np.ndarray, placement: Placement,
             config: ChannelConfig, seed: int, *stream: object) -> Transmission:
    if len(placement.threads) != config.n_threads:
        raise ValueError(f"placement has {len(placement.threads)} tasks, "
                         f"expected {config.n_threads}")
    lv = _levels(machine, engine, config)
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.size
    role_of = {placement.sender: "sender", placement.bingo: "bingo"}
    rng = make_rng(seed, "transmit", *stream)
    s = config.samples_per_slice
    levels = np.empty((config.n_receivers, n))
    for r, (core, thread) in enumerate(placement.receivers):
        sibling = next(((c, t) for c, t in placement.threads if c == core and t != thread), None)
        role = role_of.get(sibling, "receiver") if sibling is not None else "idle"
        if role == "sender":
            p = np.where(bits == 1, lv.sender_one, lv.sender_zero)
        else:
            p = np.full(n, {"receiver": lv.receiver, "bingo": lv.bingo,
                            "idle": lv.sender_zero}[role])
        level = rng.binomial(s, p) / s
        flip = rng.random(n) < config.noise_flip_prob
        levels[r] = np.where(flip, 1.0 - level, level)
    # receivers synchronize once per slice; the clock is only read there
    clock = CoarseClock(config.slice_ms)
    for _ in range(n + 1):
        clock.now()
        clock.tick()
    return Transmission(levels, clock.log, placement)


def select_signal_receiver(averages, lost_band: float = 0.15) -> int:
    """Index of the receiver with the second-lowest average, or ``LOST``."""
    avg = np.asarray(averages, dtype=float)
    if avg.size < 3:
        raise ValueError("need at least 3 receivers")
    if avg.min() >= 1.0 - lost_band:
        return LOST
    return int(np.argsort(avg, kind="stable")[1])


def demodulate(trace, threshold: float) -> np.ndarray:
    t = np.asarray(trace, dtype=float)
    if t.size == 0:
        raise ValueError("empty trace")
    return (t > threshold).astype(np.uint8)


def preamble_threshold(trace) -> float:
    t = np.asarray(trace, dtype=float)[:len(PREAMBLE)]
    pre = np.array(PREAMBLE[:t.size])
    return float((t[pre == 1].mean() + t[pre == 0].mean()) / 2)


def ber(sent, received) -> float:
    a, b = np.asarray(sent), np.asarray(received)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty bit sequences")
    return float(np.count_nonzero(a != b) / a.size)


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def _one_minus_entropy(p: float) -> float:
    x = 2.0 * p - 1.0
    if abs(x) < 0.5:
        # 1 - H2 = sum x^2n / (2n (2n - 1) ln 2); avoids cancellation near 1/2
        x2, term, total, n = x * x, x * x, 0.0, 1
        while term > 1e-18 * max(total, 1e-300):
            total += term / (2 * n * (2 * n - 1))
            term *= x2
            n += 1
        return total / math.log(2)
    return 1.0 - binary_entropy(p)


def true_capacity(raw_rate_bps: float, p: float) -> float:
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"error rate {p} outside [0, 1]")
    if raw_rate_bps < 0:
        raise ValueError("raw rate must be >= 0")
    return raw_rate_bps * min(1.0, max(0.0, _one_minus_entropy(p)))


def receive_packet(tx: Transmission, config: ChannelConfig) -> np.ndarray | None:
    idx = select_signal_receiver(tx.levels.mean(axis=1), config.lost_band)
    if idx == LOST:
        return None
    trace = tx.levels[idx]
    thr = preamble_threshold(trace) if config.threshold is None else config.threshold
    return demodulate(trace, thr)


def run_channel_experiment(machine: MachineConfig, engine: Engine, n_messages: int, seed: int,
                           config: ChannelConfig = ChannelConfig(),
                           messages: list[bytes] | None = None) -> ChannelReport:
    """Frame, place, transmit, select and demodulate ``n_messages`` messages.

    A lost placement counts as a lost packet and the packet is resent under a
    fresh placement; running out of retries raises ``LostChannelError``.
    """
    sent, received = [], []
    lost = header_errors = packets = 0
    for m in range(n_messages):
        if messages is not None:
            msg = messages[m]
        else:
            msg = make_rng(seed, "message", m).bytes(config.message_bytes)
        for i, pkt in enumerate(frame_message(msg, config)):
            for attempt in range(config.max_retries + 1):
                placement = place_threads(config, seed, m, i, attempt)
                tx = transmit(machine, engine, pkt, placement, config, seed, m, i, attempt)
                bits = receive_packet(tx, config)
                if bits is not None:
                    break
                lost += 1
            else:
                raise LostChannelError(f"message {m} packet {i}: no usable placement "
                                       f"in {config.max_retries + 1} attempts")
            packets += 1
            seq, payload = split_packet(bits)
            header_errors += seq != i
            sent.append(split_packet(pkt)[1])
            received.append(payload)
    s = np.concatenate(sent) if sent else np.empty(0, np.uint8)
    r = np.concatenate(received) if received else np.empty(0, np.uint8)
    rate = ber(s, r) if s.size else 0.0
    return ChannelReport(s, r, rate, lost, config.raw_rate_bps,
                         true_capacity(config.raw_rate_bps, rate), packets, header_errors)
