"""Inter-keystroke timing recovery from a co-located contention observer.

The observer primes one integer queue just past the capacity left under the
SMT watermark. While the sibling thread (the X server) is idle the probe
reorders; while it is busy the watermark reserve kicks in and the probe
stalls, which the observer logs as an activity timestamp. Postprocessing
clusters the timestamps, drops short clusters, and takes each survivor's
first timestamp as a keystroke.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np

from .priminglab import capacity_sweep, find_priming_instruction
from .rng import make_rng
from .simcore import BUSY_LOOP, IDLE, Engine, ThreadProgram
from .uarch import ConfigError, MachineConfig, lookup_instruction

# slack for comparing millisecond timestamps built from float arithmetic
GAP_EPS_MS = 1e-9

# default per-queue spread of the X server's response to a key press (ms);
# an uncalibrated model input chosen near the measured deviations
QUEUE_JITTER_MS = {"Int0": 2.5, "Int1": 3.2, "Int2": 2.3, "Int3": 0.9}


@dataclass(frozen=True)
class GroundTruth:
    keystroke_times: tuple[float, ...]
    mouse_bursts: tuple[tuple[float, float], ...] = ()
    noise_events: tuple[float, ...] = ()


@dataclass(frozen=True)
class ContentionTrace:
    activity_timestamps: np.ndarray
    queue: str

    def shifted(self, c: float) -> "ContentionTrace":
        return ContentionTrace(self.activity_timestamps + c, self.queue)


@dataclass
class KeystrokeReport:
    detected_times: list[float]
    delta_t: float
    false_negatives: int
    false_positives: int
    f1: float
    jitter_stddev_ms: float
    n_true_positive: int
    offsets: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass(frozen=True)
class BurstModel:
    """Shape of X server activity as seen by the observer.

    ``samples`` is the activity length of one key press in observer samples;
    ``weak_prob`` is the chance a press only yields a short burst and
    ``strong_noise_prob`` the chance a noise event lasts as long as a press.
    """
    samples: tuple[int, int] = (12, 20)
    response_ms: float = 5.0
    jitter_ms: float | None = None
    jitter_clip: float = 2.5
    weak_prob: float = 0.001
    noise_samples: tuple[int, int] = (1, 5)
    strong_noise_prob: float = 0.002
    false_alarm_prob: float = 2e-5


@dataclass(frozen=True)
class PostprocessParams:
    t_idle: float = 0.1
    n_min: int = 10
    match_window_ms: float = 50.0
    align_range_ms: float = 50.0
    align_step_ms: float = 0.1
    max_cluster_ms: float | None = None


def generate_ground_truth(seed: int, n_keys: int = 100,
                          gap_range: tuple[float, float] = (150.0, 300.0),
                          start_ms: float = 1000.0, noise_rate_hz: float = 1.0,
                          n_mouse_bursts: int = 0,
                          mouse_duration_ms: tuple[float, float] = (200.0, 600.0)) -> GroundTruth:
    lo, hi = gap_range
    if lo > hi or lo <= 0:
        raise ValueError(f"invalid gap range {gap_range}")
    if n_keys < 0:
        raise ValueError("n_keys must be >= 0")
    rng = make_rng(seed, "ground-truth")
    gaps = rng.uniform(lo, hi, size=max(n_keys - 1, 0))
    keys = start_ms + np.concatenate([[0.0], np.cumsum(gaps)]) if n_keys else np.empty(0)
    end = (keys[-1] if n_keys else start_ms) + hi
    n_noise = rng.poisson(noise_rate_hz * end / 1000.0) if noise_rate_hz > 0 else 0
    noise = np.sort(rng.uniform(0.0, end, size=n_noise))
    mouse_starts = np.sort(rng.uniform(0.0, end, size=n_mouse_bursts))
    mouse_lens = rng.uniform(*mouse_duration_ms, size=n_mouse_bursts)
    return GroundTruth(
        keystroke_times=tuple(float(t) for t in keys),
        mouse_bursts=tuple((float(s), float(d)) for s, d in zip(mouse_starts, mouse_lens)),
        noise_events=tuple(float(t) for t in noise),
    )


def observer_program(config: MachineConfig, queue: str) -> ThreadProgram:
    """Priming just past the watermark-reduced capacity of ``queue``."""
    found = find_priming_instruction(config, queue)
    if found is None:
        raise ConfigError(f"no targeted priming instruction for {queue} on {config.name}")
    k_busy = capacity_sweep(config, found.mnemonic, sibling=BUSY_LOOP)
    k_idle = capacity_sweep(config, found.mnemonic, sibling=IDLE)
    if k_busy is None or k_idle is None or k_busy >= k_idle:
        raise ConfigError(f"{config.name} has no watermark partitioning to observe")
    spec = lookup_instruction(config, found.mnemonic)
    return ThreadProgram.for_instruction(spec, k_busy + 1)


def simulate_observer_trace(config: MachineConfig, truth: GroundTruth, queue: str = "Int3",
                            sampling_interval_ms: float = 0.05,
                            burst: BurstModel = BurstModel(), seed: int = 0,
                            spurious_stall_prob: float = 0.0) -> ContentionTrace:
    if not config.is_int_queue(queue):
        raise ValueError(f"{queue} is not an integer scheduler queue")
    prog = observer_program(config, queue)
    engine = Engine(config, spurious_stall_prob)
    p_busy = 1.0 - engine.run_probe(prog, BUSY_LOOP, trials=1000, seed=seed).reorder_rate
    p_idle = 1.0 - engine.run_probe(prog, IDLE, trials=1000, seed=seed).reorder_rate
    p_idle = max(p_idle, burst.false_alarm_prob)

    rng = make_rng(seed, "observer", queue)
    dt = sampling_interval_ms
    jitter = QUEUE_JITTER_MS.get(queue, 1.0) if burst.jitter_ms is None else burst.jitter_ms
    active: list[np.ndarray] = []

    def burst_at(t_ms: float, n: int) -> None:
        first = int(np.ceil(t_ms / dt - 1e-9))
        idx = np.arange(first, first + n)
        active.append(idx[rng.random(n) < p_busy] if p_busy < 1.0 else idx)

    for t in truth.keystroke_times:
        off = rng.normal(0.0, jitter) if jitter > 0 else 0.0
        off = float(np.clip(off, -burst.jitter_clip * jitter, burst.jitter_clip * jitter))
        if rng.random() < burst.weak_prob:
            n = int(rng.integers(1, burst.samples[0] // 2 + 1))
        else:
            n = int(rng.integers(burst.samples[0], burst.samples[1] + 1))
        burst_at(t + burst.response_ms + off, n)
    for t in truth.noise_events:
        if rng.random() < burst.strong_noise_prob:
            n = int(rng.integers(burst.samples[0], burst.samples[1] + 1))
        else:
            n = int(rng.integers(burst.noise_samples[0], burst.noise_samples[1] + 1))
        burst_at(t, n)
    for start, dur in truth.mouse_bursts:
        burst_at(start, max(int(dur / dt), 1))

    events = list(truth.keystroke_times) + list(truth.noise_events) + \
        [s + d for s, d in truth.mouse_bursts]
    if events and p_idle > 0:
        horizon = int(np.ceil((max(events) + 50.0) / dt))
        n_false = rng.binomial(horizon, p_idle)
        active.append(rng.integers(0, horizon, size=n_false))

    idx = np.unique(np.concatenate(active)) if active else np.empty(0, dtype=int)
    idx = idx[idx >= 0]
    return ContentionTrace(np.round(idx * dt, 9), queue)


# -- postprocessing ----------------------------------------------------------

def cluster(trace: Sequence[float] | np.ndarray, t_idle: float) -> list[list[float]]:
    """Split a sorted trace wherever consecutive timestamps differ by more
    than ``t_idle``."""
    if t_idle < 0:
        raise ValueError("t_idle must be >= 0")
    ts = np.asarray(trace, dtype=float)
    if ts.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(ts) > t_idle + GAP_EPS_MS) + 1
    return [part.tolist() for part in np.split(ts, cuts)]


def filter_clusters(clusters: Sequence[Sequence[float]], n_min: int,
                    max_duration_ms: float | None = None) -> list[float]:
    """First timestamps of clusters with at least ``n_min`` samples.

    ``max_duration_ms`` additionally drops long clusters (mouse movement).
    """
    keep = [c[0] for c in clusters if len(c) >= n_min and
            (max_duration_ms is None or c[-1] - c[0] <= max_duration_ms)]
    return sorted(keep)


def _nearest_sq_err(points: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pos = np.clip(np.searchsorted(truth, points), 1, len(truth) - 1) if len(truth) > 1 \
        else np.zeros(points.shape, dtype=int)
    left = truth[pos - 1] if len(truth) > 1 else truth[pos]
    right = truth[pos]
    return np.minimum((points - left) ** 2, (points - right) ** 2)


def align(detected: Sequence[float], truth: Sequence[float],
          search_ms: float = 50.0, step_ms: float = 0.1) -> float:
    """Grid shift minimizing the MSE between shifted detections and their
    nearest ground-truth times; ties go to the smaller |shift|."""
    det = np.asarray(detected, dtype=float)
    tru = np.sort(np.asarray(truth, dtype=float))
    if det.size == 0 or tru.size == 0:
        raise ValueError("align needs non-empty detected and truth")
    n = int(round(search_ms / step_ms))
    shifts = np.round(np.arange(-n, n + 1) * step_ms, 10)
    pts = det[None, :] + shifts[:, None]
    mse = _nearest_sq_err(pts.ravel(), tru).reshape(pts.shape).mean(axis=1)
    best = mse.min()
    tied = np.flatnonzero(mse <= best + 1e-12 * max(1.0, best))
    return float(shifts[tied[np.argmin(np.abs(shifts[tied]))]])


def score(detected: Sequence[float], truth: Sequence[float], delta_t: float,
          match_window_ms: float = 50.0) -> KeystrokeReport:
    if match_window_ms <= 0:
        raise ValueError("match window must be > 0")
    det = np.asarray(detected, dtype=float)
    tru = np.asarray(truth, dtype=float)
    shifted = det + delta_t
    diff = shifted[:, None] - tru[None, :]
    cand = np.argwhere(np.abs(diff) <= match_window_ms)
    order = np.argsort(np.abs(diff[cand[:, 0], cand[:, 1]]), kind="stable")
    used_d, used_t, offsets = set(), set(), []
    for i, j in cand[order]:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        offsets.append(float(diff[i, j]))
    tp = len(offsets)
    fp, fn = len(det) - tp, len(tru) - tp
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return KeystrokeReport(
        detected_times=[float(t) for t in det],
        delta_t=float(delta_t),
        false_negatives=fn,
        false_positives=fp,
        f1=f1,
        jitter_stddev_ms=float(np.std(offsets)) if offsets else 0.0,
        n_true_positive=tp,
        offsets=offsets,
    )


def recover_keystrokes(trace: ContentionTrace | Sequence[float],
                       params: PostprocessParams = PostprocessParams()) -> list[float]:
    ts = trace.activity_timestamps if isinstance(trace, ContentionTrace) else trace
    return filter_clusters(cluster(ts, params.t_idle), params.n_min, params.max_cluster_ms)


def evaluate(trace: ContentionTrace | Sequence[float], truth: GroundTruth,
             params: PostprocessParams = PostprocessParams()) -> KeystrokeReport:
    detected = recover_keystrokes(trace, params)
    keys = truth.keystroke_times
    if not detected or not keys:
        return score(detected, keys, 0.0, params.match_window_ms)
    dt = align(detected, keys, params.align_range_ms, params.align_step_ms)
    return score(detected, keys, dt, params.match_window_ms)


def run_keystroke_attack(config: MachineConfig, queue: str, seed: int, n_keys: int = 100,
                         burst: BurstModel = BurstModel(),
                         params: PostprocessParams = PostprocessParams(),
                         sampling_interval_ms: float = 0.05,
                         noise_rate_hz: float = 1.0) -> tuple[GroundTruth, ContentionTrace, KeystrokeReport]:
    truth = generate_ground_truth(seed, n_keys, noise_rate_hz=noise_rate_hz)
    trace = simulate_observer_trace(config, truth, queue, sampling_interval_ms, burst, seed)
    return truth, trace, evaluate(trace, truth, params)


def jitter_histogram(offsets: Sequence[float], bin_ms: float = 0.125) -> list[tuple[float, int]]:
    """(bin center, count) rows over the occupied range, empty bins included."""
    if len(offsets) == 0:
        return []
    idx = np.floor(np.asarray(offsets) / bin_ms + 0.5).astype(int)
    lo, hi = idx.min(), idx.max()
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    return [(round((lo + i) * bin_ms, 6), int(c)) for i, c in enumerate(counts)]


def write_trace_csv(fh: IO[str], trace: ContentionTrace) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["timestamp"])
    for t in trace.activity_timestamps:
        w.writerow([f"{t:.6f}"])


def cluster_reference(trace: Sequence[float], t_idle: float) -> list[list[float]]:
    """Plain-Python gap scan; slow but obviously correct."""
    out: list[list[float]] = []
    for t in trace:
        if out and t - out[-1][-1] <= t_idle + GAP_EPS_MS:
            out[-1].append(float(t))
        else:
            out.append([float(t)])
    return out
