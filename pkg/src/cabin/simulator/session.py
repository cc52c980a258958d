"""Discrete-time conferencing session: background traffic, one global video
rate, per-participant playback buffers and frame PSNR."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from ..bayesnet import BayesianNetworkModel
from ..discretizer import _real
from ..errors import ConfigInvalid, UntrainedModel
from .controllers import CabinController, DonParams, Feedback, controller_don, controller_ton
from .traffic import _capacity, avail_series, deliver, estimate_bandwidth, sample_background
from .video import PsnrModel

STRATEGIES = ("cabin", "ton", "don")
EXTRA_STRATEGIES = ("fixed", "explore")
TRACE_COLUMNS = ("time_s", "participant_id", "strategy", "video_rate_kbps", "avail_bw_kbps", "est_bw_kbps",
                 "buffer_ms", "loss_frac", "rtt_ms", "frame_psnr_db")

# playback states
STARTUP, PLAYING, REBUFFERING = 0, 1, 2


@dataclass(frozen=True)
class ScenarioConfig:
    participants: int = 4
    duration_s: float = 300.0
    tick_s: float = 0.1
    epoch_s: float = 2.5
    seed: int = 0
    strategy: str = "ton"
    base_capacity_kbps: float = 3000.0
    bw_noise_frac: float = 0.10
    rate_min_kbps: float = 100.0
    rate_max_kbps: float = 2000.0
    frame_rate_fps: float = 25.0
    startup_delay_s: float = 1.0
    # knobs beyond the core scenario
    background: bool = True
    capacity_schedule: tuple[tuple[float, float], ...] | None = None
    initial_rate_kbps: float = 700.0
    fixed_rate_kbps: float | None = None
    b_target_ms: float = 2000.0
    b_low_ms: float = 500.0
    don_gain: float = 0.2
    rtt_base_ms: float = 20.0
    rtt_queue_ms: float = 80.0
    p_min: float = 0.5
    psnr: PsnrModel = field(default_factory=PsnrModel)

    def __post_init__(self):
        if self.capacity_schedule is not None:
            object.__setattr__(self, "capacity_schedule",
                               tuple((float(t), float(c)) for t, c in self.capacity_schedule))
        self.validate()

    @property
    def rate_bounds_kbps(self) -> tuple[float, float]:
        return (self.rate_min_kbps, self.rate_max_kbps)

    @property
    def ticks_per_epoch(self) -> int:
        return int(round(self.epoch_s / self.tick_s))

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.tick_s))

    def validate(self):
        def bad(msg):
            raise ConfigInvalid(msg)

        if not isinstance(self.participants, (int, np.integer)) or self.participants < 1:
            bad("participants must be a positive integer")
        for name in ("duration_s", "tick_s", "epoch_s", "base_capacity_kbps", "rate_min_kbps", "rate_max_kbps",
                     "frame_rate_fps", "b_target_ms", "initial_rate_kbps"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                bad(f"{name} must be positive, got {value}")
        if self.base_capacity_kbps <= 0 and self.capacity_schedule is None:
            bad("base_capacity_kbps must be positive")
        for name in ("startup_delay_s", "b_low_ms", "don_gain", "rtt_base_ms", "rtt_queue_ms"):
            if not getattr(self, name) >= 0:
                bad(f"{name} must be non-negative")
        if not 0 <= self.bw_noise_frac < 1:
            bad("bw_noise_frac must lie in [0, 1)")
        if not 0 <= self.p_min <= 1:
            bad("p_min must lie in [0, 1]")
        if self.rate_min_kbps >= self.rate_max_kbps:
            bad("rate_min_kbps must be below rate_max_kbps")
        ratio = self.epoch_s / self.tick_s
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            bad("tick_s must divide epoch_s")
        n = self.duration_s / self.tick_s
        if abs(n - round(n)) > 1e-9 * n:
            bad("tick_s must divide duration_s")
        if self.strategy not in STRATEGIES + EXTRA_STRATEGIES:
            bad(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fixed" and self.fixed_rate_kbps is None:
            bad("strategy 'fixed' needs fixed_rate_kbps")
        if self.fixed_rate_kbps is not None and self.fixed_rate_kbps < 0:
            bad("fixed_rate_kbps must be non-negative")
        if self.capacity_schedule is not None:
            if not self.capacity_schedule:
                bad("capacity_schedule may not be empty")
            times = [t for t, _ in self.capacity_schedule]
            if times != sorted(times) or any(c < 0 for _, c in self.capacity_schedule):
                bad("capacity_schedule needs ascending times and non-negative capacities")
        if not -(2**63) <= int(self.seed) < 2**64:
            bad("seed must fit in 64 bits")

    def capacity(self):
        return self.capacity_schedule if self.capacity_schedule is not None else self.base_capacity_kbps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["psnr"] = asdict(self.psnr)
        if self.capacity_schedule is not None:
            out["capacity_schedule"] = [list(s) for s in self.capacity_schedule]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown scenario fields: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("psnr"), dict):
            d["psnr"] = PsnrModel(**d["psnr"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


@dataclass(frozen=True)
class EpochRecord:
    time_s: float
    participant_id: int
    strategy: str
    video_rate_kbps: float
    avail_bw_kbps: float     # true mean over the epoch
    est_bw_kbps: float       # probe result the controller saw at the epoch start
    buffer_ms: float         # mean over the epoch's ticks
    loss_frac: float
    rtt_ms: float
    frame_psnr_db: float     # mean over the epoch's frames
    delivered_kbps: float
    n_ticks: int
    n_frames: int
    stalls: int
    fallback: bool = False

    def trace_row(self) -> list:
        return [_fmt(getattr(self, c)) for c in TRACE_COLUMNS]


@dataclass(frozen=True)
class ParticipantState:
    """End-of-session state of one receiver."""

    buffer_ms: float
    played_frames: int
    received_frames: int
    lost_frames: int
    current_rate_kbps: float
    avail_bw_kbps: float
    est_bw_kbps: float
    rebuffering: bool


@dataclass
class SessionReport:
    config: ScenarioConfig
    records: list[EpochRecord]
    frame_psnr: np.ndarray = field(repr=False)   # [participants, frames]
    final_states: list[ParticipantState] = field(default_factory=list, repr=False)

    @property
    def strategy(self) -> str:
        return self.config.strategy

    def _weighted(self, attr: str, weight: str) -> float:
        num = sum(getattr(r, attr) * getattr(r, weight) for r in self.records)
        den = sum(getattr(r, weight) for r in self.records)
        return num / den if den else float("nan")

    @property
    def mean_psnr_db(self) -> float:
        return self._weighted("frame_psnr_db", "n_frames")

    @property
    def mean_playback_delay_ms(self) -> float:
        return self._weighted("buffer_ms", "n_ticks")

    @property
    def mean_throughput_kbps(self) -> float:
        """Per-participant delivered video rate averaged over the session."""
        return self._weighted("delivered_kbps", "n_ticks")

    @property
    def starvation_count(self) -> int:
        return sum(r.stalls for r in self.records)

    @property
    def fallback_epochs(self) -> int:
        return sum(1 for r in self.records if r.fallback and r.participant_id == 0)

    def summary(self) -> dict:
        return {
            "strategy": self.strategy,
            "participants": self.config.participants,
            "seed": int(self.config.seed),
            "duration_s": _real(self.config.duration_s),
            "frames_per_participant": int(self.frame_psnr.shape[1]),
            "mean_psnr_db": _real(self.mean_psnr_db),
            "mean_playback_delay_ms": _real(self.mean_playback_delay_ms),
            "mean_throughput_kbps": _real(self.mean_throughput_kbps),
            "starvation_count": int(self.starvation_count),
            "fallback_epochs": int(self.fallback_epochs),
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.records:
            writer.writerow(r.trace_row())
        return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def random_streams(seed: int, participants: int) -> dict[str, list[np.random.Generator] | np.random.Generator]:
    """Independent generators derived from one seed.

    Path ``i`` always gets the same stream for a given seed, whatever the
    participant count or strategy, so scenarios and strategies share their
    traffic and probe noise.
    """
    root = np.random.SeedSequence(int(seed) % 2**64)
    traffic, probe, explore = root.spawn(3)
    return {
        "traffic": [np.random.default_rng(s) for s in traffic.spawn(participants)],
        "probe": [np.random.default_rng(s) for s in probe.spawn(participants)],
        "explore": np.random.default_rng(explore),
    }


def _frames_per_tick(cfg: ScenarioConfig) -> np.ndarray:
    k = np.arange(cfg.n_ticks + 1)
    edges = np.floor(k * cfg.tick_s * cfg.frame_rate_fps + 1e-9).astype(np.int64)
    return np.diff(edges)


def _rate_chooser(cfg: ScenarioConfig, model: BayesianNetworkModel | None, streams) -> Callable:
    bounds = cfg.rate_bounds_kbps
    if cfg.strategy == "ton":
        return lambda fb, prev: (controller_ton(fb, bounds), False)
    if cfg.strategy == "don":
        params = DonParams(cfg.b_target_ms, cfg.b_low_ms, cfg.don_gain)
        return lambda fb, prev: (controller_don(fb, prev, bounds, params), False)
    if cfg.strategy == "fixed":
        return lambda fb, prev: (float(cfg.fixed_rate_kbps), False)
    if cfg.strategy == "explore":
        rng = streams["explore"]
        return lambda fb, prev: (float(rng.uniform(*bounds)), False)
    if model is None:
        raise UntrainedModel("strategy 'cabin' needs a trained model (run the train command first)")
    controller = CabinController(model, p_min=cfg.p_min)
    return lambda fb, prev: controller(fb, prev, bounds)


def run_session(cfg: ScenarioConfig, model: BayesianNetworkModel | None = None) -> SessionReport:
    """Simulate one session and collect per-epoch, per-participant records.

    Each tick the buffer gains the delivered share of a tick of video and,
    while playing, plays out one tick.  An empty buffer while playing is a
    stall: playback freezes until the buffer refills to ``b_target_ms``.
    Frame losses follow the tick's loss fraction through a deterministic
    accumulator.  Lost frames, and frame slots that fall inside a stall, show
    the previous picture and score as concealed.
    """
    cfg.validate()
    P, T, tpe = cfg.participants, cfg.n_ticks, cfg.ticks_per_epoch
    streams = random_streams(cfg.seed, P)
    choose = _rate_chooser(cfg, model, streams)

    t = np.arange(T) * cfg.tick_s
    flows = sample_background(cfg, streams["traffic"]) if cfg.background else []
    cap = _capacity(cfg.capacity(), t)
    avail = np.vstack([avail_series(cfg.capacity(), [f for f in flows if f.path == p], t) for p in range(P)])

    per_tick = _frames_per_tick(cfg)
    frame_start = np.concatenate([[0], np.cumsum(per_tick)])
    frame_psnr = np.empty((P, int(frame_start[-1])))

    psnr_model = cfg.psnr
    tick_ms = 1000.0 * cfg.tick_s
    buffer = np.zeros(P)
    state = np.full(P, STARTUP)
    prev_psnr = np.full(P, psnr_model.p_floor)
    acc = np.zeros(P)
    received = np.zeros(P, dtype=np.int64)
    lost_total = np.zeros(P, dtype=np.int64)
    played_ms = np.zeros(P)

    rate = float(cfg.initial_rate_kbps)
    last_buffer = last_rtt = last_loss = None
    est = np.zeros(P)
    records: list[EpochRecord] = []

    for start in range(0, T, tpe):
        stop = min(start + tpe, T)
        window = slice(max(0, start - tpe), start) if start else slice(0, 1)
        true_bw = avail[:, window].mean(axis=1)
        est = np.array([estimate_bandwidth(true_bw[p], streams["probe"][p], cfg.bw_noise_frac) for p in range(P)])
        feedback = Feedback(est, buffer.copy(), last_buffer, last_rtt, last_loss)
        fallback = False
        # DON has no buffer history yet at the first boundary
        if start > 0 or cfg.strategy != "don":
            rate, fallback = choose(feedback, rate)

        sums = {k: np.zeros(P) for k in ("buffer", "loss", "rtt", "delivered", "psnr")}
        stalls = np.zeros(P, dtype=np.int64)
        for k in range(start, stop):
            a_k = avail[:, k]
            delivered, loss = deliver(np.full(P, rate), a_k)
            frozen = state == REBUFFERING
            for f in range(frame_start[k], frame_start[k + 1]):
                acc += loss
                lost = acc >= 1.0 - 1e-9
                acc[lost] -= 1.0
                # a stalled display repeats its last frame, same as concealment
                psnr = psnr_model.frame(rate, lost | frozen, prev_psnr)
                frame_psnr[:, f] = psnr
                prev_psnr = psnr
                sums["psnr"] += psnr
                lost_now = lost | (rate <= 0)
                lost_total += lost_now
                received += ~lost_now

            inflow = tick_ms * (delivered / rate) if rate > 0 else np.zeros(P)
            buffer = buffer + inflow
            playing = state == PLAYING
            buffer = np.where(playing, buffer - tick_ms, buffer)
            played_ms += np.where(playing, tick_ms + np.minimum(buffer, 0.0), 0.0)
            starved = playing & (buffer <= 0)
            stalls += starved
            buffer = np.maximum(buffer, 0.0)
            elapsed = (k + 1) * cfg.tick_s
            state = np.where(starved, REBUFFERING, state)
            state = np.where((state == STARTUP) & (elapsed >= cfg.startup_delay_s - 1e-9), PLAYING, state)
            state = np.where((state == REBUFFERING) & ~starved & (buffer >= cfg.b_target_ms), PLAYING, state)

            c_k = cap[k]
            util = np.minimum(1.0, (c_k - a_k + delivered) / c_k) if c_k > 0 else np.ones(P)
            rtt = cfg.rtt_base_ms + cfg.rtt_queue_ms * util
            sums["buffer"] += buffer
            sums["loss"] += loss
            sums["rtt"] += rtt
            sums["delivered"] += delivered

        n = stop - start
        n_frames = int(frame_start[stop] - frame_start[start])
        epoch_avail = avail[:, start:stop].mean(axis=1)
        means = {k: v / n for k, v in sums.items() if k != "psnr"}
        psnr_mean = sums["psnr"] / n_frames if n_frames else np.full(P, np.nan)
        for p in range(P):
            records.append(EpochRecord(
                time_s=_real(start * cfg.tick_s), participant_id=p, strategy=cfg.strategy,
                video_rate_kbps=_real(rate), avail_bw_kbps=_real(epoch_avail[p]), est_bw_kbps=_real(est[p]),
                buffer_ms=_real(means["buffer"][p]), loss_frac=_real(means["loss"][p]),
                rtt_ms=_real(means["rtt"][p]), frame_psnr_db=_real(psnr_mean[p]),
                delivered_kbps=_real(means["delivered"][p]), n_ticks=n, n_frames=n_frames,
                stalls=int(stalls[p]), fallback=fallback,
            ))
        last_buffer, last_rtt, last_loss = means["buffer"], means["rtt"], means["loss"]

    fps = cfg.frame_rate_fps
    final = [ParticipantState(
        buffer_ms=float(buffer[p]), played_frames=int(round(played_ms[p] / 1000.0 * fps)),
        received_frames=int(received[p]), lost_frames=int(lost_total[p]), current_rate_kbps=rate,
        avail_bw_kbps=float(avail[p, -1]), est_bw_kbps=float(est[p]), rebuffering=bool(state[p] == REBUFFERING),
    ) for p in range(P)]
    return SessionReport(cfg, records, frame_psnr, final)


def write_trace(report: SessionReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(report.trace_csv())


def with_strategy(cfg: ScenarioConfig, strategy: str, seed: int | None = None) -> ScenarioConfig:
    return replace(cfg, strategy=strategy, seed=cfg.seed if seed is None else seed)
