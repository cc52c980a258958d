"""Per-participant bottleneck paths shared with FTP, CBR and Pareto on/off
background flows, plus the noisy available-bandwidth probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

FTP, CBR, PARETO = "FTP", "CBR", "Pareto"

# Uniform parameter ranges of the injected background traffic.
TRAFFIC_TABLE = {
    FTP: {"start_s": (0.0, 100.0), "duration_s": (0.0, 300.0), "packet_bytes": 1500,
          "rate_mbps": None, "data_bytes": (10e3, 1500e3)},
    CBR: {"start_s": (0.0, 50.0), "duration_s": (50.0, 200.0), "packet_bytes": 500,
          "rate_mbps": (1.0, 1.5), "data_bytes": (5e6, 50e6)},
    PARETO: {"start_s": (50.0, 150.0), "duration_s": (200.0, 300.0), "packet_bytes": 1000,
             "rate_mbps": (0.5, 1.0), "data_bytes": None},
}

PARETO_SHAPE = 1.5
PARETO_MEAN_ON_S = 1.0
PARETO_MEAN_OFF_S = 1.0


@dataclass(frozen=True)
class BackgroundFlow:
    """One background flow on participant path ``path``.

    ``rate_kbps`` is None for FTP (it takes a fair share of the capacity left
    by the other flows); ``data_bytes`` is None for unbounded flows.
    ``end_s`` is when the flow actually stops (data exhausted or duration
    over).  ``on_periods`` lists the Pareto source's bursts.
    """

    kind: str
    path: int
    start_s: float
    duration_s: float
    packet_bytes: int
    rate_kbps: float | None
    data_bytes: float | None
    end_s: float
    on_periods: tuple[tuple[float, float], ...] = ()


def _pareto(rng: np.random.Generator, mean: float, shape: float = PARETO_SHAPE) -> float:
    scale = mean * (shape - 1) / shape
    return float(scale * (1.0 + rng.pareto(shape)))


def _on_periods(rng: np.random.Generator, start: float, end: float) -> tuple[tuple[float, float], ...]:
    periods = []
    t = start
    while t < end:
        on = _pareto(rng, PARETO_MEAN_ON_S)
        periods.append((t, min(t + on, end)))
        t += on + _pareto(rng, PARETO_MEAN_OFF_S)
    return tuple(periods)


def _uniform(rng, bounds):
    return float(rng.uniform(*bounds))


def sample_path_flows(path: int, rng: np.random.Generator, capacity_kbps, tick_s: float) -> list[BackgroundFlow]:
    """One flow of each kind with parameters drawn from the traffic table."""
    t = TRAFFIC_TABLE
    cbr_start = _uniform(rng, t[CBR]["start_s"])
    cbr_dur = _uniform(rng, t[CBR]["duration_s"])
    cbr_rate = 1000.0 * _uniform(rng, t[CBR]["rate_mbps"])
    cbr_data = _uniform(rng, t[CBR]["data_bytes"])
    cbr_end = cbr_start + min(cbr_dur, cbr_data * 8 / 1000.0 / cbr_rate)
    cbr = BackgroundFlow(CBR, path, cbr_start, cbr_dur, t[CBR]["packet_bytes"], cbr_rate, cbr_data, cbr_end)

    par_start = _uniform(rng, t[PARETO]["start_s"])
    par_dur = _uniform(rng, t[PARETO]["duration_s"])
    par_rate = 1000.0 * _uniform(rng, t[PARETO]["rate_mbps"])
    par_end = par_start + par_dur
    pareto = BackgroundFlow(PARETO, path, par_start, par_dur, t[PARETO]["packet_bytes"], par_rate, None,
                            par_end, _on_periods(rng, par_start, par_end))

    ftp_start = _uniform(rng, t[FTP]["start_s"])
    ftp_dur = _uniform(rng, t[FTP]["duration_s"])
    ftp_data = _uniform(rng, t[FTP]["data_bytes"])
    ftp = BackgroundFlow(FTP, path, ftp_start, ftp_dur, t[FTP]["packet_bytes"], None, ftp_data,
                         ftp_start + ftp_dur)
    flows = [ftp, cbr, pareto]
    return resolve_ftp_ends(flows, capacity_kbps, tick_s)


def sample_background(cfg, rng_streams: Sequence[np.random.Generator]) -> list[BackgroundFlow]:
    """Background flows for every participant path (one generator per path)."""
    if len(rng_streams) != cfg.participants:
        raise ValueError("need one random stream per participant path")
    flows = []
    for path, rng in enumerate(rng_streams):
        flows.extend(sample_path_flows(path, rng, cfg.capacity(), cfg.tick_s))
    return flows


def _fixed_rate(flow: BackgroundFlow, t: np.ndarray) -> np.ndarray:
    active = (t >= flow.start_s) & (t < flow.end_s)
    if flow.kind == PARETO:
        on = np.zeros(t.shape, dtype=bool)
        for a, b in flow.on_periods:
            on |= (t >= a) & (t < b)
        active &= on
    return np.where(active, flow.rate_kbps, 0.0)


def _ftp_active(flow: BackgroundFlow, t: np.ndarray) -> np.ndarray:
    return (t >= flow.start_s) & (t < flow.end_s)


def resolve_ftp_ends(flows: list[BackgroundFlow], capacity_kbps, tick_s: float) -> list[BackgroundFlow]:
    """Fix each FTP flow's stop time by transferring its data at the fair share.

    Each active FTP flow gets ``residual / (n_ftp + 1)`` where the residual is
    what CBR and Pareto leave and the video flow counts as one competitor.
    """
    ftps = [f for f in flows if f.kind == FTP]
    if not ftps:
        return flows
    others = [f for f in flows if f.kind != FTP]
    start = min(f.start_s for f in ftps)
    stop = max(f.start_s + f.duration_s for f in ftps)
    t = np.arange(np.floor(start / tick_s) * tick_s, stop + tick_s, tick_s)
    cap = _capacity(capacity_kbps, t)
    residual = np.maximum(0.0, cap - sum((_fixed_rate(f, t) for f in others), np.zeros_like(t)))
    remaining = {id(f): f.data_bytes * 8 / 1000.0 for f in ftps}
    ends = {id(f): f.start_s + f.duration_s for f in ftps}
    for k, tk in enumerate(t):
        if tk >= max(ends.values()):
            break
        active = [f for f in ftps if f.start_s <= tk < ends[id(f)] and remaining[id(f)] > 0]
        if not active:
            continue
        share = residual[k] / (len(active) + 1)
        for f in active:
            remaining[id(f)] -= share * tick_s
            if remaining[id(f)] <= 0:
                ends[id(f)] = min(ends[id(f)], tk + tick_s)
    out = [f if f.kind != FTP else BackgroundFlow(f.kind, f.path, f.start_s, f.duration_s, f.packet_bytes,
                                                 None, f.data_bytes, float(ends[id(f)]))
           for f in flows]
    return out


def _capacity(capacity_kbps, t: np.ndarray) -> np.ndarray:
    """Capacity over time: a constant or a step schedule ``[(t0, c0), (t1, c1), ...]``."""
    if np.isscalar(capacity_kbps):
        return np.full(t.shape, float(capacity_kbps))
    times = np.array([s for s, _ in capacity_kbps], dtype=float)
    values = np.array([c for _, c in capacity_kbps], dtype=float)
    idx = np.searchsorted(times, t, side="right") - 1
    return np.where(idx >= 0, values[np.maximum(idx, 0)], values[0])


def avail_series(capacity_kbps, flows: Sequence[BackgroundFlow], t: np.ndarray) -> np.ndarray:
    """Bandwidth left for the video flow on one path at times ``t``."""
    t = np.asarray(t, dtype=float)
    cap = _capacity(capacity_kbps, t)
    fixed = sum((_fixed_rate(f, t) for f in flows if f.kind != FTP), np.zeros_like(t))
    residual = np.maximum(0.0, cap - fixed)
    n_ftp = sum((_ftp_active(f, t).astype(float) for f in flows if f.kind == FTP), np.zeros_like(t))
    return residual / (n_ftp + 1.0)


def step_path(capacity_kbps, flows: Sequence[BackgroundFlow], t: float, video_rate_kbps: float):
    """Available bandwidth, delivered video rate and loss fraction at time ``t``."""
    avail = float(avail_series(capacity_kbps, flows, np.array([t]))[0])
    delivered, loss = deliver(video_rate_kbps, avail)
    return avail, delivered, loss


def deliver(video_rate_kbps, avail_kbps):
    """Fluid bottleneck: the excess over the available bandwidth is dropped."""
    rate = np.asarray(video_rate_kbps, dtype=float)
    avail = np.asarray(avail_kbps, dtype=float)
    delivered = np.minimum(rate, avail)
    with np.errstate(divide="ignore", invalid="ignore"):
        loss = np.where(rate > 0, np.maximum(0.0, (rate - avail) / np.where(rate > 0, rate, 1.0)), 0.0)
    if delivered.ndim == 0:
        return float(delivered), float(loss)
    return delivered, loss


def estimate_bandwidth(true_bw, rng: np.random.Generator, noise_frac: float):
    """Probe result: ``true * (1 + u)`` with ``u ~ U[-noise_frac, noise_frac]``."""
    if not 0 <= noise_frac < 1:
        raise ValueError("noise_frac must lie in [0, 1)")
    true_bw = np.asarray(true_bw, dtype=float)
    u = rng.uniform(-noise_frac, noise_frac, size=true_bw.shape)
    est = true_bw * (1.0 + u)
    return float(est) if est.ndim == 0 else est
