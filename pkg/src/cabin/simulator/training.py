"""Warm-up training of the CABIN model from rate-exploring sessions."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from ..bayesnet import BayesianNetworkModel, TraceDataset, learn_model
from ..discretizer import build_scheme, discretize_values
from .controllers import BUFFER, EST_BW, LOSS, PSNR, RATE, RTT
from .session import ScenarioConfig, SessionReport, run_session

TRAINING_COLUMNS = (RATE, EST_BW, BUFFER, RTT, LOSS, PSNR)
UNITS = {RATE: "kbps", EST_BW: "kbps", BUFFER: "ms", RTT: "ms", LOSS: "", PSNR: "dB"}
WARMUP_SEED_BASE = 1001
WARMUP_PARTICIPANTS = 16
WARMUP_SESSIONS = 4
# Per-epoch PSNR is skewed and unimodal; a separation floor would merge it
# into one or two classes and leave the tuner nothing to aim for, so the
# trainer only asks that every class be reachable.
TRAINING_SEPARATION = 0.0


def default_warmup(participants: int = WARMUP_PARTICIPANTS, sessions: int = WARMUP_SESSIONS,
                   seed: int = WARMUP_SEED_BASE, base: ScenarioConfig | None = None) -> list[ScenarioConfig]:
    """Rate-exploring sessions on seeds disjoint from the evaluation seeds."""
    base = base or ScenarioConfig()
    return [replace(base, participants=participants, strategy="explore", seed=seed + i) for i in range(sessions)]


def training_rows(report: SessionReport) -> dict[str, np.ndarray]:
    """One row per (participant, epoch >= 1).

    The row pairs what the controller saw when choosing the epoch's rate
    (the probe, and the previous epoch's buffer, RTT and loss reports) with
    the rate it chose and the PSNR that followed.
    """
    by_participant: dict[int, list] = {}
    for r in report.records:
        by_participant.setdefault(r.participant_id, []).append(r)
    cols = {c: [] for c in TRAINING_COLUMNS}
    for pid in sorted(by_participant):
        recs = by_participant[pid]
        for prev, cur in zip(recs, recs[1:]):
            cols[RATE].append(cur.video_rate_kbps)
            cols[EST_BW].append(cur.est_bw_kbps)
            cols[BUFFER].append(prev.buffer_ms)
            cols[RTT].append(prev.rtt_ms)
            cols[LOSS].append(prev.loss_frac)
            cols[PSNR].append(cur.frame_psnr_db)
    return {c: np.asarray(v, dtype=float) for c, v in cols.items()}


def train_from_columns(columns: dict[str, np.ndarray], max_parents: int = 3, alpha: float = 1.0,
                       k_max: int = 6, epsilon: float = 0.05, separation: float = TRAINING_SEPARATION) -> BayesianNetworkModel:
    schemes = {name: build_scheme(values, k_max=k_max, epsilon=epsilon, variable_name=name, unit=UNITS.get(name, ""),
                                  separation=separation)
               for name, values in columns.items()}
    labels = {name: discretize_values(schemes[name], values) for name, values in columns.items()}
    data = TraceDataset.from_columns(labels, {n: s.n_values for n, s in schemes.items()})
    model = learn_model(data, PSNR, tunable={RATE}, max_parents=max_parents, alpha=alpha, schemes=schemes)
    # hand back exactly what a model file holds, so saved and in-memory runs agree
    return BayesianNetworkModel.from_json(model.to_json())


def train_cabin(warmup_cfgs: Sequence[ScenarioConfig] | None = None, max_parents: int = 3, alpha: float = 1.0,
                k_max: int = 6, epsilon: float = 0.05, separation: float = TRAINING_SEPARATION) -> BayesianNetworkModel:
    """Run the warm-up sessions and learn schemes, structure and CPTs from them."""
    if warmup_cfgs is None:
        warmup_cfgs = default_warmup()
    merged = {c: [] for c in TRAINING_COLUMNS}
    for cfg in warmup_cfgs:
        rows = training_rows(run_session(cfg))
        for c in TRAINING_COLUMNS:
            merged[c].append(rows[c])
    columns = {c: np.concatenate(v) for c, v in merged.items()}
    return train_from_columns(columns, max_parents=max_parents, alpha=alpha, k_max=k_max, epsilon=epsilon,
                              separation=separation)
