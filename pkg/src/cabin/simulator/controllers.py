"""Epoch-level video rate controllers: throughput-oriented (TON),
delay-oriented (DON) and the Bayesian-network controller (CABIN)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..bayesnet import BayesianNetworkModel
from ..discretizer import discretize, label_to_value
from ..errors import UntrainedModel
from ..tuner import DEFAULT_P_MIN, TuningRecommendation, preference_by_value, recommend_best, tunable_parents

# trace/training variable names
RATE = "video_rate_kbps"
EST_BW = "est_bw_kbps"
BUFFER = "buffer_ms"
RTT = "rtt_ms"
LOSS = "loss_frac"
PSNR = "frame_psnr_db"
OBSERVED_CONTEXTS = (EST_BW, BUFFER, RTT, LOSS)


@dataclass(frozen=True)
class Feedback:
    """What the sender knows at an epoch boundary, one entry per participant.

    The ``last_*`` fields are the previous epoch's receiver reports (None
    before the first epoch has completed).
    """

    est_bw_kbps: np.ndarray
    buffer_ms: np.ndarray
    last_buffer_ms: np.ndarray | None = None
    last_rtt_ms: np.ndarray | None = None
    last_loss_frac: np.ndarray | None = None

    @property
    def participants(self) -> int:
        return len(self.est_bw_kbps)


@dataclass(frozen=True)
class DonParams:
    b_target_ms: float = 2000.0
    b_low_ms: float = 500.0
    gain: float = 0.2


def clamp_rate(rate: float, bounds: tuple[float, float]) -> float:
    return float(min(max(rate, bounds[0]), bounds[1]))


def controller_ton(feedback: Feedback, bounds: tuple[float, float]) -> float:
    """Mean estimated bandwidth over all participants."""
    if feedback.participants < 1:
        raise ValueError("need at least one participant")
    return clamp_rate(float(np.mean(feedback.est_bw_kbps)), bounds)


def controller_don(feedback: Feedback, prev_rate: float, bounds: tuple[float, float],
                   params: DonParams = DonParams()) -> float:
    """Proportional control of the smallest playback buffer towards its target."""
    if feedback.participants < 1:
        raise ValueError("need at least one participant")
    min_buffer = float(np.min(feedback.buffer_ms))
    factor = 1.0 + params.gain * (min_buffer - params.b_target_ms) / params.b_target_ms
    if min_buffer < params.b_low_ms:
        factor = min(factor, 1.0)
    return clamp_rate(prev_rate * factor, bounds)


@dataclass
class CabinController:
    """Picks the video rate class that makes the best reachable PSNR class
    most probable across all participants' observed contexts."""

    model: BayesianNetworkModel
    qos_node: str = PSNR
    rate_node: str = RATE
    observed_nodes: Sequence[str] = OBSERVED_CONTEXTS
    p_min: float = DEFAULT_P_MIN
    last: TuningRecommendation | None = field(default=None, init=False)

    def __post_init__(self):
        if self.model is None or self.model.qos_node is None:
            raise UntrainedModel("CABIN needs a trained model with a QoS node")
        self.preference = preference_by_value(self.model, self.qos_node)
        self.tunables = tunable_parents(self.model, self.qos_node)
        names = set(self.model.dag.names)
        self.observed_nodes = tuple(n for n in self.observed_nodes
                                    if n in names and n in self.model.schemes and n not in self.tunables)

    def evidence(self, feedback: Feedback) -> list[dict[str, int]]:
        values = {EST_BW: feedback.est_bw_kbps, BUFFER: feedback.last_buffer_ms, RTT: feedback.last_rtt_ms,
                  LOSS: feedback.last_loss_frac}
        out = []
        for i in range(feedback.participants):
            ev = {}
            for name in self.observed_nodes:
                series = values.get(name)
                if series is not None:
                    ev[name] = discretize(self.model.schemes[name], float(series[i]))
            out.append(ev)
        return out

    def __call__(self, feedback: Feedback, prev_rate: float, bounds: tuple[float, float]) -> tuple[float, bool]:
        """Returns ``(rate, fallback)``; ``fallback`` is set when the model
        offers no tunable rate parent and the previous rate is kept."""
        if self.rate_node not in self.tunables:
            self.last = None
            return prev_rate, True
        population = self.evidence(feedback)
        rec = recommend_best(self.model, self.qos_node, self.preference, population, self.p_min)
        self.last = rec
        rate = label_to_value(self.model.schemes[self.rate_node], rec.assignment[self.rate_node])
        return clamp_rate(rate, bounds), False


def controller_cabin(model: BayesianNetworkModel, feedback: Feedback, prev_rate: float,
                     bounds: tuple[float, float], p_min: float = DEFAULT_P_MIN) -> float:
    return CabinController(model, p_min=p_min)(feedback, prev_rate, bounds)[0]
