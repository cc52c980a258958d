"""Rate-quality model for the conference video."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PsnrModel:
    """Logarithmic rate-PSNR curve with copy-previous-frame concealment.

    A delivered frame scores ``clamp(p_min, p_max, beta0 + beta1 * ln(rate / r0))``;
    a lost frame repeats the previous frame and scores
    ``max(p_floor, prev - conceal_drop)``.
    """

    beta0: float = 36.0
    beta1: float = 4.0
    r0_kbps: float = 700.0
    p_min: float = 20.0
    p_max: float = 48.0
    conceal_drop: float = 6.0
    p_floor: float = 20.0

    def delivered(self, rate_kbps):
        rate = np.maximum(np.asarray(rate_kbps, dtype=float), 1e-12)
        return np.clip(self.beta0 + self.beta1 * np.log(rate / self.r0_kbps), self.p_min, self.p_max)

    def concealed(self, prev_psnr):
        return np.maximum(self.p_floor, np.asarray(prev_psnr, dtype=float) - self.conceal_drop)

    def frame(self, rate_kbps, lost, prev_psnr):
        lost = np.asarray(lost, dtype=bool)
        rate = np.asarray(rate_kbps, dtype=float)
        # a zero-rate source sends nothing, so there is nothing to decode
        lost = lost | (rate <= 0)
        return np.where(lost, self.concealed(prev_psnr), self.delivered(rate))


DEFAULT_PSNR = PsnrModel()


def psnr_of_frame(rate_kbps: float, lost: bool, prev_psnr: float, model: PsnrModel = DEFAULT_PSNR) -> float:
    return float(model.frame(rate_kbps, lost, prev_psnr))
