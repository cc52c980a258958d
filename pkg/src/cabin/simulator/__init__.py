"""Conferencing session simulator and rate controllers."""

from .controllers import CabinController, Feedback, controller_cabin, controller_don, controller_ton
from .session import ScenarioConfig, SessionReport, run_session
from .traffic import BackgroundFlow, deliver, estimate_bandwidth, sample_background, step_path
from .video import PsnrModel, psnr_of_frame
