import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import build_model
from cabin.bayesnet import BayesianNetworkModel
from cabin.discretizer import DiscretizationScheme, GaussianTerm
from cabin.errors import ConfigInvalid, UntrainedModel
from cabin.simulator import (
    CabinController,
    Feedback,
    PsnrModel,
    ScenarioConfig,
    controller_cabin,
    controller_don,
    controller_ton,
    deliver,
    estimate_bandwidth,
    psnr_of_frame,
    run_session,
    sample_background,
    step_path,
)
from cabin.simulator.comparison import run_comparison
from cabin.simulator.controllers import BUFFER, EST_BW, PSNR, RATE, DonParams
from cabin.simulator.session import TRACE_COLUMNS, random_streams
from cabin.simulator.traffic import CBR, FTP, PARETO, BackgroundFlow, _pareto
from cabin.simulator.training import default_warmup, train_cabin, train_from_columns, training_rows
from cabin.tuner import recommend

BOUNDS = (100.0, 2000.0)


def feedback(est, buffers=None):
    est = np.asarray(est, dtype=float)
    return Feedback(est, np.asarray(buffers if buffers is not None else np.zeros(est.size), dtype=float))


# -- background traffic ---------------------------------------------------------------------


def _flows(seed, participants=16):
    cfg = ScenarioConfig(participants=participants, seed=seed)
    return sample_background(cfg, random_streams(seed, participants)["traffic"])


@pytest.mark.parametrize("seed", range(5))
def test_background_parameters_follow_the_traffic_table(seed):
    flows = _flows(seed)
    assert len(flows) == 3 * 16
    for f in flows:
        if f.kind == CBR:
            assert 1000 <= f.rate_kbps <= 1500
            assert 0 <= f.start_s <= 50 and 50 <= f.duration_s <= 200
            assert 5e6 <= f.data_bytes <= 50e6 and f.packet_bytes == 500
        elif f.kind == PARETO:
            assert 50 <= f.start_s <= 150 and 200 <= f.duration_s <= 300
            assert 500 <= f.rate_kbps <= 1000 and f.packet_bytes == 1000
            assert all(f.start_s <= a < b <= f.end_s for a, b in f.on_periods)
        else:
            assert f.kind == FTP
            assert 0 <= f.start_s <= 100 and 0 <= f.duration_s <= 300
            assert 10e3 <= f.data_bytes <= 1500e3 and f.packet_bytes == 1500
            assert f.start_s <= f.end_s <= f.start_s + f.duration_s


def test_background_is_deterministic_per_seed():
    assert _flows(3) == _flows(3)
    assert _flows(3) != _flows(4)


def test_path_streams_do_not_depend_on_participant_count():
    small = [f for f in _flows(5, 4)]
    large = [f for f in _flows(5, 16) if f.path < 4]
    assert small == large


def test_pareto_on_time_mean_is_about_one_second():
    rng = np.random.default_rng(0)
    draws = [_pareto(rng, 1.0) for _ in range(200_000)]
    assert min(draws) >= 1.0 / 3.0
    # heavy tail (infinite variance), so the sample mean converges slowly
    assert np.mean(draws) == pytest.approx(1.0, abs=0.05)


# -- path and probe ------------------------------------------------------------------------


def test_uncongested_path():
    assert step_path(3000, [], 10.0, 500) == (3000.0, 500.0, 0.0)


def test_cbr_and_pareto_leave_a_third_lost():
    cbr = BackgroundFlow(CBR, 0, 0.0, 100.0, 500, 1200.0, None, 100.0)
    par = BackgroundFlow(PARETO, 0, 0.0, 100.0, 1000, 800.0, None, 100.0, ((0.0, 100.0),))
    avail, delivered, loss = step_path(3000, [cbr, par], 10.0, 1500)
    assert (avail, delivered) == (1000.0, 1000.0)
    assert loss == pytest.approx(1 / 3, abs=1e-15)


def test_idle_source():
    assert deliver(0.0, 1000.0) == (0.0, 0.0)


def test_ftp_splits_residual_with_the_video():
    ftp = BackgroundFlow(FTP, 0, 0.0, 100.0, 1500, None, 1e6, 100.0)
    avail, _, _ = step_path(3000, [ftp], 5.0, 500)
    assert avail == 1500.0


def test_noiseless_probe():
    assert estimate_bandwidth(1234.5, np.random.default_rng(0), 0.0) == 1234.5


def test_probe_noise_statistics():
    est = estimate_bandwidth(np.full(10_000, 2000.0), np.random.default_rng(1), 0.10)
    assert np.all(np.abs(est / 2000.0 - 1) <= 0.10)
    assert abs(est.mean() / 2000.0 - 1) <= 0.005


def test_zero_bandwidth_probe():
    assert estimate_bandwidth(0.0, np.random.default_rng(2), 0.1) == 0.0


# -- PSNR -----------------------------------------------------------------------------------


def test_psnr_at_reference_rate():
    assert psnr_of_frame(700, False, 30.0) == 36.0


def test_psnr_rises_with_rate():
    values = [psnr_of_frame(r, False, 0.0) for r in (150, 300, 700, 1200, 2000)]
    assert values == sorted(values) and len(set(values)) == len(values)


def test_concealed_frame_drops_six():
    assert psnr_of_frame(700, True, 38.0) == 32.0
    assert psnr_of_frame(700, True, 23.0) == 20.0


@given(rate=st.floats(0, 1e5), lost=st.booleans(), prev=st.floats(20, 48))
def test_psnr_stays_in_bounds(rate, lost, prev):
    assert 20.0 <= psnr_of_frame(rate, lost, prev) <= 48.0


# -- controllers ------------------------------------------------------------------------------


def test_ton_examples():
    assert controller_ton(feedback([1000, 2000]), BOUNDS) == 1500
    assert controller_ton(feedback([2600, 2400]), BOUNDS) == 2000
    assert controller_ton(feedback([870.5]), BOUNDS) == 870.5


def test_don_examples():
    p = DonParams()
    assert controller_don(feedback([0], [2000]), 800, BOUNDS, p) == 800
    assert controller_don(feedback([0], [0]), 800, BOUNDS, p) == pytest.approx(640)
    assert controller_don(feedback([0], [0]), 110, BOUNDS, p) == 100
    assert controller_don(feedback([0], [4000]), 800, BOUNDS, p) == pytest.approx(960)
    assert controller_don(feedback([0], [4000]), 1900, BOUNDS, p) == 2000


def test_don_follows_the_smallest_buffer_and_never_raises_when_low():
    p = DonParams(b_target_ms=2000, b_low_ms=500, gain=0.2)
    assert controller_don(feedback([0, 0], [4000, 0]), 800, BOUNDS, p) == pytest.approx(640)
    assert controller_don(feedback([0], [400]), 800, BOUNDS, DonParams(2000, 500, -0.2)) == 800


RATE_SCHEME = DiscretizationScheme(RATE, tuple(GaussianTerm(1.0, b, 150.0) for b in (300, 700, 1100)), unit="kbps")
BW_SCHEME = DiscretizationScheme(EST_BW, (GaussianTerm(1.0, 800, 300), GaussianTerm(1.0, 2000, 300)), unit="kbps")
PSNR_SCHEME = DiscretizationScheme(PSNR, (GaussianTerm(1.0, 30, 2), GaussianTerm(1.0, 38, 2)), unit="dB")


def cabin_model(tunable=True):
    # rows over (est_bw, rate): high PSNR is likeliest at 700 kbps on a thin path
    rows = [[0.7, 0.3], [0.2, 0.8], [0.9, 0.1],
            [0.8, 0.2], [0.4, 0.6], [0.3, 0.7]]
    return build_model({EST_BW: 2, RATE: 3, PSNR: 2}, {(EST_BW, PSNR), (RATE, PSNR)},
                       {EST_BW: [0.5, 0.5], RATE: [1 / 3] * 3, PSNR: rows}, qos=PSNR,
                       tunable={RATE} if tunable else set(),
                       schemes={RATE: RATE_SCHEME, EST_BW: BW_SCHEME, PSNR: PSNR_SCHEME})


def test_cabin_picks_the_rate_class_the_tuner_picks():
    model = cabin_model()
    fb = feedback([850.0, 700.0])
    oracle = recommend(model, PSNR, 1, {EST_BW: 0})
    assert oracle.assignment == {RATE: 1}
    assert controller_cabin(model, fb, 500.0, BOUNDS) == 700.0


def test_cabin_without_tunable_rate_keeps_previous_rate():
    controller = CabinController(cabin_model(tunable=False))
    assert controller(feedback([850.0]), 640.0, BOUNDS) == (640.0, True)


def test_cabin_is_deterministic():
    controller = CabinController(cabin_model())
    fb = feedback([900.0, 2100.0, 1500.0])
    assert controller(fb, 500.0, BOUNDS) == controller(fb, 500.0, BOUNDS)


def test_cabin_needs_a_model():
    with pytest.raises(UntrainedModel):
        CabinController(None)
    with pytest.raises(UntrainedModel):
        run_session(ScenarioConfig(strategy="cabin", duration_s=5))


# -- sessions ----------------------------------------------------------------------------------


def test_clean_path_fixed_rate():
    cfg = ScenarioConfig(participants=3, strategy="fixed", fixed_rate_kbps=500, background=False, seed=1)
    report = run_session(cfg)
    assert all(r.loss_frac == 0 for r in report.records)
    assert report.starvation_count == 0
    assert abs(report.mean_throughput_kbps - 500) <= 1


def test_dead_link_pins_psnr_at_floor():
    cfg = ScenarioConfig(participants=2, duration_s=30, strategy="ton", background=False,
                         capacity_schedule=((0.0, 0.0),))
    report = run_session(cfg)
    assert np.all(report.frame_psnr == 20.0)
    assert all(s.received_frames == 0 for s in report.final_states)


def test_don_keeps_the_buffer_through_capacity_drops():
    schedule = ((0.0, 3000.0), (60.0, 1200.0), (150.0, 500.0), (220.0, 300.0))
    cfg = ScenarioConfig(participants=4, strategy="don", background=False, capacity_schedule=schedule,
                         initial_rate_kbps=1500, seed=3)
    report = run_session(cfg)
    after_warmup = [r for r in report.records if r.time_s >= cfg.epoch_s]
    assert all(r.stalls == 0 for r in report.records)
    assert min(r.buffer_ms for r in after_warmup) > 0


def test_frame_slots_per_participant():
    report = run_session(ScenarioConfig(participants=2, strategy="ton", seed=42))
    assert report.frame_psnr.shape == (2, 7500)
    assert sum(r.n_frames for r in report.records if r.participant_id == 0) == 7500


def test_session_is_deterministic():
    cfg = ScenarioConfig(participants=4, strategy="ton", seed=42, duration_s=60)
    a, b = run_session(cfg), run_session(cfg)
    assert a.trace_csv() == b.trace_csv()
    assert a.summary() == b.summary()


def test_trace_columns_in_fixed_order():
    report = run_session(ScenarioConfig(participants=2, duration_s=10, seed=1))
    header = report.trace_csv().splitlines()[0].split(",")
    assert tuple(header) == TRACE_COLUMNS


@pytest.mark.parametrize("strategy", ["ton", "don", "explore"])
@pytest.mark.parametrize("seed", [0, 7])
def test_session_invariants(strategy, seed):
    cfg = ScenarioConfig(participants=4, duration_s=120, strategy=strategy, seed=seed)
    report = run_session(cfg)
    recs = report.records
    assert all(r.buffer_ms >= 0 for r in recs)
    # delivered never exceeds the sending rate or the available bandwidth (epoch means of the tick-wise min)
    assert all(r.delivered_kbps <= min(r.video_rate_kbps, r.avail_bw_kbps) + 1e-9 for r in recs)
    assert np.all((report.frame_psnr >= 20.0) & (report.frame_psnr <= 48.0))
    # aggregates recomputed directly from the per-epoch records
    n_frames = sum(r.n_frames for r in recs)
    assert report.mean_psnr_db == pytest.approx(sum(r.frame_psnr_db * r.n_frames for r in recs) / n_frames, abs=1e-9)
    assert report.mean_psnr_db == pytest.approx(report.frame_psnr.mean(), abs=1e-9)
    n_ticks = sum(r.n_ticks for r in recs)
    assert report.mean_playback_delay_ms == pytest.approx(sum(r.buffer_ms * r.n_ticks for r in recs) / n_ticks,
                                                          abs=1e-9)
    # conservation: throughput is delivered bits over duration, per participant
    bits = sum(r.delivered_kbps * r.n_ticks * cfg.tick_s for r in recs)
    assert report.mean_throughput_kbps == pytest.approx(bits / (cfg.duration_s * cfg.participants), rel=1e-3)
    for s in report.final_states:
        assert s.received_frames + s.lost_frames == report.frame_psnr.shape[1]


def test_tick_level_delivery_bound():
    rates = np.linspace(0, 3000, 31)
    avail = np.linspace(3000, 0, 31)
    delivered, loss = deliver(rates, avail)
    assert np.all(delivered <= np.minimum(rates, avail))
    assert np.all((loss >= 0) & (loss <= 1))


def test_ton_outdelivers_don_when_capacity_binds():
    for seed in (1, 2):
        ton = run_session(ScenarioConfig(participants=4, strategy="ton", seed=seed))
        don = run_session(ScenarioConfig(participants=4, strategy="don", seed=seed))
        assert ton.mean_throughput_kbps >= don.mean_throughput_kbps


@pytest.mark.parametrize("changes", [
    {"participants": 0}, {"tick_s": 0.3}, {"rate_min_kbps": 2500}, {"strategy": "magic"},
    {"bw_noise_frac": 1.0}, {"duration_s": -5}, {"strategy": "fixed"},
    {"capacity_schedule": ((5.0, 100.0), (1.0, 200.0))},
])
def test_invalid_configs_rejected(changes):
    with pytest.raises(ConfigInvalid):
        ScenarioConfig(**changes)


def test_config_dict_round_trip():
    cfg = ScenarioConfig(participants=8, capacity_schedule=((0, 3000), (10, 1000)), psnr=PsnrModel(beta1=5.0))
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigInvalid):
        ScenarioConfig.from_dict({"bogus": 1})


# -- training ------------------------------------------------------------------------------------


def test_training_rows_pair_lagged_reports_with_the_next_choice():
    report = run_session(ScenarioConfig(participants=2, duration_s=10, strategy="explore", seed=5))
    rows = training_rows(report)
    p0 = [r for r in report.records if r.participant_id == 0]
    assert rows[RATE][0] == p0[1].video_rate_kbps
    assert rows[BUFFER][0] == p0[0].buffer_ms
    assert rows[PSNR][0] == p0[1].frame_psnr_db
    assert len(rows[RATE]) == 2 * (len(p0) - 1)


def test_rate_becomes_a_psnr_parent():
    # one 8-participant session gives 952 training rows (>= 800 epochs)
    hits = 0
    for seed in range(20):
        cfg = default_warmup(participants=8, sessions=1, seed=2000 + seed)
        model = train_cabin(cfg)
        hits += RATE in model.dag.parents(PSNR)
    assert hits >= 18


def test_constant_rate_warmup_is_single_valued():
    cfg = [ScenarioConfig(participants=4, duration_s=60, strategy="fixed", fixed_rate_kbps=700, seed=9)]
    model = train_cabin(cfg)
    assert model.node(RATE).cardinality == 1
    assert model.schemes[RATE].n_values == 1
    assert model.schemes[RATE].means == pytest.approx([700.0])
    # a one-valued parent never raises the score, so there is nothing to tune
    assert RATE not in model.dag.parents(PSNR)
    assert CabinController(model)(feedback([1000.0] * 4), 700.0, BOUNDS) == (700.0, True)


def test_trained_model_round_trips_bit_stably():
    model = train_cabin(default_warmup(participants=4, sessions=1))
    text = model.to_json()
    assert BayesianNetworkModel.from_json(text).to_json() == text
    assert model.qos_node == PSNR and model.node(RATE).tunable


def test_training_is_deterministic():
    cfg = default_warmup(participants=4, sessions=1)
    assert train_cabin(cfg).to_json() == train_cabin(cfg).to_json()


# -- comparison ---------------------------------------------------------------------------------


def test_comparison_counts_and_order():
    base = ScenarioConfig(duration_s=10)
    report = run_comparison(reps=5, strategies=("ton", "don"), base=base)
    assert len(report.cells) == 8
    assert sum(c.reps for c in report.cells) == 40
    assert [(c.participants, c.strategy) for c in report.cells][:2] == [(4, "don"), (4, "ton")]
    assert len(report.to_csv().splitlines()) == 1 + 8 * 3


def test_comparison_is_bit_identical_on_rerun():
    base = ScenarioConfig(duration_s=20)
    a = run_comparison(scenarios=(4, 8), reps=3, strategies=("ton", "don"), base=base)
    b = run_comparison(scenarios=(4, 8), reps=3, strategies=("ton", "don"), base=base)
    assert a.to_csv() == b.to_csv()


def test_parallel_comparison_matches_serial():
    base = ScenarioConfig(duration_s=20)
    serial = run_comparison(scenarios=(4,), reps=3, strategies=("ton",), base=base)
    parallel = run_comparison(scenarios=(4,), reps=3, strategies=("ton",), base=base, jobs=2)
    assert serial.to_csv() == parallel.to_csv()


def test_confidence_interval_narrows_with_more_reps():
    base = ScenarioConfig(duration_s=60)
    widths = {5: {"psnr_db": [], "throughput_kbps": []}, 20: {"psnr_db": [], "throughput_kbps": []}}
    # per-rep outcomes are heavy-tailed (Pareto bursts), so one 5-rep block can
    # undershoot its spread; the expected width is what scales as 1/sqrt(reps)
    for block in range(8):
        for reps in (5, 20):
            cell = run_comparison(scenarios=(4,), reps=reps, strategies=("ton",), base=base,
                                  seed=1 + 100 * block).cells[0]
            for metric in widths[reps]:
                s = cell.summary(metric)
                x = np.asarray(cell.samples[metric])
                assert s.width == pytest.approx(2 * 1.959963984540054 * x.std(ddof=1) / math.sqrt(x.size),
                                                rel=1e-12)
                widths[reps][metric].append(s.width)
    for metric in widths[5]:
        assert np.mean(widths[20][metric]) < np.mean(widths[5][metric])


def test_single_rep_has_no_interval():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_comparison(scenarios=(4,), reps=1, strategies=("ton",), base=ScenarioConfig(duration_s=10))
    assert any("confidence interval" in str(w.message) for w in caught)
    row = report.to_csv().splitlines()[1].split(",")
    assert row[4] == "" and row[5] == ""


def test_cabin_comparison_needs_a_model():
    with pytest.raises(ValueError):
        run_comparison(scenarios=(4,), reps=2, strategies=("cabin",), base=ScenarioConfig(duration_s=10))


def test_controller_feedback_is_the_lagged_probe():
    # the first probe sees the instantaneous avail; later probes see the previous epoch's mean
    cfg = ScenarioConfig(participants=1, duration_s=10, strategy="ton", seed=11, bw_noise_frac=0.0)
    recs = run_session(cfg).records
    assert recs[1].est_bw_kbps == pytest.approx(recs[0].avail_bw_kbps, rel=1e-9)
    assert recs[1].video_rate_kbps == pytest.approx(min(2000.0, max(100.0, recs[1].est_bw_kbps)), rel=1e-9)


def test_scheme_of_constant_training_column_is_degenerate():
    cols = {RATE: np.full(500, 700.0), EST_BW: np.random.default_rng(0).normal(1500, 200, 500),
            BUFFER: np.random.default_rng(1).normal(1000, 100, 500),
            PSNR: np.random.default_rng(2).normal(35, 2, 500)}
    model = train_from_columns(cols)
    assert model.node(RATE).cardinality == 1
