import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from syncsampler import artifacts
from syncsampler.denoisers import GMMDenoiser, PatchDenoiser, patch_mixture, two_cluster_mixture
from syncsampler.diffusion import SigmaPolicy, make_schedule
from syncsampler.errors import InvalidArgument, InvalidConfiguration
from syncsampler.experiments import (
    ABLATION_ROWS,
    INPAINT_VARIANTS,
    ExperimentReport,
    MetricSeries,
    boundary_mask,
    map_seeds,
    run_ablation_grid,
    run_divergence_sweep,
    run_inpainting_experiment,
    run_inpainting_seed,
    seam_score,
    thread_count,
)
from syncsampler.projections import EquirectProjector, MaskedProjector, RingProjector
from syncsampler.samplers import (
    SamplerConfig,
    Trace,
    ds_synctweedies,
    measurement_error,
    reverse_process,
    stochsync,
)

SCHED = make_schedule()
RING = RingProjector(16, 4)
SMALL_INPAINT = SamplerConfig(t_start=1000, t_stop=0, n_outer_steps=10, inner_steps=10)


# --- metric types ---------------------------------------------------------------------------

def test_metric_series_validation():
    s = MetricSeries("e", "v", 0, [(0, 900.0, 1.0), (1, 800.0, 0.005), (2, 700.0, 0.0)])
    assert s.first_below(1e-2) == 1
    assert s.first_below(-1) is None
    assert np.array_equal(s.values(), [1.0, 0.005, 0.0])
    with pytest.raises(InvalidArgument):
        MetricSeries("e", points=[(1, 0.0, 1.0), (1, 0.0, 1.0)])
    with pytest.raises(InvalidArgument):
        MetricSeries("e", points=[(0, 0.0, float("nan"))])


def test_report_rows_are_ordered():
    r = ExperimentReport("x", {}, series=[MetricSeries("a", "v", 3, [(0, 10.0, 1.5), (2, 5.0, 0.5)])])
    assert list(r.metric_rows()) == [("x", "v", 3, 0, 10.0, "a", 1.5), ("x", "v", 3, 2, 5.0, "a", 0.5)]


# --- measurement error --------------------------------------------------------------------------

def test_measurement_error_examples(rs):
    x, y = rs.normal(size=3), rs.normal(size=3)
    mask = np.array([1.0, 0.0, 1.0])
    assert measurement_error(np.where(mask == 1, y, x), mask, mask * y) == 0.0
    assert measurement_error(x, np.zeros(3), np.zeros(3)) == 0.0
    assert measurement_error(np.array([3.0, 9.0]), np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 4.0
    with pytest.raises(InvalidArgument):
        measurement_error(x, mask[:2], y)


# --- seam score -----------------------------------------------------------------------------------

def test_ring_boundaries_are_ownership_changes():
    boundary, covered = boundary_mask(RING, RING.view_set(0))
    assert covered.all()
    assert np.flatnonzero(boundary).tolist() == [0, 3, 4, 7, 8, 11, 12, 15]


def test_constant_scores_one():
    assert seam_score(np.full(16, 2.5), RING, RING.view_set(0)) == 1.0
    proj = EquirectProjector(16, view_size=6)
    assert seam_score(np.full(proj.canonical_shape, -1.0), proj) == 1.0


def _smooth(amp=0.01):
    return amp * np.sin(2 * np.pi * np.arange(16) / 16)


def test_step_on_boundary_scores_high():
    h = 1.0
    smooth = _smooth()
    z = smooth + h * (np.arange(16) >= 8)  # jump between texels 7 and 8, a view boundary
    g_max = np.max(np.abs(np.roll(smooth, -1) - np.roll(smooth, 1)) / 2)
    # both texels beside the jump see at least h/2 - g_max; the interior never sees it
    bound = (h - 2 * g_max) / (8 * g_max)
    # the wrap from texel 15 to 0 also jumps, which only raises the boundary mean
    assert seam_score(z, RING, RING.view_set(0)) >= bound > 10


def test_moving_step_off_boundary_lowers_score():
    on = _smooth() + (np.arange(16) % 8 >= 4) * 1.0  # jumps at 3|4, 7|8, 11|12, 15|0
    off = np.roll(on, 2)  # same texture, jumps now inside the windows
    assert seam_score(off, RING, RING.view_set(0)) < seam_score(on, RING, RING.view_set(0))


def test_degenerate_layout_rejected():
    whole = RingProjector(8, 8)
    with pytest.raises(InvalidArgument):
        seam_score(np.arange(8.0), whole, whole.view_set(0))
    with pytest.raises(InvalidArgument):
        seam_score(np.zeros(3), MaskedProjector(mask=np.ones(3), measurement=np.zeros(3)))


def test_disjoint_ring_solve_of_continuous_target_is_seamless():
    target = np.abs(np.arange(16) - 8.0)  # triangle wave, continuous on the ring
    views = RING.view_set(0)
    z = RING.aggregate([(v, RING.project(target, v)) for v in views])
    assert np.array_equal(z, target)
    assert seam_score(z, RING, views) <= 1 + 1e-6


def test_equirect_union_layout_has_boundary_and_interior():
    proj = EquirectProjector(32, view_size=8)
    boundary, covered = boundary_mask(proj, proj.fixed_views())
    assert boundary.any() and (covered & ~boundary).any()
    assert not boundary[~covered].any()


# --- inpainting -------------------------------------------------------------------------------------

def test_fully_observed_pins_every_sync_to_measurement(rs):
    gmm = two_cluster_mixture(2)
    y = rs.normal(size=2)
    proj = MaskedProjector(mask=np.ones(2), measurement=y)
    for variant in INPAINT_VARIANTS.values():
        trace = Trace()
        cfg = replace(SMALL_INPAINT, **variant)
        if cfg.algorithm == "ds":
            ds_synctweedies(GMMDenoiser(gmm), proj, cfg, SCHED, trace)
        else:
            stochsync(GMMDenoiser(gmm), proj, cfg, SCHED, trace)
        assert all(np.array_equal(rec.z, y) for rec in trace)


@given(st.integers(0, 2**31), st.lists(st.sampled_from([0.0, 1.0]), min_size=3, max_size=3))
def test_observed_region_matches_after_every_sync(seed, mask):
    mask = np.array(mask)
    rs = np.random.default_rng(seed)
    y = mask * rs.normal(size=3)
    gmm = two_cluster_mixture(3)
    trace = Trace()
    cfg = replace(SMALL_INPAINT, algorithm="ds", sigma_policy=SigmaPolicy.MAX, seed=seed % 1000)
    ds_synctweedies(GMMDenoiser(gmm), MaskedProjector(mask=mask, measurement=y), cfg, SCHED, trace)
    assert all(measurement_error(rec.z, mask, y) == 0.0 for rec in trace)


def test_unobserved_zero_sigma_equals_reverse_process():
    gmm = two_cluster_mixture(2)
    proj = MaskedProjector(mask=np.zeros(2), measurement=np.zeros(2))
    cfg = replace(SMALL_INPAINT, algorithm="ds", seed=8)
    a, b = Trace(), Trace()
    ds_synctweedies(GMMDenoiser(gmm), proj, cfg, SCHED, a)
    reverse_process(GMMDenoiser(gmm), cfg, SCHED, (2,), b)
    assert all(np.array_equal(ra.z, rb.z) for ra, rb in zip(a, b))


def test_inpainting_seed_series_shape():
    res = run_inpainting_seed(3, two_cluster_mixture(2), np.array([1.0, 0.0]), SCHED, SMALL_INPAINT)
    assert set(res) == set(INPAINT_VARIANTS)
    for series, z in res.values():
        assert [s.name for s in series] == ["measurement_error", "measurement_error_x0"]
        assert len(series[0].points) == len(SMALL_INPAINT.grid())
        assert z.shape == (2,)


def test_inpainting_report_and_thread_independence(monkeypatch):
    monkeypatch.setenv("SYNCSAMPLER_THREADS", "1")
    a = run_inpainting_experiment(seeds=range(4), base=SMALL_INPAINT)
    monkeypatch.setenv("SYNCSAMPLER_THREADS", "3")
    b = run_inpainting_experiment(seeds=range(4), base=SMALL_INPAINT)
    assert list(a.metric_rows()) == list(b.metric_rows())
    assert a.table == b.table
    names = [row["variant"] for row in a.table]
    assert names == ["zero", "max", "stochsync"]
    assert all(len(v) == 4 for v in a.summary["steps_to_threshold"].values())


def test_thread_count_parsing(monkeypatch):
    monkeypatch.setenv("SYNCSAMPLER_THREADS", "0")
    assert thread_count() == 1
    monkeypatch.setenv("SYNCSAMPLER_THREADS", "many")
    with pytest.raises(InvalidConfiguration):
        thread_count()
    monkeypatch.setenv("SYNCSAMPLER_THREADS", "4")
    assert map_seeds(lambda s: s * s, range(10)) == [s * s for s in range(10)]


# --- divergence -------------------------------------------------------------------------------------

def test_single_step_policies_coincide():
    rep = run_divergence_sweep([1], n_chains=50, seed=2)
    assert rep.images["max_1"].tolist() == rep.images["zero_1"].tolist()
    assert rep.summary["nll"]["max_1"] == rep.summary["nll"]["zero_1"]


def test_divergence_table_layout():
    rep = run_divergence_sweep([10, 100], n_chains=20)
    assert [(r["policy"], r["steps"]) for r in rep.table] == [
        ("max", 10), ("max", 100), ("zero", 10), ("zero", 100)]
    assert all(np.isfinite(r["nll"]) for r in rep.table)


# --- ablation ----------------------------------------------------------------------------------------

def test_ablation_rows_respect_constraint():
    assert [r[0] for r in ABLATION_ROWS] == [1, 2, 3, 4, 5, 6]
    assert all(max_sigma for _, max_sigma, _, nonoverlap in ABLATION_ROWS if nonoverlap)
    assert len({r[1:] for r in ABLATION_ROWS}) == 6


def _tiny_ablation(rows=ABLATION_ROWS):
    proj = EquirectProjector(24, view_size=8, n_views=5)
    den = PatchDenoiser(patch_mixture())
    base = SamplerConfig(n_outer_steps=3, inner_steps=4)
    return run_ablation_grid(base, seeds=range(2), proj=proj, den=den, sched=SCHED, rows=rows)


def test_ablation_invalid_row_skipped_with_reason(caplog):
    with caplog.at_level(logging.WARNING):
        rep = _tiny_ablation(rows=ABLATION_ROWS[:1] + ((7, False, False, True),))
    assert [r["id"] for r in rep.table] == [1]
    assert "skipping ablation row 7" in caplog.text


def test_ablation_is_deterministic(tmp_path):
    paths = []
    for k in range(2):
        rep = _tiny_ablation()
        p = tmp_path / f"t{k}.csv"
        m = tmp_path / f"m{k}.csv"
        artifacts.write_table_csv(rep.table, p)
        artifacts.write_metrics_csv(rep, m)
        paths.append((p.read_bytes(), m.read_bytes()))
    assert paths[0] == paths[1]
    assert [r["id"] for r in rep.table] == [1, 2, 3, 4, 5, 6]
