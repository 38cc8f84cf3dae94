import numpy as np
import pytest

from cardiotwin.analysis import ed_es_volumes, ef_from_volumes
from cardiotwin.data import (
    MEASUREMENT_DIM,
    DatasetError,
    FinetuneDataset,
    Measurement,
    ParamBounds,
    Renderer,
    final_cycle_waveform,
    generate_finetune_dataset,
    generate_pretext_dataset,
    grid_counts,
    render_measurement,
    sample_params,
    sample_thetas,
)
from cardiotwin.model import DEFAULT_RANGES, LEARNABLE, ParameterError, PatientParams
from cardiotwin.solver import simulate_batch, simulate_cycles


@pytest.fixture(scope="module")
def corpus():
    """500 final-cycle trajectories at default bounds."""
    params = sample_params(500, seed=21)
    return [t for t in simulate_batch(params) if t is not None]


# -- sampling -----------------------------------------------------------------

def test_degenerate_bounds_single_point():
    point = PatientParams.reference()
    ranges = {k: (getattr(point, k), getattr(point, k)) for k in LEARNABLE}
    bounds = ParamBounds(ranges)
    assert sample_params(1, bounds, 3) == [point]


def test_uniform_means():
    bounds = ParamBounds()
    th = sample_thetas(10000, bounds, 0)
    mid = 0.5 * (bounds.lo + bounds.hi)
    assert np.all(np.abs(th.mean(axis=0) - mid) <= 0.02 * mid)


def test_grid_128_two_levels():
    bounds = ParamBounds()
    assert grid_counts(128, 7) == [2] * 7
    th = sample_thetas(128, bounds, 0, "grid")
    assert len(np.unique(th, axis=0)) == 128
    for j in range(7):
        assert set(th[:, j]) == {bounds.lo[j], bounds.hi[j]}


def test_grid_truncates_to_n():
    th = sample_thetas(3840, ParamBounds(), 0, "grid")
    assert th.shape == (3840, 7)
    assert grid_counts(3840, 7)[0] == 4


@pytest.mark.parametrize("mode", ["uniform", "grid"])
def test_samples_inside_bounds(mode):
    bounds = ParamBounds().with_overrides({"e_max": (1.0, 2.0), "t_c": (0.6, 0.9)})
    ps = sample_params(700, bounds, 5, mode)
    assert all(bounds.contains(p) for p in ps)


def test_sampling_deterministic():
    assert np.array_equal(sample_thetas(50, ParamBounds(), 9), sample_thetas(50, ParamBounds(), 9))
    assert not np.array_equal(sample_thetas(50, ParamBounds(), 9), sample_thetas(50, ParamBounds(), 10))


def test_bounds_validation():
    with pytest.raises(ParameterError):
        ParamBounds().with_overrides({"r_m": (0.1, 0.1)})
    with pytest.raises(ParameterError):
        ParamBounds().with_overrides({"r_c": (0.1, 0.2)})
    bad = dict(DEFAULT_RANGES)
    bad["v_d"] = (20.0, 3.0)
    with pytest.raises(ParameterError):
        ParamBounds(bad)
    with pytest.raises(ValueError):
        sample_thetas(0, ParamBounds(), 0)
    with pytest.raises(ValueError):
        sample_thetas(3, ParamBounds(), 0, "sobol")


def test_bounds_dict_round_trip():
    b = ParamBounds().with_overrides({"r_a": (0.0005, 0.002)})
    assert ParamBounds.from_dict(b.to_dict()) == b
    with pytest.raises(ParameterError):
        ParamBounds.from_dict({"ranges": b.ranges, "extra": 1})


# -- pretext --------------------------------------------------------------------

def test_pretext_small_deterministic_and_ordered():
    a = generate_pretext_dataset(60, seed=4)
    b = generate_pretext_dataset(60, seed=4)
    assert np.array_equal(a.thetas, b.thetas) and np.array_equal(a.volumes, b.volumes)
    assert np.all(a.volumes[:, 0] >= a.volumes[:, 1])
    assert a.meta["seed"] == 4 and a.meta["n"] == 60


def test_pretext_spot_check_against_finer_solve():
    ds = generate_pretext_dataset(5, seed=11)
    ex = ds.examples[0]
    fine = ed_es_volumes(simulate_cycles(PatientParams.from_theta(ex.theta), n_cycles=3, steps_per_cycle=20000))
    assert abs(fine.v_ed - ex.v_ed) < 0.5 and abs(fine.v_es - ex.v_es) < 0.5


def test_failure_rate_enforced():
    # a box pinned at the most extreme corner cannot produce valid hearts
    corner = {"r_m": (0.0050, 0.0051), "r_a": (1e-4, 1.01e-4), "e_max": (3.49, 3.5), "e_min": (0.099, 0.1),
              "t_c": (1.69, 1.7), "start_v": (279, 280)}
    with pytest.raises(DatasetError):
        generate_pretext_dataset(20, ParamBounds().with_overrides(corner), seed=0)


# -- measurement operator ------------------------------------------------------------

def test_render_deterministic_and_bounded(ref_traj):
    a = render_measurement(ref_traj, 0, 0.0)
    b = render_measurement(ref_traj, 0, 0.0)
    assert np.array_equal(a.y, b.y)
    assert a.y.shape == (MEASUREMENT_DIM,)
    assert np.all(np.abs(a.y) < 1)
    assert not np.array_equal(a.y, render_measurement(ref_traj, 1, 0.0).y)


def test_render_labels_match_ed_es(ref_traj):
    m = render_measurement(ref_traj)
    ee = ed_es_volumes(ref_traj)
    assert m.labels == (ee.v_ed, ee.v_es)
    assert np.array_equal(m.true_theta, ref_traj.params.theta())


def test_render_noise_seeded(ref_traj):
    clean = render_measurement(ref_traj, 0, 0.0).y
    a = render_measurement(ref_traj, 0, 0.05, np.random.default_rng(3)).y
    b = render_measurement(ref_traj, 0, 0.05, np.random.default_rng(3)).y
    assert np.array_equal(a, b)
    assert 0.02 < np.std(a - clean) < 0.08


def test_renderer_weights_frozen():
    r = Renderer(0)
    with pytest.raises(ValueError):
        r.w1[0, 0] = 0.0
    assert np.array_equal(Renderer(0).w2, r.w2)


def test_waveform_sampling(ref_traj):
    w = final_cycle_waveform(ref_traj)
    assert w.shape == (32,)
    m = ref_traj.samples_per_cycle
    assert w[0] == ref_traj.v_lv[2 * m]


def test_injectivity_on_corpus(corpus):
    ms = [render_measurement(t) for t in corpus]
    ys = np.array([m.y for m in ms])
    vols = np.array([m.labels for m in ms])
    vol_gap = np.abs(vols[:, None, :] - vols[None, :, :]).max(axis=-1)
    y_dist = np.linalg.norm(ys[:, None, :] - ys[None, :, :], axis=-1)
    pairs = vol_gap > 5
    assert pairs.sum() > 0
    assert y_dist[pairs].min() > 0


@pytest.mark.xfail(strict=True, reason="EF tops out near 0.76 inside the default parameter box")
def test_ef_coverage_default_bounds(corpus):
    ef = np.array([ed_es_volumes(t).ef for t in corpus])
    assert ef.min() <= 0.1 and ef.max() >= 0.8


def test_ef_coverage_lower_end_and_observed_max(corpus):
    ef = np.array([ed_es_volumes(t).ef for t in corpus])
    assert ef.min() <= 0.15
    assert 0.65 < ef.max() < 0.8


# -- finetune ----------------------------------------------------------------------

def test_split_sizes():
    fake = [Measurement(np.zeros(4), 2.0, 1.0, np.zeros(7)) for _ in range(1000)]
    ds = FinetuneDataset(fake, [], {})
    sizes = {k: len(v) for k, v in ds.split_indices().items()}
    assert sizes == {"train": 800, "val": 100, "test": 100}


def test_finetune_labels_and_determinism():
    a = generate_finetune_dataset(30, seed=3, render_seed=2, noise_sigma=0.01)
    b = generate_finetune_dataset(30, seed=3, render_seed=2, noise_sigma=0.01)
    assert np.array_equal(a.ys, b.ys) and np.array_equal(a.labels, b.labels)
    params = sample_params(30, seed=3)
    traj = simulate_batch(params[:1])[0]
    m = render_measurement(traj, 2, 0.0)
    assert a.labels[0].tolist() == list(m.labels)
    assert np.array_equal(a.thetas[0], params[0].theta())
    assert ef_from_volumes(*a.labels.T).max() < 1
    c = generate_finetune_dataset(30, seed=3, render_seed=2, noise_sigma=0.0)
    assert np.array_equal(a.labels, c.labels) and not np.array_equal(a.ys, c.ys)
