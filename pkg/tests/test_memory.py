import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppum.gridmap import GridSpec, MixtureModel, ProbabilityGrid, isotropic_mixture, uniform_grid
from ppum.memory import (
    FusionConfig,
    LayerKind,
    MassAssignment,
    MemoryLayer,
    PartiallyUpdatedMemory,
    PeriodicOlmModel,
    VacuousFusionError,
    balance_masses,
    bpa_from_layer,
    ds_combine,
    fit_periodic_olm,
    fov_footprint,
    fuse_layers,
    fused_belief,
    load_olm_schedule,
    olm_predict,
    save_olm_schedule,
    sensor_weight,
    working_memory_layer,
)

SPEC2 = GridSpec(2.0, 2)
ALL2 = np.ones((2, 2), dtype=bool)


def _layer(values, kind=LayerKind.OLM, footprint=ALL2):
    return MemoryLayer(ProbabilityGrid(SPEC2, np.asarray(values, dtype=np.float64).reshape(2, 2)), footprint, kind)


def test_bpa_examples():
    m = bpa_from_layer(_layer([0.3, 0.7, 0.0, 0.0]))
    np.testing.assert_allclose(m.crowded.reshape(-1), [0.3, 0.7, 0.0, 0.0])
    np.testing.assert_allclose(m.not_crowded.reshape(-1), [0.7, 0.3, 1.0, 1.0])
    m = bpa_from_layer(_layer([1.0, 0.0, 0.0, 0.0]))
    assert m.crowded[0, 0] == 1.0 and m.not_crowded[0, 0] == 0.0


def test_mass_closure():
    with pytest.raises(ValueError):
        MassAssignment(0.6, 0.6)
    with pytest.raises(ValueError):
        MassAssignment(-0.1, 1.1)


def test_sensor_weight_examples():
    assert sensor_weight(0.0, FusionConfig()) == (1.0, 0.0)
    w_s, _ = sensor_weight(1e6, FusionConfig())
    assert w_s == pytest.approx(0.5)
    w_s, w_f = sensor_weight(math.log(2.0), FusionConfig(gamma=1.0))
    assert w_s == pytest.approx(0.75)
    assert w_f == pytest.approx(0.25)


def test_balance_is_identity_when_sources_agree():
    m = MassAssignment(0.3, 0.7)
    _, balanced = balance_masses(m, m, 0.8)
    assert balanced.crowded == pytest.approx(0.3)


def test_balance_examples():
    _, balanced = balance_masses(MassAssignment(0.8, 0.2), MassAssignment(0.4, 0.6), 0.7)
    assert balanced.crowded == pytest.approx(0.96)
    assert balanced.not_crowded == pytest.approx(0.04)
    # raw value 1.54 is clamped and the pair renormalized
    _, balanced = balance_masses(MassAssignment(0.9, 0.1), MassAssignment(0.1, 0.9), 0.9)
    assert (balanced.crowded, balanced.not_crowded) == (1.0, 0.0)


def test_combination_examples():
    assert ds_combine(MassAssignment(0.5, 0.5), MassAssignment(0.5, 0.5)).crowded == pytest.approx(0.5)
    assert ds_combine(MassAssignment(1.0, 0.0), MassAssignment(1.0, 0.0)).crowded == pytest.approx(1.0)
    fused = ds_combine(MassAssignment(0.8, 0.2), MassAssignment(0.96, 0.04))
    assert fused.crowded == pytest.approx(0.98969, abs=1e-5)


def _oracle(s, f, w):
    """Balanced then combined crowded mass, one cell at a time."""
    mean_c = w * s + (1 - w) * f
    mean_nc = w * (1 - s) + (1 - w) * (1 - f)
    fc, fnc = 2 * mean_c - f, 2 * mean_nc - (1 - f)
    if not (0.0 <= fc <= 1.0 and 0.0 <= fnc <= 1.0):
        fc, fnc = min(max(fc, 0.0), 1.0), min(max(fnc, 0.0), 1.0)
        fc, fnc = fc / (fc + fnc), fnc / (fc + fnc)
    kappa = s * fnc + (1 - s) * fc
    return s * fc / (1 - kappa)


def test_fusion_matches_cellwise_oracle():
    rng = np.random.default_rng(0)
    for w in np.linspace(0.5, 1.0, 10):
        s, f = rng.uniform(size=10_000), rng.uniform(size=10_000)
        m_s, m_f = balance_masses(MassAssignment(s, 1 - s), MassAssignment(f, 1 - f), w)
        fused = ds_combine(m_s, m_f).crowded
        expected = np.array([_oracle(a, b, w) for a, b in zip(s, f)])
        np.testing.assert_allclose(fused, expected, rtol=0.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(0.0, 100.0), st.floats(1e-3, 10.0))
def test_sensor_weight_range(a, b, gamma):
    config = FusionConfig(gamma=gamma)
    lo, hi = sorted((a, b))
    w_lo, _ = sensor_weight(lo, config)
    w_hi, _ = sensor_weight(hi, config)
    assert 0.5 <= w_hi <= w_lo <= 1.0


def test_sensor_weight_decreases_to_one_half():
    config = FusionConfig(gamma=20.0)
    assert sensor_weight(0.0, config) == (1.0, 0.0)
    weights = [sensor_weight(s, config)[0] for s in np.linspace(0.0, 0.5, 51)]
    assert all(b < a for a, b in zip(weights, weights[1:]))
    assert sensor_weight(1e3, config) == (0.5, 0.5)


def test_very_uncertain_tracks_still_fuse():
    olm = _layer([0.1, 0.2, 0.3, 0.4])
    wm = _layer([0.4, 0.3, 0.2, 0.1], LayerKind.WM)
    belief, vacuous = fused_belief(wm, olm, 1e6, FusionConfig())
    assert np.all(np.isfinite(belief)) and not vacuous.any()


def test_total_conflict_is_vacuous():
    with pytest.raises(VacuousFusionError, match="vacuous fusion"):
        ds_combine(MassAssignment(1.0, 0.0), MassAssignment(0.0, 1.0))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.501, 1.0))
def test_fused_masses_stay_closed(s, f, w_s):
    m_s, m_f = balance_masses(MassAssignment(s, 1.0 - s), MassAssignment(f, 1.0 - f), w_s)
    assert 0.0 <= m_f.crowded <= 1.0
    assert m_f.crowded + m_f.not_crowded == pytest.approx(1.0, abs=1e-12)
    try:
        fused = ds_combine(m_s, m_f)
    except VacuousFusionError:
        return
    assert 0.0 <= fused.crowded <= 1.0 + 1e-12


def test_empty_wm_keeps_olm():
    olm = _layer([0.1, 0.2, 0.3, 0.4])
    fm = fuse_layers(None, olm, None)
    assert fm.kind == LayerKind.FM
    np.testing.assert_array_equal(fm.grid.values, olm.grid.values)


def test_agreeing_layers_follow_combination_table():
    olm = _layer([0.5, 0.5, 0.0, 0.0])
    wm = _layer([0.5, 0.5, 0.0, 0.0], LayerKind.WM)
    belief, vacuous = fused_belief(wm, olm, 0.05, FusionConfig())
    np.testing.assert_allclose(belief.reshape(-1), [0.5, 0.5, 0.0, 0.0])
    assert not vacuous.any()


def test_sensor_dominates_anomaly_cell():
    olm = _layer([0.05, 0.35, 0.3, 0.3])
    wm = _layer([0.9, 0.05, 0.03, 0.02], LayerKind.WM)
    belief, _ = fused_belief(wm, olm, 0.001, FusionConfig())
    assert belief[0, 0] > 0.8
    fm = fuse_layers(wm, olm, 0.001)
    assert fm.grid.values[0, 0] > olm.grid.values[0, 0]
    assert fm.grid.values.sum() == pytest.approx(1.0)


def test_fusion_checks_specs():
    olm = _layer([0.25] * 4)
    other = MemoryLayer(uniform_grid(GridSpec(4.0, 4)), np.ones((4, 4), dtype=bool), LayerKind.WM)
    with pytest.raises(ValueError, match="mismatch"):
        fuse_layers(other, olm, 0.1)
    with pytest.raises(ValueError, match="sigma_bar"):
        fused_belief(_layer([0.25] * 4, LayerKind.WM), olm, None, FusionConfig())


def test_fusion_outside_footprint_is_olm():
    olm = _layer([0.1, 0.2, 0.3, 0.4])
    footprint = np.array([[True, False], [False, False]])
    wm = _layer([0.7, 0.1, 0.1, 0.1], LayerKind.WM, footprint)
    belief, _ = fused_belief(wm, olm, 0.01, FusionConfig())
    np.testing.assert_allclose(belief[~footprint], olm.grid.values[~footprint])


def test_olm_footprint_must_be_full():
    with pytest.raises(ValueError):
        _layer([0.25] * 4, LayerKind.OLM, np.zeros((2, 2), dtype=bool))


def _two_bin_model():
    left = isotropic_mixture([(2.0, 5.0)], 0.5)
    right = isotropic_mixture([(8.0, 5.0)], 0.5)
    return PeriodicOlmModel(10.0, ((0.0, left), (5.0, right)))


def test_single_bin_is_time_independent(small_spec):
    model = PeriodicOlmModel(10.0, ((0.0, isotropic_mixture([(5.0, 5.0)], 1.0)),))
    a = olm_predict(model, 1.0, small_spec)
    b = olm_predict(model, 123.4, small_spec)
    np.testing.assert_array_equal(a.grid.values, b.grid.values)


def test_bins_follow_time_of_cycle(small_spec):
    model = _two_bin_model()
    grid = olm_predict(model, 22.0, small_spec).grid
    assert grid.values[:, :5].sum() > 0.9
    grid = olm_predict(model, 27.0, small_spec).grid
    assert grid.values[:, 5:].sum() > 0.9
    assert olm_predict(model, -3.0, small_spec).grid.values[:, 5:].sum() > 0.9


def test_empty_bin_has_no_prior(small_spec):
    model = PeriodicOlmModel(10.0, ((0.0, isotropic_mixture([(5.0, 5.0)], 1.0)), (5.0, MixtureModel())))
    with pytest.raises(ValueError, match="no prior for time t"):
        olm_predict(model, 6.0, small_spec)


def test_fit_periodic_olm(small_spec):
    snapshots = [(float(t), [(2.0, 5.0), (2.5, 5.0)]) for t in range(0, 5)]
    snapshots += [(float(t), [(8.0, 5.0)]) for t in range(5, 10)]
    model = fit_periodic_olm(snapshots, 10.0, 5.0, bandwidth=0.5)
    assert model.starts == [0.0, 5.0]
    assert olm_predict(model, 1.0, small_spec).grid.values[:, :5].sum() > 0.9
    assert olm_predict(model, 6.0, small_spec).grid.values[:, 5:].sum() > 0.9


def test_fit_caps_component_count():
    rng = np.random.default_rng(0)
    snapshots = [(0.0, rng.uniform(0, 10, size=(500, 2)))]
    model = fit_periodic_olm(snapshots, 10.0, 10.0, bandwidth=0.5, max_components=20)
    assert 0 < len(model.bins[0][1]) <= 20
    assert model.bins[0][1].weights.sum() == pytest.approx(1.0)


def test_schedule_file(tmp_path, small_spec):
    model = _two_bin_model()
    loaded = load_olm_schedule(save_olm_schedule(model, str(tmp_path / "olm.json")))
    assert loaded.starts == model.starts
    np.testing.assert_allclose(
        olm_predict(loaded, 6.0, small_spec).grid.values, olm_predict(model, 6.0, small_spec).grid.values
    )


def test_working_memory_layer(small_spec):
    assert working_memory_layer(MixtureModel(), small_spec, (5, 5), 3.0) is None
    layer = working_memory_layer(isotropic_mixture([(5.0, 5.0)], 0.5), small_spec, (5, 5), 3.0)
    assert layer.kind == LayerKind.WM
    np.testing.assert_array_equal(layer.footprint, fov_footprint(small_spec, (5, 5), 3.0))
    assert not layer.footprint[0, 0] and layer.footprint[5, 5]


def test_partially_updated_memory_fades(small_spec):
    olm = olm_predict(PeriodicOlmModel(10.0, ((0.0, isotropic_mixture([(2.0, 2.0)], 1.0)),)), 0.0, small_spec)
    wm = working_memory_layer(isotropic_mixture([(7.5, 7.5)], 0.5), small_spec, (7.5, 7.5), 3.0)
    pum = PartiallyUpdatedMemory(horizon=40.0)
    assert pum.predict(olm, 0.0).grid is olm.grid

    pum.update(wm, olm, 10.0)
    assert pum.fade(30.0) == pytest.approx(0.5)
    hot = pum.predict(olm, 10.0)
    assert hot.kind == LayerKind.PUM
    assert hot.grid.values[7, 7] > olm.grid.values[7, 7]
    assert pum.predict(olm, 30.0).grid.values[7, 7] < hot.grid.values[7, 7]
    np.testing.assert_array_equal(pum.predict(olm, 60.0).grid.values, olm.grid.values)
