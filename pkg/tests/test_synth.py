import numpy as np
import pytest

from cortolam.config import SynthConfig
from cortolam.data import N_CLASSES, LayerClass
from cortolam.errors import ConfigError
from cortolam.synth import (
    calibrate_disagreement,
    generate,
    layer_at,
    mean_pairwise_agreement,
    simulate_raters,
    synth_rater_labels,
)

SMALL = dict(width_um=400.0, height_um=1000.0, wave_amplitude_um=15.0, wave_length_um=400.0)


@pytest.fixture(scope="module")
def small_section():
    return generate(SynthConfig(**SMALL, seed=5))


def test_generate_deterministic(small_section):
    neurons, truth = small_section
    again, again_truth = generate(SynthConfig(**SMALL, seed=5))
    for name, column in again.to_columns().items():
        np.testing.assert_array_equal(column, neurons.to_columns()[name])
    np.testing.assert_array_equal(again_truth.layers, truth.layers)
    other, _ = generate(SynthConfig(**SMALL, seed=6))
    assert len(other) != len(neurons) or not np.array_equal(other.x_um, neurons.x_um)


def test_generate_records_are_valid(small_section):
    neurons, truth = small_section
    assert len(neurons) > 1000
    # Iterating validates every record
    records = list(neurons)
    assert len(records) == len(neurons)
    np.testing.assert_array_equal(neurons.ids, np.arange(1, len(neurons) + 1))
    assert np.all((neurons.x_um >= 0) & (neurons.x_um <= SMALL["width_um"]))
    assert np.all((neurons.y_um >= 0) & (neurons.y_um <= SMALL["height_um"]))


def test_generate_bands_self_consistent(small_section):
    neurons, truth = small_section
    np.testing.assert_array_equal(layer_at(truth.boundaries(neurons.x_um), neurons.y_um), truth.layers)
    assert set(truth.layers.tolist()) == set(range(N_CLASSES))
    # Bands are ordered I to WM from the pial surface down
    mean_depth = [neurons.y_um[truth.layers == c].mean() for c in range(N_CLASSES)]
    assert mean_depth == sorted(mean_depth)
    labels = truth.labels()
    assert labels.rater_id == "truth"
    assert len(labels) == len(neurons)


def test_generate_band_densities():
    # Whole wave periods across the width keep each band's area at its nominal value
    cfg = SynthConfig(
        width_um=1600.0, height_um=2000.0, wave_amplitude_um=15.0, wave_length_um=400.0, seed=1
    )
    neurons, truth = generate(cfg)
    section_mm2 = cfg.width_um * cfg.height_um * 1e-6
    checked = 0
    for layer, band in zip(LayerClass, cfg.layer_bands):
        expected = band.density * band.thickness * section_mm2
        if expected < 1000:
            continue
        realized = np.count_nonzero(truth.layers == layer) / (band.thickness * section_mm2)
        assert realized == pytest.approx(band.density, rel=0.10)
        checked += 1
    assert checked == 5


def test_generate_largest_neurons_in_layer_iii():
    neurons, truth = generate(SynthConfig(width_um=1000.0, seed=2))
    largest = np.argsort(-neurons.area_um2, kind="stable")[:500]
    counts = np.bincount(truth.layers[largest], minlength=N_CLASSES)
    assert int(np.argmax(counts)) == LayerClass.III


def test_rater_without_disagreement_is_truth(small_section):
    neurons, truth = small_section
    labels = synth_rater_labels(truth, 0.0, seed=3)
    window = truth.labeled(neurons.x_um)
    assert labels.ids() == neurons.ids[window].tolist()
    expected = truth.labels()
    assert all(layer == expected.labels[i] for i, layer in labels.labels.items())
    with pytest.raises(ConfigError):
        synth_rater_labels(truth, -1.0, seed=3)


def test_agreement_decreases_with_disagreement(small_section):
    _, truth = small_section
    agreement = [mean_pairwise_agreement(truth, amp, seed=9, n_raters=3) for amp in (5.0, 20.0, 60.0)]
    assert agreement[0] >= agreement[1] >= agreement[2]
    assert agreement[0] < 1.0
    assert mean_pairwise_agreement(truth, 0.0, seed=9, n_raters=3) == 1.0


def test_calibrate_disagreement(small_section):
    _, truth = small_section
    calibration = calibrate_disagreement(truth, target=0.80, n_raters=3, seed=4)
    assert calibration.disagreement_um > 0
    assert calibration.agreement == pytest.approx(0.80, abs=0.05)
    assert calibration.agreement == mean_pairwise_agreement(
        truth, calibration.disagreement_um, seed=4, n_raters=3
    )
    single = calibrate_disagreement(truth, n_raters=1)
    assert single.disagreement_um == 0.0 and single.agreement == 1.0


def test_simulate_raters(small_section):
    neurons, truth = small_section
    cfg = SynthConfig(**SMALL, disagreement_um=20.0)
    raters, calibration = simulate_raters(truth, cfg, seed=8)
    assert [r.rater_id for r in raters] == ["r1", "r2", "r3"]
    assert calibration.iterations == 0
    assert calibration.disagreement_um == 20.0
    window_ids = neurons.ids[truth.labeled(neurons.x_um)].tolist()
    for rater in raters:
        assert rater.ids() == window_ids
    assert raters[0].labels != raters[1].labels
    again, _ = simulate_raters(truth, cfg, seed=8)
    assert [r.labels for r in again] == [r.labels for r in raters]
