"""Seeded synthetic laminar cortex.

Layer bands are stacked from the pial surface at ``y = 0`` down to the bottom of the
section in the order I, II, ..., VI, WM. The pial surface and the bottom are flat; the
boundaries between bands are sinusoids around their nominal depth.
"""
from itertools import combinations
from typing import Dict, List, Tuple

import attr
import numpy as np
from loguru import logger

from .config import SynthConfig
from .data import N_CLASSES, LabelSet, LayerClass, NeuronTable
from .errors import ConfigError

logger.disable("cortolam")  # Disable emit logs by default

JITTER_WAVELENGTH_UM = (400.0, 2000.0)
"""Range of the wavelengths of the smooth rater boundary jitter."""


@attr.s(auto_attribs=True, kw_only=True, eq=False, repr=False)
class GroundTruth:
    """Generator-assigned layers with the band boundary geometry."""

    ids: np.ndarray
    x_um: np.ndarray
    y_um: np.ndarray
    layers: np.ndarray
    """:class:`~cortolam.data.LayerClass` code of each neuron."""

    width_um: float
    height_um: float
    depths_um: np.ndarray
    """Nominal depth of the ``N_CLASSES + 1`` boundaries, pial surface first."""

    phases: np.ndarray
    """Phase of each boundary sinusoid (unused for the flat outer boundaries)."""

    wave_amplitude_um: float
    wave_length_um: float
    label_window: float = 1.0
    pial_jitter_scale: float = 0.25

    def __repr__(self):
        return f"{type(self).__name__}({len(self.ids):,d} neurons)"

    def boundaries(self, x: np.ndarray) -> np.ndarray:
        """``(N_CLASSES + 1, n)`` depth of every boundary at the abscissae `x`."""
        x = np.asarray(x, dtype=np.float64)
        wave = self.wave_amplitude_um * np.sin(
            2 * np.pi * x[None, :] / self.wave_length_um + self.phases[:, None]
        )
        wave[0] = 0.0
        wave[-1] = 0.0
        return self.depths_um[:, None] + wave

    def labeled(self, x: np.ndarray) -> np.ndarray:
        """Whether each abscissa lies inside the centred labeling window."""
        half = 0.5 * self.label_window * self.width_um
        return np.abs(np.asarray(x) - 0.5 * self.width_um) <= half

    def labels(self, rater_id: str = "truth") -> LabelSet:
        """All generated layers as a label set."""
        return LabelSet(
            rater_id=rater_id,
            labels={int(i): LayerClass(int(c)) for i, c in zip(self.ids, self.layers)},
        )


def layer_at(boundaries: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Band of each point given the ``(N_CLASSES + 1, n)`` boundary depths at its abscissa.

    A point on a boundary belongs to the band below it; points outside the section are
    clipped to the outer bands.
    """
    inner = boundaries[1:-1]
    layers = np.sum(np.asarray(y)[None, :] >= inner, axis=0)
    return np.clip(layers, 0, N_CLASSES - 1)


def _geometry(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    fractions = np.array([band.thickness for band in cfg.layer_bands])
    depths = np.concatenate([[0.0], np.cumsum(fractions) * cfg.height_um])
    depths[-1] = cfg.height_um
    phases = rng.uniform(0.0, 2 * np.pi, size=N_CLASSES + 1)
    phases[0] = phases[-1] = 0.0
    return depths, phases


def generate(cfg: SynthConfig) -> Tuple[NeuronTable, GroundTruth]:
    """Generate a synthetic section and its ground truth.

    Each band is filled by a homogeneous Poisson process at the band's target density:
    candidates are drawn over the strip the band can reach and kept when they fall inside
    the band. Soma attributes are drawn per band.

    Raises:
        ConfigError: A band has no area.
    """
    rng = np.random.default_rng(cfg.seed)
    depths, phases = _geometry(cfg, rng)
    amp = cfg.wave_amplitude_um
    truth_geometry = dict(
        width_um=cfg.width_um,
        height_um=cfg.height_um,
        depths_um=depths,
        phases=phases,
        wave_amplitude_um=amp,
        wave_length_um=cfg.wave_length_um,
        label_window=cfg.label_window,
        pial_jitter_scale=cfg.pial_jitter_scale,
    )
    probe = GroundTruth(
        ids=np.empty(0), x_um=np.empty(0), y_um=np.empty(0), layers=np.empty(0), **truth_geometry
    )

    columns: Dict[str, List[np.ndarray]] = {
        name: []
        for name in ("x_um", "y_um", "area_um2", "perimeter_um", "circularity", "roundness",
                     "gray_mean", "gray_median", "layer")
    }
    for layer, band in zip(LayerClass, cfg.layer_bands):
        top = max(depths[layer] - (amp if layer > 0 else 0.0), 0.0)
        bottom = min(depths[layer + 1] + (amp if layer < N_CLASSES - 1 else 0.0), cfg.height_um)
        if bottom - top <= 0 or band.thickness * cfg.height_um <= 0:
            raise ConfigError(f"Band {layer.name} has zero area")
        strip_mm2 = cfg.width_um * (bottom - top) * 1e-6
        n_candidates = rng.poisson(band.density * strip_mm2)
        x = rng.uniform(0.0, cfg.width_um, size=n_candidates)
        y = rng.uniform(top, bottom, size=n_candidates)
        keep = layer_at(probe.boundaries(x), y) == layer
        x, y = x[keep], y[keep]
        n = len(x)

        area = np.exp(rng.normal(band.area_mu, band.area_sigma, size=n))
        circularity = np.clip(rng.beta(*band.circularity_ab, size=n), 1e-3, 1.0)
        roundness = np.clip(rng.beta(*band.roundness_ab, size=n), 1e-3, 1.0)
        gray_mean = np.clip(rng.normal(band.gray_mu, band.gray_sigma, size=n), 0.0, 255.0)
        gray_median = np.clip(gray_mean + rng.normal(0.0, 2.0, size=n), 0.0, 255.0)
        values = {
            "x_um": x,
            "y_um": y,
            "area_um2": area,
            "perimeter_um": np.sqrt(4 * np.pi * area / circularity),
            "circularity": circularity,
            "roundness": roundness,
            "gray_mean": gray_mean,
            "gray_median": gray_median,
            "layer": np.full(n, int(layer)),
        }
        for name, column in values.items():
            columns[name].append(column)
        realized = n / (band.thickness * cfg.width_um * cfg.height_um * 1e-6)
        logger.debug(
            f"Band {layer.name}: {n:,d} neurons, {realized:.0f}/mm² (target {band.density:.0f}/mm²)"
        )

    merged = {name: np.concatenate(parts) for name, parts in columns.items()}
    ids = np.arange(1, len(merged["x_um"]) + 1)
    layers = merged.pop("layer").astype(np.int64)
    neurons = NeuronTable(ids=ids, **merged)
    truth = GroundTruth(
        ids=ids, x_um=neurons.x_um, y_um=neurons.y_um, layers=layers, **truth_geometry
    )
    logger.success(
        f"Generated {len(neurons):,d} neurons over {cfg.width_um:g}µm × {cfg.height_um:g}µm"
    )
    return neurons, truth


def _rater_layers(
    truth: GroundTruth, disagreement_um: float, seed: int, rater: int
) -> np.ndarray:
    """Layers assigned by one simulated rater; -1 outside the labeling window."""
    base = truth.boundaries(truth.x_um)
    if disagreement_um > 0:
        rng = np.random.default_rng([seed, rater])
        n_inner = N_CLASSES - 1
        offset = rng.uniform(-1.0, 1.0, size=n_inner)
        weight = rng.uniform(0.0, 1.0, size=(n_inner, 2))
        wavelength = rng.uniform(*JITTER_WAVELENGTH_UM, size=(n_inner, 2))
        phase = rng.uniform(0.0, 2 * np.pi, size=(n_inner, 2))
        waves = weight[:, :, None] * np.sin(
            2 * np.pi * truth.x_um[None, None, :] / wavelength[:, :, None] + phase[:, :, None]
        )
        jitter = 0.6 * offset[:, None] + 0.4 * waves.sum(axis=1) / 2
        scale = np.full(n_inner, disagreement_um)
        scale[0] *= truth.pial_jitter_scale
        base = base.copy()
        base[1:-1] += scale[:, None] * jitter
        # A rater never swaps the order of two boundaries
        base = np.clip(np.maximum.accumulate(base, axis=0), 0.0, truth.height_um)
    layers = layer_at(base, truth.y_um)
    return np.where(truth.labeled(truth.x_um), layers, -1)


def synth_rater_labels(
    truth: GroundTruth, disagreement_um: float, seed: int, rater_id: str = "r1", rater: int = 0
) -> LabelSet:
    """Labels of a simulated rater who places every boundary with smooth random jitter.

    Each inner boundary is displaced by ``disagreement_um`` times a smooth random curve
    of unit amplitude (the layer I/II boundary by ``pial_jitter_scale`` times less). Only
    neurons inside the labeling window are labeled. With ``disagreement_um = 0`` the
    labels equal the ground truth.

    Args:
        truth: Ground truth of the section.
        disagreement_um: Jitter amplitude.
        seed: Seed shared by the raters of a section.
        rater_id: Id of the label set.
        rater: Index of the rater; raters of the same seed jitter independently.
    """
    if disagreement_um < 0:
        raise ConfigError(f"disagreement_um must not be negative; got {disagreement_um}")
    layers = _rater_layers(truth, disagreement_um, seed, rater)
    labeled = layers >= 0
    return LabelSet(
        rater_id=rater_id,
        labels={int(i): LayerClass(int(c)) for i, c in zip(truth.ids[labeled], layers[labeled])},
    )


def mean_pairwise_agreement(
    truth: GroundTruth, disagreement_um: float, seed: int, n_raters: int
) -> float:
    """Mean fraction of labeled neurons on which two simulated raters agree."""
    raters = [_rater_layers(truth, disagreement_um, seed, r) for r in range(n_raters)]
    labeled = raters[0] >= 0
    if n_raters < 2 or not labeled.any():
        return 1.0
    pairs = [
        float(np.mean(a[labeled] == b[labeled])) for a, b in combinations(raters, 2)
    ]
    return float(np.mean(pairs))


@attr.s(auto_attribs=True, kw_only=True, frozen=True)
class Calibration:
    disagreement_um: float
    agreement: float
    """Mean pairwise rater agreement at :attr:`disagreement_um`."""

    target: float
    iterations: int


def calibrate_disagreement(
    truth: GroundTruth,
    target: float = 0.80,
    n_raters: int = 3,
    seed: int = 0,
    tolerance: float = 0.005,
    max_iterations: int = 60,
) -> Calibration:
    """Find the jitter amplitude at which simulated raters agree on `target` of the neurons.

    The amplitude is bisected; agreement decreases with the amplitude for fixed seeds.
    """
    if n_raters < 2:
        return Calibration(disagreement_um=0.0, agreement=1.0, target=target, iterations=0)
    lo, hi = 0.0, 50.0
    iterations = 0
    agreement_hi = mean_pairwise_agreement(truth, hi, seed, n_raters)
    while agreement_hi > target and iterations < max_iterations:
        lo, hi = hi, hi * 2
        agreement_hi = mean_pairwise_agreement(truth, hi, seed, n_raters)
        iterations += 1
    best, best_agreement = hi, agreement_hi
    while iterations < max_iterations and abs(best_agreement - target) > tolerance:
        mid = 0.5 * (lo + hi)
        agreement = mean_pairwise_agreement(truth, mid, seed, n_raters)
        iterations += 1
        if agreement > target:
            lo = mid
        else:
            hi = mid
        if abs(agreement - target) < abs(best_agreement - target):
            best, best_agreement = mid, agreement
    logger.info(
        f"Calibrated rater disagreement to {best:.2f}µm: mean pairwise agreement "
        f"{best_agreement:.4f} (target {target:.2f})"
    )
    return Calibration(
        disagreement_um=best, agreement=best_agreement, target=target, iterations=iterations
    )


def simulate_raters(
    truth: GroundTruth, cfg: SynthConfig, seed: int
) -> Tuple[List[LabelSet], Calibration]:
    """Label sets of ``cfg.n_raters`` simulated raters ``r1``, ``r2``, ...

    The jitter amplitude is ``cfg.disagreement_um`` when set, otherwise calibrated to
    ``cfg.target_agreement``.
    """
    if cfg.disagreement_um is None:
        calibration = calibrate_disagreement(truth, cfg.target_agreement, cfg.n_raters, seed)
    else:
        calibration = Calibration(
            disagreement_um=cfg.disagreement_um,
            agreement=mean_pairwise_agreement(truth, cfg.disagreement_um, seed, cfg.n_raters),
            target=cfg.target_agreement,
            iterations=0,
        )
    raters = [
        synth_rater_labels(truth, calibration.disagreement_um, seed, f"r{r + 1}", r)
        for r in range(cfg.n_raters)
    ]
    return raters, calibration
