import sys
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Mapping, Optional, Tuple

import attr
import numpy as np
import tomli_w
from loguru import logger

from .data import LAYER_NAMES, LayerClass
from .errors import ConfigError, MissingInputError

if sys.version_info >= (3, 11):
    import tomllib
else:
    # Backport of the TOML parser prior to python 3.11
    import tomli as tomllib

logger.disable("cortolam")  # Disable emit logs by default


DEFAULT_K_SET: Tuple[int, ...] = (50, 100, 250, 500, 1000)
"""Neighbourhood sizes of the distance, hull, density and NNI feature blocks."""

NNI_MODES: Tuple[str, ...] = ("nearest", "central")
"""Numerator readings of the nearest neighbour index.

- ``nearest``: mean over the k members of each member's nearest-neighbour distance within
  the member set (the default).
- ``central``: mean distance from the central neuron to its k neighbours.
"""

SEED_STREAMS: Dict[str, int] = {
    "synth": 1,
    "raters": 2,
    "split": 3,
    "train": 4,
    "explain": 5,
}
"""Independent random streams derived from the single pipeline seed."""


def derive_seed(seed: int, stream: str) -> int:
    """Derive the seed of one stochastic component from the pipeline seed.

    Examples:

        >>> derive_seed(0, "train") == derive_seed(0, "train")
        True
        >>> derive_seed(0, "train") != derive_seed(0, "split")
        True
    """
    state = np.random.SeedSequence([seed, SEED_STREAMS[stream]]).generate_state(1)
    return int(state[0])


def _positive(instance, attribute, value):
    if not value > 0:
        raise ConfigError(f"{attribute.name} must be positive; got {value!r}")


def _fraction(instance, attribute, value):
    if not 0 < value <= 1:
        raise ConfigError(f"{attribute.name} must be within (0, 1]; got {value!r}")


@attr.s(auto_attribs=True, kw_only=True)
class SliceConfig:
    """Angular slicing of a neuron's neighbourhood.

    Sectors partition [0, 2π) evenly; sector 0 starts at angle 0 (east, +x) and sectors
    go counter-clockwise.
    """

    sectors: int = 8
    """Number of angular sectors R."""

    k: int = 500
    """Neighbourhood size used for slicing."""

    def __attrs_post_init__(self):
        if self.sectors < 2:
            raise ConfigError(f"Slice sectors must be at least 2; got {self.sectors}")
        if self.k < 1:
            raise ConfigError(f"Slice k must be positive; got {self.k}")


@attr.s(auto_attribs=True, kw_only=True)
class FeatureConfig:
    """Per-neuron feature extraction."""

    k_set: Tuple[int, ...] = attr.ib(default=DEFAULT_K_SET, converter=tuple)
    """Neighbourhood sizes; one distance/hull/density/NNI block per k."""

    region_k: int = 500
    """The k whose density and hull area derive the sparse/average/dense regions."""

    slices: SliceConfig = attr.Factory(SliceConfig)

    nni_mode: str = "nearest"
    """See :data:`NNI_MODES`."""

    entropy_bins: int = 16
    """Equal-width bins over [0, max distance] of the distance entropy."""

    neighbor_size: bool = False
    """Append the mean soma area of the k neighbours (``nbr_area_mean_k``) per k."""

    jobs: int = 1
    """Worker threads for per-neuron feature extraction."""

    chunk_size: int = attr.ib(default=2048, validator=_positive)
    """Neurons per block of neighbour queries."""

    def __attrs_post_init__(self):
        if not self.k_set:
            raise ConfigError("The K-set must not be empty")
        if any(k < 1 for k in self.k_set) or len(set(self.k_set)) != len(self.k_set):
            raise ConfigError(f"The K-set must hold distinct positive sizes; got {self.k_set}")
        self.k_set = tuple(sorted(self.k_set))
        if self.region_k not in self.k_set:
            raise ConfigError(f"region_k={self.region_k} is not in the K-set {self.k_set}")
        if self.nni_mode not in NNI_MODES:
            raise ConfigError(f"nni_mode must be one of {', '.join(NNI_MODES)}; got {self.nni_mode!r}")
        if self.entropy_bins < 1:
            raise ConfigError(f"entropy_bins must be positive; got {self.entropy_bins}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be positive; got {self.jobs}")


@attr.s(auto_attribs=True, kw_only=True)
class TrainConfig:
    """Gradient boosting of one rater model."""

    rounds: int = attr.ib(default=200, validator=_positive)
    """Boosting rounds; each round adds one tree per class."""

    max_depth: int = attr.ib(default=6, validator=_positive)
    learning_rate: float = attr.ib(default=0.1, validator=_positive)
    l2_leaf_reg: float = attr.ib(default=1.0, validator=_positive)
    """L2 regularisation λ of the Newton leaf values."""

    min_samples_leaf: int = attr.ib(default=20, validator=_positive)
    seed: int = 0
    """Fixes every stochastic choice of training (the stratified split uses its own stream)."""

    train_fraction: float = attr.ib(default=0.75, validator=_fraction)
    """Fraction of the labeled neurons used for training."""

    jobs: int = attr.ib(default=1, validator=_positive)
    """Worker threads; the per-class trees of a boosting round are grown concurrently."""


@attr.s(auto_attribs=True, kw_only=True)
class LayerBand:
    """Synthetic parameters of one layer band."""

    thickness: float
    """Fraction of the section height."""

    density: float
    """Target density in neurons per mm²."""

    area_mu: float
    """Mean of the log soma area (log µm²)."""

    area_sigma: float = 0.35
    circularity_ab: Tuple[float, float] = attr.ib(default=(8.0, 3.0), converter=tuple)
    """Beta distribution parameters of the circularity."""

    roundness_ab: Tuple[float, float] = attr.ib(default=(6.0, 3.0), converter=tuple)
    gray_mu: float = 120.0
    gray_sigma: float = 15.0

    def __attrs_post_init__(self):
        if not self.density > 0:
            raise ConfigError(f"Band density must be positive; got {self.density}")
        if self.thickness < 0:
            raise ConfigError(f"Band thickness must not be negative; got {self.thickness}")
        if self.area_sigma < 0 or self.gray_sigma < 0:
            raise ConfigError("Band standard deviations must not be negative")
        if min(self.circularity_ab + self.roundness_ab) <= 0:
            raise ConfigError("Beta parameters must be positive")


def _default_layers() -> Dict[str, LayerBand]:
    # Densities keep the I/WM < III/V/VI < II/IV ordering; III, V and VI hold larger somata
    return {
        "I": LayerBand(thickness=0.09, density=2500, area_mu=4.0, gray_mu=150.0,
                       circularity_ab=(8.0, 3.0), roundness_ab=(6.0, 3.0)),
        "II": LayerBand(thickness=0.08, density=12000, area_mu=4.2, gray_mu=125.0,
                        circularity_ab=(9.0, 3.0), roundness_ab=(7.0, 3.0)),
        "III": LayerBand(thickness=0.25, density=6000, area_mu=5.15, gray_mu=115.0,
                         circularity_ab=(7.0, 3.0), roundness_ab=(6.0, 3.0)),
        "IV": LayerBand(thickness=0.08, density=12000, area_mu=4.2, gray_mu=110.0,
                        circularity_ab=(9.0, 3.0), roundness_ab=(7.0, 3.0)),
        "V": LayerBand(thickness=0.17, density=6000, area_mu=5.0, gray_mu=118.0,
                       circularity_ab=(7.0, 3.0), roundness_ab=(6.0, 3.0)),
        "VI": LayerBand(thickness=0.18, density=6000, area_mu=4.85, gray_mu=105.0,
                        circularity_ab=(5.0, 4.0), roundness_ab=(4.0, 4.0)),
        "WM": LayerBand(thickness=0.15, density=1500, area_mu=4.3, gray_mu=130.0,
                        circularity_ab=(8.0, 3.0), roundness_ab=(6.0, 3.0)),
    }


def _layers_converter(value: Mapping[str, Any]) -> Dict[str, LayerBand]:
    layers = {}
    for name, band in value.items():
        if name not in LAYER_NAMES:
            raise ConfigError(f"Unknown layer {name!r} in synthetic bands")
        layers[name] = band if isinstance(band, LayerBand) else LayerBand(**band)
    missing = [name for name in LAYER_NAMES if name not in layers]
    if missing:
        raise ConfigError(f"Synthetic bands miss layers: {', '.join(missing)}")
    return {name: layers[name] for name in LAYER_NAMES}


@attr.s(auto_attribs=True, kw_only=True)
class SynthConfig:
    """Seeded synthetic laminar cortex.

    Bands are stacked from the pial surface (``y = 0``) downwards in layer order I to WM.
    """

    width_um: float = attr.ib(default=3000.0, validator=_positive)
    height_um: float = attr.ib(default=2800.0, validator=_positive)
    layers: Dict[str, LayerBand] = attr.ib(factory=_default_layers, converter=_layers_converter)
    wave_amplitude_um: float = 50.0
    """Amplitude of the sinusoidal perturbation of the inner band boundaries."""

    wave_length_um: float = attr.ib(default=800.0, validator=_positive)
    label_window: float = attr.ib(default=0.5, validator=_fraction)
    """Centred fraction of the section width labeled by the simulated raters."""

    n_raters: int = attr.ib(default=3, validator=_positive)
    target_agreement: float = attr.ib(default=0.80, validator=_fraction)
    """Mean pairwise rater agreement the disagreement amplitude is calibrated to."""

    disagreement_um: Optional[float] = None
    """Boundary jitter amplitude of the raters; calibrated to :attr:`target_agreement` when unset."""

    pial_jitter_scale: float = 0.25
    """Relative jitter of the layer I/II boundary, on which raters mostly agree."""

    seed: int = 0

    def __attrs_post_init__(self):
        if self.wave_amplitude_um < 0:
            raise ConfigError("wave_amplitude_um must not be negative")
        if self.disagreement_um is not None and self.disagreement_um < 0:
            raise ConfigError("disagreement_um must not be negative")
        total = sum(band.thickness for band in self.layers.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"Band thickness fractions must sum to 1; got {total}")
        for name, band in self.layers.items():
            thickness_um = band.thickness * self.height_um
            if thickness_um <= 2 * self.wave_amplitude_um:
                raise ConfigError(
                    f"Band {name} is {thickness_um:.1f}µm thick and has no area left "
                    f"between boundaries perturbed by ±{self.wave_amplitude_um}µm"
                )
        density = {name: band.density for name, band in self.layers.items()}
        dense = min(density["II"], density["IV"])
        average = [density[n] for n in ("III", "V", "VI")]
        sparse = max(density["I"], density["WM"])
        if not (dense > max(average) and min(average) > sparse):
            raise ConfigError("Band densities must be ordered II, IV > III, V, VI > I, WM")

    @property
    def layer_bands(self) -> List[LayerBand]:
        """Bands ordered by :class:`~cortolam.data.LayerClass`."""
        return [self.layers[layer.name] for layer in LayerClass]


@attr.s(auto_attribs=True, kw_only=True, repr=True)
class PipelineConfig:
    """cortolam pipeline configuration.

    The pipeline can be configured programatically using this object, from a TOML file
    by :meth:`from_toml`, or from the command line.

    Examples:

        >>> config = PipelineConfig(workdir=Path("run1"), seed=7)
        >>> config.path("features")
        PosixPath('run1/features.csv')
    """

    workdir: Path = attr.ib(default=Path("."), converter=Path)
    """Folder of all pipeline artifacts."""

    neurons: Optional[Path] = None
    """Path to the neurons CSV. Default to ``neurons.csv`` under :attr:`workdir`."""

    labels: Dict[str, Path] = attr.Factory(dict)
    """Rater id to labels CSV. Default to every ``labels_<rater>.csv`` under :attr:`workdir`."""

    truth: Optional[Path] = None
    """Optional ground-truth labels (written by ``synth``) used by ``eval``."""

    resolution_um_per_px: Optional[float] = None
    """Set when neuron coordinates are in pixels."""

    seed: int = 0
    """Single seed of all randomness."""

    explain_sample: int = 200
    """Rows sampled for global importances; every row when 0."""

    explain_ids: List[int] = attr.Factory(list)
    """Neurons whose contribution breakdown is rendered."""

    features: FeatureConfig = attr.Factory(FeatureConfig)
    train: TrainConfig = attr.Factory(TrainConfig)
    synth: SynthConfig = attr.Factory(SynthConfig)

    def __attrs_post_init__(self):
        self.propagate_seed()

    def propagate_seed(self) -> None:
        """Derive the seeds of all components from :attr:`seed`."""
        self.train.seed = derive_seed(self.seed, "train")
        self.synth.seed = derive_seed(self.seed, "synth")

    ARTIFACTS: ClassVar[Dict[str, str]] = {
        "neurons": "neurons.csv",
        "truth": "truth.csv",
        "synth_config": "synth_config.toml",
        "calibration": "calibration.json",
        "features": "features.csv",
        "schema": "features.schema.json",
        "flags": "features.flags.csv",
        "regions": "regions.csv",
        "size_populations": "size_populations.csv",
        "regions_summary": "regions.summary.json",
        "split": "split.json",
        "models": "models",
        "ensemble": "ensemble.json",
        "predictions": "predictions.csv",
        "explanations": "explanations.csv",
        "importance": "importance.json",
        "contributions": "contributions.txt",
        "report": "report.json",
        "report_text": "report.txt",
    }
    """File names of the pipeline artifacts under :attr:`workdir`."""

    def path(self, artifact: str) -> Path:
        """Path of a pipeline artifact, honouring explicitly configured paths."""
        if artifact == "neurons" and self.neurons is not None:
            return self.neurons
        if artifact == "truth" and self.truth is not None:
            return self.truth
        return self.workdir / self.ARTIFACTS[artifact]

    def require(self, artifact: str) -> Path:
        """Like :meth:`path` but the artifact must exist."""
        pth = self.path(artifact)
        if not pth.exists():
            raise MissingInputError(f"{artifact.replace('_', ' ')} not found at {pth}")
        return pth

    def label_paths(self) -> Dict[str, Path]:
        """Rater label files, discovered under :attr:`workdir` when not configured."""
        if self.labels:
            return dict(self.labels)
        found = sorted(self.workdir.glob("labels_*.csv"))
        return {p.stem[len("labels_"):]: p for p in found}

    @classmethod
    def from_toml(
        cls, path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None
    ) -> "PipelineConfig":
        """Load the configuration from a TOML file.

        Top-level keys map to the pipeline attributes; the tables ``[features]``,
        ``[slice]``, ``[train]`` and ``[synth]`` (with ``[synth.layers.<LAYER>]``) map to
        the component configurations.

        Args:
            path: The TOML file; only the defaults and `overrides` apply when `None`.
            overrides: Values that win over the file values, keyed by dotted names such
                as ``train.rounds``.
        """
        doc: Dict[str, Any] = {}
        if path is not None:
            if not path.exists():
                raise MissingInputError(f"config not found at {path}")
            with open(path, "rb") as f:
                try:
                    doc = tomllib.load(f)
                except tomllib.TOMLDecodeError as e:
                    raise ConfigError(f"Cannot parse {path}: {e}") from e
        for key, value in (overrides or {}).items():
            *tables, name = key.split(".")
            section = doc
            for table in tables:
                section = section.setdefault(table, {})
            section[name] = value
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PipelineConfig":
        doc = dict(doc)
        slices = doc.pop("slice", {})
        features = dict(doc.pop("features", {}))
        features["slices"] = _build(SliceConfig, slices)
        sub = {
            "features": _build(FeatureConfig, features),
            "train": _build(TrainConfig, doc.pop("train", {})),
            "synth": _build(SynthConfig, doc.pop("synth", {})),
        }
        for key in ("neurons", "truth"):
            if doc.get(key) is not None:
                doc[key] = Path(doc[key])
        if "labels" in doc:
            doc["labels"] = {rater: Path(p) for rater, p in doc["labels"].items()}
        return _build(cls, {**doc, **sub})

    def to_dict(self) -> Dict[str, Any]:
        """Plain representation of the configuration (inverse of :meth:`from_dict`)."""

        def plain(value):
            if isinstance(value, Path):
                return str(value)
            if isinstance(value, tuple):
                return list(value)
            return value

        def drop_none(value):
            # TOML has no null
            if isinstance(value, dict):
                return {k: drop_none(v) for k, v in value.items() if v is not None}
            return value

        doc = attr.asdict(self, recurse=True, value_serializer=lambda inst, a, v: plain(v))
        doc["slice"] = doc["features"].pop("slices")
        for key in ("train", "synth"):
            doc[key].pop("seed")
        return drop_none(doc)

    def to_toml(self, path: Path) -> None:
        with open(path, "wb") as f:
            tomli_w.dump(self.to_dict(), f)


def _build(config_cls, values: Mapping[str, Any]):
    known = {a.name for a in attr.fields(config_cls) if a.init}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(
            f"Unknown {config_cls.__name__} option(s): {', '.join(sorted(unknown))}"
        )
    try:
        return config_cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid {config_cls.__name__}: {e}") from e
