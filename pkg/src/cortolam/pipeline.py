from pathlib import Path
from typing import Dict, Final, List, Optional, Sequence

import attr
import numpy as np
from loguru import logger

from .attribution import (
    explain_prediction,
    explanation_columns,
    global_importance,
    mean_importance,
    shap_values,
)
from .config import PipelineConfig, derive_seed
from .data import (
    LAYER_NAMES,
    LabelSet,
    LayerClass,
    NeuronTable,
    load_labels,
    load_neurons,
    write_labels,
    write_neurons,
)
from .errors import DegenerateDataError, MissingInputError, SchemaError
from .evaluation import evaluate, render_report
from .features import (
    SHAPE_COLUMNS,
    FeatureTable,
    assemble_features,
    load_features,
    region_tags_from_features,
    write_features,
)
from .io import numeric_columns, read_columns, read_json, write_json, write_table
from .model import RaterEnsemble, split_train_test, train
from .plot import Panel, load_panel, plot_layers
from .regions import Population, SizeClass, SparseKind, nni_zscore, size_populations
from .spatial import build_index
from .synth import generate, simulate_raters

logger.disable("cortolam")  # Disable emit logs by default

CONTRIBUTION_DEFAULT_COUNT = 3
"""Neurons whose contributions are rendered when no ids are configured."""


def consensus_labels(label_sets: Sequence[LabelSet]) -> LabelSet:
    """Most frequent class of every neuron labeled by any rater; ties to the lowest ordinal."""
    ids = sorted(set().union(*(ls.labels for ls in label_sets)))
    votes = np.zeros((len(ids), len(LAYER_NAMES)), dtype=np.int64)
    for ls in label_sets:
        codes = ls.encode(ids)
        labeled = codes >= 0
        votes[np.flatnonzero(labeled), codes[labeled]] += 1
    winners = np.argmax(votes, axis=1)
    return LabelSet(
        rater_id="consensus", labels={i: LayerClass(int(c)) for i, c in zip(ids, winners)}
    )


def load_predictions(path: Path, neurons: NeuronTable) -> LabelSet:
    """Read the fused classes of ``predictions.csv`` as a label set."""
    _, columns = read_columns(path)
    if "layer" not in columns:
        raise SchemaError(f"Missing required column 'layer' in {path}", column="layer")
    ids = numeric_columns(columns, ["id"], dtype=np.int64)["id"]
    neurons.rows_of(ids)
    return LabelSet(
        rater_id="model",
        labels={int(i): LayerClass.parse(token) for i, token in zip(ids, columns["layer"])},
    )


class Pipeline:
    """Cortical layer analysis of one section.

    Every step reads its inputs from and writes its artifacts to the pipeline work
    folder; see :attr:`PipelineConfig.ARTIFACTS <cortolam.config.PipelineConfig.ARTIFACTS>`.
    Steps can run in separate processes as long as their upstream artifacts exist.

    Args:
        config: Pipeline configuration.

    Examples:

        >>> pipeline = Pipeline(PipelineConfig(workdir=Path("run1"), seed=7))
        >>> pipeline.synth()
        >>> pipeline.features()
        >>> pipeline.regions()
        >>> pipeline.train()
        >>> pipeline.predict()
        >>> pipeline.evaluate()
    """

    def __init__(self, config: PipelineConfig):
        self.config: Final[PipelineConfig] = config
        """Configuration as a :class:`~cortolam.config.PipelineConfig` object."""

    def _prepare_workdir(self) -> None:
        self.config.workdir.mkdir(parents=True, exist_ok=True)

    def _neurons(self) -> NeuronTable:
        return load_neurons(self.config.require("neurons"), self.config.resolution_um_per_px)

    def _features(self) -> FeatureTable:
        return load_features(self.config.require("features"))

    def _rater_labels(self, neurons: NeuronTable) -> List[LabelSet]:
        paths = self.config.label_paths()
        if not paths:
            raise DegenerateDataError(
                f"No rater labels given or found as labels_<rater>.csv in {self.config.workdir}"
            )
        label_sets = []
        for rater, path in sorted(paths.items()):
            if not path.exists():
                raise MissingInputError(f"labels of rater {rater} not found at {path}")
            label_sets.append(load_labels(path, rater, neurons))
        return label_sets

    @staticmethod
    def _check_same_section(neurons: NeuronTable, features: FeatureTable) -> None:
        if len(features) != len(neurons) or not np.array_equal(
            np.sort(features.ids), np.sort(neurons.ids)
        ):
            raise SchemaError("Feature table and neuron table describe different neurons")

    def synth(self) -> None:
        """Generate a synthetic section with its ground truth and simulated raters.

        Writes the neurons, the ground truth, one label file per simulated rater, the
        effective configuration and the rater calibration.
        """
        self._prepare_workdir()
        cfg = self.config.synth
        logger.info(f"Generate a synthetic section of {cfg.width_um:g}µm × {cfg.height_um:g}µm")
        neurons, truth = generate(cfg)
        raters, calibration = simulate_raters(truth, cfg, derive_seed(self.config.seed, "raters"))

        write_neurons(neurons, self.config.path("neurons"))
        write_labels(truth.labels(), self.config.path("truth"))
        for label_set in raters:
            write_labels(label_set, self.config.workdir / f"labels_{label_set.rater_id}.csv")
        self.config.to_toml(self.config.path("synth_config"))

        counts = np.bincount(truth.layers, minlength=len(LAYER_NAMES))
        band_area_mm2 = [
            band.thickness * cfg.height_um * cfg.width_um / 1e6 for band in cfg.layer_bands
        ]
        write_json(
            {
                **attr.asdict(calibration),
                "n_raters": cfg.n_raters,
                "n_neurons": len(neurons),
                "n_labeled": len(raters[0]) if raters else 0,
                "layers": {
                    name: {
                        "count": int(counts[c]),
                        "target_density": cfg.layers[name].density,
                        "realized_density": float(counts[c] / band_area_mm2[c]),
                    }
                    for c, name in enumerate(LAYER_NAMES)
                },
            },
            self.config.path("calibration"),
        )
        logger.success(
            f"Generated {len(neurons):,d} neurons and {len(raters)} simulated rater(s) "
            f"in {self.config.workdir}"
        )

    def features(self) -> None:
        """Compute the feature table of the section."""
        neurons = self._neurons()
        self._prepare_workdir()
        logger.debug(f"Feature config: {self.config.features!r}")
        index = build_index(neurons)
        table = assemble_features(neurons, index, self.config.features)
        write_features(table, self.config.path("features"))

    def regions(self) -> None:
        """Write the region tags, the soma size populations and the region summary."""
        neurons = self._neurons()
        features = self._features()
        self._check_same_section(neurons, features)
        fcfg = self.config.features
        tags = region_tags_from_features(neurons, features, fcfg)
        write_table(tags.to_columns(), self.config.path("regions"))

        size_class = size_populations(neurons.area_um2)
        write_table(
            {"id": neurons.ids, "size_class": [SizeClass(c).label for c in size_class]},
            self.config.path("size_populations"),
        )

        rows = features.rows_of(neurons.ids)
        zscore = nni_zscore(features.column(f"nni_{fcfg.region_k}")[rows], fcfg.region_k)
        density = features.column(f"density_{fcfg.region_k}")[rows]
        populations = {}
        for population in Population:
            members = tags.population == population
            populations[population.label] = {
                "count": int(members.sum()),
                "mean_density": float(density[members].mean()) if members.any() else 0.0,
                "mean_nni_zscore": float(zscore[members].mean()) if members.any() else 0.0,
            }
        write_json(
            {
                "k": fcfg.region_k,
                "populations": populations,
                "sparse_kinds": {
                    kind.label: int(np.sum(tags.sparse_kind == kind)) for kind in SparseKind
                },
                "sparse_split_degenerate": tags.sparse_split_degenerate,
                "size_classes": {
                    size.label: int(np.sum(size_class == size)) for size in SizeClass
                },
            },
            self.config.path("regions_summary"),
        )
        logger.success(
            "Region populations: "
            + ", ".join(f"{name} {v['count']:,d}" for name, v in populations.items())
        )

    def train(self) -> None:
        """Train one model per rater on a shared stratified split and write the ensemble.

        The split stratifies the consensus class of every neuron labeled by any rater;
        each rater model trains on the training neurons that rater labeled.
        """
        features = self._features()
        neurons = self._neurons()
        label_sets = self._rater_labels(neurons)
        consensus = consensus_labels(label_sets)
        ids = consensus.ids()
        tcfg = self.config.train
        split_seed = derive_seed(self.config.seed, "split")
        train_ids, test_ids = split_train_test(
            ids, consensus.encode(ids), tcfg.train_fraction, split_seed
        )
        logger.info(
            f"Split {len(ids):,d} labeled neurons into {len(train_ids):,d} training "
            f"and {len(test_ids):,d} test neurons"
        )
        write_json(
            {
                "fraction": tcfg.train_fraction,
                "stratified_by": consensus.rater_id,
                "train": train_ids,
                "test": test_ids,
            },
            self.config.path("split"),
        )
        logger.debug(f"Train config: {tcfg!r}")
        models = [train(features, ls, tcfg, ids=train_ids) for ls in label_sets]
        RaterEnsemble(models).save(self.config.path("ensemble"), self.config.path("models"))
        logger.success(
            f"Trained the ensemble of {len(models)} rater model(s): "
            f"{', '.join(m.rater_id for m in models)}"
        )

    def predict(self) -> None:
        """Predict the layer of every neuron by the fused rater models."""
        ensemble = RaterEnsemble.load(self.config.path("ensemble"))
        features = self._features()
        classes, summed = ensemble.predict(features)
        probs = summed / len(ensemble.members)
        columns: Dict[str, list] = {
            "id": features.ids.tolist(),
            "layer": [LAYER_NAMES[c] for c in classes],
        }
        for c, name in enumerate(LAYER_NAMES):
            columns[f"p_{name}"] = probs[:, c].tolist()
        write_table(columns, self.config.path("predictions"))
        counts = np.bincount(classes, minlength=len(LAYER_NAMES))
        logger.success(
            f"Predicted {len(classes):,d} neurons: "
            + ", ".join(f"{name} {counts[c]:,d}" for c, name in enumerate(LAYER_NAMES))
        )

    def explain_rows(self, features: FeatureTable) -> np.ndarray:
        """Seeded sample of the feature rows used for attributions."""
        n = len(features)
        size = self.config.explain_sample
        if size <= 0 or size >= n:
            return np.arange(n)
        rng = np.random.default_rng(derive_seed(self.config.seed, "explain"))
        return np.sort(rng.choice(n, size=size, replace=False))

    def explain(self) -> None:
        """Attribute the model margins to the features.

        Writes the per-member attributions of the sampled neurons, the per-member and mean
        global importances, and the rendered contribution breakdowns.
        """
        ensemble = RaterEnsemble.load(self.config.path("ensemble"))
        features = self._features()
        rows = self.explain_rows(features)
        X = features.values[rows]
        ids = features.ids[rows].tolist()
        logger.info(f"Explain {len(rows):,d} neurons with {len(ensemble.members)} rater model(s)")

        columns: Dict[str, list] = {}
        rankings = {}
        for member in ensemble.members:
            phi, base = shap_values(member, X)
            block = explanation_columns(ids, member.rater_id, phi, base, member.schema)
            for name, values in block.items():
                columns.setdefault(name, []).extend(values)
            rankings[member.rater_id] = global_importance(member, X)
        write_table(columns, self.config.path("explanations"))

        mean = mean_importance(list(rankings.values()), ensemble.schema)
        write_json(
            {
                "rows": len(rows),
                "scale": "mean |SHAP| over rows and classes, margin scale, per rater model",
                "mean": [{"feature": f, "importance": v} for f, v in mean],
                "members": {
                    rater: [{"feature": f, "importance": v} for f, v in ranking]
                    for rater, ranking in rankings.items()
                },
            },
            self.config.path("importance"),
        )

        explain_ids = self.config.explain_ids or ids[:CONTRIBUTION_DEFAULT_COUNT]
        rendered = []
        for neuron_id in explain_ids:
            row = features.rows_of([neuron_id])
            rendered.append(explain_prediction(ensemble, features.values[row], neuron_id).render())
        with open(self.config.path("contributions"), "wt") as f:
            f.write("\n".join(rendered))
        logger.success(
            "Most important features: " + ", ".join(f for f, _ in mean[:5])
        )

    def evaluate(self) -> None:
        """Compare the predictions with the raters (and the ground truth when present)."""
        neurons = self._neurons()
        predictions = load_predictions(self.config.require("predictions"), neurons)
        raters = self._rater_labels(neurons)
        split = read_json(self.config.require("split"))
        truth_path = self.config.path("truth")
        truth = load_labels(truth_path, "truth", neurons) if truth_path.exists() else None

        profile_columns = None
        features_path = self.config.path("features")
        if features_path.exists():
            features = load_features(features_path)
            rows = features.rows_of(neurons.ids)
            profile_columns = {
                name: features.column(name)[rows]
                for name in SHAPE_COLUMNS + ["depth_norm"]
                if name in features.columns
            }

        report = evaluate(
            neurons,
            predictions,
            raters,
            split["test"],
            truth=truth,
            profile_columns=profile_columns,
        )
        write_json(report, self.config.path("report"))
        text = render_report(report)
        with open(self.config.path("report_text"), "wt") as f:
            f.write(text)
        logger.success(f"Wrote the evaluation report to {self.config.path('report')}")

    def plot(
        self,
        sources: Sequence[Path],
        output: Path,
        column: str = "layer",
        side_by_side: bool = False,
        titles: Optional[Sequence[str]] = None,
    ) -> List[Path]:
        """Draw layer maps of the section.

        Args:
            sources: CSV files holding the class (``layer``) or value `column` of the neurons.
            output: SVG path; without `side_by_side` and with several sources, one file
                per source is written next to it, suffixed by the source name.
            column: Column to color by.
            side_by_side: Draw all sources as panels of a single SVG.
            titles: Panel titles; default to the source file names.

        Returns:
            The written SVG paths.
        """
        neurons = self._neurons()
        titles = list(titles) if titles else [p.stem for p in sources]
        panels: List[Panel] = [
            load_panel(path, neurons, column, title) for path, title in zip(sources, titles)
        ]
        if side_by_side or len(panels) == 1:
            plot_layers(neurons, panels, output)
            return [output]
        written = []
        for panel in panels:
            path = output.with_name(f"{output.stem}_{panel.title}{output.suffix}")
            plot_layers(neurons, [panel], path)
            written.append(path)
        return written
