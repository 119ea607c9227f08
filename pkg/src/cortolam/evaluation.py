from itertools import combinations
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import attr
import numpy as np
from loguru import logger

from .data import LAYER_NAMES, N_CLASSES, LabelSet, LayerClass, NeuronTable
from .errors import DegenerateDataError, SchemaError

logger.disable("cortolam")  # Disable emit logs by default


def _common(a: LabelSet, b: LabelSet, ids: Optional[Sequence[int]] = None) -> List[int]:
    common = set(a.labels) & set(b.labels)
    if ids is not None:
        common &= set(int(i) for i in ids)
    return sorted(common)


def agreement(a: LabelSet, b: LabelSet, ids: Optional[Sequence[int]] = None) -> float:
    """Fraction of the commonly labeled neurons (optionally within `ids`) with equal classes.

    Raises:
        DegenerateDataError: No neuron is labeled by both.
    """
    common = _common(a, b, ids)
    if not common:
        raise DegenerateDataError(f"{a.rater_id} and {b.rater_id} label no common neuron")
    return sum(a.labels[i] == b.labels[i] for i in common) / len(common)


def cohen_kappa(a: LabelSet, b: LabelSet, ids: Optional[Sequence[int]] = None) -> float:
    """Chance-corrected agreement of two label sources; 1 when chance agreement is 1."""
    common = _common(a, b, ids)
    if not common:
        raise DegenerateDataError(f"{a.rater_id} and {b.rater_id} label no common neuron")
    cm = confusion_matrix(a.encode(common), b.encode(common))
    total = cm.sum()
    observed = np.trace(cm) / total
    expected = float(np.sum(cm.sum(axis=0) * cm.sum(axis=1))) / (total * total)
    if expected >= 1.0:
        return 1.0
    return float((observed - expected) / (1.0 - expected))


def confusion_matrix(reference: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """``(N_CLASSES, N_CLASSES)`` counts; rows are reference classes, columns predictions."""
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    return np.bincount(
        reference * N_CLASSES + predicted, minlength=N_CLASSES * N_CLASSES
    ).reshape(N_CLASSES, N_CLASSES)


def class_scores(cm: np.ndarray) -> Dict[str, Dict[str, float]]:
    """Per-class precision, recall, F1 and support of a confusion matrix.

    Scores without a defined denominator are 0.
    """
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    scores = {}
    for c, name in enumerate(LAYER_NAMES):
        precision = tp[c] / predicted[c] if predicted[c] else 0.0
        recall = tp[c] / support[c] if support[c] else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores[name] = {
            "precision": float(precision),
            "recall": float(recall),
            "f1": float(f1),
            "support": int(support[c]),
        }
    return scores


@attr.s(auto_attribs=True, kw_only=True, frozen=True)
class RaterAccuracy:
    mean: float
    std: float
    """Population standard deviation over raters."""

    per_rater: Dict[str, float]
    n_test: int


def accuracy_vs_raters(
    predictions: LabelSet, raters: Sequence[LabelSet], test_ids: Sequence[int]
) -> RaterAccuracy:
    """Agreement of the predictions with each rater on the test neurons.

    Raises:
        SchemaError: The predictions miss a test neuron.
    """
    missing = [i for i in test_ids if int(i) not in predictions.labels]
    if missing:
        raise SchemaError(f"Predictions miss {len(missing):,d} test neurons, e.g. {missing[0]}")
    per_rater = {r.rater_id: agreement(predictions, r, test_ids) for r in raters}
    values = np.array(list(per_rater.values()))
    return RaterAccuracy(
        mean=float(values.mean()), std=float(values.std()), per_rater=per_rater, n_test=len(test_ids)
    )


@attr.s(auto_attribs=True, kw_only=True, frozen=True)
class Composition:
    n: int
    feature: str
    counts: Dict[str, int]
    percent: Dict[str, float]

    @property
    def plurality(self) -> LayerClass:
        """Most frequent class; ties to the lowest ordinal."""
        counts = [self.counts[name] for name in LAYER_NAMES]
        return LayerClass(int(np.argmax(counts)))


def top_n_composition(
    neurons: NeuronTable, labels: LabelSet, n: int, feature: str = "area_um2"
) -> Composition:
    """Class composition of the `n` labeled neurons with the largest `feature`.

    Ties in `feature` are broken by ascending neuron id.

    Raises:
        DegenerateDataError: Fewer than `n` labeled neurons.
    """
    ids = np.asarray(labels.ids(), dtype=np.int64)
    if n > len(ids):
        raise DegenerateDataError(f"Cannot take the top {n:,d} of {len(ids):,d} labeled neurons")
    try:
        values = getattr(neurons, feature)[neurons.rows_of(ids)]
    except AttributeError:
        raise SchemaError(f"Neurons have no column {feature!r}", column=feature) from None
    top = ids[np.lexsort((ids, -values))[:n]]
    codes = labels.encode(top)
    counts = np.bincount(codes, minlength=N_CLASSES)
    return Composition(
        n=n,
        feature=feature,
        counts={name: int(counts[c]) for c, name in enumerate(LAYER_NAMES)},
        percent={name: float(100.0 * counts[c] / n) if n else 0.0 for c, name in enumerate(LAYER_NAMES)},
    )


def layer_profile(
    columns: Mapping[str, np.ndarray], ids: Sequence[int], labels: LabelSet
) -> Dict[str, Dict[str, float]]:
    """Mean of each column per labeled class.

    Args:
        columns: Column name to values, aligned with `ids`.
        ids: Neuron ids of the column rows.
        labels: Class source; unlabeled rows are skipped.
    """
    codes = labels.encode(ids)
    profile: Dict[str, Dict[str, float]] = {}
    for c, name in enumerate(LAYER_NAMES):
        rows = codes == c
        if not rows.any():
            continue
        profile[name] = {col: float(np.mean(values[rows])) for col, values in columns.items()}
    return profile


@attr.s(auto_attribs=True, kw_only=True)
class AgreementReport:
    """Pairwise agreement of label sources with per-source confusion against a reference."""

    sources: List[str]
    matrix: np.ndarray
    """Pairwise agreement; symmetric with a unit diagonal."""

    kappa: np.ndarray
    mean: float
    std: float
    """Population standard deviation over source pairs."""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sources": list(self.sources),
            "matrix": self.matrix.tolist(),
            "kappa": self.kappa.tolist(),
            "mean": self.mean,
            "std": self.std,
        }


def agreement_report(sources: Sequence[LabelSet]) -> AgreementReport:
    """Agreement and Cohen's kappa of every pair of label sources."""
    k = len(sources)
    matrix = np.eye(k)
    kappa = np.eye(k)
    pairs = []
    for i, j in combinations(range(k), 2):
        matrix[i, j] = matrix[j, i] = agreement(sources[i], sources[j])
        kappa[i, j] = kappa[j, i] = cohen_kappa(sources[i], sources[j])
        pairs.append(matrix[i, j])
    return AgreementReport(
        sources=[s.rater_id for s in sources],
        matrix=matrix,
        kappa=kappa,
        mean=float(np.mean(pairs)) if pairs else 1.0,
        std=float(np.std(pairs)) if pairs else 0.0,
    )


def confusion_report(
    reference: LabelSet, predictions: LabelSet, ids: Optional[Sequence[int]] = None
) -> Dict[str, Any]:
    """Confusion matrix and per-class scores of `predictions` against `reference`."""
    common = _common(reference, predictions, ids)
    if not common:
        raise DegenerateDataError(f"{reference.rater_id} and {predictions.rater_id} label no common neuron")
    cm = confusion_matrix(reference.encode(common), predictions.encode(common))
    return {
        "reference": reference.rater_id,
        "n": len(common),
        "accuracy": float(np.trace(cm) / cm.sum()),
        "kappa": cohen_kappa(reference, predictions, common),
        "matrix": cm.tolist(),
        "classes": list(LAYER_NAMES),
        "scores": class_scores(cm),
    }


def render_report(report: Mapping[str, Any]) -> str:
    """Human-readable summary of an evaluation report."""
    lines = ["cortolam evaluation report", ""]
    raters = report.get("rater_agreement")
    if raters:
        lines.append(
            f"rater agreement: {raters['mean']:.4f} ± {raters['std']:.4f} "
            f"over {len(raters['sources'])} sources (std over pairs)"
        )
        width = max(len(s) for s in raters["sources"]) + 2
        lines.append(" " * width + "".join(f"{s:>10}" for s in raters["sources"]))
        for s, row in zip(raters["sources"], raters["matrix"]):
            lines.append(f"{s:<{width}}" + "".join(f"{v:>10.4f}" for v in row))
        lines.append("")
    acc = report.get("accuracy_vs_raters")
    if acc:
        lines.append(
            f"model accuracy vs raters on {acc['n_test']:,d} test neurons: "
            f"{acc['mean']:.4f} ± {acc['std']:.4f} (std over raters)"
        )
        for rater, value in acc["per_rater"].items():
            lines.append(f"  {rater}: {value:.4f}")
        lines.append("")
    truth = report.get("accuracy_vs_truth")
    if truth:
        lines.append(
            f"model accuracy vs ground truth: {truth['test']['accuracy']:.4f} on test neurons, "
            f"{truth['all']['accuracy']:.4f} on all {truth['all']['n']:,d} neurons"
        )
        lines.append("")
    for name, confusion in report.get("confusion", {}).items():
        lines.append(f"confusion vs {name} (rows reference, columns predicted):")
        lines.append("      " + "".join(f"{c:>7}" for c in confusion["classes"]))
        for c, row in zip(confusion["classes"], confusion["matrix"]):
            lines.append(f"  {c:<4}" + "".join(f"{v:>7d}" for v in row))
        lines.append("  class  precision  recall      f1  support")
        for c, s in confusion["scores"].items():
            lines.append(
                f"  {c:<5} {s['precision']:>10.4f} {s['recall']:>7.4f} {s['f1']:>7.4f} {s['support']:>8d}"
            )
        lines.append("")
    for key, composition in report.get("top_n_composition", {}).items():
        lines.append(
            f"top {composition['n']:,d} neurons by {composition['feature']} ({key}):"
        )
        for c in LAYER_NAMES:
            count = composition["counts"][c]
            if count:
                lines.append(f"  {c:<4} {count:>6d} ({composition['percent'][c]:.1f}%)")
        lines.append("")
    profile = report.get("layer_profile")
    if profile:
        cols = sorted({col for values in profile.values() for col in values})
        lines.append("layer profile (" + profile_source(report) + "):")
        lines.append("      " + "".join(f"{c:>14}" for c in cols))
        for layer, values in profile.items():
            lines.append(f"  {layer:<4}" + "".join(f"{values[c]:>14.4g}" for c in cols))
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def profile_source(report: Mapping[str, Any]) -> str:
    return str(report.get("layer_profile_source", "predictions"))


def evaluate(
    neurons: NeuronTable,
    predictions: LabelSet,
    raters: Sequence[LabelSet],
    test_ids: Sequence[int],
    truth: Optional[LabelSet] = None,
    profile_columns: Optional[Mapping[str, np.ndarray]] = None,
    top_n: int = 500,
) -> Dict[str, Any]:
    """Build the evaluation report of a pipeline run."""
    report: Dict[str, Any] = {"raters": [r.rater_id for r in raters]}
    if len(raters) >= 1:
        report["rater_agreement"] = agreement_report(raters).to_dict()
        accuracy = accuracy_vs_raters(predictions, raters, test_ids)
        report["accuracy_vs_raters"] = attr.asdict(accuracy)
        logger.info(
            f"Model accuracy vs raters: {accuracy.mean:.4f} ± {accuracy.std:.4f}; "
            f"rater agreement {report['rater_agreement']['mean']:.4f}"
        )
    report["confusion"] = {r.rater_id: confusion_report(r, predictions, test_ids) for r in raters}
    if truth is not None:
        report["accuracy_vs_truth"] = {
            "test": _accuracy(truth, predictions, test_ids),
            "all": _accuracy(truth, predictions),
        }
        report["confusion"]["truth"] = confusion_report(truth, predictions, test_ids)
        logger.info(
            f"Model accuracy vs ground truth on test neurons: "
            f"{report['accuracy_vs_truth']['test']['accuracy']:.4f}"
        )

    compositions = {}
    sources: List[Tuple[str, LabelSet]] = [("predictions", predictions)]
    if truth is not None:
        sources.append(("truth", truth))
    for key, source in sources:
        n = min(top_n, len(source))
        if n:
            compositions[key] = attr.asdict(top_n_composition(neurons, source, n))
    report["top_n_composition"] = compositions

    if profile_columns:
        source = truth if truth is not None else predictions
        report["layer_profile_source"] = "truth" if truth is not None else "predictions"
        report["layer_profile"] = layer_profile(profile_columns, neurons.ids.tolist(), source)
    return report


def _accuracy(reference: LabelSet, predictions: LabelSet, ids: Optional[Sequence[int]] = None) -> Dict[str, Any]:
    common = _common(reference, predictions, ids)
    return {"accuracy": agreement(reference, predictions, common), "n": len(common)}
