"""Path-dependent TreeSHAP attributions of the boosted tree models.

Attributions are computed on the margin scale of one rater model, per class. The value
of a feature coalition S is the expected margin when the features in S follow the row and
the other features follow the training cover of each split.
"""
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
from loguru import logger

from .data import LayerClass
from .errors import ModelFormatError
from .features import FeatureTable
from .model import RaterEnsemble, Tree, TreeEnsembleModel

logger.disable("cortolam")  # Disable emit logs by default


@attr.s(auto_attribs=True, frozen=True, eq=False)
class _LeafPaths:
    """Root-to-leaf paths of one tree with their unique features.

    Paths are padded to the same number of unique features with null players whose
    interval is unbounded and whose cover fraction is 1.
    """

    value: np.ndarray
    """``(L,)`` leaf values."""

    feature: np.ndarray
    """``(L, D)`` unique path features, -1 for padding."""

    lower: np.ndarray
    """``(L, D)`` exclusive lower bound of the feature interval leading to the leaf."""

    upper: np.ndarray
    """``(L, D)`` inclusive upper bound."""

    zero_fraction: np.ndarray
    """``(L, D)`` fraction of the training cover following the path on each feature."""

    expected: float
    """Cover-weighted mean leaf value."""

    @classmethod
    def of(cls, tree: Tree) -> "_LeafPaths":
        if tree.cover[0] <= 0 or np.any(tree.cover <= 0):
            raise ModelFormatError("TreeSHAP needs the training cover of every node")
        leaves: List[Tuple[int, Dict[int, List[float]]]] = []
        stack: List[Tuple[int, Dict[int, List[float]]]] = [(0, {})]
        while stack:
            node, bounds = stack.pop()
            f = int(tree.feature[node])
            if f < 0:
                leaves.append((node, bounds))
                continue
            thr = float(tree.threshold[node])
            for child, went_left in ((tree.children_right[node], False), (tree.children_left[node], True)):
                lo, hi, z = bounds.get(f, [-np.inf, np.inf, 1.0])
                if went_left:
                    hi = min(hi, thr)
                else:
                    lo = max(lo, thr)
                child_bounds = dict(bounds)
                child_bounds[f] = [lo, hi, z * tree.cover[child] / tree.cover[node]]
                stack.append((int(child), child_bounds))

        leaves.sort()
        depth = max(len(b) for _, b in leaves)
        n_leaves = len(leaves)
        feature = np.full((n_leaves, depth), -1, dtype=np.int64)
        lower = np.full((n_leaves, depth), -np.inf)
        upper = np.full((n_leaves, depth), np.inf)
        zero_fraction = np.ones((n_leaves, depth))
        for i, (_, bounds) in enumerate(leaves):
            for d, (f, (lo, hi, z)) in enumerate(sorted(bounds.items())):
                feature[i, d], lower[i, d], upper[i, d], zero_fraction[i, d] = f, lo, hi, z
        leaf_nodes = np.array([node for node, _ in leaves])
        value = tree.value[leaf_nodes]
        expected = float(np.sum(value * tree.cover[leaf_nodes]) / tree.cover[0])
        return cls(
            value=value, feature=feature, lower=lower, upper=upper,
            zero_fraction=zero_fraction, expected=expected,
        )

    def shap(self, X: np.ndarray, n_features: int) -> np.ndarray:
        """``(n, n_features)`` attributions of the tree output for each row of `X`."""
        n = len(X)
        n_leaves, depth = self.feature.shape
        phi = np.zeros((n, n_features))
        if depth == 0:
            return phi
        safe_feature = np.maximum(self.feature, 0)
        x = X[:, safe_feature]  # (n, L, D)
        one = ((x > self.lower) & (x <= self.upper)) | (self.feature < 0)
        one = one.astype(np.float64)
        z = np.broadcast_to(self.zero_fraction, one.shape)

        # Coefficients of Π_j (z_j + o_j t) over all path features, lowest degree first
        poly = np.zeros((depth + 1, n, n_leaves))
        poly[0] = 1.0
        for d in range(depth):
            shifted = poly[:-1] * one[:, :, d]
            poly = poly * z[:, :, d]
            poly[1:] += shifted

        weights = np.array(
            [factorial(s) * factorial(depth - s - 1) / factorial(depth) for s in range(depth)]
        )
        contrib = np.empty((n, n_leaves, depth))
        for d in range(depth):
            zd, od = z[:, :, d], one[:, :, d]
            # Divide out (z_d + o_d t): exact by z_d when o_d is 0, synthetic division otherwise
            quotient = np.empty((depth, n, n_leaves))
            by_z = poly[:depth] / zd
            quotient[depth - 1] = poly[depth]
            for s in range(depth - 1, 0, -1):
                quotient[s - 1] = poly[s] - zd * quotient[s]
            quotient = np.where(od[None] > 0, quotient, by_z)
            total = np.tensordot(weights, quotient, axes=1)
            contrib[:, :, d] = total * (od - zd) * self.value[None, :]

        valid = self.feature >= 0
        onehot = np.zeros((int(valid.sum()), n_features))
        onehot[np.arange(onehot.shape[0]), self.feature[valid]] = 1.0
        return contrib[:, valid] @ onehot


def _paths(model: TreeEnsembleModel) -> List[_LeafPaths]:
    cached = getattr(model, "_leaf_paths", None)
    if cached is None or len(cached) != len(model.trees):
        cached = [_LeafPaths.of(tree) for tree in model.trees]
        object.__setattr__(model, "_leaf_paths", cached)
    return cached


def expected_margins(model: TreeEnsembleModel) -> np.ndarray:
    """Base values: the expected margin of each class over the training cover."""
    base = model.base_scores.copy()
    for t, paths in enumerate(_paths(model)):
        base[t % model.n_classes] += paths.expected
    return base


def shap_values(
    model: TreeEnsembleModel, rows: Union[FeatureTable, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """TreeSHAP attributions of many rows.

    Returns:
        ``(n, n_classes, n_features)`` attributions and the ``(n_classes,)`` base values.
        For every row and class the base value plus the attributions equal the margin.
    """
    X = model.matrix(rows)
    n_features = len(model.schema)
    phi = np.zeros((len(X), model.n_classes, n_features))
    for t, paths in enumerate(_paths(model)):
        phi[:, t % model.n_classes, :] += paths.shap(X, n_features)
    return phi, expected_margins(model)


@attr.s(auto_attribs=True, kw_only=True, eq=False)
class ShapExplanation:
    """Attribution of the margins of one neuron by one rater model."""

    neuron_id: int
    rater_id: str
    schema: List[str]
    base: np.ndarray
    """``(n_classes,)`` expected margins."""

    phi: np.ndarray
    """``(n_classes, n_features)`` feature attributions."""

    margin: np.ndarray
    """``(n_classes,)`` margins of the neuron."""

    def contributions(self, layer: LayerClass) -> "Contributions":
        return Contributions.of(self, layer)


def tree_shap(
    model: TreeEnsembleModel, row: Union[FeatureTable, np.ndarray], neuron_id: int = -1
) -> ShapExplanation:
    """TreeSHAP explanation of a single feature row."""
    X = model.matrix(row)[:1]
    phi, base = shap_values(model, X)
    return ShapExplanation(
        neuron_id=neuron_id,
        rater_id=model.rater_id,
        schema=list(model.schema),
        base=base,
        phi=phi[0],
        margin=model.margins(X)[0],
    )


def global_importance(
    model: TreeEnsembleModel, rows: Union[FeatureTable, np.ndarray]
) -> List[Tuple[str, float]]:
    """Features ranked by mean absolute attribution over rows and classes.

    Ties keep the schema order.
    """
    phi, _ = shap_values(model, rows)
    importance = np.abs(phi).mean(axis=(0, 1)) if len(phi) else np.zeros(len(model.schema))
    ranking = np.argsort(-importance, kind="stable")
    return [(model.schema[j], float(importance[j])) for j in ranking]


def mean_importance(
    rankings: Sequence[List[Tuple[str, float]]], schema: Sequence[str]
) -> List[Tuple[str, float]]:
    """Average per-member importances into one ranking; ties keep the schema order."""
    totals = np.zeros(len(schema))
    position = {name: j for j, name in enumerate(schema)}
    for ranking in rankings:
        for name, value in ranking:
            totals[position[name]] += value
    mean = totals / max(len(rankings), 1)
    ranking = np.argsort(-mean, kind="stable")
    return [(schema[j], float(mean[j])) for j in ranking]


@attr.s(auto_attribs=True, kw_only=True, frozen=True)
class Contribution:
    feature: str
    value: float
    """Feature value of the neuron."""

    phi: float


@attr.s(auto_attribs=True, kw_only=True, eq=False)
class Contributions:
    """Signed breakdown of the margin of one class, largest absolute effects first."""

    rater_id: str
    layer: LayerClass
    base: float
    margin: float
    increased: List[Contribution]
    decreased: List[Contribution]
    unchanged: List[Contribution]

    @classmethod
    def of(
        cls, explanation: ShapExplanation, layer: LayerClass, values: Optional[np.ndarray] = None
    ) -> "Contributions":
        c = int(layer)
        phi = explanation.phi[c]
        if values is None:
            values = np.full(len(phi), np.nan)
        items = [
            Contribution(feature=name, value=float(v), phi=float(p))
            for name, v, p in zip(explanation.schema, values, phi)
        ]
        by_size = sorted(range(len(items)), key=lambda j: (-abs(items[j].phi), j))
        return cls(
            rater_id=explanation.rater_id,
            layer=layer,
            base=float(explanation.base[c]),
            margin=float(explanation.margin[c]),
            increased=[items[j] for j in by_size if items[j].phi > 0],
            decreased=[items[j] for j in by_size if items[j].phi < 0],
            unchanged=[items[j] for j in by_size if items[j].phi == 0],
        )

    def render(self, top: Optional[int] = None) -> str:
        """Plain-text table of the contributors; `top` limits each group."""
        lines = [
            f"rater {self.rater_id}, class {self.layer.name}: "
            f"base {self.base:+.6f} -> margin {self.margin:+.6f}",
            f"  {'feature':<24} {'value':>14} {'contribution':>14}",
        ]
        for title, group in (("increased", self.increased), ("decreased", self.decreased)):
            lines.append(f"  {title} the margin:")
            shown = group if top is None else group[:top]
            for item in shown:
                lines.append(f"    {item.feature:<22} {item.value:>14.6g} {item.phi:>+14.6f}")
            if len(shown) < len(group):
                rest = sum(item.phi for item in group[len(shown):])
                lines.append(f"    {len(group) - len(shown)} more {'':<15} {'':>14} {rest:>+14.6f}")
        if self.unchanged:
            lines.append(f"  {len(self.unchanged)} feature(s) without effect")
        return "\n".join(lines)


@attr.s(auto_attribs=True, kw_only=True, eq=False)
class PredictionExplanation:
    """Per-rater explanations of one fused prediction."""

    neuron_id: int
    layer: LayerClass
    """The fused prediction."""

    summed: np.ndarray
    explanations: List[ShapExplanation]
    breakdowns: List[Contributions]

    def render(self, top: Optional[int] = 10) -> str:
        probs = ", ".join(
            f"{layer.name} {p:.3f}" for layer, p in zip(LayerClass, self.summed)
        )
        lines = [
            f"neuron {self.neuron_id}: predicted {self.layer.name} (summed probabilities: {probs})",
            "attributions are per rater model on the margin scale; the fused prediction sums "
            "the member probabilities",
        ]
        for breakdown in self.breakdowns:
            lines.append(breakdown.render(top))
        return "\n".join(lines) + "\n"


def explain_prediction(
    ensemble: RaterEnsemble, row: Union[FeatureTable, np.ndarray], neuron_id: int = -1
) -> PredictionExplanation:
    """Explain the fused prediction of one neuron by every member model.

    Each member's margin of the predicted class is broken down into the features that
    increased it and those that decreased it.
    """
    X = ensemble.members[0].matrix(row)[:1]
    classes, summed = ensemble.predict(X)
    layer = LayerClass(int(classes[0]))
    explanations = [tree_shap(member, X, neuron_id) for member in ensemble.members]
    breakdowns = [Contributions.of(e, layer, X[0]) for e in explanations]
    return PredictionExplanation(
        neuron_id=neuron_id,
        layer=layer,
        summed=summed[0],
        explanations=explanations,
        breakdowns=breakdowns,
    )


def explanation_columns(
    ids: Sequence[int], rater_id: str, phi: np.ndarray, base: np.ndarray, schema: List[str]
) -> Dict[str, list]:
    """Rows of ``explanations.csv``: one per neuron and class."""
    n, n_classes, _ = phi.shape
    columns: Dict[str, list] = {
        "id": [int(i) for i in ids for _ in range(n_classes)],
        "rater": [rater_id] * (n * n_classes),
        "class": [LayerClass(c).name for _ in range(n) for c in range(n_classes)],
        "base": [float(base[c]) for _ in range(n) for c in range(n_classes)],
    }
    flat = phi.reshape(n * n_classes, -1)
    for j, name in enumerate(schema):
        columns[name] = flat[:, j].tolist()
    return columns
