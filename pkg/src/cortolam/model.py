import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np
from loguru import logger

from .config import TrainConfig
from .data import LAYER_NAMES, N_CLASSES, LabelSet, LayerClass
from .errors import DegenerateDataError, MissingInputError, ModelFormatError, SchemaError
from .features import FeatureTable
from .io import write_json

logger.disable("cortolam")  # Disable emit logs by default

MODEL_FORMAT = "cortolam-model"
MODEL_VERSION = 1
ENSEMBLE_FORMAT = "cortolam-ensemble"

MIN_HESSIAN = 1e-16
MIN_GAIN = 1e-12
"""Splits must improve the regularised objective by more than this."""

MAX_STEP_HALVINGS = 10


@attr.s(auto_attribs=True, kw_only=True, eq=False)
class Tree:
    """Regression tree stored as flat node arrays.

    Node 0 is the root. Internal nodes send a row left when its value of
    ``feature[node]`` is at most ``threshold[node]``. Leaves have ``feature == -1`` and
    children ``-1``.
    """

    children_left: np.ndarray
    children_right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    """Margin contribution of each leaf (0 for internal nodes)."""

    cover: np.ndarray
    """Number of training rows reaching each node."""

    def __attrs_post_init__(self):
        self.children_left = np.asarray(self.children_left, dtype=np.int64)
        self.children_right = np.asarray(self.children_right, dtype=np.int64)
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.cover = np.asarray(self.cover, dtype=np.float64)

    @classmethod
    def leaf(cls, value: float, cover: float) -> "Tree":
        return cls(
            children_left=[-1], children_right=[-1], feature=[-1], threshold=[0.0],
            value=[value], cover=[cover],
        )

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depth[self.children_left[node]] = depth[node] + 1
                depth[self.children_right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf reached by each row of `X`."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return node
            r, n = rows[internal], node[internal]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.children_left[n], self.children_right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> Dict[str, list]:
        return {
            "children_left": self.children_left.tolist(),
            "children_right": self.children_right.tolist(),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], n_features: int) -> "Tree":
        try:
            tree = cls(**{f.name: doc[f.name] for f in attr.fields(cls)})
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"Malformed tree: {e}") from e
        n = tree.n_nodes
        arrays = (tree.children_left, tree.children_right, tree.threshold, tree.value, tree.cover)
        if n == 0 or any(len(a) != n for a in arrays):
            raise ModelFormatError("Tree node arrays have different lengths")
        internal = tree.feature >= 0
        if np.any(tree.feature >= n_features) or np.any(tree.feature < -1):
            raise ModelFormatError("Tree splits on a feature outside the schema")
        parents = np.flatnonzero(internal)
        children = np.concatenate([tree.children_left[internal], tree.children_right[internal]])
        if np.any(children >= n) or np.any(children <= np.concatenate([parents, parents])):
            raise ModelFormatError("Tree child index out of range")
        if not np.all(np.isfinite(tree.threshold)) or not np.all(np.isfinite(tree.value)):
            raise ModelFormatError("Tree holds non-finite values")
        return tree


def softmax(margins: np.ndarray) -> np.ndarray:
    z = margins - margins.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(margins: np.ndarray, y: np.ndarray) -> float:
    """Mean multiclass cross-entropy of integer labels `y`."""
    top = margins.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(margins - top).sum(axis=1))
    return float(np.mean(log_norm - margins[np.arange(len(y)), y]))


class _TreeGrower:
    """Exact greedy, level-wise growth of regression trees on one training matrix.

    Every feature is sorted once. A tree keeps, per feature, the row order grouped by
    node and sorted by value within a node; splitting a level is a stable partition of
    those orders, so no tree sorts again.
    """

    def __init__(self, X: np.ndarray, config: TrainConfig):
        self.config = config
        self.order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
        self.xs = np.take_along_axis(X.T, self.order, axis=1)

    def grow(self, g: np.ndarray, h: np.ndarray) -> Tuple[Tree, np.ndarray]:
        """Grow a tree on gradients `g` and hessians `h`.

        Returns:
            The tree with Newton leaf values ``-G / (H + λ)`` and the leaf of each
            training row.
        """
        cfg = self.config
        lam = cfg.l2_leaf_reg
        msl = cfg.min_samples_leaf
        n = len(g)
        order = self.order
        xs = self.xs
        leaf_of_row = np.zeros(n, dtype=np.int64)

        left: List[int] = [-1]
        right: List[int] = [-1]
        feature: List[int] = [-1]
        threshold: List[float] = [0.0]
        value: List[float] = [0.0]
        cover: List[float] = [float(n)]
        # (node, start, end) position segments of the nodes of the current level
        level = [(0, 0, n)]

        for depth in range(cfg.max_depth + 1):
            cg = np.cumsum(g[order], axis=1)
            ch = np.cumsum(h[order], axis=1)
            # Positions of leaves closed at earlier levels are singleton segments and stay put
            go_left_row = np.ones(n, dtype=bool)
            seg_start = np.arange(n, dtype=np.int64)
            seg_left = np.ones(n, dtype=np.int64)
            next_level = []

            for node, start, end in level:
                g_tot = float(cg[0, end - 1] - (cg[0, start - 1] if start else 0.0))
                h_tot = float(ch[0, end - 1] - (ch[0, start - 1] if start else 0.0))
                best = None
                if depth < cfg.max_depth and end - start >= 2 * msl:
                    best = self._best_split(cg, ch, xs, start, end, g_tot, h_tot)
                seg_start[start:end] = start
                if best is None:
                    value[node] = -g_tot / (h_tot + lam)
                    leaf_of_row[order[0, start:end]] = node
                    seg_left[start:end] = end - start
                    continue

                f, pos = best
                n_left = pos + 1 - start
                go_left_row[order[f, pos + 1:end]] = False
                seg_left[start:end] = n_left

                ln, rn = len(feature), len(feature) + 1
                left[node], right[node] = ln, rn
                feature[node], threshold[node] = f, float(xs[f, pos])
                for n_rows in (n_left, end - start - n_left):
                    left.append(-1)
                    right.append(-1)
                    feature.append(-1)
                    threshold.append(0.0)
                    value.append(0.0)
                    cover.append(float(n_rows))
                next_level.append((ln, start, start + n_left))
                next_level.append((rn, start + n_left, end))

            if not next_level:
                break
            order, xs = self._partition(order, xs, go_left_row, seg_start, seg_left)
            level = next_level

        tree = Tree(
            children_left=left, children_right=right, feature=feature,
            threshold=threshold, value=value, cover=cover,
        )
        return tree, leaf_of_row

    def _best_split(self, cg, ch, xs, start, end, g_tot, h_tot) -> Optional[Tuple[int, int]]:
        """Best (feature, last left position) of a node segment, or `None`."""
        lam = self.config.l2_leaf_reg
        msl = self.config.min_samples_leaf
        g_before = cg[:, start - 1:start] if start else 0.0
        h_before = ch[:, start - 1:start] if start else 0.0
        gl = cg[:, start:end - 1] - g_before
        hl = ch[:, start:end - 1] - h_before
        gr = g_tot - gl
        hr = h_tot - hl
        gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - g_tot * g_tot / (h_tot + lam)

        n_left = np.arange(1, end - start)
        size_ok = (n_left >= msl) & (end - start - n_left >= msl)
        valid = (xs[:, start:end - 1] < xs[:, start + 1:end]) & size_ok[None, :]
        gain = np.where(valid, gain, -np.inf)
        # First maximum in (feature, position) order: lowest feature, then lowest threshold
        flat = int(np.argmax(gain))
        f, i = divmod(flat, gain.shape[1])
        if not gain[f, i] > MIN_GAIN:
            return None
        return f, start + i

    @staticmethod
    def _partition(order, xs, go_left_row, seg_start, seg_left):
        """Stable partition of every node segment into its left rows then its right rows."""
        go_left = go_left_row[order]
        cl = np.cumsum(go_left, axis=1)
        before_segment = np.where(seg_start > 0, cl[:, np.maximum(seg_start - 1, 0)], 0)
        left_before = cl - go_left - before_segment
        right_before = (np.arange(order.shape[1]) - seg_start) - left_before
        new_pos = np.where(go_left, seg_start + left_before, seg_start + seg_left + right_before)
        new_order = np.empty_like(order)
        new_xs = np.empty_like(xs)
        np.put_along_axis(new_order, new_pos, order, axis=1)
        np.put_along_axis(new_xs, new_pos, xs, axis=1)
        return new_order, new_xs


@attr.s(auto_attribs=True, kw_only=True, eq=False, repr=False)
class TreeEnsembleModel:
    """Multi-class boosted trees trained on the labels of one rater.

    :attr:`trees` holds one tree per class per boosting round, round-major: tree
    ``r * n_classes + c`` adds to the margin of class ``c``.
    """

    rater_id: str
    schema: List[str]
    classes: List[str] = attr.Factory(lambda: list(LAYER_NAMES))
    base_scores: np.ndarray = attr.ib(factory=lambda: np.zeros(N_CLASSES), converter=np.asarray)
    trees: List[Tree] = attr.Factory(list)
    config: TrainConfig = attr.Factory(TrainConfig)
    training_loss: List[float] = attr.Factory(list)
    """Training cross-entropy before boosting and after each round."""

    def __attrs_post_init__(self):
        self.base_scores = np.asarray(self.base_scores, dtype=np.float64)
        if len(self.base_scores) != self.n_classes:
            raise ModelFormatError("One base score per class is required")
        if len(self.trees) % self.n_classes:
            raise ModelFormatError("The number of trees is not a multiple of the class count")

    def __repr__(self):
        return (
            f"{type(self).__name__}(rater={self.rater_id!r}, {self.n_rounds} rounds, "
            f"{len(self.schema)} features)"
        )

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_rounds(self) -> int:
        return len(self.trees) // self.n_classes

    def class_trees(self, c: int) -> List[Tree]:
        return self.trees[c::self.n_classes]

    def matrix(self, rows: Union[FeatureTable, np.ndarray]) -> np.ndarray:
        """Feature matrix of `rows` checked against the model schema."""
        if isinstance(rows, FeatureTable):
            if list(rows.columns) != list(self.schema):
                raise SchemaError(
                    f"Feature columns do not match the schema of model {self.rater_id}"
                )
            return rows.values
        X = np.asarray(rows, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.schema):
            raise SchemaError(
                f"Rows have {X.shape[1]} features; model {self.rater_id} expects {len(self.schema)}"
            )
        return X

    def margins(self, rows: Union[FeatureTable, np.ndarray]) -> np.ndarray:
        """Per-class accumulated scores before the softmax, ``(n, n_classes)``."""
        X = self.matrix(rows)
        margins = np.tile(self.base_scores, (len(X), 1))
        for t, tree in enumerate(self.trees):
            margins[:, t % self.n_classes] += tree.predict(X)
        return margins

    def predict_proba(self, rows: Union[FeatureTable, np.ndarray]) -> np.ndarray:
        return softmax(self.margins(rows))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "rater_id": self.rater_id,
            "schema": list(self.schema),
            "classes": list(self.classes),
            "base_scores": self.base_scores.tolist(),
            "config": attr.asdict(self.config),
            "training_loss": list(self.training_loss),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "TreeEnsembleModel":
        if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
            raise ModelFormatError("Not a cortolam model file")
        if doc.get("version") != MODEL_VERSION:
            raise ModelFormatError(
                f"Model format version {doc.get('version')} is not supported "
                f"(expected {MODEL_VERSION})"
            )
        try:
            schema = [str(c) for c in doc["schema"]]
            config = TrainConfig(**doc["config"])
            trees = [Tree.from_dict(t, len(schema)) for t in doc["trees"]]
            return cls(
                rater_id=str(doc["rater_id"]),
                schema=schema,
                classes=[str(c) for c in doc["classes"]],
                base_scores=np.asarray(doc["base_scores"], dtype=np.float64),
                trees=trees,
                config=config,
                training_loss=[float(v) for v in doc["training_loss"]],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"Malformed model: {e!r}") from e


def split_train_test(
    ids: Sequence[int], classes: Sequence[int], fraction: float = 0.75, seed: int = 0
) -> Tuple[List[int], List[int]]:
    """Stratified random split of labeled neurons.

    Each class receives its share of the training set by largest-remainder allocation of
    ``round(fraction * n)`` training neurons. Classes with fewer than two members cannot
    be stratified and are pooled into one unstratified group.

    Args:
        ids: Labeled neuron ids.
        classes: Class of each id.
        fraction: Fraction of the neurons used for training.
        seed: Seed of the random assignment within each class.

    Returns:
        Sorted training and test ids.

    Raises:
        DegenerateDataError: Fewer than four labeled neurons.
    """
    ids = np.asarray(ids, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    if len(ids) < 4:
        raise DegenerateDataError(f"Need at least 4 labeled neurons to split; got {len(ids)}")
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("Neuron ids are not unique")

    strata: List[np.ndarray] = []
    pooled: List[np.ndarray] = []
    for c in np.unique(classes):
        members = np.sort(ids[classes == c])
        if len(members) < 2:
            logger.warning(
                f"Class {LayerClass(int(c)).name} has {len(members)} labeled neuron(s); "
                "it is not stratified"
            )
            pooled.append(members)
        else:
            strata.append(members)
    if pooled:
        strata.append(np.sort(np.concatenate(pooled)))

    target = int(math.floor(fraction * len(ids) + 0.5))
    quota = np.array([fraction * len(s) for s in strata])
    n_train = np.floor(quota).astype(np.int64)
    remainder = quota - n_train
    # Largest remainders first, ties by stratum order
    for s in np.argsort(-remainder, kind="stable")[: target - int(n_train.sum())]:
        n_train[s] += 1

    rng = np.random.default_rng(seed)
    train: List[int] = []
    test: List[int] = []
    for members, n in zip(strata, n_train):
        shuffled = rng.permutation(members)
        train.extend(shuffled[:n].tolist())
        test.extend(shuffled[n:].tolist())
    return sorted(train), sorted(test)


def train(
    features: FeatureTable,
    labels: LabelSet,
    cfg: TrainConfig,
    ids: Optional[Sequence[int]] = None,
) -> TreeEnsembleModel:
    """Train the boosted trees of one rater with the softmax objective.

    Each round fits one regression tree per class to the cross-entropy gradients
    ``p - y`` with Newton leaf values from the hessians ``p (1 - p)``. The step of a round
    is halved while it would increase the training loss, so the recorded training loss
    never increases.

    Args:
        features: Feature table containing every training neuron.
        labels: Labels of the rater; unlabeled neurons are skipped.
        cfg: Boosting configuration.
        ids: Restrict training to these neurons (e.g. the training split).

    Raises:
        DegenerateDataError: Fewer than two classes are present.
        SchemaError: A training neuron has no feature row or a non-finite feature.
    """
    train_ids = [i for i in (labels.ids() if ids is None else ids) if i in labels.labels]
    X = features.values[features.rows_of(train_ids)]
    y = labels.encode(train_ids)
    if not np.all(np.isfinite(X)):
        raise SchemaError("Training features must be finite; impute missing values first")
    present = np.unique(y)
    if len(present) < 2:
        raise DegenerateDataError(
            f"Rater {labels.rater_id} labels a single class in the training set"
        )

    n_classes = N_CLASSES
    Y = np.zeros((len(y), n_classes))
    Y[np.arange(len(y)), y] = 1.0
    model = TreeEnsembleModel(rater_id=labels.rater_id, schema=list(features.columns), config=cfg)
    margins = np.tile(model.base_scores, (len(y), 1))
    loss = cross_entropy(margins, y)
    model.training_loss.append(loss)
    logger.info(
        f"Train model of rater {labels.rater_id} on {len(y):,d} neurons "
        f"({cfg.rounds} rounds, depth {cfg.max_depth})"
    )

    grower = _TreeGrower(X, cfg)
    with ThreadPoolExecutor(max_workers=cfg.jobs) as executor:
        for r in range(cfg.rounds):
            p = softmax(margins)
            grad = p - Y
            hess = np.maximum(p * (1.0 - p), MIN_HESSIAN)
            grown = list(executor.map(lambda c: grower.grow(grad[:, c], hess[:, c]), range(n_classes)))

            step = cfg.learning_rate
            for _ in range(MAX_STEP_HALVINGS + 1):
                update = np.column_stack([(tree.value * step)[leaf] for tree, leaf in grown])
                candidate = margins + update
                new_loss = cross_entropy(candidate, y)
                if new_loss <= loss:
                    break
                step *= 0.5
            else:
                logger.warning(f"Round {r + 1} cannot decrease the training loss; leaves zeroed")
                step = 0.0
                candidate, new_loss = margins, loss

            for tree, _ in grown:
                tree.value = tree.value * step
                model.trees.append(tree)
            margins, loss = candidate, new_loss
            model.training_loss.append(loss)
            if (r + 1) % 50 == 0:
                logger.debug(f"Round {r + 1}: training cross-entropy {loss:.6f}")

    accuracy = float(np.mean(np.argmax(margins, axis=1) == y))
    logger.success(
        f"Trained model of rater {labels.rater_id}: training cross-entropy {loss:.4f}, "
        f"training accuracy {accuracy:.4f}"
    )
    return model


def predict_proba(model: TreeEnsembleModel, rows: Union[FeatureTable, np.ndarray]) -> np.ndarray:
    """Class probabilities of each row; a single row gives a ``(1, n_classes)`` array."""
    return model.predict_proba(rows)


def save_model(model: TreeEnsembleModel, path: Path) -> None:
    write_json(model.to_dict(), path)


def load_model(path: Path) -> TreeEnsembleModel:
    """Load a model file.

    Raises:
        MissingInputError: The file does not exist.
        ModelFormatError: The file is truncated, malformed or of another format version.
    """
    if not path.exists():
        raise MissingInputError(f"model not found at {path}")
    try:
        with open(path, "rt") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"Malformed or truncated model file {path}: {e}") from e
    model = TreeEnsembleModel.from_dict(doc)
    logger.info(f"Loaded model of rater {model.rater_id} ({model.n_rounds} rounds) from {path}")
    return model


@attr.s(auto_attribs=True, eq=False)
class RaterEnsemble:
    """Per-rater models fused by summing their class probabilities."""

    members: List[TreeEnsembleModel]

    def __attrs_post_init__(self):
        if not self.members:
            raise ModelFormatError("An ensemble needs at least one member model")
        schema = self.members[0].schema
        for member in self.members[1:]:
            if member.schema != schema:
                raise SchemaError(
                    f"Model of rater {member.rater_id} has a different feature schema than "
                    f"model of rater {self.members[0].rater_id}"
                )

    @property
    def schema(self) -> List[str]:
        return self.members[0].schema

    @property
    def rater_ids(self) -> List[str]:
        return [m.rater_id for m in self.members]

    def predict(self, rows: Union[FeatureTable, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """Fused class (ties to the lowest ordinal) and summed probabilities of each row."""
        # Summing the sorted member probabilities makes the fusion independent of member order
        probs = np.stack([m.predict_proba(rows) for m in self.members])
        summed = np.sort(probs, axis=0).sum(axis=0)
        return np.argmax(summed, axis=1), summed

    def save(self, path: Path, models_dir: Path) -> None:
        """Write every member to `models_dir` and the ensemble index to `path`."""
        models_dir.mkdir(parents=True, exist_ok=True)
        members = []
        for member in self.members:
            model_path = models_dir / f"{member.rater_id}.json"
            save_model(member, model_path)
            members.append({"rater_id": member.rater_id, "model": _relative(model_path, path.parent)})
        write_json(
            {
                "format": ENSEMBLE_FORMAT,
                "version": MODEL_VERSION,
                "fusion": "sum of member class probabilities",
                "schema": list(self.schema),
                "members": members,
            },
            path,
        )

    @classmethod
    def load(cls, path: Path) -> "RaterEnsemble":
        """Load an ensemble index and its member models.

        Raises:
            MissingInputError: The ensemble or a member model does not exist.
            ModelFormatError: A file is malformed.
        """
        if not path.exists():
            raise MissingInputError(f"model not found at {path}")
        try:
            with open(path, "rt") as f:
                doc = json.load(f)
            if doc.get("format") != ENSEMBLE_FORMAT or doc.get("version") != MODEL_VERSION:
                raise ModelFormatError(f"{path} is not a supported cortolam ensemble file")
            member_paths = [path.parent / m["model"] for m in doc["members"]]
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
            raise ModelFormatError(f"Malformed ensemble file {path}: {e!r}") from e
        ensemble = cls([load_model(p) for p in member_paths])
        if ensemble.schema != doc.get("schema"):
            raise SchemaError(f"Member schemas do not match the schema recorded in {path}")
        return ensemble


def _relative(path: Path, base: Path) -> str:
    try:
        return path.relative_to(base).as_posix()
    except ValueError:
        return path.as_posix()


def ensemble_predict(
    ensemble: RaterEnsemble, row: Union[FeatureTable, np.ndarray]
) -> Tuple[LayerClass, np.ndarray]:
    """Fused prediction of one feature row.

    Returns:
        The class with the largest summed probability (ties to the lowest ordinal) and the
        summed probability vector.
    """
    classes, summed = ensemble.predict(row)
    return LayerClass(int(classes[0])), summed[0]
