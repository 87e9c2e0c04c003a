"""Boosted random forest: second-order gradient boosting of tree forests.

Every boosting round grows ``trees_per_round`` regression trees on the same
(gradient, hessian) pair, each on its own seeded row and column subsample.
The round adds ``learning_rate * mean(tree outputs)`` to the margins. With
one tree per round this is plain gradient boosting (BT preset); with one
round and learning rate 1 it is a random forest of Newton-step trees (RF).

Scores are raw margins of the logistic loss: no sigmoid is applied and
larger means more anomalous.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Union

import numpy as np

from . import rng as rng_streams
from .errors import (
    DimensionMismatchError,
    EmptyInputError,
    ModelParseError,
    ModelVersionError,
    ValidationError,
)

logger = logging.getLogger(__name__)

FORMAT_NAME = "segad-brf"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BrfConfig:
    num_rounds: int = 10
    trees_per_round: int = 200
    learning_rate: float = 0.3
    max_depth: int = 5
    subsample_rows: float = 0.6
    colsample_per_tree: float = 0.6
    colsample_per_node: float = 0.6
    l1_alpha: float = 1.0
    l2_lambda: float = 1.0
    min_child_weight: float = 1.0
    base_margin: float = 0.0
    seed: int = 0

    def __post_init__(self):
        # num_rounds == 0 is allowed: it describes the untrained model.
        if self.num_rounds < 0 or self.trees_per_round < 1 or self.max_depth < 0:
            raise ValidationError(f"invalid tree counts in {self}")
        for name in ("subsample_rows", "colsample_per_tree", "colsample_per_node"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.l1_alpha < 0 or self.l2_lambda < 0 or self.min_child_weight < 0:
            raise ValidationError("regularization terms must be non-negative")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "BrfConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown BRF config keys: {sorted(unknown)}")
        return cls(**d)


def preset(name: str, **overrides) -> BrfConfig:
    """Configurations of the three ensemble variants: ``brf``, ``rf``, ``bt``."""
    base = BrfConfig()
    name = name.lower()
    if name == "brf":
        cfg = base
    elif name == "rf":
        cfg = replace(base, num_rounds=1, trees_per_round=2000, learning_rate=1.0)
    elif name == "bt":
        cfg = replace(base, num_rounds=2000, trees_per_round=1, colsample_per_tree=1.0)
    else:
        raise ValidationError(f"unknown preset {name!r}; choose brf, rf or bt")
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------- #
# Objective and regularized Newton step

def sigmoid(margin):
    m = np.asarray(margin, dtype=np.float64)
    e = np.exp(-np.abs(m))
    p = np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return p if p.ndim else float(p)


def logistic_grad_hess(margin, label):
    """Gradient and hessian of the logistic loss w.r.t. the raw margin."""
    p = sigmoid(margin)
    return p - label, p * (1.0 - p)


def soft_threshold(G, alpha):
    if np.ndim(G):
        return np.sign(G) * np.maximum(np.abs(G) - alpha, 0.0)
    if G > alpha:
        return G - alpha
    if G < -alpha:
        return G + alpha
    return 0.0


def leaf_weight(G: float, H: float, cfg: BrfConfig) -> float:
    return -soft_threshold(G, cfg.l1_alpha) / (H + cfg.l2_lambda)


def _score(G, H, alpha, lam):
    s = soft_threshold(G, alpha)
    return s * s / (H + lam)


def split_gain(G_L, H_L, G_R, H_R, cfg: BrfConfig):
    a, lam = cfg.l1_alpha, cfg.l2_lambda
    return 0.5 * (_score(G_L, H_L, a, lam) + _score(G_R, H_R, a, lam)
                  - _score(G_L + G_R, H_L + H_R, a, lam))


# --------------------------------------------------------------------------- #
# Trees

@dataclass(frozen=True)
class Leaf:
    weight: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "Node"
    right: "Node"
    default_left: bool = True  # missing values are rejected; kept for the format
    gain: float = 0.0


Node = Union[Leaf, Split]


def tree_depth(node: Node) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def tree_nodes(node: Node):
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        if isinstance(n, Split):
            stack += [n.right, n.left]


def _take(count: int, frac: float) -> int:
    return max(1, min(count, int(math.floor(frac * count + 0.5))))


def _subset(rng: np.random.Generator, items: np.ndarray, frac: float) -> np.ndarray:
    if frac >= 1.0:
        return items
    return np.sort(rng.choice(items, size=_take(items.size, frac), replace=False))


def _best_split(X, grad, hess, rows, cols, G, H, cfg):
    """Exhaustive search over ``cols`` of the split with the largest gain.

    Returns ``(feature, threshold, gain)`` or ``None`` when no admissible
    split has positive gain. Ties go to the lowest feature index, then the
    lowest threshold.
    """
    n = rows.size
    Xn = X[np.ix_(rows, cols)]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    gl = np.cumsum(grad[rows][order], axis=0)[:-1]
    hl = np.cumsum(hess[rows][order], axis=0)[:-1]
    gr = G - gl
    hr = H - hl
    a, lam, mcw = cfg.l1_alpha, cfg.l2_lambda, cfg.min_child_weight
    gain = 0.5 * (_score(gl, hl, a, lam) + _score(gr, hr, a, lam) - _score(G, H, a, lam))
    ok = (xs[1:] > xs[:-1]) & (hl >= mcw) & (hr >= mcw)
    gain = np.where(ok, gain, -np.inf)
    flat = gain.T.ravel()  # feature-major so argmax prefers low feature, then low position
    j = int(np.argmax(flat))
    best = flat[j]
    if not best > 0.0:
        return None
    fi, pos = divmod(j, n - 1)
    lo, hi = xs[pos, fi], xs[pos + 1, fi]
    thr = lo + 0.5 * (hi - lo)
    if not lo < thr <= hi:
        thr = hi
    return int(cols[fi]), float(thr), float(best)


def build_tree(X: np.ndarray, grad: np.ndarray, hess: np.ndarray, cfg: BrfConfig,
               rng: np.random.Generator) -> Node:
    """Grow one exact-greedy regression tree on a seeded subsample.

    Random draws happen in a fixed order: rows, tree columns, then node
    columns in depth-first (left before right) order.
    """
    X = np.asarray(X, dtype=np.float64)
    n, F = X.shape
    rows = _subset(rng, np.arange(n), cfg.subsample_rows)
    tree_cols = _subset(rng, np.arange(F), cfg.colsample_per_tree)

    def grow(rows, depth):
        G = float(grad[rows].sum())
        H = float(hess[rows].sum())
        if depth < cfg.max_depth and rows.size >= 2:
            cols = _subset(rng, tree_cols, cfg.colsample_per_node)
            found = _best_split(X, grad, hess, rows, cols, G, H, cfg)
            if found is not None:
                f, thr, gain = found
                go_left = X[rows, f] < thr
                return Split(f, thr, grow(rows[go_left], depth + 1), grow(rows[~go_left], depth + 1), gain=gain)
        return Leaf(leaf_weight(G, H, cfg))

    return grow(rows, 0)


def _compile_forest(trees: list[Node]):
    """Pack trees into padded node arrays (feature, threshold, left, right, value).

    ``feature == -1`` marks a leaf.
    """
    packed = []
    for tree in trees:
        feat, thr, left, right, val = [], [], [], [], []

        def add(node):
            i = len(feat)
            feat.append(-1)
            thr.append(0.0)
            left.append(i)
            right.append(i)
            val.append(0.0)
            if isinstance(node, Leaf):
                val[i] = node.weight
            else:
                feat[i] = node.feature
                thr[i] = node.threshold
                left[i] = add(node.left)
                right[i] = add(node.right)
            return i

        add(tree)
        packed.append((feat, thr, left, right, val))
    m = max(len(p[0]) for p in packed)

    def pad(col, fill, dtype):
        return np.array([p[col] + [fill] * (m - len(p[col])) for p in packed], dtype=dtype)

    return pad(0, -1, np.int64), pad(1, 0.0, np.float64), pad(2, 0, np.int64), pad(3, 0, np.int64), \
        pad(4, 0.0, np.float64)


def forest_outputs(trees: list[Node], X: np.ndarray) -> np.ndarray:
    """Leaf values of every tree for every row, shape ``(len(trees), n)``."""
    feat, thr, left, right, val = _compile_forest(trees)
    T, n = len(trees), X.shape[0]
    node = np.zeros((T, n), dtype=np.int64)
    tidx = np.arange(T)[:, None]
    ridx = np.arange(n)[None, :]
    while True:
        f = feat[tidx, node]
        inner = f >= 0
        if not inner.any():
            break
        x = X[ridx, np.where(inner, f, 0)]
        nxt = np.where(x < thr[tidx, node], left[tidx, node], right[tidx, node])
        node = np.where(inner, nxt, node)
    return val[tidx, node]


def round_contribution(outputs: np.ndarray, learning_rate: float) -> np.ndarray:
    """Combine one round's tree outputs into a margin increment.

    Trees of a round are averaged, so the step size does not depend on the
    number of parallel trees.
    """
    acc = np.zeros(outputs.shape[1], dtype=np.float64)
    for row in outputs:  # fixed sequential order: same bits for any batch size
        acc += row
    return learning_rate * (acc / outputs.shape[0])


# --------------------------------------------------------------------------- #
# Model

@dataclass(frozen=True)
class BrfModel:
    config: BrfConfig
    rounds: tuple[tuple[Node, ...], ...]
    feature_count: int

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(tuple(r) for r in self.rounds))
        if len(self.rounds) != self.config.num_rounds:
            raise ValidationError(f"model has {len(self.rounds)} rounds, config says {self.config.num_rounds}")
        for r in self.rounds:
            if len(r) != self.config.trees_per_round:
                raise ValidationError(f"round has {len(r)} trees, config says {self.config.trees_per_round}")
            for tree in r:
                for node in tree_nodes(tree):
                    if isinstance(node, Split) and not 0 <= node.feature < self.feature_count:
                        raise ValidationError(f"tree references feature {node.feature} >= {self.feature_count}")

    def feature_importance(self) -> np.ndarray:
        """Total split gain per feature, summed over all trees."""
        imp = np.zeros(self.feature_count)
        for r in self.rounds:
            for tree in r:
                for node in tree_nodes(tree):
                    if isinstance(node, Split):
                        imp[node.feature] += node.gain
        return imp


def _check_matrix(X, feature_count=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if feature_count is not None and X.shape[1] != feature_count:
        raise DimensionMismatchError(f"model expects {feature_count} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("feature matrix contains non-finite values (missing values are not supported)")
    return X


def _advance(margins: np.ndarray, trees, X, learning_rate) -> np.ndarray:
    return margins + round_contribution(forest_outputs(list(trees), X), learning_rate)


def train(X, y, cfg: BrfConfig, threads: int = 1) -> BrfModel:
    """Fit a model to features ``X`` and binary labels ``y`` (1 = bad).

    Trees of one round are independent and may be grown on ``threads``
    workers; each tree draws from its own stream keyed by
    ``(seed, round, tree)``, so the result does not depend on ``threads``.
    """
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, F = X.shape
    if n == 0 or F == 0:
        raise EmptyInputError(f"cannot train on a {n}x{F} feature matrix")
    if y.shape[0] != n:
        raise DimensionMismatchError(f"{n} feature rows but {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 (good) or 1 (bad)")
    if np.unique(y).size < 2:
        warnings.warn("training data contains a single class", UserWarning, stacklevel=2)

    margins = np.full(n, cfg.base_margin, dtype=np.float64)
    rounds = []
    pool = ThreadPoolExecutor(threads) if threads > 1 and cfg.trees_per_round > 1 else None
    try:
        for r in range(cfg.num_rounds):
            grad, hess = logistic_grad_hess(margins, y)

            def fit(t, r=r, grad=grad, hess=hess):
                return build_tree(X, grad, hess, cfg, rng_streams.stream(rng_streams.TREE, cfg.seed, r, t))

            ts = range(cfg.trees_per_round)
            trees = tuple(pool.map(fit, ts) if pool else map(fit, ts))
            margins = _advance(margins, trees, X, cfg.learning_rate)
            rounds.append(trees)
            logger.debug("round %d/%d: mean margin %.4f", r + 1, cfg.num_rounds, margins.mean())
    finally:
        if pool:
            pool.shutdown()
    return BrfModel(cfg, tuple(rounds), F)


def predict_margin(model: BrfModel, X):
    """Raw margin for one feature vector (returns a float) or a matrix."""
    single = np.ndim(X) == 1
    X = _check_matrix(np.atleast_2d(X), model.feature_count)
    margins = np.full(X.shape[0], model.config.base_margin, dtype=np.float64)
    for trees in model.rounds:
        margins = _advance(margins, trees, X, model.config.learning_rate)
    return float(margins[0]) if single else margins


# --------------------------------------------------------------------------- #
# Serialization: nested arrays; a split is [feature, threshold, gain,
# default_left, left, right] and a leaf is [weight].

def _node_to_json(node: Node):
    if isinstance(node, Leaf):
        return [node.weight]
    return [node.feature, node.threshold, node.gain, int(node.default_left),
            _node_to_json(node.left), _node_to_json(node.right)]


def _node_from_json(obj) -> Node:
    if not isinstance(obj, list):
        raise ModelParseError(f"tree node must be an array, got {type(obj).__name__}")
    if len(obj) == 1:
        return Leaf(float(obj[0]))
    if len(obj) != 6:
        raise ModelParseError(f"tree node must have 1 or 6 entries, got {len(obj)}")
    f, thr, gain, dl, left, right = obj
    if not isinstance(f, int):
        raise ModelParseError("split feature must be an integer")
    return Split(f, float(thr), _node_from_json(left), _node_from_json(right), bool(dl), float(gain))


def serialize(model: BrfModel, provenance: dict | None = None) -> str:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "feature_count": model.feature_count,
        "config": asdict(model.config),
        "rounds": [[_node_to_json(t) for t in r] for r in model.rounds],
    }
    if provenance:
        doc["provenance"] = provenance
    return json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n"


def deserialize(text: str) -> BrfModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"model document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelParseError("not a segad-brf model document")
    if str(doc.get("version")) != str(FORMAT_VERSION):
        raise ModelVersionError(f"unsupported model version {doc.get('version')!r}")
    try:
        cfg = BrfConfig.from_dict(doc["config"])
        rounds = tuple(tuple(_node_from_json(t) for t in r) for r in doc["rounds"])
        return BrfModel(cfg, rounds, int(doc["feature_count"]))
    except (KeyError, TypeError, ValidationError) as exc:
        if isinstance(exc, ModelParseError):
            raise
        raise ModelParseError(f"malformed model document: {exc}") from None


def save_model(model: BrfModel, path, provenance: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(model, provenance))


def load_model(path) -> BrfModel:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())
