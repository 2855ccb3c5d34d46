"""Binary availability classifiers over (SR, UR, CUT) feature vectors.

Two model families are implemented with numpy only:

* ``lr``    logistic regression, standardized inputs, full-batch gradient
            descent with L2;
* ``boost`` gradient-boosted regression trees on logistic loss, exhaustive
            threshold search, Newton leaf values.

Class 1 is Available, class 0 Unavailable.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FeatureVector, PoolId

log = logging.getLogger(__name__)

FEATURES = ("sr", "ur", "cut")
MODEL_KINDS = ("lr", "boost")
MODEL_FORMAT = "spotprobe-model"


class PredictorError(ValueError):
    pass


def all_feature_sets() -> list[tuple[str, ...]]:
    """Every non-empty subset of FEATURES, smallest first."""
    return [c for k in range(1, len(FEATURES) + 1) for c in itertools.combinations(FEATURES, k)]


def parse_feature_set(text: str | Sequence[str]) -> tuple[str, ...]:
    names = text.replace(",", "+").split("+") if isinstance(text, str) else list(text)
    names = [n.strip().lower() for n in names if n.strip()]
    bad = [n for n in names if n not in FEATURES]
    if bad or not names:
        raise PredictorError(f"bad feature set {text!r}")
    return tuple(f for f in FEATURES if f in names)


def feature_row(v: FeatureVector, feature_set: Sequence[str]) -> list[float]:
    values = {"sr": float(v.sr), "ur": float(v.ur), "cut": float(v.cut_minutes)}
    return [values[f] for f in feature_set]


# ---------------------------------------------------------------------------
# Datasets and splits
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    pools: list
    feature_set: tuple

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(self.X[mask], self.y[mask], [p for p, m in zip(self.pools, mask) if m],
                       self.feature_set)

    def columns(self, feature_set: Sequence[str]) -> "Dataset":
        """Same rows restricted to ``feature_set`` (a subset of this dataset's features)."""
        feature_set = parse_feature_set(feature_set)
        idx = [self.feature_set.index(f) for f in feature_set]
        return Dataset(self.X[:, idx], self.y, self.pools, feature_set)


def build_dataset(vectors: Iterable[FeatureVector], feature_set: Sequence[str],
                  horizon_minutes: int) -> Dataset:
    """Rows with a defined label for ``horizon_minutes``; unlabeled cycles are dropped."""
    feature_set = parse_feature_set(feature_set)
    X, y, pools = [], [], []
    for v in vectors:
        lab = v.labels.get(horizon_minutes)
        if lab is None:
            continue
        X.append(feature_row(v, feature_set))
        y.append(lab)
        pools.append(v.pool)
    return Dataset(np.asarray(X, dtype=float).reshape(-1, len(feature_set)),
                   np.asarray(y, dtype=int), pools, feature_set)


def split_pools(pools: Iterable[PoolId], seed: int, train_fraction: float = 0.75
                ) -> tuple[list[PoolId], list[PoolId]]:
    """Deterministic pool-level split; 75/25 by pool count by default."""
    unique = sorted(set(pools))
    if len(unique) < 2:
        raise PredictorError("pool-level split needs at least two pools")
    order = np.random.default_rng(seed).permutation(len(unique))
    n_train = min(len(unique) - 1, max(1, int(round(train_fraction * len(unique)))))
    train = sorted(unique[i] for i in order[:n_train])
    test = sorted(unique[i] for i in order[n_train:])
    return train, test


def split_dataset(data: Dataset, seed: int, how: str = "pool", train_fraction: float = 0.75,
                  test_pools: Sequence[PoolId] | None = None) -> tuple[Dataset, Dataset]:
    if how == "pool" and len(set(data.pools)) < 2:
        # one pool cannot be split by identity; hold out its latest rows instead
        log.info("pool-level split needs two pools; using a chronological 75/25 split")
        n = len(data)
        is_test = np.arange(n) >= int(round(train_fraction * n))
    elif how == "pool":
        if test_pools is None:
            _, test_pools = split_pools(data.pools, seed, train_fraction)
        test_set = set(test_pools)
        is_test = np.array([p in test_set for p in data.pools], dtype=bool)
    elif how == "row":
        n = len(data)
        perm = np.random.default_rng(seed).permutation(n)
        is_test = np.zeros(n, dtype=bool)
        is_test[perm[int(round(train_fraction * n)):]] = True
    else:
        raise PredictorError(f"unknown split {how!r}")
    return data.subset(~is_test), data.subset(is_test)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

_PROB_EPS = 1e-12


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ModelSpec:
    kind: str = "boost"
    feature_set: tuple = FEATURES
    window_minutes: int = 240
    horizon_minutes: int = 0
    # logistic regression
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    # boosting
    rounds: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1
    min_samples_leaf: int = 1
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise PredictorError(f"unknown model kind {self.kind!r}")
        self.feature_set = parse_feature_set(self.feature_set)

    @property
    def label(self) -> str:
        return "+".join(self.feature_set)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_set"] = list(self.feature_set)
        return d


@dataclass
class Model:
    spec: ModelSpec
    params: dict
    train_pools: list = field(default_factory=list)
    test_pools: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.spec.feature_set)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_features:
            raise PredictorError(f"expected {self.n_features} features, got {X.shape[1]}")
        if self.spec.kind == "lr":
            z = _lr_margin(self.params, X)
        else:
            z = _boost_margin(self.params, X)
        return np.clip(_sigmoid(z), _PROB_EPS, 1.0 - _PROB_EPS)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    # -- serialization ---------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "version": 1,
            "spec": self.spec.to_dict(),
            "params": self.params,
            "train_pools": [p.as_fields() for p in self.train_pools],
            "test_pools": [p.as_fields() for p in self.test_pools],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Model":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise PredictorError("not a model artifact")
        return cls(ModelSpec(**doc["spec"]), doc["params"],
                   [PoolId.from_fields(p) for p in doc.get("train_pools", [])],
                   [PoolId.from_fields(p) for p in doc.get("test_pools", [])])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _lr_margin(params: dict, X: np.ndarray) -> np.ndarray:
    mean = np.asarray(params["mean"])
    scale = np.asarray(params["scale"])
    w = np.asarray(params["weights"])
    return ((X - mean) / scale) @ w + params["bias"]


def _train_lr(X: np.ndarray, y: np.ndarray, spec: ModelSpec) -> dict:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > 0
    # zero-variance columns are dropped: scale 1 and weight pinned at 0
    scale = np.where(keep, std, 1.0)
    Z = (X - mean) / scale
    Z[:, ~keep] = 0.0
    n, d = Z.shape
    w = np.zeros(d)
    b = 0.0
    yf = y.astype(float)
    for _ in range(spec.epochs):
        p = _sigmoid(Z @ w + b)
        err = p - yf
        grad_w = Z.T @ err / n + spec.l2 * w
        grad_b = err.mean()
        w -= spec.learning_rate * grad_w
        b -= spec.learning_rate * grad_b
    w[~keep] = 0.0
    if not (np.all(np.isfinite(w)) and math.isfinite(b)):
        raise PredictorError("logistic regression diverged")
    return {"mean": mean.tolist(), "scale": scale.tolist(), "weights": w.tolist(), "bias": float(b)}


# -- boosted trees -----------------------------------------------------------

def _best_split(ranks: list, uniq: list, member: np.ndarray, r: np.ndarray, min_leaf: int):
    """Best (gain, feature, threshold) over all features for rows in ``member``.

    ``ranks[j]`` maps each row to the index of its value in the sorted
    distinct values ``uniq[j]``, so candidate thresholds are aggregated with
    one bincount instead of a sort.  Gain is the squared-error reduction of
    fitting residuals ``r``.  Ties go to the lower feature index, then the
    lower threshold.
    """
    best = None
    rm = r[member]
    n = rm.size
    if n < 2 * min_leaf:
        return None
    total = rm.sum()
    for j, rk in enumerate(ranks):
        u = uniq[j].size
        if u < 2:
            continue
        rj = rk[member]
        cnt = np.bincount(rj, minlength=u)
        sums = np.bincount(rj, weights=rm, minlength=u)
        present = cnt > 0
        if present.sum() < 2:
            continue
        nl = np.cumsum(cnt)
        sl = np.cumsum(sums)
        # split after distinct value k (left = values <= uniq[k]); only at present values
        valid = present & (nl >= min_leaf) & (n - nl >= min_leaf) & (nl < n)
        if not valid.any():
            continue
        nlf = np.where(valid, nl, 1).astype(float)
        nrf = np.where(valid, n - nl, 1).astype(float)
        gain = sl ** 2 / nlf + (total - sl) ** 2 / nrf - total ** 2 / n
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))  # first maximum -> lowest threshold
        g = float(gain[k])
        if g <= 1e-12:
            continue
        if best is None or g > best[0] * (1 + 1e-12):
            best = (g, j, float(uniq[j][k]))
    return best


def _grow(X, ranks, uniq, member, r, hess, depth, spec, nodes, fitted) -> int:
    node_id = len(nodes)
    nodes.append(None)
    split = (_best_split(ranks, uniq, member, r, spec.min_samples_leaf)
             if depth < spec.max_depth else None)
    if split is None:
        value = float(r[member].sum() / (hess[member].sum() + spec.reg_lambda))
        nodes[node_id] = {"leaf": value}
        fitted[member] = value
        return node_id
    _, j, thr = split
    go_left = member & (X[:, j] <= thr)
    go_right = member & ~go_left
    left = _grow(X, ranks, uniq, go_left, r, hess, depth + 1, spec, nodes, fitted)
    right = _grow(X, ranks, uniq, go_right, r, hess, depth + 1, spec, nodes, fitted)
    nodes[node_id] = {"feature": j, "threshold": thr, "left": left, "right": right}
    return node_id


def _tree_predict(nodes: list, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        nid, rows = stack.pop()
        node = nodes[nid]
        if "leaf" in node:
            out[rows] = node["leaf"]
            continue
        mask = X[rows, node["feature"]] <= node["threshold"]
        stack.append((node["left"], rows[mask]))
        stack.append((node["right"], rows[~mask]))
    return out


def _boost_margin(params: dict, X: np.ndarray) -> np.ndarray:
    z = np.full(X.shape[0], params["base"], dtype=float)
    for nodes in params["trees"]:
        z += params["shrinkage"] * _tree_predict(nodes, X)
    return z


def _train_boost(X: np.ndarray, y: np.ndarray, spec: ModelSpec) -> dict:
    p0 = y.mean()
    base = math.log(p0 / (1 - p0))
    z = np.full(len(y), base)
    uniq, ranks = [], []
    for j in range(X.shape[1]):
        u, inv = np.unique(X[:, j], return_inverse=True)
        uniq.append(u)
        ranks.append(inv.ravel())
    everyone = np.ones(len(y), dtype=bool)
    trees = []
    for _ in range(spec.rounds):
        p = _sigmoid(z)
        r = y - p  # negative gradient of log-loss
        hess = p * (1 - p)
        nodes: list = []
        fitted = np.empty(len(y))
        _grow(X, ranks, uniq, everyone, r, hess, 0, spec, nodes, fitted)
        trees.append(nodes)
        z += spec.shrinkage * fitted
    return {"base": base, "shrinkage": spec.shrinkage, "trees": trees}


def train(data: Dataset, spec: ModelSpec, seed: int = 0) -> Model:
    """Fit a model; training is fully deterministic (``seed`` is recorded only)."""
    if tuple(data.feature_set) != tuple(spec.feature_set):
        raise PredictorError(f"dataset features {data.feature_set} != spec {spec.feature_set}")
    if len(data) == 0:
        raise PredictorError("empty training set")
    classes = set(np.unique(data.y).tolist())
    if classes != {0, 1}:
        raise PredictorError(f"training data has a single class {sorted(classes)}; refusing to fit")
    if spec.kind == "lr":
        params = _train_lr(data.X, data.y, spec)
    else:
        params = _train_boost(data.X, data.y, spec)
    params["seed"] = seed
    return Model(spec, params)


def predict(model: Model, features: Sequence[float]) -> tuple[float, int]:
    """Probability of Available and the class at threshold 0.5."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 1 or x.size != model.n_features:
        raise PredictorError(f"expected a {model.n_features}-vector, got shape {x.shape}")
    p = float(model.predict_proba(x)[0])
    return p, int(p >= 0.5)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class F1Report:
    macro: float
    available: float
    unavailable: float
    absent: tuple  # classes missing from both labels and predictions


def f1_report(predictions: Sequence[int], labels: Sequence[int]) -> F1Report:
    pred = np.asarray(predictions, dtype=int)
    lab = np.asarray(labels, dtype=int)
    if pred.shape != lab.shape:
        raise PredictorError(f"length mismatch: {pred.size} predictions vs {lab.size} labels")
    if pred.size == 0:
        raise PredictorError("f1 needs at least one prediction")
    per_class = {}
    absent = []
    for c in (1, 0):
        tp = int(np.sum((pred == c) & (lab == c)))
        fp = int(np.sum((pred == c) & (lab != c)))
        fn = int(np.sum((pred != c) & (lab == c)))
        if tp + fp + fn == 0:
            absent.append(c)
            per_class[c] = Fraction(0)
        else:
            per_class[c] = Fraction(2 * tp, 2 * tp + fp + fn)
    macro = (per_class[1] + per_class[0]) / 2
    return F1Report(float(macro), float(per_class[1]), float(per_class[0]), tuple(absent))


def f1_macro(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Unweighted mean of the Available and Unavailable F1 scores."""
    rep = f1_report(predictions, labels)
    if rep.absent:
        log.warning("f1_macro: class(es) %s absent from labels and predictions; scored as 0", rep.absent)
    return rep.macro


# ---------------------------------------------------------------------------
# Evaluation matrix
# ---------------------------------------------------------------------------

RESULT_COLUMNS = ["model", "features", "window_min", "horizon_min", "f1_macro_test",
                  "f1_available", "f1_unavailable", "f1_macro_train", "n_train", "n_test"]


@dataclass(frozen=True)
class EvalRow:
    model: str
    features: str
    window_min: int
    horizon_min: int
    f1_macro_test: float
    f1_available: float
    f1_unavailable: float
    f1_macro_train: float
    n_train: int
    n_test: int

    def as_list(self) -> list:
        return [getattr(self, c) for c in RESULT_COLUMNS]


def _eval_cell(args) -> EvalRow | None:
    tr, te, spec, seed = args
    tr, te = tr.columns(spec.feature_set), te.columns(spec.feature_set)
    model = train(tr, spec, seed)
    rep = f1_report(model.predict(te.X), te.y)
    train_f1 = f1_report(model.predict(tr.X), tr.y).macro
    return EvalRow(spec.kind, spec.label, spec.window_minutes, spec.horizon_minutes,
                   round(rep.macro, 6), round(rep.available, 6), round(rep.unavailable, 6),
                   round(train_f1, 6), len(tr), len(te))


def evaluate_matrix(vectors_by_window: dict, kinds: Sequence[str] = MODEL_KINDS,
                    feature_sets: Sequence[Sequence[str]] | None = None,
                    horizons: Sequence[int] = (0,), seed: int = 0, split: str = "pool",
                    hyperparams: dict | None = None, jobs: int = 1) -> list[EvalRow]:
    """Train/test every (model, feature set, window, horizon) cell.

    ``vectors_by_window`` maps window minutes to the labeled feature
    vectors computed with that window.  With pool-level splitting every
    cell uses the same train/test pools.
    """
    feature_sets = [parse_feature_set(f) for f in (feature_sets or all_feature_sets())]
    hyperparams = hyperparams or {}
    test_pools = None
    any_vectors = next(iter(vectors_by_window.values()), [])
    if split == "pool" and len({v.pool for v in any_vectors}) >= 2:
        _, test_pools = split_pools((v.pool for v in any_vectors), seed)
    splits: dict = {}
    for W in sorted(vectors_by_window):
        vectors = vectors_by_window[W]
        available = set(vectors[0].labels) if vectors else set()
        for h in horizons:
            if h not in available:
                log.warning("no labels for horizon %d at W=%d; skipping", h, W)
                continue
            data = build_dataset(vectors, FEATURES, h)
            if len(data) == 0:
                continue
            tr, te = split_dataset(data, seed, split, test_pools=test_pools)
            if len(te) == 0 or len(set(tr.y.tolist())) < 2:
                log.warning("skipping W=%d h=%d: degenerate split", W, h)
                continue
            splits[W, h] = (tr, te)
    cells = []
    for kind in kinds:
        for (W, h), (tr, te) in splits.items():
            for fs in feature_sets:
                spec = ModelSpec(kind=kind, feature_set=fs, window_minutes=W, horizon_minutes=h,
                                 **hyperparams.get(kind, {}))
                cells.append((tr, te, spec, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_eval_cell, cells))
    else:
        rows = [_eval_cell(c) for c in cells]
    return rows


def best_windows(rows: Sequence[EvalRow], selection_horizon: int = 0) -> dict[str, int]:
    """Per model, the window whose best feature set scores highest at ``selection_horizon``.

    Ties go to the smaller window.
    """
    best: dict[str, tuple[float, int]] = {}
    for r in rows:
        if r.horizon_min != selection_horizon:
            continue
        cur = best.get(r.model)
        key = (r.f1_macro_test, -r.window_min)
        if cur is None or key > (cur[0], -cur[1]):
            best[r.model] = (r.f1_macro_test, r.window_min)
    return {m: w for m, (_, w) in best.items()}


def write_results_csv(rows: Sequence[EvalRow], path: str | Path) -> None:
    import csv

    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow(r.as_list())


def read_results_csv(path: str | Path) -> list[EvalRow]:
    import csv

    with Path(path).open(encoding="utf-8", newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(EvalRow(d["model"], d["features"], int(d["window_min"]), int(d["horizon_min"]),
                               float(d["f1_macro_test"]), float(d["f1_available"]),
                               float(d["f1_unavailable"]), float(d["f1_macro_train"]),
                               int(d["n_train"]), int(d["n_test"])))
        return out


def train_split_model(vectors: Sequence[FeatureVector], spec: ModelSpec, seed: int = 0,
                      split: str = "pool") -> Model:
    """Train on the training pools of the standard split and record both pool lists."""
    data = build_dataset(vectors, spec.feature_set, spec.horizon_minutes)
    if split == "pool" and len(set(data.pools)) >= 2:
        train_pools, test_pools = split_pools(data.pools, seed)
        tr, _ = split_dataset(data, seed, "pool", test_pools=test_pools)
    elif split == "pool":
        train_pools, test_pools = sorted(set(data.pools)), []
        tr, _ = split_dataset(data, seed, "pool")
    else:
        train_pools, test_pools = sorted(set(data.pools)), []
        tr, _ = split_dataset(data, seed, "row")
    model = train(tr, spec, seed)
    model.train_pools, model.test_pools = train_pools, test_pools
    return model
