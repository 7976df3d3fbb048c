"""Classifiers: the three-term interventional objective, IRM, and the nuisance probes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import ndcore as nd
from ._validation import batches, check_images, check_labels, glorot
from .datagen import LabeledImageSet
from .exceptions import ConfigurationError, TrainingDivergedError, ValidationError
from .formats import read_json, read_tensor_file, write_json, write_tensor_file

logger = logging.getLogger(__name__)


# -- shared MLP plumbing -------------------------------------------------------


def init_mlp(rng: np.random.Generator, sizes, dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{i}"] = glorot(rng, a, b, dtype)
        params[f"b{i}"] = np.zeros(b, dtype)
    return params


def mlp_forward(params, x, n_layers: int):
    """Return ``(output, penultimate activations)`` of a ReLU MLP."""
    h = x
    for i in range(n_layers - 1):
        h = nd.relu(nd.affine(h, params[f"W{i}"], params[f"b{i}"]))
    last = n_layers - 1
    return nd.affine(h, params[f"W{last}"], params[f"b{last}"]), h


class _Cycle:
    """Endless shuffled minibatches over ``n`` items from a private stream."""

    def __init__(self, rng, n, batch_size):
        self.rng, self.n, self.batch_size = rng, n, batch_size
        self._it = iter(())

    def next(self):
        idx = next(self._it, None)
        if idx is None or len(idx) < min(self.batch_size, self.n):
            self._it = batches(self.rng, self.n, self.batch_size)
            idx = next(self._it)
        return idx


def _step(params, opt, loss_fn, epoch, batch):
    with nd.Tape() as tape:
        leaves = {k: nd.Tensor(v, requires_grad=True) for k, v in params.items()}
        loss = loss_fn(leaves)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(epoch, batch, value)
    grads = tape.backward(loss)
    opt.step(params, {k: grads[t] for k, t in leaves.items()})
    return value


class _MLPBase(BaseEstimator):
    def _layers(self):
        return [self.n_features_in_, self.hidden_units, self.n_outputs_]

    def _forward(self, X, params=None):
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_features_in_)
        return mlp_forward(self.params_ if params is None else params, X, len(self._layers()) - 1)

    def transform(self, X):
        """Penultimate-layer activations (the feature layer)."""
        return self._forward(X)[1].data

    def save(self, directory, **extra) -> None:
        check_is_fitted(self, "params_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, value in self.params_.items():
            write_tensor_file(d / f"{name}.gint", value)
        write_json(
            d / "meta.json",
            {
                "estimator": type(self).__name__,
                "params": self.get_params(),
                "n_features_in": self.n_features_in_,
                "n_outputs": self.n_outputs_,
                "layers": sorted(self.params_),
                **extra,
            },
        )

    @staticmethod
    def load(directory):
        d = Path(directory)
        meta = read_json(d / "meta.json")
        cls = _ESTIMATORS[meta["estimator"]]
        model = cls(**meta["params"])
        model.n_features_in_ = meta["n_features_in"]
        model.n_outputs_ = meta["n_outputs"]
        if hasattr(model, "n_classes"):
            model.classes_ = np.arange(model.n_classes)
        model.params_ = {k: read_tensor_file(d / f"{k}.gint") for k in meta["layers"]}
        return model


# -- classifiers ---------------------------------------------------------------


class InterventionalClassifier(_MLPBase, ClassifierMixin):
    """MLP trained on ``CE(X) + lambda1 CE(X_int) + lambda2 CE(X_itr)``.

    Every step draws one minibatch per active term.  A term is active when its
    weight is positive (the first term: when ``use_original_data``).  An epoch
    is one pass over the first active term's data.
    """

    def __init__(
        self,
        hidden_units=256,
        lambda1=0.0,
        lambda2=0.0,
        use_original_data=True,
        learning_rate=1e-3,
        epochs=10,
        batch_size=128,
        batch_size_int=128,
        batch_size_itr=128,
        n_classes=10,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.use_original_data = use_original_data
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.batch_size_int = batch_size_int
        self.batch_size_itr = batch_size_itr
        self.n_classes = n_classes
        self.random_state = random_state

    def _terms(self, X, y, X_int, y_int, X_itr, y_itr):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be >= 0")
        spec = [
            ("original", 1.0 if self.use_original_data else 0.0, X, y, self.batch_size),
            ("interventional", self.lambda1, X_int, y_int, self.batch_size_int),
            ("transferred", self.lambda2, X_itr, y_itr, self.batch_size_itr),
        ]
        terms = []
        n_features = None
        for name, weight, data, labels, bs in spec:
            if weight == 0:
                continue
            if data is None or labels is None:
                raise ConfigurationError(f"{name} term has weight {weight} but no data")
            if bs < 1:
                raise ConfigurationError(f"batch size for the {name} term must be >= 1")
            data = check_images(data, n_features, name=name)
            n_features = data.shape[1]
            if data.shape[0] == 0:
                raise ConfigurationError(f"{name} term has no samples")
            terms.append((name, float(weight), data, check_labels(labels, data.shape[0], self.n_classes), bs))
        if not terms:
            raise ConfigurationError("no active loss term: enable the original data or set a lambda")
        return terms

    def objective(self, params, batches_):
        """Weighted sum of per-term cross-entropies as a tape-aware scalar."""
        total = None
        for weight, xb, yb in batches_:
            logits, _ = mlp_forward(params, xb, 2)
            term = nd.mul(nd.softmax_cross_entropy(logits, yb), weight)
            total = term if total is None else nd.add(total, term)
        return total

    def fit(self, X, y, X_int=None, y_int=None, X_itr=None, y_itr=None):
        terms = self._terms(X, y, X_int, y_int, X_itr, y_itr)
        seeds = np.random.SeedSequence(self.random_state).spawn(4)
        self.n_features_in_ = terms[0][2].shape[1]
        self.n_outputs_ = self.n_classes
        self.classes_ = np.arange(self.n_classes)
        self.params_ = init_mlp(np.random.default_rng(seeds[0]), self._layers())
        # each term keeps its own seed slot so enabling one never perturbs another
        slot = {"original": 1, "interventional": 2, "transferred": 3}
        streams = {
            name: _Cycle(np.random.default_rng(seeds[slot[name]]), data.shape[0], bs)
            for name, _, data, _, bs in terms
        }
        opt = nd.Adam(learning_rate=self.learning_rate)
        primary = terms[0]
        steps = -(-primary[2].shape[0] // primary[4])
        self.loss_history_ = []
        for epoch in range(1, self.epochs + 1):
            for b in range(steps):
                drawn = []
                for name, weight, data, labels, _ in terms:
                    idx = streams[name].next()
                    drawn.append((weight, data[idx], labels[idx]))
                self.loss_history_.append(
                    _step(self.params_, opt, lambda p: self.objective(p, drawn), epoch, b)
                )
        return self

    def decision_function(self, X):
        return self._forward(X)[0].data

    def predict_proba(self, X):
        return nd.softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        # np.argmax returns the lowest index on ties
        return np.argmax(self.decision_function(X), axis=1)


class IRMClassifier(InterventionalClassifier):
    """IRMv1: per-environment risk plus the squared logit-scale gradient.

    The penalty weight is 1 for the first ``warmup_steps`` updates and
    ``penalty_weight`` afterwards; once it exceeds 1 the whole loss is divided
    by it.
    """

    def __init__(
        self,
        hidden_units=256,
        penalty_weight=1e4,
        warmup_steps=100,
        learning_rate=1e-3,
        epochs=10,
        batch_size=128,
        n_classes=10,
        random_state=0,
    ):
        super().__init__(
            hidden_units=hidden_units,
            learning_rate=learning_rate,
            epochs=epochs,
            batch_size=batch_size,
            n_classes=n_classes,
            random_state=random_state,
        )
        self.penalty_weight = penalty_weight
        self.warmup_steps = warmup_steps

    def irm_objective(self, params, env_batches, weight):
        risk = penalty = None
        for xb, yb in env_batches:
            logits, _ = mlp_forward(params, xb, 2)
            ce = nd.softmax_cross_entropy(logits, yb)
            pen = nd.logit_scale_gradient_penalty(logits, yb)
            risk = ce if risk is None else nd.add(risk, ce)
            penalty = pen if penalty is None else nd.add(penalty, pen)
        total = nd.add(risk, nd.mul(penalty, float(weight)))
        if weight > 1:
            total = nd.mul(total, 1.0 / weight)
        return total

    def fit(self, environments, y=None):
        envs = [_as_xy(e) for e in environments]
        if len(envs) < 2:
            raise ConfigurationError("IRM needs at least two environments")
        if self.penalty_weight < 0:
            raise ConfigurationError("penalty_weight must be >= 0")
        data = []
        n_features = None
        for X, labels in envs:
            X = check_images(X, n_features)
            n_features = X.shape[1]
            data.append((X, check_labels(labels, X.shape[0], self.n_classes)))
        seeds = np.random.SeedSequence(self.random_state).spawn(1 + len(data))
        self.n_features_in_ = n_features
        self.n_outputs_ = self.n_classes
        self.classes_ = np.arange(self.n_classes)
        self.params_ = init_mlp(np.random.default_rng(seeds[0]), self._layers())
        streams = [_Cycle(np.random.default_rng(s), X.shape[0], self.batch_size) for s, (X, _) in zip(seeds[1:], data)]
        opt = nd.Adam(learning_rate=self.learning_rate)
        steps = -(-max(X.shape[0] for X, _ in data) // self.batch_size)
        self.loss_history_ = []
        step = 0
        for epoch in range(1, self.epochs + 1):
            for b in range(steps):
                weight = self.penalty_weight if step >= self.warmup_steps else min(1.0, self.penalty_weight)
                drawn = []
                for stream, (X, labels) in zip(streams, data):
                    idx = stream.next()
                    drawn.append((X[idx], labels[idx]))
                self.loss_history_.append(
                    _step(self.params_, opt, lambda p: self.irm_objective(p, drawn, weight), epoch, b)
                )
                step += 1
        return self


def _as_xy(env):
    if isinstance(env, LabeledImageSet):
        return env.images, env.labels
    X, y = env
    return X, y


def train_classifier(X: LabeledImageSet | None, X_int=None, X_itr=None, config=None):
    config = dict(config or {})
    clf = InterventionalClassifier(**config)
    pick = lambda d: (None, None) if d is None else (d.images, d.labels)
    return clf.fit(*pick(X), *pick(X_int), *pick(X_itr))


def irm_train(environments, penalty_weight=1e4, config=None) -> IRMClassifier:
    return IRMClassifier(penalty_weight=penalty_weight, **(config or {})).fit(environments)


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    split: str
    top1: float
    per_class: dict[int, float]
    chance: float
    n: int

    def row(self) -> dict:
        return {"split": self.split, "top1": self.top1, "chance": self.chance}


def evaluate(classifier, test: LabeledImageSet, split: str = "test") -> EvalReport:
    if test is None or len(test) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    pred = classifier.predict(test.images)
    labels = test.labels
    per_class = {
        int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)
    }
    n_classes = getattr(classifier, "n_classes", 10)
    return EvalReport(split, float(np.mean(pred == labels)), per_class, 1.0 / n_classes, len(test))


# -- nuisance regression and correlation probe ----------------------------------


class NuisanceRegressor(_MLPBase, RegressorMixin):
    """MLP from image to intervention vector ``z`` trained with L1 loss.

    A ``validation_fraction`` of the data is held out; ``validation_mae_``
    and ``baseline_mae_`` (predicting the training-mean z) are recorded.
    """

    def __init__(
        self,
        hidden_units=256,
        learning_rate=1e-3,
        epochs=10,
        batch_size=128,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, z):
        if z is None:
            raise ConfigurationError("nuisance regression needs z annotations")
        X = check_images(X)
        z = np.asarray(z, dtype=np.float32)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != X.shape[0]:
            raise ConfigurationError("z annotations do not align with images")
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(X.shape[0])
        n_val = int(round(self.validation_fraction * X.shape[0]))
        val, train = order[:n_val], order[n_val:]
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = z.shape[1]
        self.params_ = init_mlp(rng, self._layers())
        opt = nd.Adam(learning_rate=self.learning_rate)
        Xt, zt = X[train], z[train]

        def loss_fn(p, xb, zb):
            out, _ = mlp_forward(p, xb, 2)
            return nd.mean_absolute_error(out, zb)

        self.loss_history_ = []
        for epoch in range(1, self.epochs + 1):
            for b, idx in enumerate(batches(rng, Xt.shape[0], self.batch_size)):
                self.loss_history_.append(
                    _step(self.params_, opt, lambda p: loss_fn(p, Xt[idx], zt[idx]), epoch, b)
                )
        if n_val:
            self.validation_mae_ = float(np.abs(self.predict(X[val]) - z[val]).mean())
            self.baseline_mae_ = float(np.abs(zt.mean(axis=0) - z[val]).mean())
        else:
            self.validation_mae_ = self.baseline_mae_ = float("nan")
        return self

    def predict(self, X):
        return self._forward(X)[0].data


_ESTIMATORS = {
    cls.__name__: cls for cls in (InterventionalClassifier, IRMClassifier, NuisanceRegressor)
}


def nuisance_regressor_train(X_int: LabeledImageSet, config=None) -> NuisanceRegressor:
    if X_int.nuisance is None:
        raise ConfigurationError("X_int carries no nuisance annotations")
    return NuisanceRegressor(**(config or {})).fit(X_int.images, X_int.nuisance)


@dataclass
class ProbeResult:
    subset_size: int
    classes: list[int]
    accuracy: float
    chance: float
    ratio: float
    n_train: int
    n_test: int = field(default=0)


def correlation_probe(
    z_hat,
    labels,
    subset_size: int = 10,
    *,
    hidden_units=128,
    epochs=20,
    batch_size=128,
    learning_rate=1e-3,
    test_fraction=0.2,
    seed=0,
) -> ProbeResult:
    """How many times better than chance ``z_hat`` predicts the label.

    A two-hidden-layer MLP is trained on a random ``subset_size`` of the
    classes (80/20 split); the ratio is held-out accuracy over ``1/subset_size``.
    """
    z_hat = np.asarray(z_hat, dtype=np.float32)
    if z_hat.ndim == 1:
        z_hat = z_hat[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    if z_hat.shape[0] != labels.shape[0]:
        raise ValidationError("z_hat and labels are not aligned")
    present = np.unique(labels)
    if subset_size < 2:
        raise ValidationError("subset size must be at least 2")
    if subset_size > len(present):
        raise ValidationError(f"subset size {subset_size} exceeds {len(present)} classes")
    rng = np.random.default_rng(seed)
    classes = np.sort(rng.choice(present, size=subset_size, replace=False))
    keep = np.isin(labels, classes)
    z, y = z_hat[keep], np.searchsorted(classes, labels[keep])
    # standardise so the probe's step size suits any nuisance scale
    scale = z.std(axis=0)
    z = (z - z.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    order = rng.permutation(z.shape[0])
    n_test = int(round(test_fraction * z.shape[0]))
    test, train = order[:n_test], order[n_test:]
    params = init_mlp(rng, [z.shape[1], hidden_units, hidden_units, subset_size])
    opt = nd.Adam(learning_rate=learning_rate)
    zt, yt = z[train], y[train]
    for epoch in range(1, epochs + 1):
        for b, idx in enumerate(batches(rng, zt.shape[0], batch_size)):
            _step(
                params,
                opt,
                lambda p: nd.softmax_cross_entropy(mlp_forward(p, zt[idx], 3)[0], yt[idx]),
                epoch,
                b,
            )
    logits = mlp_forward(params, z[test], 3)[0].data
    acc = float(np.mean(np.argmax(logits, axis=1) == y[test]))
    chance = 1.0 / subset_size
    return ProbeResult(subset_size, classes.tolist(), acc, chance, acc / chance, len(train), n_test)
