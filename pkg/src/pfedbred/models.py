"""Classification models with closed-form gradients.

Two softmax classifiers operate on flat parameter vectors: a multinomial
logistic regression (one linear layer) and a two-layer network with a leaky
ReLU hidden activation.  Gradients are written out by hand so that training
needs no autodiff framework and stays bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericalError

LEAKY_SLOPE = 0.01


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by subtracting the row max."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


class Mclr:
    """Multinomial logistic regression: softmax(W x + b)."""

    def __init__(self, num_features: int, num_classes: int):
        if num_features < 1 or num_classes < 2:
            raise ValueError("need num_features >= 1 and num_classes >= 2")
        self.num_features = num_features
        self.num_classes = num_classes

    @property
    def num_params(self) -> int:
        return self.num_classes * (self.num_features + 1)

    def _unpack(self, params: np.ndarray):
        c, d = self.num_classes, self.num_features
        if params.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got shape {params.shape}")
        w = params[: c * d].reshape(c, d)
        b = params[c * d:]
        return w, b

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        bound = 1.0 / np.sqrt(self.num_features)
        return rng.uniform(-bound, bound, size=self.num_params)

    def logits(self, params: np.ndarray, features: np.ndarray) -> np.ndarray:
        w, b = self._unpack(params)
        out = features @ w.T + b
        _check_finite(out, "logits")
        return out

    def per_example_loss(self, params, features, labels) -> np.ndarray:
        ls = log_softmax(self.logits(params, features))
        return -ls[np.arange(features.shape[0]), labels]

    def loss(self, params, features, labels) -> float:
        return float(self.per_example_loss(params, features, labels).mean())

    def grad(self, params, features, labels) -> np.ndarray:
        n = features.shape[0]
        probs = softmax(self.logits(params, features))
        probs[np.arange(n), labels] -= 1.0
        probs /= n
        dw = probs.T @ features
        db = probs.sum(axis=0)
        return np.concatenate([dw.ravel(), db])

    def predict_proba(self, params, features) -> np.ndarray:
        return softmax(self.logits(params, features))


class Dnn:
    """Two-layer network: softmax(W2 leaky_relu(W1 x + b1) + b2)."""

    def __init__(self, num_features: int, num_classes: int, hidden: int = 100,
                 negative_slope: float = LEAKY_SLOPE):
        if num_features < 1 or num_classes < 2 or hidden < 1:
            raise ValueError("need num_features >= 1, num_classes >= 2, hidden >= 1")
        self.num_features = num_features
        self.num_classes = num_classes
        self.hidden = hidden
        self.negative_slope = negative_slope

    @property
    def num_params(self) -> int:
        d, h, c = self.num_features, self.hidden, self.num_classes
        return h * d + h + c * h + c

    def _unpack(self, params: np.ndarray):
        d, h, c = self.num_features, self.hidden, self.num_classes
        if params.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got shape {params.shape}")
        o = 0
        w1 = params[o: o + h * d].reshape(h, d); o += h * d
        b1 = params[o: o + h]; o += h
        w2 = params[o: o + c * h].reshape(c, h); o += c * h
        b2 = params[o:]
        return w1, b1, w2, b2

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        d, h, c = self.num_features, self.hidden, self.num_classes
        bound1 = 1.0 / np.sqrt(d)
        bound2 = 1.0 / np.sqrt(h)
        layer1 = rng.uniform(-bound1, bound1, size=h * d + h)
        layer2 = rng.uniform(-bound2, bound2, size=c * h + c)
        return np.concatenate([layer1, layer2])

    def _forward(self, params, features):
        w1, b1, w2, b2 = self._unpack(params)
        pre = features @ w1.T + b1
        act = np.where(pre > 0.0, pre, self.negative_slope * pre)
        out = act @ w2.T + b2
        _check_finite(out, "logits")
        return pre, act, out

    def logits(self, params, features) -> np.ndarray:
        return self._forward(params, features)[2]

    def pre_activations(self, params, features) -> np.ndarray:
        """Hidden-layer pre-activations; useful for steering clear of the ReLU kink."""
        return self._forward(params, features)[0]

    def per_example_loss(self, params, features, labels) -> np.ndarray:
        ls = log_softmax(self.logits(params, features))
        return -ls[np.arange(features.shape[0]), labels]

    def loss(self, params, features, labels) -> float:
        return float(self.per_example_loss(params, features, labels).mean())

    def grad(self, params, features, labels) -> np.ndarray:
        w1, b1, w2, b2 = self._unpack(params)
        n = features.shape[0]
        pre, act, out = self._forward(params, features)
        delta2 = softmax(out)
        delta2[np.arange(n), labels] -= 1.0
        delta2 /= n
        dw2 = delta2.T @ act
        db2 = delta2.sum(axis=0)
        dact = delta2 @ w2
        delta1 = dact * np.where(pre > 0.0, 1.0, self.negative_slope)
        dw1 = delta1.T @ features
        db1 = delta1.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    def predict_proba(self, params, features) -> np.ndarray:
        return softmax(self.logits(params, features))


def make_model(kind: str, num_features: int, num_classes: int):
    if kind == "mclr":
        return Mclr(num_features, num_classes)
    if kind == "dnn":
        return Dnn(num_features, num_classes)
    raise ValueError(f"unknown model kind {kind!r}; expected 'mclr' or 'dnn'")


class LossOracle:
    """Mini-batch loss/gradient access to one client's view of a dataset.

    ``draw_batch`` samples indices uniformly without replacement.  When the
    requested batch covers the whole view it returns ``arange(n)`` without
    consuming the generator, so full-batch runs are reproducible regardless
    of how often batches are drawn.
    """

    def __init__(self, model, features: np.ndarray, labels: np.ndarray, batch_size: int = 20):
        if features.ndim != 2:
            raise DimensionError(f"features must be 2-d, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise DimensionError("labels must align with features rows")
        if features.shape[0] < 1:
            raise ValueError("oracle needs at least one example")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.model = model
        self.features = features
        self.labels = labels
        self.batch_size = batch_size

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def draw_batch(self, rng: np.random.Generator, batch_size: int | None = None) -> np.ndarray:
        size = self.batch_size if batch_size is None else batch_size
        if size >= self.n:
            return np.arange(self.n)
        return rng.choice(self.n, size=size, replace=False)

    def _select(self, idx):
        if idx is None:
            return self.features, self.labels
        return self.features[idx], self.labels[idx]

    def value(self, params: np.ndarray, idx=None) -> float:
        x, y = self._select(idx)
        return self.model.loss(params, x, y)

    def gradient(self, params: np.ndarray, idx=None) -> np.ndarray:
        x, y = self._select(idx)
        return self.model.grad(params, x, y)

    def predict_proba(self, params: np.ndarray, features=None) -> np.ndarray:
        return self.model.predict_proba(params, self.features if features is None else features)
