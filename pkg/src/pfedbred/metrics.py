"""Evaluation metrics for federated runs.

Covers the two accuracy views (global model on pooled test data, personalized
models on their own clients' test data), per-class loss deviations against the
population mean, the generalized coherence estimate over client update
directions, and Savitzky-Golay smoothing for plotting noisy round series.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from .errors import ConfigError, DegenerateInputError, DimensionError

_ZERO_NORM_TOL = 1e-300


@dataclass
class RoundMetrics:
    """What gets recorded after each aggregation."""

    round: int
    global_acc_globaltest: float
    personalized_acc_localtest: float
    mean_local_loss: float
    gce: float | None = None
    per_class_deviation_global: dict[int, float] = field(default_factory=dict)
    per_class_deviation_local: dict[int, float] = field(default_factory=dict)


@dataclass
class LocalTestResult:
    """Personalized evaluation across clients, weighted by local test size."""

    weighted_accuracy: float
    weighted_loss: float
    per_class_loss: np.ndarray  # (clients, classes), 0.0 where a class is absent
    class_counts: np.ndarray  # (clients, classes) test example counts


def per_class_stats(model, params, features, labels, num_classes):
    """Accuracy, mean loss, per-class mean loss, and per-class counts.

    Classes absent from ``labels`` report a loss of 0 and a count of 0.
    """
    losses = model.per_example_loss(params, features, labels)
    preds = np.argmax(model.predict_proba(params, features), axis=1)
    acc = float(np.mean(preds == labels))
    per_class = np.zeros(num_classes)
    counts = np.zeros(num_classes, dtype=np.int64)
    for cls in range(num_classes):
        mask = labels == cls
        counts[cls] = int(mask.sum())
        if counts[cls]:
            per_class[cls] = float(losses[mask].mean())
    return acc, float(losses.mean()), per_class, counts


def evaluate_global(model, params, features, labels, num_classes: int):
    """Accuracy and per-class loss of one model on a pooled test set."""
    if features.shape[0] < 1:
        raise ConfigError("global test set is empty")
    acc, _, per_class, _ = per_class_stats(model, params, features, labels, num_classes)
    return acc, per_class


def evaluate_local_weighted(model, params_per_client, test_sets, num_classes: int) -> LocalTestResult:
    """Evaluate each client's own model on its own test split.

    Accuracy and loss are averaged with weights proportional to local test
    size, so a client with three times the data counts three times as much.
    """
    if len(params_per_client) != len(test_sets):
        raise DimensionError("one parameter vector per client is required")
    n_clients = len(test_sets)
    if n_clients < 1:
        raise ConfigError("no clients to evaluate")
    accs = np.zeros(n_clients)
    losses = np.zeros(n_clients)
    sizes = np.zeros(n_clients)
    per_class = np.zeros((n_clients, num_classes))
    counts = np.zeros((n_clients, num_classes), dtype=np.int64)
    for i, (params, (features, labels)) in enumerate(zip(params_per_client, test_sets)):
        if features.shape[0] < 1:
            raise ConfigError(f"client {i} has an empty local test split")
        accs[i], losses[i], per_class[i], counts[i] = per_class_stats(
            model, params, features, labels, num_classes)
        sizes[i] = features.shape[0]
    weights = sizes / sizes.sum()
    return LocalTestResult(
        weighted_accuracy=float(weights @ accs),
        weighted_loss=float(weights @ losses),
        per_class_loss=per_class,
        class_counts=counts,
    )


def gce(vectors) -> float:
    """Generalized coherence estimate of a set of nonzero vectors.

    One minus the determinant of the normalized Gram matrix: 0 for mutually
    orthogonal directions, 1 when any two directions coincide.  The Gram
    matrix is positive semidefinite with unit diagonal, so the result lies
    in [0, 1].
    """
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionError(f"expected a 2-d stack of vectors, got shape {mat.shape}")
    if mat.shape[0] < 2:
        raise DegenerateInputError("coherence needs at least two vectors")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms <= _ZERO_NORM_TOL):
        raise DegenerateInputError("coherence is undefined for zero vectors")
    unit = mat / norms[:, None]
    gram = unit @ unit.T
    det = float(np.linalg.det(gram))
    return float(min(max(1.0 - det, 0.0), 1.0))


def loss_deviation(losses, weights) -> np.ndarray:
    """Per-client deviation from the weighted per-class mean loss.

    ``losses`` is (clients, classes).  ``weights`` is either one weight per
    client or a full (clients, classes) matrix, e.g. per-class test counts.
    Columns whose weights sum to zero keep their raw losses (mean taken as 0).
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise DimensionError(f"losses must be 2-d, got shape {losses.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        if w.shape[0] != losses.shape[0]:
            raise DimensionError("one weight per client is required")
        w = np.broadcast_to(w[:, None], losses.shape)
    elif w.shape != losses.shape:
        raise DimensionError(f"weights shape {w.shape} does not match losses {losses.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    totals = w.sum(axis=0)
    means = np.zeros(losses.shape[1])
    nonzero = totals > 0
    means[nonzero] = (w[:, nonzero] * losses[:, nonzero]).sum(axis=0) / totals[nonzero]
    return losses - means


def savitzky_golay(series, window: int, order: int) -> np.ndarray:
    """Least-squares polynomial smoothing over a sliding window.

    Edges are handled by fitting a polynomial to the first and last full
    windows and evaluating it at the edge positions, so polynomial inputs of
    degree <= order pass through unchanged everywhere.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"series must be 1-d, got shape {arr.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if not 0 <= order < window:
        raise ValueError(f"order must lie in [0, window), got {order}")
    if arr.size < window:
        raise ValueError(f"series of length {arr.size} is shorter than window {window}")
    if window == 1:
        return arr.copy()
    return savgol_filter(arr, window_length=window, polyorder=order, mode="interp")
