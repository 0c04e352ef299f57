"""Exact Shapley attribution and the strict-first propensity model."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .policy import PolicyType

log = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 20
_CHUNK = 1 << 14


class TooManyFeatures(ValueError):
    pass


def coalition_matrix(m: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Boolean membership rows for subset masks ``start .. stop``; bit j = feature j."""
    stop = (1 << m) if stop is None else stop
    masks = np.arange(start, stop, dtype=np.int64)
    return ((masks[:, None] >> np.arange(m)) & 1).astype(bool)


def coalition_values(predict: Callable, instance, background) -> np.ndarray:
    """``f`` at every coalition, absent features set to the background mean."""
    x = np.asarray(instance, dtype=float).ravel()
    bg = np.asarray(background, dtype=float)
    base = bg.mean(axis=0) if bg.ndim == 2 else bg.ravel()
    m = x.size
    if base.size != m:
        raise ValueError(f"background has {base.size} features, instance has {m}")
    if m > MAX_EXACT_FEATURES:
        raise TooManyFeatures(f"{m} features exceed the exact-enumeration limit of {MAX_EXACT_FEATURES}")
    n_sub = 1 << m
    values = np.empty(n_sub)
    for lo in range(0, n_sub, _CHUNK):
        hi = min(n_sub, lo + _CHUNK)
        present = coalition_matrix(m, lo, hi)
        values[lo:hi] = np.asarray(predict(np.where(present, x, base)), dtype=float).ravel()
    return values


def shapley_values(predict: Callable, instance, background) -> np.ndarray:
    """Exact Shapley values by enumerating all ``2**M`` coalitions.

    ``predict`` maps a ``(k, M)`` array to ``k`` outputs. ``background`` is
    either a matrix of reference rows or a single reference vector.
    """
    values = coalition_values(predict, instance, background)
    m = int(np.log2(values.size))
    return kernels.shapley_from_values(values, m)


# --------------------------------------------------------------------------
# Strict-first propensity model
# --------------------------------------------------------------------------

COMPARTMENT_FEATURES = ("S", "E", "I", "Q", "R", "D")


@dataclass(eq=False)
class AttributionDataset:
    """One row per (cycle, destination, origin) TIR decision."""

    features: np.ndarray
    labels: list
    feature_names: tuple
    keys: list

    def __len__(self):
        return len(self.labels)

    @property
    def target(self) -> np.ndarray:
        return np.array([lab == PolicyType.STRICT_FIRST for lab in self.labels], dtype=int)


def feature_names(codes: Sequence[str]) -> tuple:
    return (
        tuple(f"destination_{c}" for c in COMPARTMENT_FEATURES)
        + tuple(f"origin_{c}" for c in COMPARTMENT_FEATURES)
        + ("inflow",)
        + tuple(f"origin={code}" for code in codes)
    )


def attribution_dataset(report) -> AttributionDataset:
    """Rows from the TIR entries of an episode's policy log.

    Compartment features use the simulated state on the cycle start day;
    ``inflow`` is the baseline cycle total from origin to destination.
    """
    return dataset_from_log(report.codes, report.trajectory.states, report.policy_log)


def dataset_from_log(codes, states, policy_log) -> AttributionDataset:
    """Same as :func:`attribution_dataset` from raw ``(T+1, N, 6)`` states and
    policy-log entries."""
    codes = tuple(codes)
    index = {c: k for k, c in enumerate(codes)}
    rows, labels, keys = [], [], []
    for entry in policy_log:
        if entry.action_type != "tir" or not entry.origin or not entry.label:
            continue
        i, j = index[entry.destination], index[entry.origin]
        day = entry.start
        onehot = np.zeros(len(codes))
        onehot[j] = 1.0
        rows.append(np.concatenate([states[day, i], states[day, j], [entry.baseline_inflow], onehot]))
        labels.append(PolicyType(entry.label))
        keys.append((entry.cycle, entry.destination, entry.origin))
    width = 13 + len(codes)
    features = np.array(rows) if rows else np.empty((0, width))
    return AttributionDataset(features, labels, feature_names(codes), keys)


def concat_datasets(datasets) -> AttributionDataset:
    datasets = list(datasets)
    if not datasets:
        raise ValueError("no datasets to combine")
    names = datasets[0].feature_names
    if any(d.feature_names != names for d in datasets):
        raise ValueError("datasets have different feature sets")
    return AttributionDataset(
        np.vstack([d.features for d in datasets]),
        [lab for d in datasets for lab in d.labels],
        names,
        [(k, key) for k, d in enumerate(datasets) for key in d.keys],
    )


class AttributionModel:
    """Bagged shallow decision trees predicting P(strict-first)."""

    def __init__(self, n_estimators=25, max_depth=4, seed=0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.seed = seed
        self._model = None
        self._constant = None
        self.degenerate = False

    def fit(self, features, target):
        from sklearn.ensemble import BaggingClassifier
        from sklearn.tree import DecisionTreeClassifier

        X = np.asarray(features, dtype=float)
        y = np.asarray(target, dtype=int)
        if len(y) < 50:
            raise ValueError(f"need at least 50 rows to fit, got {len(y)}")
        classes = np.unique(y)
        if classes.size < 2:
            warnings.warn("single-class attribution dataset; using a constant predictor", stacklevel=2)
            self.degenerate = True
            self._constant = float(classes[0])
            return self
        self._model = BaggingClassifier(
            DecisionTreeClassifier(max_depth=self.max_depth),
            n_estimators=self.n_estimators,
            random_state=self.seed,
        ).fit(X, y)
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._constant is not None:
            return np.full(len(X), self._constant)
        if self._model is None:
            raise RuntimeError("model is not fitted")
        cls = list(self._model.classes_)
        return self._model.predict_proba(X)[:, cls.index(1)]

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def coalition_value(self, instance, present, background) -> float:
        """Prediction with features outside ``present`` set to the background mean."""
        x = np.asarray(instance, dtype=float)
        bg = np.asarray(background, dtype=float)
        base = bg.mean(axis=0) if bg.ndim == 2 else bg
        return float(self.predict_proba(np.where(present, x, base)[None])[0])


def build_attribution_model(dataset: AttributionDataset, seed=0) -> AttributionModel:
    return AttributionModel(seed=seed).fit(dataset.features, dataset.target)
