"""Common spatial patterns: supervised spatial filtering for two classes.

Filters maximize the ratio of class variances.  They solve the
generalized eigenproblem S0 w = mu (S0 + S1) w via whitening of the
pooled covariance, so the whitening identity W (S0+S1) W^T = I holds by
construction and is used as the numerical self-check in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as spla

from .errors import IllConditionedError, InsufficientClassesError
from .sigproc import MultiChannelRecording

__all__ = ["CspModel", "LabeledEpoch", "csp_fit", "csp_transform"]


@dataclass
class LabeledEpoch:
    """An EEG segment with its attended-stream label (0 or 1)."""

    eeg: MultiChannelRecording
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class CspModel:
    """Fitted spatial filters.

    filters has one filter per row (n_components x n_channels);
    eigenvalues are the variance ratios in (0, 1), sorted descending;
    class_covariances are the shrunk per-class mean covariances the
    filters were computed from.
    """

    filters: np.ndarray
    eigenvalues: np.ndarray
    class_covariances: tuple
    shrinkage: float

    @property
    def n_components(self) -> int:
        return self.filters.shape[0]

    @property
    def n_channels(self) -> int:
        return self.filters.shape[1]


def _epoch_covariance(data: np.ndarray) -> np.ndarray:
    # Zero-mean per channel, then trace-normalize to remove amplitude confounds.
    x = data - data.mean(axis=1, keepdims=True)
    cov = x @ x.T / x.shape[1]
    tr = np.trace(cov)
    if tr <= 0:
        raise IllConditionedError("epoch has zero variance on every channel")
    return cov / tr


def csp_fit(epochs, n_components: int = 64, shrinkage: float = 0.05) -> CspModel:
    """Fit CSP filters from labeled epochs.

    Per-class covariances are averages of trace-normalized epoch
    covariances, regularized as (1-a) C + a tr(C)/n I.  Raises
    InsufficientClassesError unless both labels are present and
    IllConditionedError when the pooled covariance has no Cholesky
    factorization (possible with shrinkage 0).
    """
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    epochs = list(epochs)
    if not epochs:
        raise InsufficientClassesError("no epochs given")
    n_channels = epochs[0].eeg.n_channels
    if not 1 <= n_components <= n_channels:
        raise ValueError(
            f"n_components must lie in [1, {n_channels}], got {n_components}"
        )

    by_class = {0: [], 1: []}
    for ep in epochs:
        if ep.eeg.n_channels != n_channels:
            raise ValueError("epochs disagree on channel count")
        by_class[ep.label].append(_epoch_covariance(ep.eeg.data))
    if not by_class[0] or not by_class[1]:
        raise InsufficientClassesError("need epochs of both classes to fit CSP")

    covs = []
    eye = np.eye(n_channels)
    for label in (0, 1):
        c = np.mean(by_class[label], axis=0)
        c = (1.0 - shrinkage) * c + shrinkage * (np.trace(c) / n_channels) * eye
        covs.append(c)
    s0, s1 = covs
    pooled = s0 + s1

    try:
        chol = spla.cholesky(pooled, lower=True)
    except spla.LinAlgError as exc:
        raise IllConditionedError(
            f"pooled covariance is singular (shrinkage={shrinkage}): {exc}"
        ) from None
    # Whiten: eigendecompose L^-1 S0 L^-T, then map eigenvectors back.
    inv_chol = spla.solve_triangular(chol, eye, lower=True)
    whitened = inv_chol @ s0 @ inv_chol.T
    whitened = (whitened + whitened.T) / 2.0
    mu, u = np.linalg.eigh(whitened)
    filters_full = (inv_chol.T @ u).T  # rows are filters

    # Keep the most discriminative components (largest |mu - 0.5|),
    # then order the kept rows by descending eigenvalue.
    keep = np.argsort(np.abs(mu - 0.5))[::-1][:n_components]
    order = keep[np.argsort(mu[keep])[::-1]]
    return CspModel(
        filters=filters_full[order],
        eigenvalues=mu[order],
        class_covariances=(s0, s1),
        shrinkage=float(shrinkage),
    )


def csp_transform(model: CspModel, rec: MultiChannelRecording) -> MultiChannelRecording:
    """Project a recording onto the fitted spatial filters."""
    if rec.n_channels != model.n_channels:
        raise ValueError(
            f"recording has {rec.n_channels} channels, model expects {model.n_channels}"
        )
    names = [f"csp{i:02d}" for i in range(model.n_components)]
    return MultiChannelRecording(model.filters @ rec.data, rec.fs, names)
