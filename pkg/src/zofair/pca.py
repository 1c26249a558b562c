"""Two-component PCA through the covariance eigendecomposition."""

from __future__ import annotations

import numpy as np


def pca(data, n_components: int = 2):
    """Project ``data`` onto its leading principal axes.

    Returns ``(coords, components, explained_variance)``. Each component is
    signed so its largest-magnitude entry is positive, which makes the
    projection reproducible.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("pca needs a non-empty 2-D array")
    centred = x - x.mean(0)
    denom = max(len(x) - 1, 1)
    cov = centred.T @ centred / denom
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, order].T
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    variance = np.clip(evals[order], 0.0, None)
    if len(comps) < n_components:
        pad = n_components - len(comps)
        comps = np.vstack([comps, np.zeros((pad, x.shape[1]))])
        variance = np.concatenate([variance, np.zeros(pad)])
    return centred @ comps.T, comps, variance
