# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Otsu thresholding over small sets of real scores.

Mutual labeling splits the candidates of every object in two, using
Otsu's method on either their confidences or their IoUs. Candidate sets
are small (tens of values), so instead of binning the values into a
histogram the threshold is searched exactly among the sample values:
for every distinct value ``t`` the set is split into ``{v <= t}`` and
``{v > t}`` and the between-class variance ``w0 * w1 * (mu0 - mu1)**2``
is evaluated.
"""

import numpy as np

__all__ = [
    "EmptyScoreSetError",
    "otsu_threshold",
    "split",
]


class EmptyScoreSetError(ValueError):
    """Raised when thresholding an empty set of scores."""
    pass


def otsu_threshold(values):
    """Compute the Otsu threshold of a set of scores.

    The partition is unchanged when all values go through the same
    increasing affine map. Other increasing maps keep the order of the
    values but can move the cut.

    :param values: non-empty sequence of reals
    :returns: the sample value ``t`` maximizing the between-class variance
        of the split ``{v <= t} | {v > t}``. Ties are broken towards the
        smallest threshold. If all values are equal, that value is
        returned (no informative split exists).
    :rtype: float
    :raises EmptyScoreSetError: if ``values`` is empty
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyScoreSetError("Otsu threshold of an empty score set")
    levels, counts = np.unique(values, return_counts=True)
    if levels.size == 1:
        return float(levels[0])
    n = values.size
    n0 = np.cumsum(counts)
    n1 = n - n0
    sum0 = np.cumsum(levels * counts)
    sum1 = sum0[-1] - sum0
    mu0 = sum0 / n0
    mu1 = np.zeros_like(mu0)
    np.divide(sum1, n1, out=mu1, where=n1 > 0)
    # The last cut leaves the upper class empty: zero variance
    variance = np.where(n1 > 0,
                        (n0 / n) * (n1 / n) * (mu0 - mu1) ** 2,
                        0.0)
    # argmax returns the first maximum, i.e. the smallest threshold
    return float(levels[np.argmax(variance)])


def split(values, threshold):
    """Partition the indices of a score set around a threshold.

    The comparison for the upper part is strict, so that splitting at the
    Otsu threshold of a constant set leaves the upper part empty.

    :param values: sequence of reals
    :param float threshold: the cut point
    :returns: ``(above, below)``: sorted index arrays of the values
        ``> threshold`` and ``<= threshold``
    :rtype: tuple
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    mask = values > threshold
    return np.flatnonzero(mask), np.flatnonzero(~mask)
