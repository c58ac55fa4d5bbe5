"""Classical intensity-based segmentation baselines.

Both baselines work on whole-volume intensities normalized to [0, 1] and
label the LOWER-intensity cluster as dendrite (dendrite bodies image darker
than the surrounding background). A volume with a single occupied histogram
bin (or a single distinct value) is degenerate and comes back all
background.
"""

import numpy as np

from .volumeio import GrayVolume, LabelVolume

HISTOGRAM_BINS = 256


def intensity_histogram(volume: GrayVolume) -> np.ndarray:
    """Counts over 256 uniform bins of the normalized intensity range."""
    norm = volume.normalized()
    bins = np.minimum((norm * HISTOGRAM_BINS).astype(np.int64), HISTOGRAM_BINS - 1)
    return np.bincount(bins.ravel(), minlength=HISTOGRAM_BINS).astype(np.int64)


def otsu_threshold(hist: np.ndarray):
    """Bin index t* maximizing between-class variance w0*w1*(mu0-mu1)^2.

    Class A is bins <= t*. Returns None when fewer than two bins are
    occupied. Ties resolve to the smallest t.
    """
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if np.count_nonzero(hist) < 2 or total == 0:
        return None
    levels = np.arange(HISTOGRAM_BINS, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]
    w1 = total - w0
    m0 = np.cumsum(hist * levels)[:-1]
    m1 = (hist * levels).sum() - m0
    valid = (w0 > 0) & (w1 > 0)
    score = np.zeros(HISTOGRAM_BINS - 1)
    score[valid] = (
        w0[valid] * w1[valid] * (m0[valid] / w0[valid] - m1[valid] / w1[valid]) ** 2
    )
    return int(np.argmax(score))


def otsu_segment(volume: GrayVolume) -> LabelVolume:
    """Global Otsu threshold; the darker class is dendrite."""
    hist = intensity_histogram(volume)
    t = otsu_threshold(hist)
    if t is None:
        return LabelVolume(np.zeros(volume.data.shape, np.uint8))
    norm = volume.normalized()
    bins = np.minimum((norm * HISTOGRAM_BINS).astype(np.int64), HISTOGRAM_BINS - 1)
    return LabelVolume((bins <= t).astype(np.uint8))


def kmeans2_segment(volume: GrayVolume, max_iters: int = 100, seed: int = 0) -> LabelVolume:
    """1-D two-cluster Lloyd iteration on intensities.

    Centroids start at the observed min and max, which makes the run
    deterministic; the seed is reserved for a future k > 2 mode. Stops when
    assignments are stable or after max_iters.
    """
    del seed
    values = volume.normalized().ravel()
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        return LabelVolume(np.zeros(volume.data.shape, np.uint8))
    c0, c1 = vmin, vmax
    assign = np.abs(values - c0) > np.abs(values - c1)  # True -> upper cluster
    for _ in range(max_iters):
        if assign.any() and not assign.all():
            c0 = float(values[~assign].mean())
            c1 = float(values[assign].mean())
        new_assign = np.abs(values - c0) > np.abs(values - c1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    # lower-centroid cluster is dendrite; c0 <= c1 holds for ordered init
    dendrite = ~assign if c0 <= c1 else assign
    return LabelVolume(dendrite.reshape(volume.data.shape).astype(np.uint8))
