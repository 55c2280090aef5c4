"""Neural-collapse metrics and the differentiable collapse loss.

Three metrics quantify the clustering of features around class means arranged
as a simplex equiangular tight frame:

* ``cdnv``: class-distance normalized variance, the within-class variance of
  a pair of classes divided by twice the squared distance between their
  centered means, averaged over unordered pairs.  Within-class variance uses
  the (M_c - 1) divisor.
* ``std_norm``: population standard deviation of the centered class-mean
  norms divided by their average.
* ``std_angle``: population standard deviation of the pairwise cosines of the
  normalized centered class means.

Standard deviations here are population STDs (divide by the count); this
choice is fixed so reported values are stable.  The measurement path
(:func:`nc_report`) is exact and raises on degenerate inputs; the training
loss (:func:`nc_loss`) instead guards denominators with small epsilons so
gradients stay bounded near coincident means and at the symmetric minimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .mlp import FeatureSet

# Guard added inside every squared distance of the differentiable loss.
EPS_DENOM = 1e-8
# Guard inside the STD square roots of the differentiable loss; keeps the
# gradient finite at exactly-symmetric configurations (zero variance).
EPS_STD = 1e-16


class DegeneratePairError(ValueError):
    """Coincident centered class means make a CDNV denominator vanish."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        super().__init__(f"coincident centered class means for pairs {self.pairs}")


class DegenerateMeanError(ValueError):
    """A centered class mean of zero norm has no direction."""

    def __init__(self, classes):
        self.classes = list(classes)
        super().__init__(f"zero centered class mean for classes {self.classes}")


@dataclass
class NCReport:
    """Collapse metrics with per-pair detail."""

    cdnv_mean: float
    cdnv_pairs: np.ndarray  # (C, C), symmetric, NaN diagonal
    std_norm: float
    std_angle: float
    class_norms: np.ndarray  # (C,) centered-mean norms
    cosines: np.ndarray  # (C, C), symmetric, NaN diagonal
    n_classes: int
    counts: np.ndarray
    dim: int


def class_means(fs: FeatureSet):
    """Per-class means and the global mean (weighted by class counts)."""
    mu = np.zeros((fs.n_classes, fs.dim))
    for c in range(fs.n_classes):
        mu[c] = fs.class_features(c).mean(axis=0)
    return mu, fs.features.mean(axis=0)


def cdnv(fs: FeatureSet):
    """Mean and pairwise table of the class-distance normalized variance."""
    if (fs.counts < 2).any():
        small = np.nonzero(fs.counts < 2)[0].tolist()
        raise ValueError(f"cdnv needs at least 2 samples per class; classes {small} are smaller")
    mu, global_mean = class_means(fs)
    centered = mu - global_mean
    c = fs.n_classes
    sig2 = np.empty(c)
    for k in range(c):
        f = fs.class_features(k)
        sig2[k] = ((f - mu[k]) ** 2).sum() / (fs.counts[k] - 1)
    table = np.full((c, c), np.nan)
    degenerate = []
    vals = []
    for a in range(c):
        for b in range(a + 1, c):
            d2 = ((centered[a] - centered[b]) ** 2).sum()
            if d2 == 0.0:
                degenerate.append((a, b))
                continue
            table[a, b] = table[b, a] = (sig2[a] + sig2[b]) / (2.0 * d2)
            vals.append(table[a, b])
    if degenerate:
        raise DegeneratePairError(degenerate)
    return float(np.mean(vals)), table


def _centered_norms(fs: FeatureSet):
    mu, global_mean = class_means(fs)
    centered = mu - global_mean
    return centered, np.sqrt((centered**2).sum(axis=1))


def std_norm(fs: FeatureSet) -> float:
    """Population STD of centered class-mean norms over their average."""
    if fs.n_classes < 2:
        raise ValueError("std_norm needs at least two classes")
    _, norms = _centered_norms(fs)
    return float(norms.std() / norms.mean())


def std_angle(fs: FeatureSet) -> float:
    """Population STD of pairwise cosines of normalized centered means."""
    if fs.n_classes < 2:
        raise ValueError("std_angle needs at least two classes")
    centered, norms = _centered_norms(fs)
    if (norms == 0.0).any():
        raise DegenerateMeanError(np.nonzero(norms == 0.0)[0].tolist())
    unit = centered / norms[:, None]
    cos = unit @ unit.T
    iu = np.triu_indices(fs.n_classes, k=1)
    return float(cos[iu].std())


def nc_report(fs: FeatureSet) -> NCReport:
    """All three metrics plus per-pair detail for one feature set."""
    cdnv_mean, table = cdnv(fs)
    centered, norms = _centered_norms(fs)
    if (norms == 0.0).any():
        raise DegenerateMeanError(np.nonzero(norms == 0.0)[0].tolist())
    unit = centered / norms[:, None]
    cos = unit @ unit.T
    np.fill_diagonal(cos, np.nan)
    iu = np.triu_indices(fs.n_classes, k=1)
    return NCReport(
        cdnv_mean=cdnv_mean,
        cdnv_pairs=table,
        std_norm=float(norms.std() / norms.mean()),
        std_angle=float(cos[iu].std()),
        class_norms=norms,
        cosines=cos,
        n_classes=fs.n_classes,
        counts=fs.counts.copy(),
        dim=fs.dim,
    )


# ---------------------------------------------------------------------------
# Differentiable loss.
# ---------------------------------------------------------------------------

def _pop_std(tape: Tape, vec: Node) -> Node:
    """Guarded population STD of a vector node."""
    mean = tape.mean_all(vec)
    dev = tape.sub_scalar(vec, mean)
    var = tape.mean_all(tape.mul(dev, dev))
    return tape.sqrt(tape.add_const(var, EPS_STD))


def nc_loss(tape: Tape, features: Node, labels, weights=(1.0, 1.0, 1.0)) -> Node:
    """Weighted sum of the three collapse metrics, built on the tape.

    ``features`` is a (B, D) node; gradients flow back to whatever produced
    it.  Classes with fewer than 2 samples in the batch are excluded from the
    variance terms (their means still shape the norm and angle terms).  Every
    squared distance carries an additive EPS_DENOM guard.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if features.value.ndim != 2 or len(labels) != features.value.shape[0]:
        raise ValueError("features and labels misaligned")
    w1, w2, w3 = (float(w) for w in weights)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("nc_loss needs at least two classes in the batch")

    global_mean = tape.mean_rows(features)
    mu, sig2, counts = {}, {}, {}
    for c in classes:
        idx = np.nonzero(labels == c)[0]
        counts[c] = len(idx)
        rows = tape.take_rows(features, idx)
        mu[c] = tape.mean_rows(rows)
        if len(idx) >= 2:
            sig2[c] = tape.scale(tape.sqnorm(tape.sub_rows(rows, mu[c])), 1.0 / (len(idx) - 1))
    centered = {c: tape.sub(mu[c], global_mean) for c in classes}
    norms = {
        c: tape.sqrt(tape.add_const(tape.sqnorm(centered[c]), EPS_DENOM)) for c in classes
    }

    # CDNV over pairs whose variances are both defined.
    cdnv_terms = []
    varclasses = [c for c in classes if c in sig2]
    for i, a in enumerate(varclasses):
        for b in varclasses[i + 1 :]:
            d2 = tape.add_const(tape.sqnorm(tape.sub(centered[a], centered[b])), EPS_DENOM)
            cdnv_terms.append(tape.div(tape.add(sig2[a], sig2[b]), tape.scale(d2, 2.0)))
    cdnv_term = tape.mean_all(tape.stack(cdnv_terms)) if cdnv_terms else None

    norm_vec = tape.stack([norms[c] for c in classes])
    std_norm_term = tape.div(_pop_std(tape, norm_vec), tape.mean_all(norm_vec))

    cos_terms = []
    for i, a in enumerate(classes):
        for b in classes[i + 1 :]:
            cos_terms.append(
                tape.div(tape.dot(centered[a], centered[b]), tape.mul(norms[a], norms[b]))
            )
    std_angle_term = _pop_std(tape, tape.stack(cos_terms))

    loss = tape.add(tape.scale(std_norm_term, w2), tape.scale(std_angle_term, w3))
    if cdnv_term is not None:
        loss = tape.add(loss, tape.scale(cdnv_term, w1))
    return loss


def nc_loss_value(features: np.ndarray, labels, weights=(1.0, 1.0, 1.0)) -> float:
    """Value of :func:`nc_loss` on plain arrays (fresh throwaway tape)."""
    tape = Tape()
    return float(nc_loss(tape, tape.leaf(features), labels, weights).value)
