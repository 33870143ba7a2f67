"""Per-cell matching confidence estimated from coarse-feature correlation.

A cell that has a reliable counterpart in the other image produces a high
maximum response in the cross-correlation matrix, so the row/column maxima
are squashed into (0, 1) matchability scores.  Five selectable variants of
the squashing step are provided; the default subtracts the global mean of
the maxima before a sigmoid.
"""

from dataclasses import dataclass

import numpy as np

# Roman-numeral aliases are the CLI spelling of the variants.
VARIANT_ALIASES = {
    "i": "sigmoid-raw",
    "ii": "relu-mean",
    "iii": "sigmoid-rowcol-mean",
    "iv": "learned-conv",
    "v": "sigmoid-global-mean",
}
DEFAULT_VARIANT = "sigmoid-global-mean"
VARIANTS = tuple(VARIANT_ALIASES.values())


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pairwise coarse-feature dot products divided by the temperature."""

    s: np.ndarray
    gamma: float


@dataclass(frozen=True)
class ConfidenceMap:
    w: np.ndarray
    variant: str


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def resolve_variant(name: str) -> str:
    key = VARIANT_ALIASES.get(name, name)
    if key not in VARIANTS:
        raise ValueError(f"unknown confidence variant {name!r}")
    return key


def correlation(f1_coarse, f2_coarse, gamma: float) -> CorrelationMatrix:
    """Temperature-scaled dot products between all cell pairs.

    Features are (C, H, W); cells are flattened row-major, so
    s[i, j] = <f1 at flat i, f2 at flat j> / gamma.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    f1 = np.asarray(f1_coarse, dtype=np.float64)
    f2 = np.asarray(f2_coarse, dtype=np.float64)
    if f1.shape[0] != f2.shape[0]:
        raise ValueError(
            f"channel mismatch: {f1.shape[0]} vs {f2.shape[0]}"
        )
    m1 = f1.reshape(f1.shape[0], -1).T
    m2 = f2.reshape(f2.shape[0], -1).T
    return CorrelationMatrix(s=(m1 @ m2.T) / gamma, gamma=float(gamma))


def confidence_maps(
    corr: CorrelationMatrix,
    variant: str = DEFAULT_VARIANT,
    affine_scale: float = 1.0,
    affine_bias: float = 0.0,
):
    """Matchability maps for both images from the correlation matrix.

    The raw map for image1 is the row-wise maximum of S, for image2 the
    column-wise maximum; each is then squashed per the selected variant
    (the learned-conv variant uses the frozen `affine_scale`/`affine_bias`
    stand-in parameters).
    """
    key = resolve_variant(variant)
    s = corr.s
    raw1 = s.max(axis=1)
    raw2 = s.max(axis=0)
    if key == "sigmoid-global-mean":
        w1 = _sigmoid(raw1 - raw1.mean())
        w2 = _sigmoid(raw2 - raw2.mean())
    elif key == "sigmoid-raw":
        w1 = _sigmoid(raw1)
        w2 = _sigmoid(raw2)
    elif key == "relu-mean":
        w1 = np.maximum(raw1 - raw1.mean(), 0.0)
        w2 = np.maximum(raw2 - raw2.mean(), 0.0)
    elif key == "sigmoid-rowcol-mean":
        w1 = _sigmoid(raw1 - s.mean(axis=1))
        w2 = _sigmoid(raw2 - s.mean(axis=0))
    else:  # learned-conv
        w1 = _sigmoid(affine_scale * raw1 + affine_bias)
        w2 = _sigmoid(affine_scale * raw2 + affine_bias)
    return ConfidenceMap(w=w1, variant=key), ConfidenceMap(w=w2, variant=key)
