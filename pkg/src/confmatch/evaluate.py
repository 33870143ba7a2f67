"""Synthetic homography corpora and mean matching accuracy (MMA).

A corpus pair is a procedurally textured image plus its warp under a known
bounded homography (bilinear sampling with replicate borders, optional
additive noise).  The MMA of a match set at pixel threshold t is the
fraction of fine matches whose reprojection error under the ground-truth
warp is <= t.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .config import RunConfig
from .features import Image, write_pgm
from .geometry import Homography, warp_points
from .matching import MatchSet, PipelineWeights, match_pair

DEFAULT_THRESHOLDS = (1.0, 3.0, 5.0, 10.0)
WARP_MODES = ("projective", "translation", "identity")

# (lattice spacing px, amplitude) for the value-noise octaves
_OCTAVES = ((32, 1.0), (16, 0.85), (8, 0.65), (4, 0.45))


class CorpusFormatError(ValueError):
    """meta.json was present but not in the expected layout."""


@dataclass(frozen=True)
class CorpusPair:
    id: str
    image1: Image
    image2: Image
    h: Homography


@dataclass(frozen=True)
class MmaCurve:
    thresholds: tuple
    accuracy: tuple
    match_count: int


def value_noise_texture(size: int, rng) -> np.ndarray:
    """Multi-frequency value noise in [0.05, 0.95]: smooth interpolation of
    random lattice values, summed over octaves."""
    out = np.zeros((size, size))
    coords = np.arange(size) + 0.5
    for spacing, amp in _OCTAVES:
        n = size // spacing + 2
        lattice = rng.random((n, n))
        g = coords / spacing
        i0 = np.floor(g).astype(np.int64)
        f = g - i0
        f = f * f * (3.0 - 2.0 * f)  # smoothstep
        fy, fx = f[:, None], f[None, :]
        r0, c0 = i0[:, None], i0[None, :]
        top = lattice[r0, c0] * (1 - fx) + lattice[r0, c0 + 1] * fx
        bot = lattice[r0 + 1, c0] * (1 - fx) + lattice[r0 + 1, c0 + 1] * fx
        out += amp * (top * (1 - fy) + bot * fy)
    lo, hi = out.min(), out.max()
    return 0.05 + 0.9 * (out - lo) / (hi - lo)


def homography_from_points(src, dst) -> Homography:
    """Exact homography mapping 4 source points to 4 destination points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -x * u, -y * u]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.append(np.linalg.solve(a, b), 1.0).reshape(3, 3)
    return Homography(h)


def random_homography(rng, size: int, magnitude: float) -> Homography:
    """Bounded projective warp: the four image corners are perturbed by
    uniform offsets in [-magnitude, magnitude]."""
    corners = np.array(
        [[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]], dtype=np.float64
    )
    for _ in range(32):
        dst = corners + rng.uniform(-magnitude, magnitude, size=(4, 2))
        try:
            h = homography_from_points(corners, dst)
        except (np.linalg.LinAlgError, ValueError):
            continue
        # keep the projective denominator comfortably away from zero
        dens = corners @ h.h[2, :2] + 1.0
        if np.abs(dens).min() > 0.5:
            return h
    raise RuntimeError("could not draw a well-conditioned homography")


def bilinear_sample(data, pts):
    """Sample an image at continuous (x, y) points; pixel (r, c) sits at
    (c + 0.5, r + 0.5).  Coordinates are clamped (replicate border)."""
    h, w = data.shape
    u = np.clip(np.asarray(pts)[:, 0] - 0.5, 0.0, w - 1.0)
    v = np.clip(np.asarray(pts)[:, 1] - 0.5, 0.0, h - 1.0)
    j0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    i0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = u - j0
    fv = v - i0
    top = data[i0, j0] * (1 - fu) + data[i0, j0 + 1] * fu
    bot = data[i0 + 1, j0] * (1 - fu) + data[i0 + 1, j0 + 1] * fu
    return top * (1 - fv) + bot * fv


def warp_image(img: Image, h: Homography, noise_sigma: float, rng) -> Image:
    """image2(p) = image1(h^-1 p) by bilinear sampling, plus optional noise."""
    hh, ww = img.data.shape
    cols, rows = np.meshgrid(np.arange(ww), np.arange(hh))
    centers = np.stack([cols + 0.5, rows + 0.5], axis=-1).reshape(-1, 2)
    src = warp_points(h.inverse(), centers)
    values = bilinear_sample(img.data, src).reshape(hh, ww)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    return Image(np.clip(values, 0.0, 1.0))


def generate_corpus(
    out_dir,
    seed: int = 0,
    n_pairs: int = 10,
    size: int = 64,
    warp_magnitude: float = 8.0,
    noise: float = 0.0,
    warp_mode: str = "projective",
) -> Path:
    """Write `n_pairs` PGM image pairs plus meta.json; returns the meta path.

    Deterministic: the same arguments always produce byte-identical files.
    """
    if size % 8 or size < 16:
        raise ValueError("size must be a multiple of 8 and >= 16")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if warp_mode not in WARP_MODES:
        raise ValueError(f"warp_mode must be one of {WARP_MODES}")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(n_pairs):
        pair_id = f"pair{k:03d}"
        img1 = Image(value_noise_texture(size, rng))
        if warp_mode == "identity" or warp_magnitude == 0:
            h = Homography.identity()
        elif warp_mode == "translation":
            h = Homography.translation(warp_magnitude, 0.0)
        else:
            h = random_homography(rng, size, warp_magnitude)
        img2 = warp_image(img1, h, noise, rng)
        name1, name2 = f"{pair_id}_1.pgm", f"{pair_id}_2.pgm"
        write_pgm(out / name1, img1.data)
        write_pgm(out / name2, img2.data)
        entries.append({"id": pair_id, "img1": name1, "img2": name2, "h": h.to_flat()})
    meta = out / "meta.json"
    with open(meta, "w") as f:
        json.dump(entries, f, indent=2)
        f.write("\n")
    return meta


def load_corpus(corpus_dir) -> list:
    corpus_dir = Path(corpus_dir)
    meta = corpus_dir / "meta.json"
    with open(meta) as f:
        try:
            entries = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"meta.json is not valid JSON: {e}") from e
    if not isinstance(entries, list):
        raise CorpusFormatError("meta.json must hold a list of pair entries")
    pairs = []
    for e in entries:
        try:
            pairs.append(
                CorpusPair(
                    id=e["id"],
                    image1=Image.load(corpus_dir / e["img1"]),
                    image2=Image.load(corpus_dir / e["img2"]),
                    h=Homography.from_flat(e["h"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"malformed corpus entry: {e!r}") from exc
    return pairs


def mma(matches: MatchSet, h: Homography, thresholds=DEFAULT_THRESHOLDS) -> MmaCurve:
    """Fraction of fine matches with reprojection error within each threshold."""
    thresholds = tuple(float(t) for t in thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    count = matches.n_fine
    if count == 0:
        return MmaCurve(thresholds=thresholds, accuracy=(0.0,) * len(thresholds), match_count=0)
    err = np.linalg.norm(warp_points(h, matches.fine_p1) - matches.fine_p2, axis=1)
    acc = tuple(float((err <= t).mean()) for t in thresholds)
    return MmaCurve(thresholds=thresholds, accuracy=acc, match_count=count)


def run_benchmark(
    corpus_dir,
    cfg: RunConfig,
    thresholds=DEFAULT_THRESHOLDS,
    out_path=None,
    weights: PipelineWeights | None = None,
) -> dict:
    """Match every corpus pair and report per-pair and mean MMA curves.

    The report embeds the fully resolved config and flags; reruns produce
    byte-identical JSON.
    """
    cfg.validate()
    pairs = load_corpus(corpus_dir)
    if weights is None:
        weights = PipelineWeights.from_config(cfg)
    per_pair = []
    curves = []
    for pair in sorted(pairs, key=lambda p: p.id):
        ms = match_pair(pair.image1, pair.image2, cfg, weights)
        curve = mma(ms, pair.h, thresholds)
        curves.append(curve.accuracy)
        per_pair.append(
            {
                "id": pair.id,
                "match_count": curve.match_count,
                "accuracy": list(curve.accuracy),
            }
        )
    mean_curve = [float(v) for v in np.mean(curves, axis=0)] if curves else []
    report = {
        "corpus": str(corpus_dir),
        "backend": kernels.active_backend(),
        "config": cfg.to_dict(),
        "flags_tag": cfg.flags.tag(),
        "thresholds": [float(t) for t in thresholds],
        "pairs": per_pair,
        "mean_accuracy": mean_curve,
    }
    if out_path is not None:
        with open(out_path, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return report
