"""Coarse-to-fine correspondence extraction from attention descriptors.

Coarse matches are mutual strict maxima of the dual-softmax probability
matrix above a threshold.  Each surviving cell pair is refined twice on
the half-resolution grid: first by dual-softmax + mutual-NN between two
local patches, then by a softmax-weighted expectation over a 3x3 score
window, which yields sub-pixel target coordinates.

Pixel convention: fine-grid index g maps to image pixel 2*g + 1.0 (the
center of its 2x2 pixel block); points are (x, y).
"""

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attention import AttentionParams, transform
from .config import RunConfig
from .confidence import confidence_maps, correlation
from .features import BackboneConfig, Image, extract_pyramid, l2_normalize_channels

FINE_PER_COARSE = 4  # 1/8 grid -> 1/2 grid


@dataclass(frozen=True)
class MatchSet:
    """Matches at all three stages for one image pair."""

    coarse_pairs: np.ndarray    # (M, 2) int64 flat coarse cell indices (i, j)
    coarse_scores: np.ndarray   # (M,)
    inter_src: np.ndarray       # (K, 2) int64 fine-grid (row, col) in image1
    inter_tgt: np.ndarray       # (K, 2) int64 fine-grid (row, col) in image2
    inter_parent: np.ndarray    # (K,) int64 index into the coarse arrays
    fine_p1: np.ndarray         # (K, 2) float64 (x, y) pixels in image1
    fine_p2: np.ndarray         # (K, 2) float64 (x, y) pixels in image2
    fine_scores: np.ndarray     # (K,)

    @property
    def n_coarse(self):
        return len(self.coarse_pairs)

    @property
    def n_fine(self):
        return len(self.fine_p1)

    def to_jsonl(self, path, include_coarse=False):
        """One JSON object per fine match: {x1, y1, x2, y2, score}.  Coarse
        matches are prepended as {"level": "coarse", ...} rows on request."""
        with open(path, "w") as f:
            if include_coarse:
                for (i, j), s in zip(self.coarse_pairs, self.coarse_scores):
                    f.write(
                        json.dumps(
                            {"level": "coarse", "i": int(i), "j": int(j), "score": float(s)}
                        )
                        + "\n"
                    )
            for p1, p2, s in zip(self.fine_p1, self.fine_p2, self.fine_scores):
                f.write(
                    json.dumps(
                        {
                            "x1": float(p1[0]),
                            "y1": float(p1[1]),
                            "x2": float(p2[0]),
                            "y2": float(p2[1]),
                            "score": float(s),
                        }
                    )
                    + "\n"
                )

    @classmethod
    def from_fine(cls, p1, p2, scores=None) -> "MatchSet":
        """A MatchSet carrying only fine matches (e.g. loaded from disk)."""
        p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 2)
        p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 2)
        if scores is None:
            scores = np.zeros(len(p1))
        empty2 = np.zeros((0, 2), dtype=np.int64)
        return cls(
            coarse_pairs=empty2,
            coarse_scores=np.zeros(0),
            inter_src=empty2.copy(),
            inter_tgt=empty2.copy(),
            inter_parent=np.zeros(0, dtype=np.int64),
            fine_p1=p1,
            fine_p2=p2,
            fine_scores=np.asarray(scores, dtype=np.float64),
        )

    @classmethod
    def from_jsonl(cls, path) -> "MatchSet":
        p1, p2, scores = [], [], []
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                obj = json.loads(line)
                if obj.get("level") == "coarse":
                    continue
                p1.append((obj["x1"], obj["y1"]))
                p2.append((obj["x2"], obj["y2"]))
                scores.append(obj["score"])
        return cls.from_fine(p1, p2, scores)


@dataclass(frozen=True)
class FusionParams:
    """Stand-in fusion net.

    Coarse descriptors are projected to fine channels, nearest-upsampled
    x4, and added to the fine features, followed by one position-wise
    affine + ReLU.  With `pre_norm` each part is first normalized per
    position and the coarse contribution weighted by `blend`, so the fine
    detail stays dominant; a fixed random per-position code field (weight
    `pos_weight`, the same field for both images) keeps any two fine cells
    linearly independent even over locally flat texture; `out_scale`
    renormalizes every output position to that norm, which fixes the
    sharpness of downstream raw-correlation softmaxes.  The identity
    configuration turns all of that off.
    """

    proj: np.ndarray    # (C_d, C_f)
    post_w: np.ndarray  # (C_f, C_f)
    post_b: np.ndarray  # (C_f,)
    blend: float = 0.5
    pre_norm: bool = True
    pos_weight: float = 0.2
    pos_seed: int = 0
    out_scale: float | None = 24.0

    @classmethod
    def from_seed(cls, seed, c_coarse, c_fine, out_scale=24.0) -> "FusionParams":
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((c_coarse, c_fine)) * np.sqrt(1.0 / c_coarse)
        q, r = np.linalg.qr(rng.standard_normal((c_fine, c_fine)))
        return cls(
            proj=proj,
            post_w=q * np.sign(np.diag(r)),
            post_b=np.zeros(c_fine),
            pos_seed=seed + 1,
            out_scale=out_scale,
        )

    @classmethod
    def identity(cls, channels) -> "FusionParams":
        eye = np.eye(channels)
        return cls(
            proj=eye.copy(),
            post_w=eye.copy(),
            post_b=np.zeros(channels),
            blend=1.0,
            pre_norm=False,
            pos_weight=0.0,
            out_scale=None,
        )


@dataclass(frozen=True)
class PipelineWeights:
    attention: AttentionParams
    fusion: FusionParams

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PipelineWeights":
        return cls(
            attention=AttentionParams.from_seed(
                cfg.seed + 1,
                cfg.coarse_channels,
                eta=cfg.eta,
                pool=cfg.pool,
                heads=cfg.heads,
                t_blocks=cfg.t_blocks,
            ),
            fusion=FusionParams.from_seed(
                cfg.seed + 2, cfg.coarse_channels, cfg.fine_channels
            ),
        )


@dataclass(frozen=True)
class Stage1Result:
    src: np.ndarray       # (K, 2) int64 fine-grid (row, col), image1
    tgt: np.ndarray       # (K, 2) int64 fine-grid (row, col), image2
    parent: np.ndarray    # (K,) int64
    scores: np.ndarray    # (K,) dual-softmax probability of the pair
    starts1: np.ndarray   # (M, 2) int64 patch origins (row, col), image1
    starts2: np.ndarray   # (M, 2)
    probs: np.ndarray | None  # (M, w*w, w*w) when requested


@dataclass(frozen=True)
class Stage2Result:
    p1: np.ndarray      # (K, 2) float64 (x, y) pixels
    p2: np.ndarray      # (K, 2)
    deltas: np.ndarray  # (K, 2) float64 (x, y) offsets from j', fine units


@dataclass(frozen=True)
class PipelineState:
    """Every intermediate product of one matching run."""

    pyr1: object
    pyr2: object
    conf1: np.ndarray        # (N,) image1 confidence map
    conf2: np.ndarray        # (N,)
    d1: np.ndarray           # (N, C_d) descriptors
    d2: np.ndarray
    pc: np.ndarray           # (N, N) coarse probability matrix
    coarse_pairs: np.ndarray
    coarse_scores: np.ndarray
    fused1: np.ndarray
    fused2: np.ndarray
    stage1: Stage1Result
    stage2: Stage2Result

    def match_set(self) -> MatchSet:
        return MatchSet(
            coarse_pairs=self.coarse_pairs,
            coarse_scores=self.coarse_scores,
            inter_src=self.stage1.src,
            inter_tgt=self.stage1.tgt,
            inter_parent=self.stage1.parent,
            fine_p1=self.stage2.p1,
            fine_p2=self.stage2.p2,
            fine_scores=self.stage1.scores,
        )


def coarse_similarity(d1, d2, lam: float):
    """Scaled descriptor dot products S(i, j) = <d1_i, d2_j> / lambda."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if d1.shape[1] != d2.shape[1]:
        raise ValueError(f"descriptor dims differ: {d1.shape[1]} vs {d2.shape[1]}")
    return (d1 @ d2.T) / lam


def dual_softmax(s):
    """Row-wise softmax times column-wise softmax, elementwise."""
    return kernels.dual_softmax(s)


def mnn_filter(p, theta_c: float):
    """Mutual strict-argmax pairs with probability >= theta_c.

    Returns ((M, 2) int64 pairs, (M,) scores); ties are discarded so the
    result is one-to-one.
    """
    if not 0.0 <= theta_c < 1.0:
        raise ValueError("theta_c must be in [0, 1)")
    p = np.asarray(p, dtype=np.float64)
    rows, cols = kernels.mutual_pairs(p, theta_c)
    return np.stack([rows, cols], axis=1), p[rows, cols]


def fuse_features(f_fine, d_coarse, params: FusionParams):
    """Fuse coarse descriptors into the fine feature map (see FusionParams)."""
    f_fine = np.asarray(f_fine, dtype=np.float64)
    cf, hf, wf = f_fine.shape
    hc, wc = hf // FINE_PER_COARSE, wf // FINE_PER_COARSE
    d = np.asarray(d_coarse, dtype=np.float64)
    if d.shape != (hc * wc, params.proj.shape[0]):
        raise ValueError(
            f"descriptors must be ({hc * wc}, {params.proj.shape[0]}), got {d.shape}"
        )
    if params.proj.shape[1] != cf:
        raise ValueError("projection output must match fine channels")
    contrib = (d @ params.proj).T.reshape(cf, hc, wc)
    up = np.repeat(np.repeat(contrib, FINE_PER_COARSE, axis=1), FINE_PER_COARSE, axis=2)
    if params.pre_norm:
        x = l2_normalize_channels(f_fine) + params.blend * l2_normalize_channels(up)
    else:
        x = f_fine + params.blend * up
    if params.pos_weight:
        rng = np.random.default_rng(params.pos_seed)
        code = l2_normalize_channels(rng.standard_normal((cf, hf, wf)))
        x = x + params.pos_weight * code
    flat = x.reshape(cf, -1).T
    y = np.maximum(flat @ params.post_w + params.post_b, 0.0)
    if params.out_scale is not None:
        norm = np.sqrt((y * y).sum(axis=1, keepdims=True))
        y = params.out_scale * y / np.where(norm == 0.0, 1.0, norm)
    return y.T.reshape(cf, hf, wf)


def _patch_starts(cells_rc, fine_h, fine_w, window):
    """Top-left fine-grid corner of the window centered on each coarse cell,
    clamped so the window stays inside the grid."""
    half = window // 2
    center = FINE_PER_COARSE * cells_rc + FINE_PER_COARSE // 2
    starts = center - half
    starts[:, 0] = np.clip(starts[:, 0], 0, fine_h - window)
    starts[:, 1] = np.clip(starts[:, 1], 0, fine_w - window)
    return starts


def _gather_patches(fused, starts, window):
    rows = starts[:, 0, None, None] + np.arange(window)[None, :, None]
    cols = starts[:, 1, None, None] + np.arange(window)[None, None, :]
    patch = fused[:, rows, cols]  # (C, M, w, w)
    m = starts.shape[0]
    return patch.transpose(1, 2, 3, 0).reshape(m, window * window, fused.shape[0])


def fine_stage1(
    fused1,
    fused2,
    coarse_pairs,
    coarse_grid,
    window: int = 8,
    keep_probs: bool = False,
) -> Stage1Result:
    """Dual-softmax + mutual-NN matching between local patches.

    For every coarse match a window x window patch is cut from each fused
    fine map, centered on the corresponding coarse cell (clamped at the
    borders).  Patch cells are matched by raw dot-product similarity,
    dual-softmax, and strict mutual argmax with threshold 0, then mapped
    back to global fine-grid coordinates.
    """
    hc, wc = coarse_grid
    cf, hf, wf = fused1.shape
    if window > min(hf, wf, fused2.shape[1], fused2.shape[2]):
        raise ValueError("window exceeds the fine grid")
    pairs = np.asarray(coarse_pairs, dtype=np.int64).reshape(-1, 2)
    m = len(pairs)
    empty2 = np.zeros((0, 2), dtype=np.int64)
    if m == 0:
        return Stage1Result(
            src=empty2,
            tgt=empty2.copy(),
            parent=np.zeros(0, dtype=np.int64),
            scores=np.zeros(0),
            starts1=empty2.copy(),
            starts2=empty2.copy(),
            probs=np.zeros((0, window * window, window * window)) if keep_probs else None,
        )
    wc2 = fused2.shape[2] // FINE_PER_COARSE
    cells1 = np.stack([pairs[:, 0] // wc, pairs[:, 0] % wc], axis=1)
    cells2 = np.stack([pairs[:, 1] // wc2, pairs[:, 1] % wc2], axis=1)
    starts1 = _patch_starts(cells1, hf, wf, window)
    starts2 = _patch_starts(cells2, fused2.shape[1], fused2.shape[2], window)
    pa = _gather_patches(fused1, starts1, window)
    pb = _gather_patches(fused2, starts2, window)
    sim = pa @ pb.transpose(0, 2, 1)
    probs = kernels.batched_dual_softmax(sim)
    b, ia, jb = kernels.batched_mutual_pairs(probs, 0.0)
    src = np.stack([starts1[b, 0] + ia // window, starts1[b, 1] + ia % window], axis=1)
    tgt = np.stack([starts2[b, 0] + jb // window, starts2[b, 1] + jb % window], axis=1)
    return Stage1Result(
        src=src,
        tgt=tgt,
        parent=b,
        scores=probs[b, ia, jb],
        starts1=starts1,
        starts2=starts2,
        probs=probs if keep_probs else None,
    )


_NEIGHBOR_D = np.array([(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)], dtype=np.int64)


def fine_stage2(fused1, fused2, inter_src, inter_tgt) -> Stage2Result:
    """Sub-pixel refinement by expectation over a 3x3 score window.

    The feature at i' is correlated against the in-bounds 3x3 neighborhood
    of j'; the softmax-weighted mean of the neighbor offsets gives the
    real-valued target j''.  Grid coordinates are converted to pixels via
    p = 2 g + 1.
    """
    src = np.asarray(inter_src, dtype=np.int64).reshape(-1, 2)
    tgt = np.asarray(inter_tgt, dtype=np.int64).reshape(-1, 2)
    k = len(src)
    if k == 0:
        z = np.zeros((0, 2))
        return Stage2Result(p1=z, p2=z.copy(), deltas=z.copy())
    hf2, wf2 = fused2.shape[1], fused2.shape[2]
    nbr_r = tgt[:, 0, None] + _NEIGHBOR_D[None, :, 0]
    nbr_c = tgt[:, 1, None] + _NEIGHBOR_D[None, :, 1]
    valid = (nbr_r >= 0) & (nbr_r < hf2) & (nbr_c >= 0) & (nbr_c < wf2)
    f1 = fused1[:, src[:, 0], src[:, 1]].T  # (K, C)
    f2 = fused2[:, np.clip(nbr_r, 0, hf2 - 1), np.clip(nbr_c, 0, wf2 - 1)]
    scores = np.einsum("kc,ckj->kj", f1, f2)
    offsets = np.tile(_NEIGHBOR_D[:, ::-1].astype(np.float64), (k, 1, 1))  # (dx, dy)
    deltas = kernels.softmax_expectation(scores, offsets, valid)
    p1 = 2.0 * src[:, ::-1].astype(np.float64) + 1.0
    p2 = 2.0 * (tgt[:, ::-1].astype(np.float64) + deltas) + 1.0
    return Stage2Result(p1=p1, p2=p2, deltas=deltas)


def run_pipeline(
    img1: Image,
    img2: Image,
    cfg: RunConfig,
    weights: PipelineWeights | None = None,
    keep_probs: bool = False,
) -> PipelineState:
    """Full deterministic pipeline: pyramid -> confidence -> attention ->
    coarse dual-softmax/MNN -> fusion -> two-stage fine refinement."""
    cfg.validate()
    if img1.data.shape != img2.data.shape:
        raise ValueError("image pair must share dimensions")
    bb = BackboneConfig(
        seed=cfg.seed,
        coarse_channels=cfg.coarse_channels,
        fine_channels=cfg.fine_channels,
    )
    pyr1 = extract_pyramid(img1, bb)
    pyr2 = extract_pyramid(img2, bb)
    c1 = l2_normalize_channels(pyr1.coarse)
    c2 = l2_normalize_channels(pyr2.coarse)
    corr = correlation(c1, c2, cfg.resolved_gamma())
    w1m, w2m = confidence_maps(corr, cfg.conf_variant)
    if weights is None:
        weights = PipelineWeights.from_config(cfg)
    d1, d2 = transform(
        c1, c2, w1m.w, w2m.w, weights.attention, cfg.flags.bias, cfg.flags.rescale
    )
    sc = coarse_similarity(d1, d2, cfg.lam)
    pc = dual_softmax(sc)
    pairs, scores = mnn_filter(pc, cfg.theta_c)
    fused1 = fuse_features(pyr1.fine, d1, weights.fusion)
    fused2 = fuse_features(pyr2.fine, d2, weights.fusion)
    st1 = fine_stage1(
        fused1, fused2, pairs, pyr1.coarse_grid, cfg.window, keep_probs=keep_probs
    )
    st2 = fine_stage2(fused1, fused2, st1.src, st1.tgt)
    return PipelineState(
        pyr1=pyr1,
        pyr2=pyr2,
        conf1=w1m.w,
        conf2=w2m.w,
        d1=d1,
        d2=d2,
        pc=pc,
        coarse_pairs=pairs,
        coarse_scores=scores,
        fused1=fused1,
        fused2=fused2,
        stage1=st1,
        stage2=st2,
    )


def match_pair(
    img1: Image,
    img2: Image,
    cfg: RunConfig,
    weights: PipelineWeights | None = None,
) -> MatchSet:
    """Deterministic end-to-end matching; see run_pipeline for internals."""
    return run_pipeline(img1, img2, cfg, weights).match_set()
