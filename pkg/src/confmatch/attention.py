"""Confidence-guided attention blocks.

Each block builds query tokens from the source feature map (strided mean
aggregation, rotary position encoding, linear projection) and key/value
tokens from the target map (max pooling).  Two refinements distinguish it
from a standard attention block:

* a pre-softmax bias that multiplies each query row by (1 + alpha * w1),
  algebraically identical to adding alpha * (Q (*) W1) K^T to the scores
  and equivalent to a per-query softmax temperature tau = 1 + alpha * w1;
* post-softmax value rescaling, weighting every value vector by the
  target-side confidence w2 before aggregation.

Both refinements can be toggled off, which reduces the block to standard
attention (there is a separate straight-line implementation of that
baseline for cross-checking).
"""

import json
from dataclasses import dataclass

import numpy as np

ROPE_BASE = 100.0


class EquivalenceError(ArithmeticError):
    """The two algebraic forms of the biased scores disagreed."""


@dataclass(frozen=True)
class AttentionParams:
    """Projection matrices, bias strength, FFN weights, and block layout."""

    u_q: np.ndarray
    u_k: np.ndarray
    u_v: np.ndarray
    eta: float
    ffn_w1: np.ndarray  # (2C, 2C)
    ffn_b1: np.ndarray  # (2C,)
    ffn_w2: np.ndarray  # (2C, C)
    ffn_b2: np.ndarray  # (C,)
    pool: int = 2
    heads: int = 1
    t_blocks: int = 2

    @property
    def alpha(self) -> float:
        return float(np.exp(self.eta))

    @property
    def channels(self) -> int:
        return self.u_q.shape[0]

    def __post_init__(self):
        c = self.u_q.shape[0]
        for name in ("u_q", "u_k", "u_v"):
            m = getattr(self, name)
            if m.shape != (c, c) or not np.isfinite(m).all():
                raise ValueError(f"{name} must be a finite {c}x{c} matrix")
        if self.ffn_w1.shape != (2 * c, 2 * c) or self.ffn_w2.shape != (2 * c, c):
            raise ValueError("FFN weight shapes must be (2C, 2C) and (2C, C)")
        if c % self.heads:
            raise ValueError("heads must divide the channel count")

    @classmethod
    def from_seed(
        cls,
        seed: int,
        channels: int,
        eta: float = 0.0,
        pool: int = 2,
        heads: int = 1,
        t_blocks: int = 2,
        update_scale: float = 0.2,
    ) -> "AttentionParams":
        """Deterministic untrained weights.

        Projections are random orthogonal so token dot products keep the
        geometry of the input features; the FFN output layer is shrunk by
        `update_scale` so each block perturbs rather than replaces its
        input.
        """
        rng = np.random.default_rng(seed)
        mats = [_random_orthogonal(rng, channels) for _ in range(3)]
        w1 = rng.standard_normal((2 * channels, 2 * channels)) * np.sqrt(
            1.0 / (2 * channels)
        )
        w2 = rng.standard_normal((2 * channels, channels)) * (
            update_scale * np.sqrt(1.0 / (2 * channels))
        )
        return cls(
            u_q=mats[0],
            u_k=mats[1],
            u_v=mats[2],
            eta=eta,
            ffn_w1=w1,
            ffn_b1=np.zeros(2 * channels),
            ffn_w2=w2,
            ffn_b2=np.zeros(channels),
            pool=pool,
            heads=heads,
            t_blocks=t_blocks,
        )

    def to_dict(self) -> dict:
        return {
            "u_q": self.u_q.tolist(),
            "u_k": self.u_k.tolist(),
            "u_v": self.u_v.tolist(),
            "eta": self.eta,
            "ffn_w1": self.ffn_w1.tolist(),
            "ffn_b1": self.ffn_b1.tolist(),
            "ffn_w2": self.ffn_w2.tolist(),
            "ffn_b2": self.ffn_b2.tolist(),
            "pool": self.pool,
            "heads": self.heads,
            "t_blocks": self.t_blocks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionParams":
        arrays = {
            k: np.asarray(d[k], dtype=np.float64)
            for k in ("u_q", "u_k", "u_v", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")
        }
        return cls(
            eta=float(d["eta"]),
            pool=int(d["pool"]),
            heads=int(d["heads"]),
            t_blocks=int(d["t_blocks"]),
            **arrays,
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "AttentionParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class TokenSet:
    q: np.ndarray   # (N, C)
    k: np.ndarray   # (N, C)
    v: np.ndarray   # (N, C)
    w1: np.ndarray  # (N,)
    w2: np.ndarray  # (N,)
    grid: tuple     # pooled (H, W)


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def rope_encode(f):
    """2D axial rotary encoding of a (C, H, W) map.

    The first half of the channel pairs rotates by column-dependent angles,
    the second half by row-dependent ones, so position (0, 0) is untouched
    and pairwise dot products depend only on relative position.
    """
    f = np.asarray(f, dtype=np.float64)
    c, h, w = f.shape
    if c % 4:
        raise ValueError("channel count must be divisible by 4 for 2D rotary pairs")
    per_axis = c // 4
    inv_freq = ROPE_BASE ** (-np.arange(per_axis) / per_axis)
    ang_x = inv_freq[:, None, None] * np.arange(w)[None, None, :]
    ang_y = inv_freq[:, None, None] * np.arange(h)[None, :, None]
    ang = np.concatenate(
        [
            np.broadcast_to(ang_x, (per_axis, h, w)),
            np.broadcast_to(ang_y, (per_axis, h, w)),
        ],
        axis=0,
    )
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = f[0::2], f[1::2]
    out = np.empty_like(f)
    out[0::2] = a * cos - b * sin
    out[1::2] = a * sin + b * cos
    return out


def _avg_pool(f, p):
    c, h, w = f.shape
    return f.reshape(c, h // p, p, w // p, p).mean(axis=(2, 4))


def _max_pool(f, p):
    c, h, w = f.shape
    return f.reshape(c, h // p, p, w // p, p).max(axis=(2, 4))


def _flatten(f):
    return f.reshape(f.shape[0], -1).T


def build_tokens(f_src, f_tgt, w_src, w_tgt, params: AttentionParams) -> TokenSet:
    """Tokens for one attention call.

    Queries come from the source map (strided mean aggregation, then rotary
    encoding), keys and values from the target map (max pooling; values are
    not position-encoded).  Confidence maps are max-pooled alongside.
    """
    p = params.pool
    c, h, w = f_src.shape
    if h % p or w % p or f_tgt.shape[1] % p or f_tgt.shape[2] % p:
        raise ValueError(f"pool={p} must divide the grid dims")
    q = _flatten(rope_encode(_avg_pool(f_src, p))) @ params.u_q
    k = _flatten(rope_encode(_max_pool(f_tgt, p))) @ params.u_k
    v = _flatten(_max_pool(f_tgt, p)) @ params.u_v
    w1 = _max_pool(np.asarray(w_src, dtype=np.float64)[None], p)[0].ravel()
    w2 = _max_pool(np.asarray(w_tgt, dtype=np.float64)[None], p)[0].ravel()
    return TokenSet(q=q, k=k, v=v, w1=w1, w2=w2, grid=(h // p, w // p))


def biased_scores(q, k, w1, alpha, scale, check=True):
    """Confidence-biased attention scores scale * (Q (*) (1 + alpha W1)) K^T.

    With `check` on (the default) the distributive form
    scale * (Q K^T + alpha (Q (*) W1) K^T) is evaluated too and the two must
    agree within 1e-10 elementwise.
    """
    if alpha <= 0 or scale <= 0:
        raise ValueError("alpha and scale must be > 0")
    w1 = np.asarray(w1, dtype=np.float64).reshape(-1, 1)
    scores = scale * ((q * (1.0 + alpha * w1)) @ k.T)
    if check:
        additive = scale * (q @ k.T + alpha * ((q * w1) @ k.T))
        err = float(np.abs(scores - additive).max(initial=0.0))
        if err > 1e-10:
            raise EquivalenceError(
                f"modulated-query and additive-bias forms differ by {err:.3e}"
            )
    return scores


def attention_weights(scores):
    """Row-wise softmax; every row sums to 1."""
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def aggregate(a, v, w2):
    """Messages M = A (W2 (*) V): value vectors are rescaled by the
    target-side confidence before the weighted sum."""
    w2 = np.asarray(w2, dtype=np.float64).reshape(-1, 1)
    if (w2 < 0).any():
        raise ValueError("w2 entries must be >= 0")
    return a @ (w2 * v)


def _attention_message(tokens: TokenSet, params, use_bias, use_rescale):
    n, c = tokens.q.shape
    d = c // params.heads
    scale = 1.0 / np.sqrt(d)
    msgs = []
    for hd in range(params.heads):
        sl = slice(hd * d, (hd + 1) * d)
        q, k, v = tokens.q[:, sl], tokens.k[:, sl], tokens.v[:, sl]
        if use_bias:
            s = biased_scores(q, k, tokens.w1, params.alpha, scale)
        else:
            s = scale * (q @ k.T)
        a = attention_weights(s)
        msgs.append(aggregate(a, v, tokens.w2) if use_rescale else a @ v)
    return msgs[0] if params.heads == 1 else np.concatenate(msgs, axis=1)


def _apply_ffn(f_src, res_tokens, tokens, params):
    """Upsample the residual tokens back to the source grid and apply the
    position-wise FFN to (input, message), with a residual to the input."""
    c = f_src.shape[0]
    gh, gw = tokens.grid
    msg = res_tokens.T.reshape(c, gh, gw)
    up = np.repeat(np.repeat(msg, params.pool, axis=1), params.pool, axis=2)
    flat = np.concatenate([f_src, up], axis=0).reshape(2 * c, -1).T
    hidden = np.maximum(flat @ params.ffn_w1 + params.ffn_b1, 0.0)
    y = hidden @ params.ffn_w2 + params.ffn_b2
    return f_src + y.T.reshape(f_src.shape)


def block_forward(
    f_src,
    f_tgt,
    w_src,
    w_tgt,
    params: AttentionParams,
    use_bias=True,
    use_rescale=True,
):
    """One confidence-guided attention block updating the source map.

    Tokens -> biased scores -> softmax -> rescaled aggregation -> residual
    Q + M -> upsample to the source grid -> position-wise FFN over the
    concatenated (input, message) with a residual to the input.
    """
    tokens = build_tokens(f_src, f_tgt, w_src, w_tgt, params)
    m = _attention_message(tokens, params, use_bias, use_rescale)
    return _apply_ffn(f_src, tokens.q + m, tokens, params)


def standard_block_forward(f_src, f_tgt, params: AttentionParams):
    """Vanilla attention baseline: same layout, no bias, no rescaling."""
    zeros_src = np.zeros(f_src.shape[1:])
    zeros_tgt = np.zeros(f_tgt.shape[1:])
    tokens = build_tokens(f_src, f_tgt, zeros_src, zeros_tgt, params)
    n, c = tokens.q.shape
    d = c // params.heads
    scale = 1.0 / np.sqrt(d)
    msgs = []
    for hd in range(params.heads):
        sl = slice(hd * d, (hd + 1) * d)
        a = attention_weights(scale * (tokens.q[:, sl] @ tokens.k[:, sl].T))
        msgs.append(a @ tokens.v[:, sl])
    m = msgs[0] if params.heads == 1 else np.concatenate(msgs, axis=1)
    return _apply_ffn(f_src, tokens.q + m, tokens, params)


def transform(
    f1,
    f2,
    w1_map,
    w2_map,
    params: AttentionParams,
    use_bias=True,
    use_rescale=True,
):
    """T rounds of self- then cross-attention, returning flattened
    coarse descriptors (N, C) for both images.

    Per round each image first self-attends (both confidence roles from its
    own map), then the two cross directions run from the same post-self
    state: the bias always uses the query image's map and value rescaling
    the key image's map.
    """
    if params.t_blocks < 1:
        raise ValueError("t_blocks must be >= 1")
    h, w = f1.shape[1], f1.shape[2]
    m1 = np.asarray(w1_map, dtype=np.float64).reshape(h, w)
    m2 = np.asarray(w2_map, dtype=np.float64).reshape(f2.shape[1], f2.shape[2])
    g1, g2 = f1, f2
    for _ in range(params.t_blocks):
        s1 = block_forward(g1, g1, m1, m1, params, use_bias, use_rescale)
        s2 = block_forward(g2, g2, m2, m2, params, use_bias, use_rescale)
        c1 = block_forward(s1, s2, m1, m2, params, use_bias, use_rescale)
        c2 = block_forward(s2, s1, m2, m1, params, use_bias, use_rescale)
        g1, g2 = c1, c2
    return _flatten(g1), _flatten(g2)
