"""Deterministic multi-scale feature pyramids.

A trained backbone is replaced by fixed-seed random 3x3 convolutions
(stride 2, replicate padding, ReLU between stages): one stage for the
half-resolution fine map, three for the eighth-resolution coarse map.
Untrained but spatially discriminative, and bitwise reproducible for a
given (image, seed).
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Image:
    """Grayscale image, values in [0, 1], sides multiples of 8."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("image data must be 2D (H, W)")
        h, w = d.shape
        if h % 8 or w % 8:
            raise ValueError(f"image dims must be multiples of 8, got {w}x{h}")
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @classmethod
    def load(cls, path):
        return cls(read_pgm(path))


@dataclass(frozen=True)
class FeaturePyramid:
    """Coarse (C_d, H/8, W/8) and fine (C_f, H/2, W/2) feature tensors."""

    coarse: np.ndarray
    fine: np.ndarray

    @property
    def coarse_grid(self):
        return self.coarse.shape[1], self.coarse.shape[2]  # (H_c, W_c)

    @property
    def fine_grid(self):
        return self.fine.shape[1], self.fine.shape[2]


@dataclass(frozen=True)
class BackboneConfig:
    seed: int = 0
    coarse_channels: int = 256
    fine_channels: int = 128


def _conv3x3_stride2(x, weights):
    """3x3 stride-2 convolution with replicate padding; x is (Cin, H, W)."""
    cin, h, w = x.shape
    cout = weights.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    win = win[:, ::2, ::2]  # (Cin, H/2, W/2, 3, 3)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * 9)
    out = cols @ weights.reshape(cout, cin * 9).T
    return out.T.reshape(cout, ho, wo)


def backbone_weights(cfg: BackboneConfig):
    """He-scaled random stage weights, fixed by cfg.seed.

    Kernels are centered to zero mean over their support so the features
    respond to local structure rather than the (dominant) DC component of
    smooth textures; a constant image then maps to constant feature maps.
    """
    rng = np.random.default_rng(cfg.seed)
    shapes = [
        (cfg.fine_channels, 1, 3, 3),
        (cfg.coarse_channels, cfg.fine_channels, 3, 3),
        (cfg.coarse_channels, cfg.coarse_channels, 3, 3),
    ]
    out = []
    for s in shapes:
        w = rng.standard_normal(s)
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        out.append(w * np.sqrt(2.0 / (s[1] * 9)))
    return out


def extract_pyramid(img: Image, cfg: BackboneConfig) -> FeaturePyramid:
    """Fine features after one stride-2 stage, coarse after three."""
    if img.width % 8 or img.height % 8:
        raise ValueError("image dims must be multiples of 8")
    w1, w2, w3 = backbone_weights(cfg)
    x1 = _conv3x3_stride2(img.data[None, :, :], w1)
    fine = x1
    x = np.maximum(x1, 0.0)
    x = np.maximum(_conv3x3_stride2(x, w2), 0.0)
    coarse = _conv3x3_stride2(x, w3)
    return FeaturePyramid(coarse=coarse, fine=fine)


def l2_normalize_channels(t):
    """Scale each spatial position's channel vector to unit L2 norm.

    Zero vectors are left at zero.
    """
    t = np.asarray(t, dtype=np.float64)
    norm = np.sqrt((t * t).sum(axis=0, keepdims=True))
    return t / np.where(norm == 0.0, 1.0, norm)


def read_pgm(path):
    """Read a binary (P5) 8-bit PGM into a float array scaled to [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {fields[0]!r}")
    width, height, maxval = (int(v) for v in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def write_pgm(path, values):
    """Write a float array in [0, 1] as a binary 8-bit PGM."""
    v = np.asarray(values, dtype=np.float64)
    pixels = np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())
