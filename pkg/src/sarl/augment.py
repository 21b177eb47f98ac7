"""Two-view augmentation and the exact coordinate map between views.

Coordinates are normalized ``(y, x)`` pairs in ``[0, 1]^2`` with grid cells
addressed by their centers, ``((i + 0.5) / H, (j + 0.5) / W)``. Because only
crop and horizontal flip move pixels, the map from one view to another is an
axis-aligned affine map and is resolution independent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

OUT_OF_BOUNDS = None

JITTER_STRENGTH = (0.4, 0.4, 0.4, 0.1)
AREA_RANGE = (0.2, 1.0)
RATIO_RANGE = (3 / 4, 4 / 3)
BLUR_SIGMA_RANGE = (0.1, 2.0)
P_FLIP, P_JITTER, P_GRAY = 0.5, 0.8, 0.2
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ViewParams:
    """Everything needed to replay one augmented view bit-exactly."""
    crop: tuple[float, float, float, float]  # top, left, height, width (source pixels)
    source_size: tuple[int, int]
    output_size: int
    hflip: bool = False
    jitter: tuple[float, float, float, float] | None = None  # brightness, contrast, saturation factors, hue shift
    grayscale: bool = False
    blur_sigma: float | None = None

    def __post_init__(self):
        top, left, h, w = self.crop
        sh, sw = self.source_size
        if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > sh + 1e-9 or left + w > sw + 1e-9:
            raise ValueError(f"crop {self.crop} is not inside a {sh}x{sw} source")

    @property
    def area_fraction(self) -> float:
        return self.crop[2] * self.crop[3] / (self.source_size[0] * self.source_size[1])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ViewParams:
        d = dict(d)
        d["crop"] = tuple(d["crop"])
        d["source_size"] = tuple(d["source_size"])
        if d.get("jitter") is not None:
            d["jitter"] = tuple(d["jitter"])
        return cls(**d)

    @classmethod
    def identity(cls, source_size, output_size) -> ViewParams:
        return cls((0.0, 0.0, float(source_size[0]), float(source_size[1])),
                   tuple(source_size), output_size)


def blur_kernel_size(output_size: int) -> int:
    """23 taps at 224 px, scaled with the output side and kept odd."""
    k = int(round(23 * output_size / 224))
    return max(k + (k % 2 == 0), 1)


def sample_view_params(rng: np.random.Generator, source_size, output_size: int,
                       jitter_strength=JITTER_STRENGTH) -> ViewParams:
    sh, sw = source_size
    area = sh * sw
    # retry until the crop fits, as in RandomResizedCrop
    while True:
        frac = rng.uniform(*AREA_RANGE)
        ratio = math.exp(rng.uniform(math.log(RATIO_RANGE[0]), math.log(RATIO_RANGE[1])))
        w = math.sqrt(frac * area * ratio)
        h = math.sqrt(frac * area / ratio)
        if h <= sh and w <= sw:
            break
    top = rng.uniform(0, sh - h)
    left = rng.uniform(0, sw - w)
    hflip = bool(rng.random() < P_FLIP)
    jitter = None
    if rng.random() < P_JITTER:
        b, c, s, hue = jitter_strength
        jitter = (float(rng.uniform(1 - b, 1 + b)), float(rng.uniform(1 - c, 1 + c)),
                  float(rng.uniform(1 - s, 1 + s)), float(rng.uniform(-hue, hue)))
    gray = bool(rng.random() < P_GRAY)
    scale = output_size / 224
    sigma = float(rng.uniform(*BLUR_SIGMA_RANGE)) * scale
    return ViewParams((float(top), float(left), float(h), float(w)), (int(sh), int(sw)),
                      int(output_size), hflip, jitter, gray, sigma)


# -- pixels -----------------------------------------------------------------

def _interp_matrix(n_out: int, start: float, length: float, n_src: int, flip: bool) -> np.ndarray:
    """Rows hold bilinear weights sampling ``n_out`` cell centers of a source span."""
    u = (np.arange(n_out) + 0.5) / n_out
    if flip:
        u = 1.0 - u
    pos = start + u * length - 0.5  # continuous source index
    pos = np.clip(pos, 0, n_src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    t = pos - i0
    m = np.zeros((n_out, n_src))
    np.add.at(m, (np.arange(n_out), i0), 1 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m


def _blur_matrix(n: int, sigma: float, ksize: int) -> np.ndarray:
    r = ksize // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    m = np.zeros((n, n))
    for off, wgt in zip(range(-r, r + 1), taps):
        idx = np.arange(n) + off
        # reflect without repeating the edge sample
        idx = np.abs(idx)
        idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
        np.add.at(m, (np.arange(n), idx), wgt)
    return m


def _separable(img, ry, rx):
    """``ry @ img @ rx.T`` applied to every channel of ``img (H, W, C)``."""
    tmp = np.tensordot(ry, img, axes=(1, 0))        # (h, W, C)
    return np.tensordot(tmp, rx, axes=(1, 1)).transpose(0, 2, 1)


def _gray(img):
    return img @ LUMA


def _rotate_hue(img, shift):
    # rotate chroma in YIQ space by shift * 2pi
    yiq = np.array([[0.299, 0.587, 0.114],
                    [0.596, -0.274, -0.322],
                    [0.211, -0.523, 0.312]])
    a = 2 * math.pi * shift
    rot = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    m = np.linalg.inv(yiq) @ rot @ yiq
    return img @ m.T


def color_jitter(img, factors):
    b, c, s, h = factors
    img = np.clip(img * b, 0, 1)
    img = np.clip(c * img + (1 - c) * _gray(img).mean(), 0, 1)
    img = np.clip(s * img + (1 - s) * _gray(img)[..., None], 0, 1)
    if h != 0:
        img = np.clip(_rotate_hue(img, h), 0, 1)
    return img


def apply_view(image, params: ViewParams, mean=None, std=None, *, blur=True) -> np.ndarray:
    """Crop, resize, flip, jitter, grayscale, blur and normalize one image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != tuple(params.source_size) or image.shape[2] != 3:
        raise ValueError(f"image {image.shape} does not match params source {params.source_size}")
    s = params.output_size
    top, left, h, w = params.crop
    ry = _interp_matrix(s, top, h, image.shape[0], False)
    rx = _interp_matrix(s, left, w, image.shape[1], params.hflip)
    out = _separable(image, ry, rx)
    if params.jitter is not None:
        out = color_jitter(out, params.jitter)
    if params.grayscale:
        out = np.repeat(_gray(out)[..., None], 3, axis=2)
    if blur and params.blur_sigma is not None:
        bm = _blur_matrix(s, params.blur_sigma, blur_kernel_size(s))
        out = _separable(out, bm, bm)
    if mean is not None:
        out = (out - np.asarray(mean)) / np.asarray(std)
    return out


def hflip_params(params: ViewParams) -> ViewParams:
    d = params.to_dict()
    d["hflip"] = not params.hflip
    return ViewParams.from_dict(d)


# -- geometry ---------------------------------------------------------------

@dataclass(frozen=True)
class AffineWarp:
    """Map ``(y, x) -> matrix @ (y, x, 1)`` from view-1 to view-2 coordinates."""
    matrix: np.ndarray
    src_crop: tuple[float, float, float, float]
    dst_crop: tuple[float, float, float, float]

    def __call__(self, yx):
        yx = np.asarray(yx, dtype=np.float64)
        return yx @ self.matrix[:, :2].T + self.matrix[:, 2]

    def compose(self, other: AffineWarp) -> AffineWarp:
        """``other`` after ``self``."""
        a = np.vstack([self.matrix, [0, 0, 1]])
        b = np.vstack([other.matrix, [0, 0, 1]])
        return AffineWarp((b @ a)[:2], self.src_crop, other.dst_crop)

    def inverse(self) -> AffineWarp:
        a = np.linalg.inv(np.vstack([self.matrix, [0, 0, 1]]))
        return AffineWarp(a[:2], self.dst_crop, self.src_crop)


def _view_to_source(params: ViewParams) -> np.ndarray:
    """Affine map from view coordinates to source pixel coordinates."""
    top, left, h, w = params.crop
    if params.hflip:
        return np.array([[h, 0, top], [0, -w, left + w], [0, 0, 1.0]])
    return np.array([[h, 0, top], [0, w, left], [0, 0, 1.0]])


def warp_between(params1: ViewParams, params2: ViewParams) -> AffineWarp:
    """Coordinate map from view 1 to view 2 of the same source image."""
    if tuple(params1.source_size) != tuple(params2.source_size):
        raise ValueError("views come from different source sizes")
    m = np.linalg.inv(_view_to_source(params2)) @ _view_to_source(params1)
    return AffineWarp(m[:2], params1.crop, params2.crop)


def identity_warp() -> AffineWarp:
    return AffineWarp(np.array([[1.0, 0, 0], [0, 1.0, 0]]), (0, 0, 1, 1), (0, 0, 1, 1))


def cell_centers(res) -> np.ndarray:
    h, w = res
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([yy, xx], axis=-1)


def _in_bounds(yx):
    return np.all((yx >= 0.0) & (yx <= 1.0), axis=-1)


def map_grid(warp: AffineWarp, res_src, res_dst):
    """Vectorized :func:`map_coords` over a whole grid.

    Returns continuous destination indices ``(H1, W1, 2)`` (cell-center
    convention, for interpolation) and the in-bounds mask ``(H1, W1)``.
    """
    yx = warp(cell_centers(res_src))
    cont = yx * np.asarray(res_dst, dtype=np.float64) - 0.5
    return cont, _in_bounds(yx)


def map_coords(warp: AffineWarp, ij, res_src, res_dst):
    """Map grid cell ``ij`` at ``res_src`` to ``res_dst``.

    Returns ``(nearest_cell, continuous_index)`` or ``OUT_OF_BOUNDS``.
    """
    i, j = ij
    h1, w1 = res_src
    if not (0 <= i < h1 and 0 <= j < w1):
        raise ValueError(f"cell {ij} outside a {res_src} grid")
    yx = warp(np.array([(i + 0.5) / h1, (j + 0.5) / w1]))
    if not _in_bounds(yx):
        return OUT_OF_BOUNDS
    h2, w2 = res_dst
    near = (min(int(yx[0] * h2), h2 - 1), min(int(yx[1] * w2), w2 - 1))
    cont = (yx[0] * h2 - 0.5, yx[1] * w2 - 0.5)
    return near, cont


def overlap_mask(warp: AffineWarp, res) -> np.ndarray:
    """Cells of a view-1 grid whose centers land inside view 2."""
    return map_grid(warp, res, res)[1]
