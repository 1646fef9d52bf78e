"""Homography estimation, inverse-mapping warps, region masks and compositing.

Pixel coordinates follow the pixel-center convention: pixel ``(row, col)`` sits
at ``(x=col, y=row)``. Images are ``H x W x C`` float arrays unless noted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILL_VALUE = -1.0
DET_TOL = 1e-9
# preimages this close outside the frame still count as inside (round-off)
BOUNDS_TOL = 1e-7


class GeometryError(ValueError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


@dataclass
class Homography:
    m: np.ndarray
    source: str = ""

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if not np.all(np.isfinite(m)):
            raise GeometryError("homography has non-finite entries")
        if abs(np.linalg.det(m)) <= DET_TOL:
            raise GeometryError(f"singular homography (det={np.linalg.det(m):.3g})")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def apply(self, points) -> np.ndarray:
        """Map an ``(N, 2)`` array of ``(x, y)`` points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        hom = np.c_[pts, np.ones(len(pts))] @ self.m.T
        return hom[:, :2] / hom[:, 2:3]

    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in self.m.ravel()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Homography":
        vals = [float(t) for t in text.split()]
        if len(vals) != 9:
            raise GeometryError(f"expected 9 numbers for a homography, got {len(vals)}")
        return cls(np.array(vals).reshape(3, 3))

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Homography":
        return cls.from_text(Path(path).read_text())


def _collinear(a, b, c, tol=1e-9) -> bool:
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(np.ptp([a[0], b[0], c[0]]), np.ptp([a[1], b[1], c[1]]), 1.0)
    return abs(area) <= tol * scale * scale


@dataclass
class Correspondences:
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        if self.src.shape != (4, 2) or self.dst.shape != (4, 2):
            raise GeometryError("need exactly four source and four target points")
        for name, pts in (("source", self.src), ("target", self.dst)):
            for i, j, k in itertools.combinations(range(4), 3):
                if _collinear(pts[i], pts[j], pts[k]):
                    raise DegenerateConfiguration(
                        f"{name} points {i}, {j}, {k} are collinear: "
                        f"{pts[i].tolist()}, {pts[j].tolist()}, {pts[k].tolist()}"
                    )

    @classmethod
    def load(cls, path) -> "Correspondences":
        """Read four ``sx sy tx ty`` lines."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(t) for t in line.split()])
        arr = np.array(rows, dtype=np.float64)
        if arr.shape != (4, 4):
            raise GeometryError(f"{path}: expected four lines of 'sx sy tx ty'")
        return cls(arr[:, :2], arr[:, 2:])

    def save(self, path):
        lines = [" ".join(repr(float(v)) for v in (*s, *t)) for s, t in zip(self.src, self.dst)]
        Path(path).write_text("\n".join(lines) + "\n")


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    # isotropic scaling: centroid at origin, mean distance sqrt(2)
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def estimate_homography(c: Correspondences) -> Homography:
    """Normalized DLT from four point correspondences (source -> target)."""
    t_src = _normalizing_transform(c.src)
    t_dst = _normalizing_transform(c.dst)
    src = np.c_[c.src, np.ones(4)] @ t_src.T
    dst = np.c_[c.dst, np.ones(4)] @ t_dst.T
    rows = []
    for (x, y, w), (u, v, z) in zip(src, dst):
        rows.append([0, 0, 0, -z * x, -z * y, -z * w, v * x, v * y, v * w])
        rows.append([z * x, z * y, z * w, 0, 0, 0, -u * x, -u * y, -u * w])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h_norm = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h_norm @ t_src
    return Homography(m, source="dlt")


def warp_image(img: np.ndarray, h: Homography, out_size=None, fill: float = FILL_VALUE):
    """Warp ``img`` by ``h`` (source -> output) with bilinear inverse mapping.

    Returns ``(warped, valid)``. An output pixel is valid when its preimage lies
    inside the source frame and in front of the projection (positive
    homogeneous scale); invalid pixels get ``fill``.
    """
    img = np.asarray(img)
    squeeze = img.ndim == 2
    src = img[..., None] if squeeze else img
    sh, sw = src.shape[:2]
    oh, ow = (sh, sw) if out_size is None else out_size
    inv = np.linalg.inv(h.m)

    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    hom = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ inv.T
    w = hom[..., 2]
    front = w > 0
    safe_w = np.where(front, w, 1.0)
    px = hom[..., 0] / safe_w
    py = hom[..., 1] / safe_w
    tol = BOUNDS_TOL
    valid = front & (px >= -tol) & (px <= sw - 1 + tol) & (py >= -tol) & (py <= sh - 1 + tol)

    px = np.clip(np.where(valid, px, 0.0), 0, sw - 1)
    py = np.clip(np.where(valid, py, 0.0), 0, sh - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    srcf = src.astype(np.float64)
    top = srcf[y0, x0] * (1 - fx) + srcf[y0, x1] * fx
    bot = srcf[y1, x0] * (1 - fx) + srcf[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~valid] = fill
    out = out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    return (out[..., 0] if squeeze else out), valid


@dataclass
class RegionMaskSet:
    """Binary masks over a fixed frame: inpaint region, car region, seam bands."""

    m1: np.ndarray
    m2: np.ndarray
    band: np.ndarray
    frame: tuple = field(default=(0, 0))

    def __post_init__(self):
        self.m1 = np.asarray(self.m1, dtype=bool)
        self.m2 = np.asarray(self.m2, dtype=bool)
        self.band = np.asarray(self.band, dtype=bool)
        self.frame = tuple(self.m1.shape)
        if self.m2.shape != self.frame or self.band.shape != self.frame:
            raise GeometryError("mask shapes differ")
        if np.any(self.m1 & self.m2):
            raise GeometryError("regions overlap")

    @property
    def rest(self) -> np.ndarray:
        return ~(self.m1 | self.m2)

    def tensors(self, device=None):
        """(m1, m2, band) as float tensors shaped ``1 x 1 x H x W``."""
        import torch

        return tuple(
            torch.as_tensor(m, dtype=torch.float32, device=device)[None, None]
            for m in (self.m1, self.m2, self.band)
        )

    def save(self, directory):
        from PIL import Image

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("m1", "m2", "band"):
            Image.fromarray(getattr(self, name).astype(np.uint8) * 255, mode="L").save(d / f"{name}.png")

    @classmethod
    def load(cls, directory) -> "RegionMaskSet":
        from PIL import Image

        d = Path(directory)
        arrs = [np.asarray(Image.open(d / f"{n}.png").convert("L")) > 127 for n in ("m1", "m2", "band")]
        return cls(*arrs)


def _rect_mask(frame, rect) -> np.ndarray:
    r0, r1, c0, c1 = rect
    m = np.zeros(frame, dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def _band_of_rect(frame, rect, width: int) -> np.ndarray:
    # pixels whose center is within Chebyshev distance < width of an interior
    # side of the rectangle (sides on the frame border are not seams)
    h, w = frame
    r0, r1, c0, c1 = rect
    band = np.zeros(frame, dtype=bool)
    if width <= 0:
        return band
    lo_c, hi_c = max(c0 - width, 0), min(c1 + width, w)
    lo_r, hi_r = max(r0 - width, 0), min(r1 + width, h)
    if r0 > 0:
        band[max(r0 - width, 0):min(r0 + width, h), lo_c:hi_c] = True
    if r1 < h:
        band[max(r1 - width, 0):min(r1 + width, h), lo_c:hi_c] = True
    if c0 > 0:
        band[lo_r:hi_r, max(c0 - width, 0):min(c0 + width, w)] = True
    if c1 < w:
        band[lo_r:hi_r, max(c1 - width, 0):min(c1 + width, w)] = True
    return band


def make_region_masks(frame, r1_rect, r2_rect, band_width: int = 8) -> RegionMaskSet:
    """Rectangles are ``(row0, row1, col0, col1)``, half-open."""
    frame = tuple(int(v) for v in frame)
    for rect in (r1_rect, r2_rect):
        r0, r1, c0, c1 = rect
        if not (0 <= r0 < r1 <= frame[0] and 0 <= c0 < c1 <= frame[1]):
            raise GeometryError(f"rectangle {tuple(rect)} outside frame {frame}")
    m1 = _rect_mask(frame, r1_rect)
    m2 = _rect_mask(frame, r2_rect)
    if np.any(m1 & m2):
        raise GeometryError(f"rectangles {tuple(r1_rect)} and {tuple(r2_rect)} overlap")
    band = _band_of_rect(frame, r1_rect, band_width) | _band_of_rect(frame, r2_rect, band_width)
    return RegionMaskSet(m1, m2, band)


def default_rects(size: int):
    """Upper half for the inpaint region, lower-central hood box for the car."""
    s = size / 256
    r1 = (0, size // 2, 0, size)
    r2 = (round(184 * s), size, round(64 * s), round(192 * s))
    return r1, r2


def default_region_masks(size: int, band_width: int | None = None) -> RegionMaskSet:
    if band_width is None:
        band_width = max(1, round(8 * size / 256))
    r1, r2 = default_rects(size)
    return make_region_masks((size, size), r1, r2, band_width)


def _mask_like(mask, like):
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None
    if torch is not None and isinstance(like, torch.Tensor):
        m = torch.as_tensor(mask, dtype=like.dtype, device=like.device)
        while m.dim() < like.dim():
            m = m.unsqueeze(0)
        return m
    m = np.asarray(mask, dtype=np.asarray(like).dtype)
    return m[..., None] if np.ndim(like) == m.ndim + 1 else m


def composite_regions(inpaint, car, warped, masks: RegionMaskSet):
    """``inpaint*M1 + car*M2 + warped*(M - M1 - M2)``.

    Works on ``H x W x C`` arrays or on ``N x C x H x W`` tensors.
    """
    shapes = {tuple(x.shape) for x in (inpaint, car, warped)}
    if len(shapes) != 1:
        raise GeometryError(f"shape mismatch: {sorted(shapes)}")
    shape = shapes.pop()
    frame = masks.frame
    spatial = shape[-2:] if _is_tensor(inpaint) else shape[:2]
    if tuple(spatial) != frame:
        raise GeometryError(f"image frame {tuple(spatial)} does not match masks {frame}")
    m1 = _mask_like(masks.m1, inpaint)
    m2 = _mask_like(masks.m2, inpaint)
    rest = _mask_like(masks.rest, inpaint)
    return inpaint * m1 + car * m2 + warped * rest


def _is_tensor(x) -> bool:
    return type(x).__module__.startswith("torch")
