"""Paired aerial/ground datasets: manifests, preprocessing, synthetic scenes, augmentation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Correspondences, Homography, estimate_homography, warp_image

log = logging.getLogger(__name__)

SIZES = (64, 256)


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------- palette


@dataclass(frozen=True)
class PaletteSpec:
    entries: tuple  # ((name, (r, g, b)), ...)

    def __post_init__(self):
        colors = [tuple(c) for _, c in self.entries]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def colors(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], dtype=np.uint8)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def color(self, name: str) -> tuple:
        return tuple(self.entries[self.index(name)][1])

    def to_text(self) -> str:
        return "".join(f"{n} {r} {g} {b}\n" for n, (r, g, b) in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "PaletteSpec":
        entries = []
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"bad palette line: {line!r}")
            entries.append((parts[0], tuple(int(v) for v in parts[1:])))
        return cls(tuple(entries))

    @classmethod
    def load(cls, path) -> "PaletteSpec":
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


DEFAULT_PALETTE = PaletteSpec((
    ("road", (128, 64, 128)),
    ("sidewalk", (244, 35, 232)),
    ("building", (70, 70, 70)),
    ("vegetation", (107, 142, 35)),
    ("sky", (70, 130, 180)),
    ("car", (0, 0, 142)),
    ("void", (0, 0, 0)),
))


# ---------------------------------------------------------------- samples


@dataclass
class PairedSample:
    aerial: np.ndarray
    ground: np.ndarray
    ground_seg: np.ndarray
    id: str
    warped_aerial: np.ndarray | None = None
    aerial_seg: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        shape = self.aerial.shape
        for name in ("ground", "ground_seg", "warped_aerial", "aerial_seg"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise DatasetError(f"{self.id}: {name} shape {arr.shape} != aerial {shape}")
        check_range(*self.images().values())

    @property
    def size(self) -> int:
        return self.aerial.shape[0]

    def images(self):
        return {k: v for k, v in (
            ("aerial", self.aerial), ("ground", self.ground), ("ground_seg", self.ground_seg),
            ("warped_aerial", self.warped_aerial), ("aerial_seg", self.aerial_seg),
        ) if v is not None}


def to_unit(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def check_range(*arrays):
    for a in arrays:
        if a is not None and (a.min() < -1.0 or a.max() > 1.0):
            raise DatasetError(f"values outside [-1, 1]: [{a.min()}, {a.max()}]")


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None


def write_image(path, img: np.ndarray):
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------- preprocessing


def resize(img: np.ndarray, out: int | tuple, nearest: bool = False) -> np.ndarray:
    """Resize an ``H x W x C`` float image with bilinear (or nearest) sampling."""
    import torch
    import torch.nn.functional as F

    oh, ow = (out, out) if isinstance(out, int) else out
    if img.shape[:2] == (oh, ow):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    if nearest:
        r = F.interpolate(t, size=(oh, ow), mode="nearest")
    else:
        r = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False)
    return r[0].permute(1, 2, 0).numpy()


def center_crop_resize(img: np.ndarray, crop: int, out: int, nearest: bool = False) -> np.ndarray:
    h, w = img.shape[:2]
    if crop > min(h, w) or crop < 1:
        raise ValueError(f"crop {crop} exceeds image extent {h}x{w}")
    top = (h - crop) // 2
    left = (w - crop) // 2
    return resize(img[top:top + crop, left:left + crop], out, nearest=nearest)


def panorama_quarter(img: np.ndarray) -> np.ndarray:
    """Leftmost quarter of a panorama strip."""
    return img[:, : img.shape[1] // 4]


def subsample_every_kth(ids, k: int) -> list:
    if k < 1:
        raise ValueError(f"stride must be >= 1, got {k}")
    return list(ids)[::k]


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestRecord:
    id: str
    aerial: str
    ground: str
    seg: str
    split: str = "train"
    warped: str | None = None
    aerial_seg: str | None = None
    label: int | None = None
    homography: str | None = None


@dataclass
class DatasetManifest:
    records: list
    root: Path = Path(".")
    crop: int | None = None
    resize: int = 256
    panorama_quarter: bool = False
    subsample: int = 1
    homography: str | None = None
    palette: str | None = None

    def __post_init__(self):
        seen = {}
        for r in self.records:
            if r.split not in ("train", "test"):
                raise DatasetError(f"{r.id}: unknown split {r.split!r}")
            if seen.setdefault(r.id, r.split) != r.split:
                raise DatasetError(f"{r.id} appears in both train and test")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """A JSON document, or JSON lines with an optional leading directives object."""
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"missing file: {path}")
        text = path.read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            lines = [json.loads(l) for l in text.splitlines() if l.strip()]
            doc = {"records": []}
            for obj in lines:
                if "directives" in obj:
                    doc.update(obj["directives"])
                else:
                    doc["records"].append(obj)
        directives = dict(doc.get("directives", {}))
        directives.update({k: v for k, v in doc.items() if k not in ("records", "directives")})
        records = [ManifestRecord(**r) for r in doc["records"]]
        known = {"crop", "resize", "panorama_quarter", "subsample", "homography", "palette"}
        unknown = set(directives) - known
        if unknown:
            raise DatasetError(f"unknown manifest directives: {sorted(unknown)}")
        return cls(records=records, root=path.parent, **directives)

    def save(self, path):
        doc = {
            "directives": {
                "crop": self.crop, "resize": self.resize,
                "panorama_quarter": self.panorama_quarter, "subsample": self.subsample,
                "homography": self.homography, "palette": self.palette,
            },
            "records": [{k: v for k, v in vars(r).items() if v is not None} for r in self.records],
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    def path(self, rel) -> Path:
        return self.root / rel

    def dataset_homography(self) -> Homography | None:
        if self.homography is None:
            return None
        return Homography.load(self.path(self.homography))


def _prep(img_u8: np.ndarray, m: DatasetManifest, *, aerial: bool, seg: bool) -> np.ndarray:
    img = img_u8.astype(np.float32)
    if not aerial and m.panorama_quarter:
        img = panorama_quarter(img)
    if aerial and m.crop:
        img = center_crop_resize(img, m.crop, m.resize, nearest=seg)
    else:
        img = resize(img, m.resize, nearest=seg)
    if not seg:
        img = np.clip(np.rint(img), 0, 255)
    return img / 127.5 - 1.0


def load_dataset(manifest: DatasetManifest | str | Path, split: str | None = None,
                 with_warp: bool = True) -> list[PairedSample]:
    """Load and preprocess every record of ``split`` (all when None), sorted by id.

    Missing files abort; pairs whose images disagree in shape are skipped.
    When the manifest names a homography, ``warped_aerial`` is filled in.
    """
    m = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)
    records = [r for r in m.records if split is None or r.split == split]
    if m.subsample > 1:
        kept = []
        for s in ("train", "test"):
            kept += subsample_every_kth([r for r in records if r.split == s], m.subsample)
        records = kept
    for r in records:
        for rel in (r.aerial, r.ground, r.seg, r.warped, r.aerial_seg, r.homography):
            if rel is not None and not m.path(rel).exists():
                raise DatasetError(f"missing file: {m.path(rel)}")
    h_default = m.dataset_homography() if with_warp else None

    samples, skipped = [], []
    for r in sorted(records, key=lambda r: r.id):
        a = read_image(m.path(r.aerial))
        g = read_image(m.path(r.ground))
        s = read_image(m.path(r.seg))
        if g.shape != s.shape or (not m.panorama_quarter and a.shape != g.shape):
            log.warning("skipping %s: shape mismatch aerial %s ground %s seg %s",
                        r.id, a.shape, g.shape, s.shape)
            skipped.append(r.id)
            continue
        aerial = _prep(a, m, aerial=True, seg=False)
        ground = _prep(g, m, aerial=False, seg=False)
        gseg = _prep(s, m, aerial=False, seg=True)
        aseg = None
        if r.aerial_seg is not None:
            aseg = _prep(read_image(m.path(r.aerial_seg)), m, aerial=True, seg=True)
        warped = None
        if r.warped is not None:
            warped = _prep(read_image(m.path(r.warped)), m, aerial=False, seg=False)
        elif with_warp and (r.homography or h_default is not None):
            h = Homography.load(m.path(r.homography)) if r.homography else h_default
            warped, _ = warp_image(aerial, h)
            warped = warped.astype(np.float32)
        check_range(aerial, ground, gseg, warped, aseg)
        samples.append(PairedSample(aerial.astype(np.float32), ground.astype(np.float32),
                                    gseg.astype(np.float32), r.id, warped, aseg, r.label))
    if skipped:
        log.warning("skipped %d malformed sample(s)", len(skipped))
    load_dataset.last_skipped = skipped
    return samples


load_dataset.last_skipped = []


# ---------------------------------------------------------------- synthetic scenes

SCENE_CLASSES = ("downtown", "residential", "park", "crossroads", "highway", "rural")

# appearance colors (uint8) per surface kind
_LOOK = {
    "grass": (86, 125, 60),
    "tree": (34, 80, 34),
    "road": (72, 72, 76),
    "sidewalk": (170, 168, 160),
    "marker": (235, 235, 225),
    "ego": (190, 40, 40),
    "hood": (30, 30, 36),
    "sky_top": (90, 140, 205),
    "sky_bottom": (190, 215, 240),
}
_ROOFS = ((150, 70, 55), (120, 110, 100), (175, 150, 110), (95, 95, 120))

SUPERSAMPLE = 4


def synthetic_homography(size: int) -> Homography:
    """Ground-plane homography of the synthetic camera: aerial -> ground pixels.

    The aerial top edge lands on the ground frame's middle row; the narrow strip
    in front of the ego vehicle fills the bottom row.
    """
    s = size - 1
    half = size // 2
    src = [(0, 0), (s, 0), (0.375 * s, s), (0.625 * s, s)]
    dst = [(0, half), (s, half), (0, s), (s, s)]
    return estimate_homography(Correspondences(src, dst))


def synthetic_correspondences(size: int) -> Correspondences:
    s = size - 1
    half = size // 2
    return Correspondences([(0, 0), (s, 0), (0.375 * s, s), (0.625 * s, s)],
                           [(0, half), (s, half), (0, s), (s, s)])


@dataclass
class Scene:
    """Top-down layout in aerial pixel units (x right, y down)."""

    size: int
    label: int
    roads: list = field(default_factory=list)       # (x0, y0, x1, y1)
    sidewalks: list = field(default_factory=list)
    markers: list = field(default_factory=list)
    buildings: list = field(default_factory=list)   # (x0, y0, x1, y1, roof_idx)
    trees: list = field(default_factory=list)       # (cx, cy, r)
    ego: tuple = ()
    sky_tint: float = 0.0


def make_scene(seed: int, size: int) -> Scene:
    if size not in SIZES:
        raise ValueError(f"size must be one of {SIZES}, got {size}")
    rng = np.random.default_rng(seed)
    label = int(rng.integers(len(SCENE_CLASSES)))
    kind = SCENE_CLASSES[label]
    S = float(size)
    sc = Scene(size=size, label=label, sky_tint=float(rng.uniform(-1, 1)))

    def vroad(cx, w):
        sc.roads.append((cx - w / 2, -1, cx + w / 2, S + 1))
        sc.sidewalks.append((cx - w / 2 - 0.05 * S, -1, cx + w / 2 + 0.05 * S, S + 1))
        for y in np.arange(-0.02 * S, S, 0.12 * S):
            sc.markers.append((cx - 0.008 * S, y, cx + 0.008 * S, y + 0.06 * S))

    def hroad(cy, w):
        sc.roads.append((-1, cy - w / 2, S + 1, cy + w / 2))
        sc.sidewalks.append((-1, cy - w / 2 - 0.05 * S, S + 1, cy + w / 2 + 0.05 * S))
        for x in np.arange(-0.02 * S, S, 0.12 * S):
            sc.markers.append((x, cy - 0.008 * S, x + 0.06 * S, cy + 0.008 * S))

    # the ego vehicle always sits on a vertical road at the bottom center
    main_w = (0.28 if kind == "highway" else 0.18) * S
    vroad(S / 2 + rng.uniform(-0.02, 0.02) * S, main_w)
    if kind in ("crossroads", "downtown"):
        hroad(rng.uniform(0.2, 0.6) * S, rng.uniform(0.14, 0.2) * S)

    n_buildings = {"downtown": (5, 8), "residential": (2, 4), "crossroads": (1, 3)}.get(kind, (0, 0))
    for _ in range(int(rng.integers(n_buildings[0], n_buildings[1] + 1))):
        left = rng.random() < 0.5
        w = rng.uniform(0.1, 0.22) * S
        h = rng.uniform(0.1, 0.3) * S
        x0 = rng.uniform(0.0, 0.3 * S - w) if left else rng.uniform(0.7 * S, S - w)
        y0 = rng.uniform(0, 0.75 * S - h)
        sc.buildings.append((x0, y0, x0 + w, y0 + h, int(rng.integers(len(_ROOFS)))))

    n_trees = {"park": (8, 14), "residential": (3, 6), "rural": (2, 5), "highway": (1, 3)}.get(kind, (0, 1))
    for _ in range(int(rng.integers(n_trees[0], n_trees[1] + 1))):
        side = rng.random() < 0.5
        cx = rng.uniform(0.02, 0.3) * S if side else rng.uniform(0.7, 0.98) * S
        sc.trees.append((cx, rng.uniform(0.02, 0.95) * S, rng.uniform(0.03, 0.07) * S))

    cx = sc.roads[0][0] / 2 + sc.roads[0][2] / 2
    sc.ego = (cx - 0.04 * S, 0.93 * S, cx + 0.04 * S, 1.02 * S)
    return sc


def _in_rect(x, y, r):
    return (x >= r[0]) & (x < r[2]) & (y >= r[1]) & (y < r[3])


def ground_plane_layers(sc: Scene, x: np.ndarray, y: np.ndarray):
    """Per-point (appearance RGB, palette class) of the ground plane, painter's order."""
    rgb = np.empty(x.shape + (3,), dtype=np.float64)
    cls = np.empty(x.shape, dtype=np.int64)
    P = DEFAULT_PALETTE
    rgb[:] = _LOOK["grass"]
    cls[:] = P.index("vegetation")
    layers = []
    layers += [(r, _LOOK["sidewalk"], "sidewalk") for r in sc.sidewalks]
    layers += [(r, _LOOK["road"], "road") for r in sc.roads]
    layers += [(r, _LOOK["marker"], "road") for r in sc.markers]
    layers += [(b[:4], _ROOFS[b[4]], "building") for b in sc.buildings]
    for rect, color, name in layers:
        m = _in_rect(x, y, rect)
        rgb[m] = color
        cls[m] = P.index(name)
    for cx, cy, r in sc.trees:
        m = (x - cx) ** 2 + (y - cy) ** 2 < r * r
        rgb[m] = _LOOK["tree"]
        cls[m] = P.index("vegetation")
    m = _in_rect(x, y, sc.ego)
    rgb[m] = _LOOK["ego"]
    cls[m] = P.index("car")
    return rgb, cls


def _subpixel_grid(rows, cols, ss):
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    yy = rows[:, None, None, None] + offs[None, None, :, None]
    xx = cols[None, :, None, None] + offs[None, None, None, :]
    return np.broadcast_arrays(xx, yy)


def _majority(cls_sub: np.ndarray, n: int) -> np.ndarray:
    # cls_sub: rows x cols x ss x ss
    flat = cls_sub.reshape(*cls_sub.shape[:2], -1)
    counts = np.stack([(flat == k).sum(-1) for k in range(n)], axis=-1)
    return counts.argmax(-1)


def render_aerial(sc: Scene, ss: int = SUPERSAMPLE):
    S = sc.size
    xx, yy = _subpixel_grid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), ss)
    rgb, cls = ground_plane_layers(sc, xx, yy)
    img = rgb.mean(axis=(2, 3))
    seg = _majority(cls, len(DEFAULT_PALETTE.entries))
    return np.rint(img).astype(np.uint8), seg


def hood_mask(size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    # covers the projected ego vehicle and stays inside the default car box
    cx, cy = (size - 1) / 2, 1.04 * size
    return ((cols - cx) / (0.22 * size)) ** 2 + ((rows - cy) / (0.26 * size)) ** 2 < 1.0


def render_ground(sc: Scene, h: Homography, ss: int = SUPERSAMPLE):
    """Perspective view: sky and facades above the middle row, ground plane below."""
    S = sc.size
    half = S // 2
    P = DEFAULT_PALETTE
    img = np.zeros((S, S, 3), dtype=np.float64)
    seg = np.full((S, S), P.index("sky"), dtype=np.int64)

    t = np.linspace(0, 1, half)[:, None]
    top = np.array(_LOOK["sky_top"], dtype=np.float64) + 20 * sc.sky_tint
    bottom = np.array(_LOOK["sky_bottom"], dtype=np.float64)
    img[:half] = (top * (1 - t) + bottom * t)[:, None, :]

    # skyline: every building rises as a facade over its aerial column span
    for x0, y0, x1, y1, roof in sc.buildings:
        height = int(np.clip(round((0.1 + 0.5 * (1 - y0 / S)) * (x1 - x0)), 2, half - 2))
        c0, c1 = int(np.clip(np.ceil(x0), 0, S)), int(np.clip(np.ceil(x1), 0, S))
        shade = np.array(_ROOFS[roof], dtype=np.float64) * 0.7
        img[half - height:half, c0:c1] = shade
        seg[half - height:half, c0:c1] = P.index("building")

    # the ground camera resolves the plane at aerial-pixel footprints: each
    # preimage point blends the four nearest footprint averages bilinearly
    hinv = np.linalg.inv(h.m)
    rows = np.arange(half, S, dtype=np.float64)
    cols = np.arange(S, dtype=np.float64)
    gx, gy = np.meshgrid(cols, rows)
    hom = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ hinv.T
    px = np.clip(hom[..., 0] / hom[..., 2], 0, S - 1)
    py = np.clip(hom[..., 1] / hom[..., 2], 0, S - 1)
    x0, y0 = np.floor(px), np.floor(py)
    fx, fy = px - x0, py - y0
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    acc = np.zeros(px.shape + (3,))
    votes = np.zeros(px.shape + (len(P.entries),))
    idx = np.indices(px.shape)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cx = np.minimum(x0 + dx, S - 1)
        cy = np.minimum(y0 + dy, S - 1)
        wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
        for oy in offs:
            for ox in offs:
                rgb, cls = ground_plane_layers(sc, cx + ox, cy + oy)
                acc += (wgt / ss ** 2)[..., None] * rgb
                np.add.at(votes, (*idx, cls), wgt / ss ** 2)
    img[half:] = acc
    seg[half:] = votes.argmax(-1)

    hood = hood_mask(S)
    img[hood] = _LOOK["hood"]
    seg[hood] = P.index("car")
    return np.rint(img).astype(np.uint8), seg


def colorize(seg_idx: np.ndarray, palette: PaletteSpec = DEFAULT_PALETTE) -> np.ndarray:
    return palette.colors[seg_idx]


def synth_scene(seed: int, size: int = 256) -> PairedSample:
    """Render one deterministic aerial/ground pair with exact segmentation maps."""
    sc = make_scene(seed, size)
    h = synthetic_homography(size)
    aerial_u8, aerial_cls = render_aerial(sc)
    ground_u8, ground_cls = render_ground(sc, h)
    aerial = to_unit(aerial_u8)
    warped, _ = warp_image(aerial, h)
    return PairedSample(
        aerial=aerial,
        ground=to_unit(ground_u8),
        ground_seg=to_unit(colorize(ground_cls)),
        id=f"syn{seed:06d}",
        warped_aerial=warped.astype(np.float32),
        aerial_seg=to_unit(colorize(aerial_cls)),
        label=sc.label,
    )


def write_synthetic_dataset(out_dir, n: int, seed: int = 0, size: int = 256,
                            test_fraction: float = 0.25) -> Path:
    """Write ``n`` synthetic pairs as PNGs plus manifest, palette and homography files."""
    out = Path(out_dir)
    for sub in ("aerial", "ground", "seg", "aerial_seg"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_test = int(round(n * test_fraction))
    records = []
    for i in range(n):
        s = synth_scene(seed * 1_000_003 + i, size)
        name = f"{s.id}.png"
        write_image(out / "aerial" / name, s.aerial)
        write_image(out / "ground" / name, s.ground)
        write_image(out / "seg" / name, s.ground_seg)
        write_image(out / "aerial_seg" / name, s.aerial_seg)
        records.append(ManifestRecord(
            id=s.id, aerial=f"aerial/{name}", ground=f"ground/{name}", seg=f"seg/{name}",
            aerial_seg=f"aerial_seg/{name}", split="test" if i >= n - n_test else "train",
            label=s.label,
        ))
    synthetic_homography(size).save(out / "homography.txt")
    synthetic_correspondences(size).save(out / "correspondences.txt")
    DEFAULT_PALETTE.save(out / "palette.txt")
    DatasetManifest(records=records, root=out, resize=size, homography="homography.txt",
                    palette="palette.txt").save(out / "manifest.json")
    return out / "manifest.json"


# ---------------------------------------------------------------- augmentation


def jitter_flip(sample: PairedSample, resize_to: int, top: int, left: int, flip: bool) -> PairedSample:
    """Resize to ``resize_to``, crop back at ``(top, left)``, optionally mirror."""
    size = sample.size

    def tf(img, nearest):
        if img is None:
            return None
        out = resize(img, resize_to, nearest=nearest)[top:top + size, left:left + size]
        if flip:
            out = out[:, ::-1]
        return np.ascontiguousarray(out, dtype=np.float32)

    return replace(
        sample,
        aerial=tf(sample.aerial, False),
        ground=tf(sample.ground, False),
        ground_seg=tf(sample.ground_seg, True),
        warped_aerial=tf(sample.warped_aerial, False),
        aerial_seg=tf(sample.aerial_seg, True),
    )


def augment(sample: PairedSample, seed: int, jitter: int = 30, flip_prob: float = 0.5) -> PairedSample:
    rng = np.random.default_rng(seed)
    big = sample.size + jitter
    top, left = (int(v) for v in rng.integers(0, jitter + 1, size=2))
    flip = bool(rng.random() < flip_prob)
    return jitter_flip(sample, big, top, left, flip)
