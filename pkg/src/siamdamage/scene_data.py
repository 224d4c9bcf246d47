"""Domain types, manifests, polygon rasterization and synthetic scenes."""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

UNCLASSIFIED = 255
N_GRADES = 4


class DamageGrade(enum.IntEnum):
    BACKGROUND = 0
    NO_DAMAGE = 1
    MINOR = 2
    MAJOR = 3
    DESTROYED = 4
    UNCLASSIFIED = UNCLASSIFIED


class Hazard(str, enum.Enum):
    FLOOD = "flood"
    FIRE = "fire"
    EARTHQUAKE = "earthquake"
    TSUNAMI = "tsunami"
    VOLCANO = "volcano"
    WIND = "wind"


SPLITS = ("train", "test", "holdout")


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Pixel grid of shape (height, width, channels) with values in [0, 1].

    ``gsd`` is the spacing of the stored grid in meters per pixel.
    ``effective_gsd`` records the information content after a degrade/restore
    round trip and defaults to ``gsd``.
    """

    pixels: np.ndarray
    gsd: float
    effective_gsd: float | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (H, W, C) with H, W >= 1, got {px.shape}")
        if not self.gsd > 0:
            raise ValueError(f"gsd must be positive, got {self.gsd}")
        object.__setattr__(self, "pixels", px)
        if self.effective_gsd is None:
            object.__setattr__(self, "effective_gsd", float(self.gsd))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return (
            self.gsd == other.gsd
            and self.effective_gsd == other.effective_gsd
            and self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
        )

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.floor(self.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, data: np.ndarray, gsd: float) -> "RasterImage":
        return cls(np.asarray(data, dtype=np.float64) / 255.0, gsd)


@dataclass(frozen=True)
class BuildingAnnotation:
    polygon: tuple[tuple[float, float], ...]
    grade: int

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        if len(poly) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if self.grade not in (1, 2, 3, 4, UNCLASSIFIED):
            raise ValueError(f"invalid damage grade {self.grade}")
        object.__setattr__(self, "polygon", poly)


@dataclass(frozen=True, eq=False)
class ScenePair:
    """Co-registered pre/post imagery with building labels.

    ``label_mask`` holds a grade map (0-4, 255 = unclassified) when the scene
    was read from disk; it takes precedence over ``annotations``.
    """

    pre: RasterImage
    post: RasterImage
    annotations: tuple[BuildingAnnotation, ...] = ()
    event_id: str = "synthetic"
    hazard_type: Hazard = Hazard.WIND
    split: str = "train"
    scene_id: str = ""
    label_mask: np.ndarray | None = None

    def __post_init__(self):
        if (self.pre.height, self.pre.width) != (self.post.height, self.post.width):
            raise ValueError("pre and post images are not co-registered (size)")
        if self.pre.gsd != self.post.gsd:
            raise ValueError("pre and post images are not co-registered (gsd)")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "hazard_type", Hazard(self.hazard_type))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pre.height, self.pre.width

    def __eq__(self, other):
        if not isinstance(other, ScenePair):
            return NotImplemented
        masks_equal = (self.label_mask is None and other.label_mask is None) or (
            self.label_mask is not None
            and other.label_mask is not None
            and np.array_equal(self.label_mask, other.label_mask)
        )
        return (
            self.pre == other.pre
            and self.post == other.post
            and self.annotations == other.annotations
            and self.event_id == other.event_id
            and self.hazard_type == other.hazard_type
            and self.split == other.split
            and self.scene_id == other.scene_id
            and masks_equal
        )

    def with_images(self, pre: RasterImage, post: RasterImage) -> "ScenePair":
        return replace(self, pre=pre, post=post)


@dataclass(frozen=True, eq=False)
class MaskStack:
    """Localization channel plus four damage channels (grades 1-4).

    ``loc`` has shape (H, W), ``damage`` (4, H, W). ``unclassified`` marks
    building pixels whose grade is unknown; they carry loc=1 and no damage.
    """

    loc: np.ndarray
    damage: np.ndarray
    unclassified: np.ndarray | None = None

    def __post_init__(self):
        if self.damage.shape != (N_GRADES,) + self.loc.shape:
            raise ValueError(
                f"damage must be (4, H, W) matching loc {self.loc.shape}, got {self.damage.shape}"
            )

    @property
    def height(self) -> int:
        return self.loc.shape[0]

    @property
    def width(self) -> int:
        return self.loc.shape[1]

    def as_array(self) -> np.ndarray:
        """Channels-last (H, W, 5) array: loc first, then grades 1-4."""
        return np.concatenate([self.loc[:, :, None], np.moveaxis(self.damage, 0, -1)], axis=-1)

    @classmethod
    def from_array(cls, arr: np.ndarray, unclassified: np.ndarray | None = None) -> "MaskStack":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 1 + N_GRADES:
            raise ValueError(f"expected (H, W, 5) array, got {arr.shape}")
        return cls(arr[:, :, 0].copy(), np.moveaxis(arr[:, :, 1:], -1, 0).copy(), unclassified)

    @classmethod
    def from_grades(cls, grades: np.ndarray) -> "MaskStack":
        grades = np.asarray(grades)
        uncls = grades == UNCLASSIFIED
        loc = ((grades >= 1) & (grades <= N_GRADES)) | uncls
        damage = np.stack([grades == g for g in range(1, N_GRADES + 1)]).astype(np.float64)
        return cls(loc.astype(np.float64), damage, uncls if uncls.any() else None)

    def grade_map(self) -> np.ndarray:
        """Hard grade map of a ground-truth stack (255 where unclassified)."""
        grades = np.zeros(self.loc.shape, dtype=np.uint8)
        for g in range(N_GRADES):
            grades[self.damage[g] > 0.5] = g + 1
        if self.unclassified is not None:
            grades[self.unclassified] = UNCLASSIFIED
        return grades


# ---------------------------------------------------------------------------
# rasterization


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    xy = np.asarray(poly, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(poly, width: float, height: float) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip against the rectangle [0, width] x [0, height]."""

    def clip(points, inside, intersect):
        out = []
        for i, cur in enumerate(points):
            prev = points[i - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(intersect(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(intersect(prev, cur))
        return out

    def at_x(xc):
        return lambda a, b: (xc, a[1] + (b[1] - a[1]) * (xc - a[0]) / (b[0] - a[0]))

    def at_y(yc):
        return lambda a, b: (a[0] + (b[0] - a[0]) * (yc - a[1]) / (b[1] - a[1]), yc)

    pts = [tuple(p) for p in poly]
    for inside, intersect in (
        (lambda p: p[0] >= 0, at_x(0.0)),
        (lambda p: p[0] <= width, at_x(float(width))),
        (lambda p: p[1] >= 0, at_y(0.0)),
        (lambda p: p[1] <= height, at_y(float(height))),
    ):
        if not pts:
            break
        pts = clip(pts, inside, intersect)
    return pts


def polygon_coverage(poly, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside ``poly`` (even-odd rule).

    Scanline fill: for every row the edge crossings at the pixel-center line
    are sorted and the spans between alternate crossings are filled.
    """
    xy = np.asarray(poly, dtype=np.float64)
    x0, y0 = xy[:, 0], xy[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    out = np.zeros((height, width), dtype=bool)
    lo = max(int(np.floor(y0.min() - 0.5)), 0)
    hi = min(int(np.ceil(y0.max() - 0.5)), height - 1)
    centers_x = np.arange(width) + 0.5
    for row in range(lo, hi + 1):
        yc = row + 0.5
        crossing = (y0 <= yc) != (y1 <= yc)
        if not crossing.any():
            continue
        xa, ya, xb, yb = x0[crossing], y0[crossing], x1[crossing], y1[crossing]
        xs = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        # pixel centers strictly left of the crossing count it
        count = np.searchsorted(xs, centers_x, side="right")
        out[row] = (len(xs) - count) % 2 == 1
    return out


def rasterize_annotations(scene: ScenePair) -> tuple[MaskStack, int]:
    """Burn building polygons into a hard MaskStack.

    Later annotations overwrite earlier ones. Returns the stack and the number
    of degenerate polygons (zero area after clipping) that were skipped.
    """
    if scene.label_mask is not None:
        return MaskStack.from_grades(scene.label_mask), 0
    h, w = scene.shape
    grades = np.zeros((h, w), dtype=np.uint8)
    skipped = 0
    for ann in scene.annotations:
        clipped = clip_polygon(ann.polygon, w, h)
        if len(clipped) < 3 or polygon_area(clipped) == 0.0:
            skipped += 1
            continue
        grades[polygon_coverage(ann.polygon, h, w)] = ann.grade
    if skipped:
        logger.warning("skipped %d degenerate annotation(s) in scene %s", skipped, scene.scene_id)
    return MaskStack.from_grades(grades), skipped


def truth_grades(scene: ScenePair) -> np.ndarray:
    """Ground-truth grade map (0-4, 255 unclassified) of a scene."""
    if scene.label_mask is not None:
        return scene.label_mask
    return rasterize_annotations(scene)[0].grade_map()


def scene_grade_set(scene: ScenePair) -> set[int]:
    if scene.label_mask is None:
        return {a.grade for a in scene.annotations if a.grade != UNCLASSIFIED}
    vals = np.unique(scene.label_mask)
    return {int(v) for v in vals if 1 <= v <= N_GRADES}


# ---------------------------------------------------------------------------
# synthetic scenes

_ROOF_COLORS = np.array(
    [
        [0.82, 0.80, 0.76],
        [0.78, 0.42, 0.34],
        [0.70, 0.72, 0.78],
        [0.86, 0.76, 0.58],
        [0.62, 0.62, 0.64],
    ]
)


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return noise / (noise.std() + 1e-12)


def generate_synthetic_scene(
    seed: int,
    side: int = 128,
    n_buildings: int = 8,
    damage_profile: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    hazard_type: Hazard | str = Hazard.WIND,
    *,
    gsd: float = 0.5,
    event_id: str = "synthetic",
    split: str = "train",
    scene_id: str | None = None,
    size_range: tuple[int, int] = (14, 30),
    max_retries: int = 200,
) -> ScenePair:
    """Render a deterministic pre/post scene with rectangular buildings.

    Post-event signatures per grade: 1 unchanged, 2 scattered roof speckle,
    3 roof-wide texture disruption, 4 footprint replaced by rubble. Flood
    scenes keep grade 2-3 roofs intact and darken the surrounding ground
    instead. Fewer than ``n_buildings`` are placed if footprints cannot be
    fitted without overlap.
    """
    if side < 32:
        raise ValueError("side must be at least 32 pixels")
    profile = np.asarray(damage_profile, dtype=np.float64)
    if profile.shape != (4,) or (profile < 0).any() or abs(profile.sum() - 1.0) > 1e-9:
        raise ValueError("damage_profile must be 4 non-negative probabilities summing to 1")
    hazard = Hazard(hazard_type)
    rng = np.random.default_rng(seed)

    base = np.array([0.30, 0.42, 0.24]) + rng.uniform(-0.05, 0.05, 3)
    ground = base + 0.06 * _smooth_noise(rng, (side, side, 1), 3.0) + 0.02 * rng.standard_normal(
        (side, side, 3)
    )
    pre = ground.copy()
    post = ground + 0.01 * rng.standard_normal(ground.shape)

    lo, hi = size_range
    occupied = np.zeros((side, side), dtype=bool)
    annotations: list[BuildingAnnotation] = []
    for _ in range(n_buildings):
        for _attempt in range(max_retries):
            bw, bh = rng.integers(lo, hi + 1, size=2)
            x0 = int(rng.integers(1, side - bw))
            y0 = int(rng.integers(1, side - bh))
            pad = occupied[max(y0 - 2, 0) : y0 + bh + 2, max(x0 - 2, 0) : x0 + bw + 2]
            if not pad.any():
                break
        else:
            continue
        occupied[y0 : y0 + bh, x0 : x0 + bw] = True
        grade = int(rng.choice(4, p=profile)) + 1
        color = _ROOF_COLORS[rng.integers(len(_ROOF_COLORS))]
        roof = color + 0.03 * rng.standard_normal((bh, bw, 3))
        pre[y0 : y0 + bh, x0 : x0 + bw] = roof
        post[y0 : y0 + bh, x0 : x0 + bw] = _damaged_roof(rng, roof, grade, hazard)
        if hazard is Hazard.FLOOD and grade >= 2:
            _flood_ground(post, occupied, x0, y0, bw, bh, grade)
        poly = ((x0, y0), (x0 + bw, y0), (x0 + bw, y0 + bh), (x0, y0 + bh))
        annotations.append(BuildingAnnotation(poly, grade))

    if len(annotations) < n_buildings:
        logger.info("placed %d of %d buildings (seed %d)", len(annotations), n_buildings, seed)

    # quantize through 8 bits so in-memory scenes equal their PNG round trip
    pre_img = RasterImage.from_uint8(RasterImage(np.clip(pre, 0, 1), gsd).to_uint8(), gsd)
    post_img = RasterImage.from_uint8(RasterImage(np.clip(post, 0, 1), gsd).to_uint8(), gsd)
    return ScenePair(
        pre_img,
        post_img,
        tuple(annotations),
        event_id=event_id,
        hazard_type=hazard,
        split=split,
        scene_id=scene_id if scene_id is not None else f"{event_id}-{seed}",
    )


def _damaged_roof(rng, roof: np.ndarray, grade: int, hazard: Hazard) -> np.ndarray:
    bh, bw, _ = roof.shape
    if grade == 1 or (hazard is Hazard.FLOOD and grade in (2, 3)):
        return roof
    if grade == 2:
        out = roof.copy()
        speckle = rng.random((bh, bw)) < 0.22
        out[speckle] = 0.12 + 0.05 * rng.random((int(speckle.sum()), 1))
        return out
    if grade == 3:
        blotch = ndimage.gaussian_filter(rng.standard_normal((bh, bw)), 1.5)
        blotch = blotch / (blotch.std() + 1e-12)
        tint = np.array([0.48, 0.38, 0.30])
        return 0.35 * roof + 0.65 * tint + 0.14 * blotch[:, :, None]
    rubble = 0.40 + 0.20 * rng.standard_normal((bh, bw, 1)) + 0.05 * rng.standard_normal((bh, bw, 3))
    return rubble * np.array([1.0, 0.9, 0.75])


def _flood_ground(post, occupied, x0, y0, bw, bh, grade):
    side = post.shape[0]
    ring = 2 + 3 * grade
    ya, yb = max(y0 - ring, 0), min(y0 + bh + ring, side)
    xa, xb = max(x0 - ring, 0), min(x0 + bw + ring, side)
    window = ~occupied[ya:yb, xa:xb]
    water = np.array([0.22, 0.20, 0.14])
    depth = 0.25 + 0.15 * grade
    patch = post[ya:yb, xa:xb]
    patch[window] = (1 - depth) * patch[window] * 0.6 + depth * water


def synthetic_dataset(
    n_scenes: int,
    seed: int = 0,
    *,
    side: int = 128,
    n_buildings: int = 8,
    damage_profile: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    hazards: Sequence[Hazard | str] = (Hazard.WIND,),
    n_events: int = 1,
    split: str = "train",
    event_prefix: str = "synth",
    size_range: tuple[int, int] = (14, 30),
) -> list[ScenePair]:
    """Deterministic list of synthetic scenes spread round-robin over events."""
    scenes = []
    for i in range(n_scenes):
        event = i % max(n_events, 1)
        scenes.append(
            generate_synthetic_scene(
                seed * 100_003 + i,
                side,
                n_buildings,
                damage_profile,
                hazards[event % len(hazards)],
                event_id=f"{event_prefix}-{event:02d}",
                split=split,
                scene_id=f"{event_prefix}-{seed}-{i:04d}",
                size_range=size_range,
            )
        )
    return scenes


# ---------------------------------------------------------------------------
# manifests


class ManifestError(Exception):
    """Base class for manifest problems."""


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass


class ManifestSchemaError(ManifestError, ValueError):
    pass


class DanglingPathError(ManifestError, FileNotFoundError):
    pass


_RECORD_FIELDS = {
    "event_id": str,
    "hazard_type": str,
    "split": str,
    "pre_path": str,
    "post_path": str,
    "mask_path": str,
    "gsd": (int, float),
}


@dataclass(frozen=True)
class SceneRecord:
    event_id: str
    hazard_type: str
    split: str
    pre_path: str
    post_path: str
    mask_path: str
    gsd: float

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "hazard_type": self.hazard_type,
            "split": self.split,
            "pre_path": self.pre_path,
            "post_path": self.post_path,
            "mask_path": self.mask_path,
            "gsd": self.gsd,
        }


@dataclass
class DatasetManifest:
    records: list[SceneRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.records == other.records

    @property
    def events(self) -> list[str]:
        return sorted({r.event_id for r in self.records})

    def by_event(self) -> dict[str, list[SceneRecord]]:
        index: dict[str, list[SceneRecord]] = {}
        for r in self.records:
            index.setdefault(r.event_id, []).append(r)
        return index

    def by_hazard(self) -> dict[str, list[SceneRecord]]:
        index: dict[str, list[SceneRecord]] = {}
        for r in self.records:
            index.setdefault(r.hazard_type, []).append(r)
        return index

    def filter(
        self,
        event_ids: Iterable[str] | None = None,
        hazard: str | None = None,
        split: str | None = None,
        exclude_events: Iterable[str] | None = None,
    ) -> "DatasetManifest":
        keep = set(event_ids) if event_ids is not None else None
        drop = set(exclude_events or ())
        recs = [
            r
            for r in self.records
            if (keep is None or r.event_id in keep)
            and r.event_id not in drop
            and (hazard is None or r.hazard_type == hazard)
            and (split is None or r.split == split)
        ]
        return DatasetManifest(recs, self.root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def load_scene(self, record: SceneRecord) -> ScenePair:
        pre = np.asarray(Image.open(self.resolve(record.pre_path)).convert("RGB"))
        post = np.asarray(Image.open(self.resolve(record.post_path)).convert("RGB"))
        mask = np.asarray(Image.open(self.resolve(record.mask_path)))
        return ScenePair(
            RasterImage.from_uint8(pre, record.gsd),
            RasterImage.from_uint8(post, record.gsd),
            (),
            event_id=record.event_id,
            hazard_type=record.hazard_type,
            split=record.split,
            scene_id=Path(record.pre_path).stem.removesuffix("_pre"),
            label_mask=mask.astype(np.uint8),
        )

    def load_scenes(self) -> list[ScenePair]:
        return [self.load_scene(r) for r in self.records]


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    doc = [r.to_dict() for r in manifest.records]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise ManifestSchemaError(f"{path}: top level must be an array of scene records")
    records = []
    for i, item in enumerate(doc):
        if not isinstance(item, dict):
            raise ManifestSchemaError(f"{path}: record {i} is not an object")
        missing = set(_RECORD_FIELDS) - set(item)
        if missing:
            raise ManifestSchemaError(f"{path}: record {i} missing fields {sorted(missing)}")
        for key, typ in _RECORD_FIELDS.items():
            if not isinstance(item[key], typ) or isinstance(item[key], bool):
                raise ManifestSchemaError(f"{path}: record {i} field {key!r} has wrong type")
        if item["split"] not in SPLITS:
            raise ManifestSchemaError(f"{path}: record {i} has unknown split {item['split']!r}")
        try:
            Hazard(item["hazard_type"])
        except ValueError:
            raise ManifestSchemaError(
                f"{path}: record {i} has unknown hazard {item['hazard_type']!r}"
            ) from None
        if not item["gsd"] > 0:
            raise ManifestSchemaError(f"{path}: record {i} gsd must be positive")
        records.append(SceneRecord(**{k: item[k] for k in _RECORD_FIELDS}))
    manifest = DatasetManifest(records, path.parent)
    if check_paths:
        for r in records:
            for p in (r.pre_path, r.post_path, r.mask_path):
                if not manifest.resolve(p).is_file():
                    raise DanglingPathError(f"{path}: referenced file does not exist: {p}")
    return manifest


def write_scene_files(scene: ScenePair, out_dir: str | os.PathLike, stem: str) -> SceneRecord:
    """Write PNGs for a scene and return its manifest record (paths relative to out_dir)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pre_rel, post_rel = f"images/{stem}_pre.png", f"images/{stem}_post.png"
    mask_rel = f"masks/{stem}_mask.png"
    Image.fromarray(scene.pre.to_uint8()).save(out / pre_rel)
    Image.fromarray(scene.post.to_uint8()).save(out / post_rel)
    Image.fromarray(truth_grades(scene).astype(np.uint8)).save(out / mask_rel)
    return SceneRecord(
        scene.event_id, scene.hazard_type.value, scene.split, pre_rel, post_rel, mask_rel, scene.pre.gsd
    )
