"""Synthetic multi-site segmentation federation.

Each site draws single-object images from its own appearance model (intensity
levels, texture, noise, shape family) while the task, separating the object
from the background, is shared. Weak labels come from ``weak_labels``.

On-disk layout::

    <root>/site_<k>/{train,test}/img_%04d.pgm     16-bit, intensities in [0, 1]
                                 mask_%04d.pgm    8-bit class map
                                 weak_%04d.pgm    8-bit, 255 = unlabeled
                                 meta.json
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .pgm import load_image, read_pgm, save_image, write_pgm
from .weak_labels import SPARSITY_OF, RULE_SPARSITY, AnnotationType, BoxRule, Sparsity, synthesize_weak_label

SHAPE_FAMILIES = ("ellipse", "blob")
SPLITS = ("train", "test")
TEXTURE_AMPLITUDE = 0.12
MAX_OVERLAP = 0.5


@dataclass(frozen=True)
class SiteSpec:
    site_id: int
    annotation_type: str
    n_train: int = 200
    n_test: int = 50
    fg_mean: float = 0.7
    fg_std: float = 0.05
    bg_mean: float = 0.3
    bg_std: float = 0.05
    texture_freq: float = 0.0  # cycles per pixel inside the object; 0 disables texture
    noise: float = 0.02
    shape: str = "ellipse"
    scale: tuple[float, float] = (0.15, 0.3)  # object radius as a fraction of image size
    box_rule: str = "to_block"
    image_size: int = 64

    @property
    def sparsity(self) -> Sparsity:
        kind = AnnotationType(self.annotation_type)
        if kind in SPARSITY_OF:
            return SPARSITY_OF[kind]
        return RULE_SPARSITY[BoxRule(self.box_rule)]

    def intensity_overlap(self) -> float:
        """Overlap coefficient of the fg and bg intensity distributions (Gaussian model)."""
        tex = TEXTURE_AMPLITUDE / math.sqrt(2) if self.texture_freq > 0 else 0.0
        s_fg = math.sqrt(self.fg_std ** 2 + self.noise ** 2 + tex ** 2)
        s_bg = math.sqrt(self.bg_std ** 2 + self.noise ** 2)
        grid = np.linspace(-1.0, 2.0, 6001)
        lo = np.minimum(norm.pdf(grid, self.fg_mean, s_fg), norm.pdf(grid, self.bg_mean, s_bg))
        return float(np.trapezoid(lo, grid))

    def validate(self) -> None:
        AnnotationType(self.annotation_type)
        BoxRule(self.box_rule)
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError(f"site {self.site_id}: need n_train >= 1 and n_test >= 0")
        for name in ("fg_mean", "bg_mean"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"site {self.site_id}: {name} outside [0, 1]")
        if min(self.fg_std, self.bg_std, self.noise, self.texture_freq) < 0:
            raise ValueError(f"site {self.site_id}: negative spread parameter")
        if self.shape not in SHAPE_FAMILIES:
            raise ValueError(f"site {self.site_id}: unknown shape family {self.shape!r}")
        lo, hi = self.scale
        if not 0 < lo <= hi < 0.5:
            raise ValueError(f"site {self.site_id}: bad scale range {self.scale}")
        if self.image_size < 8:
            raise ValueError(f"site {self.site_id}: image too small")
        if self.intensity_overlap() >= MAX_OVERLAP:
            raise ValueError(f"site {self.site_id}: fg/bg intensities overlap too much")

    @classmethod
    def from_dict(cls, d: dict) -> SiteSpec:
        d = dict(d)
        if "scale" in d:
            d["scale"] = tuple(d["scale"])
        return cls(**d)


def default_4site_config() -> list[SiteSpec]:
    """Four heterogeneous sites sharing one task, one annotation type each."""
    return [
        SiteSpec(0, "point", fg_mean=0.8, bg_mean=0.3, shape="ellipse"),
        SiteSpec(1, "scribble", fg_mean=0.25, bg_mean=0.65, shape="blob"),
        SiteSpec(2, "block", fg_mean=0.6, bg_mean=0.3, texture_freq=0.15, shape="ellipse"),
        SiteSpec(3, "bbox", fg_mean=0.7, bg_mean=0.4, noise=0.1, shape="blob", box_rule="to_block"),
    ]


# -- image synthesis ------------------------------------------------------

def _object_mask(spec: SiteSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    radius = rng.uniform(*spec.scale) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if spec.shape == "ellipse":
        aspect = rng.uniform(0.6, 1.0)
        a, b = radius, radius * aspect
        margin = a + 1
        cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:
        # star-shaped blob with a random low-order Fourier boundary
        amps = rng.uniform(-0.15, 0.15, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        margin = radius * 1.45 + 1
        cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
        dy, dx = yy - cy, xx - cx
        theta = np.arctan2(dy, dx)
        r = radius * (1 + sum(a * np.cos((k + 2) * theta + p) for k, (a, p) in enumerate(zip(amps, phases))))
        mask = np.hypot(dy, dx) <= r
    if mask.sum() < 4:
        mask[int(size // 2) - 1:int(size // 2) + 1, int(size // 2) - 1:int(size // 2) + 1] = True
    return mask


def _smooth_field(rng: np.random.Generator, size: int, sigma: float = 2.0) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return f / (f.std() + 1e-12)


def synthesize_sample(spec: SiteSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image in [0,1], binary class mask) pair for the site."""
    mask = _object_mask(spec, rng)
    size = spec.image_size
    fg = spec.fg_mean + spec.fg_std * _smooth_field(rng, size)
    bg = spec.bg_mean + spec.bg_std * _smooth_field(rng, size)
    if spec.texture_freq > 0:
        yy, xx = np.mgrid[0:size, 0:size]
        t = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        fg = fg + TEXTURE_AMPLITUDE * np.sin(
            2 * np.pi * spec.texture_freq * (xx * np.cos(t) + yy * np.sin(t)) + phase)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.7)
    image = soft * fg + (1 - soft) * bg + spec.noise * rng.standard_normal((size, size))
    return np.clip(image, 0.0, 1.0), mask.astype(np.uint8)


def sample_rng(seed: int, site_id: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, site_id, SPLITS.index(split), index])


def generate_federation(specs: list[SiteSpec], seed: int, root) -> Path:
    """Write every site's train/test split under ``root``; returns the root path."""
    if not specs:
        raise ValueError("at least one site spec is required")
    ids = [s.site_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate site ids")
    for spec in specs:
        spec.validate()
    root = Path(root)
    for spec in specs:
        for split, count in (("train", spec.n_train), ("test", spec.n_test)):
            out = root / f"site_{spec.site_id}" / split
            out.mkdir(parents=True, exist_ok=True)
            labeled = []
            for i in range(count):
                rng = sample_rng(seed, spec.site_id, split, i)
                image, mask = synthesize_sample(spec, rng)
                weak = synthesize_weak_label(mask, AnnotationType(spec.annotation_type), rng,
                                             box_rule=BoxRule(spec.box_rule))
                save_image(out / f"img_{i:04d}.pgm", image)
                write_pgm(out / f"mask_{i:04d}.pgm", mask, maxval=255)
                write_pgm(out / f"weak_{i:04d}.pgm", weak.label_map, maxval=255)
                labeled.append(int(weak.labeled().sum()))
            meta = {
                "site_id": spec.site_id,
                "split": split,
                "count": count,
                "seed": seed,
                "annotation_type": spec.annotation_type,
                "sparsity": spec.sparsity.name.lower(),
                "num_classes": 2,
                "labeled_pixels": labeled,
                "spec": asdict(spec),
            }
            (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


# -- loading ----------------------------------------------------------------

@dataclass
class SiteData:
    site_id: int
    split: str
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    masks: np.ndarray  # (N, H, W) uint8
    weak: np.ndarray  # (N, H, W) uint8, 255 = unlabeled
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sparsity(self) -> Sparsity:
        return Sparsity[self.meta["sparsity"].upper()]

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", 2))


def load_split(root, site_id: int, split: str) -> SiteData:
    folder = Path(root) / f"site_{site_id}" / split
    meta_path = folder / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset split at {folder}")
    meta = json.loads(meta_path.read_text())
    n = meta["count"]
    images = np.stack([load_image(folder / f"img_{i:04d}.pgm") for i in range(n)]) if n else None
    masks = np.stack([read_pgm(folder / f"mask_{i:04d}.pgm") for i in range(n)]) if n else None
    weak = np.stack([read_pgm(folder / f"weak_{i:04d}.pgm") for i in range(n)]) if n else None
    if n == 0:
        size = meta["spec"]["image_size"]
        images = np.zeros((0, size, size), np.float32)
        masks = weak = np.zeros((0, size, size), np.uint8)
    return SiteData(site_id, split, images, masks, weak, meta)


def site_ids(root) -> list[int]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    ids = sorted(int(p.name.split("_", 1)[1]) for p in root.glob("site_*") if p.is_dir())
    if not ids:
        raise FileNotFoundError(f"no site_<k> directories under {root}")
    return ids


def load_federation(root) -> list[tuple[SiteData, SiteData]]:
    """(train, test) per site, ordered by site id."""
    return [(load_split(root, k, "train"), load_split(root, k, "test")) for k in site_ids(root)]
