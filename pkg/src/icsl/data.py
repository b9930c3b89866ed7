"""Multi-domain corpora: loading, leave-one-domain-out splits, augmentation,
batching and a synthetic optic-disc/cup style generator.

On-disk layout::

    root/<domain>/images/<stem>.png
    root/<domain>/masks/<stem>.png      # 8-bit grayscale or paletted label image
    root/corpus.cfg                     # optional flat key = value manifest
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

CORPUS_MANIFEST = "corpus.cfg"
FUNDUS_CLASSES = ("background", "disc", "cup")
# cup pixels carry label 2 and disc-not-cup label 1, so the disc is {1, 2}
FUNDUS_DECOMPOSITION = {"cup": (2,), "disc": (1, 2)}


@dataclass
class Sample:
    image: np.ndarray  # float32 [C, H, W] in [0, 1]
    mask: np.ndarray  # int64 [H, W]
    domain_id: int
    sample_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[1:] != self.mask.shape:
            raise DataError(
                f"{self.sample_id}: image {self.image.shape} and mask {self.mask.shape} do not align"
            )


@dataclass
class Domain:
    domain_id: int
    name: str
    train: List[Sample]
    test: List[Sample]


@dataclass
class DomainCorpus:
    domains: List[Domain]
    num_classes: int
    class_names: Sequence[str]
    decomposition: Dict[str, tuple] = field(default_factory=dict)
    split_seed: int = 0

    def __post_init__(self):
        if not self.decomposition:
            self.decomposition = default_decomposition(self.class_names)

    @property
    def domain_ids(self):
        return [d.domain_id for d in self.domains]

    def domain(self, domain_id: int) -> Domain:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)


def default_decomposition(class_names: Sequence[str]) -> Dict[str, tuple]:
    if tuple(class_names) == FUNDUS_CLASSES:
        return dict(FUNDUS_DECOMPOSITION)
    return {name: (i,) for i, name in enumerate(class_names) if i > 0}


def split_indices(n: int, seed: int, domain_index: int, test_fraction: float = 0.2):
    """Seeded 4:1 train/test partition of ``range(n)``."""
    rng = np.random.default_rng([seed, domain_index])
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def partition(domain_samples: Dict[str, List[Sample]], seed: int) -> List[Domain]:
    """Split each named domain's samples (already in a stable order) into train/test."""
    domains = []
    for idx, name in enumerate(domain_samples):
        samples = domain_samples[name]
        tr, te = split_indices(len(samples), seed, idx)
        domains.append(Domain(idx, name, [samples[i] for i in tr], [samples[i] for i in te]))
    return domains


# --------------------------------------------------------------------------- #
# loading

def read_kv_file(path) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_decomposition(text: str) -> Dict[str, tuple]:
    """``"cup:2;disc:1+2"`` -> ``{"cup": (2,), "disc": (1, 2)}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        name, labels = part.split(":")
        out[name.strip()] = tuple(int(v) for v in labels.split("+"))
    return out


def format_decomposition(decomposition: Dict[str, tuple]) -> str:
    return ";".join(f"{k}:{'+'.join(str(v) for v in vals)}" for k, vals in decomposition.items())


def _load_image(path: Path, size: Optional[int], channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if size and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def _load_mask(path: Path, size: Optional[int]) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "1"):
            raise DataError(f"{path}: mask must be a grayscale or paletted label image, got mode {im.mode}")
        if size and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return np.asarray(im).astype(np.int64)


def load_corpus(root, manifest: Optional[dict] = None) -> DomainCorpus:
    """Read a corpus from disk, resize it and split every domain 4:1.

    ``manifest`` entries override ``root/corpus.cfg``.  Recognized keys:
    ``num_classes``, ``class_names`` (comma separated), ``decomposition``,
    ``image_size`` (0 keeps native size), ``split_seed``, ``channels``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    settings = {}
    if (root / CORPUS_MANIFEST).exists():
        settings.update(read_kv_file(root / CORPUS_MANIFEST))
    settings.update({k: str(v) for k, v in (manifest or {}).items()})

    class_names = tuple(
        s.strip() for s in settings.get("class_names", ",".join(FUNDUS_CLASSES)).split(",")
    )
    num_classes = int(settings.get("num_classes", len(class_names)))
    if len(class_names) != num_classes:
        class_names = tuple(f"class{i}" for i in range(num_classes))
    size = int(settings.get("image_size", 0)) or None
    seed = int(settings.get("split_seed", 0))
    channels = int(settings.get("channels", 3))
    decomposition = (
        parse_decomposition(settings["decomposition"]) if "decomposition" in settings
        else default_decomposition(class_names)
    )

    domain_dirs = sorted(p for p in root.iterdir() if (p / "images").is_dir())
    if not domain_dirs:
        raise DataError(f"no <domain>/images directories under {root}")

    per_domain = {}
    for idx, ddir in enumerate(domain_dirs):
        images = {p.stem: p for p in sorted((ddir / "images").glob("*.png"))}
        masks = {p.stem: p for p in sorted((ddir / "masks").glob("*.png"))}
        missing = sorted(set(images) - set(masks))
        if missing:
            raise DataError(f"domain {ddir.name}: no mask for image stems {missing}")
        samples = []
        for stem in sorted(images):
            mask = _load_mask(masks[stem], size)
            if mask.min() < 0 or mask.max() >= num_classes:
                raise DataError(
                    f"{masks[stem]}: label value {int(mask.max())} outside [0, {num_classes})"
                )
            image = _load_image(images[stem], size, channels)
            samples.append(Sample(image, mask, idx, f"{ddir.name}/{stem}"))
        per_domain[ddir.name] = samples

    return DomainCorpus(partition(per_domain, seed), num_classes, class_names, decomposition, seed)


def save_corpus(corpus: DomainCorpus, root, extra: Optional[dict] = None) -> None:
    """Write a corpus in the on-disk layout (8-bit PNGs plus ``corpus.cfg``)."""
    root = Path(root)
    for d in corpus.domains:
        for sub in ("images", "masks"):
            (root / d.name / sub).mkdir(parents=True, exist_ok=True)
        for s in sorted(d.train + d.test, key=lambda s: s.sample_id):
            stem = s.sample_id.split("/")[-1]
            img = np.clip(np.round(s.image * 255), 0, 255).astype(np.uint8)
            img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
            Image.fromarray(img).save(root / d.name / "images" / f"{stem}.png")
            Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / d.name / "masks" / f"{stem}.png")
    first = corpus.domains[0].train[0] if corpus.domains[0].train else corpus.domains[0].test[0]
    lines = {
        "num_classes": corpus.num_classes,
        "class_names": ",".join(corpus.class_names),
        "decomposition": format_decomposition(corpus.decomposition),
        "split_seed": corpus.split_seed,
        "channels": first.image.shape[0],
        "image_size": first.image.shape[-1],
    }
    lines.update(extra or {})
    (root / CORPUS_MANIFEST).write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))


# --------------------------------------------------------------------------- #
# splits and batching

@dataclass
class LodoSplit:
    held_out: int
    train_domains: List[Domain]
    test_domain: Domain

    def train_samples(self) -> List[Sample]:
        return [s for d in self.train_domains for s in d.train]

    def held_in_test(self) -> List[Sample]:
        return [s for d in self.train_domains for s in d.test]


def lodo_splits(corpus: DomainCorpus) -> List[LodoSplit]:
    """One split per domain: train on the other K-1, test on its test partition."""
    if len(corpus.domains) < 2:
        raise DataError(f"leave-one-domain-out needs at least 2 domains, got {len(corpus.domains)}")
    return [
        LodoSplit(d.domain_id, [o for o in corpus.domains if o.domain_id != d.domain_id], d)
        for d in corpus.domains
    ]


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into batches, dropping a final batch smaller than 2."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def batch_iterator(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator) -> Iterator[List[Sample]]:
    """Endless stream of batches from the pooled training set, reshuffled every epoch."""
    if batch_size < 2:
        raise DataError(f"batch_size must be >= 2, got {batch_size}")
    if not samples:
        raise DataError("empty training set")
    while True:
        for idx in epoch_batches(len(samples), batch_size, rng):
            yield [samples[i] for i in idx]


# --------------------------------------------------------------------------- #
# augmentation

@dataclass
class AugmentConfig:
    p_rotate: float = 0.5
    max_rotation: float = 15.0
    p_scale: float = 0.5
    scale_range: tuple = (0.9, 1.1)
    p_hflip: float = 0.5
    p_vflip: float = 0.5


def warp(image: np.ndarray, mask: np.ndarray, angle: float = 0.0, scale: float = 1.0):
    """Rotate by ``angle`` degrees and zoom by ``scale`` about the image centre.

    The same inverse map samples the image bilinearly and the mask by nearest
    neighbour; output keeps the input size.
    """
    h, w = mask.shape
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    # output (r, q) samples input at centre + R(-theta) (o - centre) / scale
    matrix = np.array([[c, s], [-s, c]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    img = np.stack([
        ndimage.affine_transform(ch, matrix, offset, order=1, mode="nearest") for ch in image
    ]).astype(image.dtype)
    # rounding before nearest-neighbour lookup keeps exact grid maps (e.g. 90 degrees) exact
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src = np.tensordot(matrix, np.stack([rows, cols]), axes=1) + offset[:, None, None]
    src = np.round(src, 6)
    msk = ndimage.map_coordinates(mask, src, order=0, mode="constant", cval=0)
    return img, msk.astype(mask.dtype)


def augment(sample: Sample, rng: np.random.Generator, config: AugmentConfig) -> Sample:
    """Random rotation, isotropic scaling and flips, applied jointly to image and mask."""
    image, mask = sample.image, sample.mask
    angle, scale = 0.0, 1.0
    if rng.random() < config.p_rotate:
        angle = rng.uniform(-config.max_rotation, config.max_rotation)
    if rng.random() < config.p_scale:
        scale = rng.uniform(*config.scale_range)
    if angle != 0.0 or scale != 1.0:
        image, mask = warp(image, mask, angle, scale)
    if rng.random() < config.p_hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if rng.random() < config.p_vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.domain_id, sample.sample_id)


# --------------------------------------------------------------------------- #
# synthetic corpus

@dataclass
class DomainStyle:
    hue_shift: float = 0.0  # fraction of a full hue turn
    gamma: float = 1.0
    brightness: float = 0.0  # shift of the mean intensity
    texture: float = 0.05  # amplitude of additive smooth noise


DEFAULT_STYLES = (
    DomainStyle(hue_shift=0.00, gamma=1.00, brightness=0.00, texture=0.04),
    DomainStyle(hue_shift=0.10, gamma=0.60, brightness=0.12, texture=0.10),
    DomainStyle(hue_shift=-0.08, gamma=1.70, brightness=-0.12, texture=0.03),
    DomainStyle(hue_shift=0.18, gamma=0.80, brightness=0.06, texture=0.14),
)


def default_styles(n_domains: int, seed: int = 0) -> List[DomainStyle]:
    styles = list(DEFAULT_STYLES[:n_domains])
    rng = np.random.default_rng([seed, 7919])
    while len(styles) < n_domains:
        styles.append(DomainStyle(
            hue_shift=float(rng.uniform(-0.2, 0.2)),
            gamma=float(np.exp(rng.uniform(-0.5, 0.5))),
            brightness=float(rng.uniform(-0.15, 0.15)),
            texture=float(rng.uniform(0.02, 0.15)),
        ))
    return styles


@dataclass
class SynthSpec:
    n_domains: int = 4
    samples_per_domain: int = 60
    image_size: int = 96
    seed: int = 0
    styles: Optional[List[DomainStyle]] = None
    disc_radius: tuple = (0.14, 0.24)  # fraction of image size
    cup_ratio: tuple = (0.35, 0.7)  # cup axis / disc axis
    max_retries: int = 100

    def resolved_styles(self) -> List[DomainStyle]:
        styles = self.styles if self.styles is not None else default_styles(self.n_domains, self.seed)
        if len(styles) != self.n_domains:
            raise DataError(f"{len(styles)} styles given for {self.n_domains} domains")
        return list(styles)


def _ellipse(rr, cc, cy, cx, ay, ax, angle):
    c, s = math.cos(angle), math.sin(angle)
    y, x = rr - cy, cc - cx
    u = (c * x + s * y) / ax
    v = (-s * x + c * y) / ay
    return u * u + v * v


def _smooth_noise(rng, size, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return field_ / (field_.std() + 1e-8)


def _hue_matrix(turns: float) -> np.ndarray:
    # rotation about the grey axis in RGB space
    a = 2 * math.pi * turns
    c, s = math.cos(a), math.sin(a)
    k = 1 / 3
    sq = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def _content(rng, spec: SynthSpec, u_size: float, u_cup: float):
    """Style-free rendering: RGB content image and label mask."""
    n = spec.image_size
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    lo, hi = spec.disc_radius
    for _ in range(spec.max_retries):
        r = (lo + (hi - lo) * u_size) * n
        ecc = rng.uniform(0.85, 1.15)
        ay, ax = r * ecc, r / ecc
        angle = rng.uniform(0, math.pi)
        margin = max(ay, ax) + 2
        cy, cx = rng.uniform(margin, n - 1 - margin, size=2)
        ratio = spec.cup_ratio[0] + (spec.cup_ratio[1] - spec.cup_ratio[0]) * u_cup
        cay, cax = ay * ratio * rng.uniform(0.9, 1.1), ax * ratio * rng.uniform(0.9, 1.1)
        disc = _ellipse(rr, cc, cy, cx, ay, ax, angle) <= 1
        cup = _ellipse(rr, cc, cy, cx, cay, cax, angle) <= 1
        if cup.any() and cay < ay and cax < ax and not (cup & ~disc).any():
            break
    else:
        raise DataError("could not place a cup strictly inside the disc")
    mask = np.zeros((n, n), np.int64)
    mask[disc] = 1
    mask[cup] = 2

    soft_disc = 1 / (1 + np.exp(4 * (np.sqrt(_ellipse(rr, cc, cy, cx, ay, ax, angle)) - 1) * r / 3))
    soft_cup = 1 / (1 + np.exp(4 * (np.sqrt(_ellipse(rr, cc, cy, cx, cay, cax, angle)) - 1) * r * ratio / 3))
    illum = 0.08 * _smooth_noise(rng, n, n / 6)
    base = np.array([0.55, 0.25, 0.12])[:, None, None]
    disc_col = np.array([0.30, 0.30, 0.25])[:, None, None]
    cup_col = np.array([0.12, 0.22, 0.28])[:, None, None]
    img = base + disc_col * soft_disc + cup_col * soft_cup + illum
    # vessel-like dark streaks are content, not style
    for _ in range(rng.integers(2, 5)):
        a = rng.uniform(0, math.pi)
        d = (rr - cy) * math.cos(a) - (cc - cx) * math.sin(a)
        img -= 0.12 * np.exp(-(d / rng.uniform(0.8, 1.6)) ** 2)
    return np.clip(img, 0, 1), mask


def _stylize(rng, img: np.ndarray, style: DomainStyle) -> np.ndarray:
    n = img.shape[-1]
    out = np.clip(img, 1e-6, 1) ** style.gamma
    out = np.tensordot(_hue_matrix(style.hue_shift), out, axes=1)
    noise = rng.standard_normal((3, n, n))
    out = out + style.texture * np.stack([ndimage.gaussian_filter(ch, 1.0) for ch in noise]) * 2
    out = out - out.mean() + 0.45 + style.brightness
    return np.clip(out, 0, 1)


def generate_synthetic(spec: SynthSpec) -> DomainCorpus:
    """Build a seeded multi-domain corpus: shared content law, per-domain style."""
    styles = spec.resolved_styles()
    per_domain = {}
    for k, style in enumerate(styles):
        rng = np.random.default_rng([spec.seed, k])
        m = spec.samples_per_domain
        # stratified size draws keep the per-domain class frequencies nearly equal
        u_size = (rng.permutation(m) + rng.uniform(size=m)) / m
        u_cup = (rng.permutation(m) + rng.uniform(size=m)) / m
        samples = []
        for i in range(m):
            content, mask = _content(rng, spec, u_size[i], u_cup[i])
            image = _stylize(rng, content, style).astype(np.float32)
            samples.append(Sample(image, mask, k, f"domain{k}/{i:04d}"))
        per_domain[f"domain{k}"] = samples
    return DomainCorpus(partition(per_domain, spec.seed), 3, FUNDUS_CLASSES, dict(FUNDUS_DECOMPOSITION), spec.seed)
