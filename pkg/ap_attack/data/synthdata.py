"""
Procedural attribute-labelled pedestrian dataset.

Every identity is a unique tuple of five colour attributes (top, underneath,
hairstyle, shoes, carried item) drawn as flat body regions over a per-camera
background. Files are written in the Market-1501 layout::

    root/train/0001_c1_000000.png
    root/query/...
    root/gallery/...
    root/attributes.json

Generation is a pure function of the spec: every image draws its noise from
its own seed, derived from (spec seed, pid, image index).
"""
from __future__ import annotations

import json
import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dataclasses_json import dataclass_json
from PIL import Image

from ap_attack.core.default.constants import DEFAULT_ATTRIBUTES
from ap_attack.core.default.paths import ATTRIBUTE_MANIFEST_FILE
from ap_attack.core.encoders import AttributeGrounding
from ap_attack.core.errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

# Every colour is a corner of a small cube around mid gray: each channel is
# PALETTE_CENTRE +/- PALETTE_OFFSET, so two colours differ by about nine 8-bit
# levels in every channel where they differ at all.
PALETTE_CENTRE = 0.5
PALETTE_OFFSET = 0.018


def _corner(signs: str) -> Tuple[float, float, float]:
    return tuple(
        round(PALETTE_CENTRE + (PALETTE_OFFSET if s == "+" else -PALETTE_OFFSET), 6)
        for s in signs
    )


PALETTE: Dict[str, Tuple[float, float, float]] = {
    "white": _corner("+++"),
    "black": _corner("---"),
    "red": _corner("+--"),
    "green": _corner("-+-"),
    "blue": _corner("--+"),
    "yellow": _corner("++-"),
    "purple": _corner("+-+"),
    "cyan": _corner("-++"),
}

ATTRIBUTE_DOMAINS: Dict[str, Tuple[str, ...]] = {
    "top": ("red", "green", "blue", "yellow", "black", "white"),
    "underneath": ("black", "blue", "white", "green", "purple", "cyan"),
    "hairstyle": ("black", "white", "red", "yellow", "purple", "cyan"),
    "shoes": ("black", "white", "red", "blue", "green", "purple"),
    "carrying": ("nothing", "red", "green", "blue", "yellow", "purple"),
}

# (row start, row end, column start, column end) as fractions of the image
REGION_BOXES: Dict[str, Tuple[float, float, float, float]] = {
    "hairstyle": (0.04, 0.20, 0.30, 0.70),
    "top": (0.20, 0.52, 0.20, 0.80),
    "underneath": (0.52, 0.86, 0.28, 0.72),
    "shoes": (0.86, 0.96, 0.25, 0.75),
    "carrying": (0.36, 0.62, 0.80, 0.96),
}

BACKGROUND = PALETTE["black"]
NO_ITEM = "nothing"

# camera regimes: relative brightness swing, background shift and pixel noise
# at jitter 1
BRIGHTNESS_SWING = 0.004
BACKGROUND_SHIFT = 0.002
PIXEL_NOISE = 0.004


@dataclass_json
@dataclass
class SyntheticSpec:
    """
    Attributes
    ----------
    num_ids : int
        Training identities.
    images_per_id : int
        Images rendered for every identity.
    image_size : tuple of int
        (height, width).
    num_cameras : int
        Camera regimes; image k of an identity is seen by camera k mod C.
    num_test_ids : int, optional
        Held-out identities for query/gallery; defaults to num_ids // 2.
    jitter : float
        Scales camera brightness/background shifts and pixel noise; 0 renders
        flat colours.
    """

    num_ids: int = 16
    images_per_id: int = 8
    image_size: Tuple[int, int] = (128, 64)
    num_cameras: int = 4
    seed: int = 0
    num_test_ids: Optional[int] = None
    jitter: float = 1.0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.num_test_ids is None:
            self.num_test_ids = self.num_ids // 2

    def validate(self) -> "SyntheticSpec":
        if self.num_ids < 2:
            raise ConfigError(f"data.synthetic.num_ids must be at least 2, got {self.num_ids}")
        if self.images_per_id < 2:
            raise ConfigError(
                f"data.synthetic.images_per_id must be at least 2, got {self.images_per_id}"
            )
        if self.num_cameras < 1 or self.jitter < 0 or min(self.image_size) < 8:
            raise ConfigError("data.synthetic needs cameras >= 1, jitter >= 0 and images of 8 px or more")
        total = self.num_ids + self.num_test_ids
        capacity = int(np.prod([len(d) for d in ATTRIBUTE_DOMAINS.values()]))
        if total > capacity:
            raise ConfigError(f"Cannot draw {total} distinct identities from {capacity} tuples")
        return self


@dataclass_json
@dataclass
class SyntheticManifest:
    """Contents of ``attributes.json``."""

    attributes: List[str]
    identities: Dict[str, Dict[str, str]]
    splits: Dict[str, List[str]]
    palette: Dict[str, List[float]] = field(default_factory=dict)
    spec: Dict = field(default_factory=dict)

    def attribute_tuple(self, pid: int) -> Dict[str, str]:
        return self.identities[str(pid)]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SyntheticManifest":
        path = Path(path)
        if path.is_dir():
            path = path / ATTRIBUTE_MANIFEST_FILE
        if not path.is_file():
            raise DatasetError(f"Attribute manifest '{path}' does not exist")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


def image_filename(pid: int, camera: int, index: int) -> str:
    return f"{pid:04d}_c{camera + 1}_{index:06d}.png"


def region_pixels(
    box: Tuple[float, float, float, float], image_size: Tuple[int, int], shrink: float = 0.0
) -> Tuple[int, int, int, int]:
    """Pixel bounds of a fractional box, optionally shrunk towards its centre."""
    height, width = image_size
    r0, r1, c0, c1 = box
    dr, dc = (r1 - r0) * shrink / 2, (c1 - c0) * shrink / 2
    rows = int(round((r0 + dr) * height)), int(round((r1 - dr) * height))
    cols = int(round((c0 + dc) * width)), int(round((c1 - dc) * width))
    return rows[0], max(rows[1], rows[0] + 1), cols[0], max(cols[1], cols[0] + 1)


def synthetic_grounding(
    attribute_names: Sequence[str] = DEFAULT_ATTRIBUTES,
) -> List[AttributeGrounding]:
    """
    Region and word colours of the synthetic attributes, in slot order.

    Raises
    ------
    ConfigError
        If an attribute is not drawn by the synthetic renderer.
    """
    grounding = []
    for name in attribute_names:
        if name not in ATTRIBUTE_DOMAINS:
            raise ConfigError(
                f"Attribute '{name}' is not drawn by the synthetic renderer; "
                "set encoders.grounded to false"
            )
        words = ATTRIBUTE_DOMAINS[name]
        grounding.append(
            AttributeGrounding(
                name=name,
                box=REGION_BOXES[name],
                words=words,
                colors=tuple(BACKGROUND if w == NO_ITEM else PALETTE[w] for w in words),
            )
        )
    return grounding


def sample_identities(num: int, seed: int) -> List[Dict[str, str]]:
    """Distinct attribute tuples, sampled without replacement."""
    sizes = [len(ATTRIBUTE_DOMAINS[name]) for name in DEFAULT_ATTRIBUTES]
    rng = np.random.default_rng(seed)
    codes = rng.choice(int(np.prod(sizes)), size=num, replace=False)
    identities = []
    for code in codes:
        values = {}
        for name, size in zip(DEFAULT_ATTRIBUTES, sizes):
            values[name] = ATTRIBUTE_DOMAINS[name][int(code) % size]
            code = int(code) // size
        identities.append(values)
    return identities


def camera_regimes(spec: SyntheticSpec) -> List[Tuple[float, np.ndarray]]:
    """(brightness factor, background colour) of every camera."""
    rng = np.random.default_rng([spec.seed, 7919])
    regimes = []
    for _ in range(spec.num_cameras):
        brightness = 1.0 + BRIGHTNESS_SWING * spec.jitter * rng.uniform(-1.0, 1.0)
        shift = BACKGROUND_SHIFT * spec.jitter * rng.uniform(-1.0, 1.0, size=3)
        regimes.append((brightness, np.clip(np.array(BACKGROUND) + shift, 0.0, 1.0)))
    return regimes


def render_identity(
    attributes: Dict[str, str],
    spec: SyntheticSpec,
    camera: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """(H, W, 3) float image in [0, 1] of one identity seen by one camera."""
    brightness, background = camera_regimes(spec)[camera]
    image = np.empty((*spec.image_size, 3), dtype=np.float64)
    image[:] = background
    for name in DEFAULT_ATTRIBUTES:
        value = attributes[name]
        if value == NO_ITEM:
            continue
        r0, r1, c0, c1 = region_pixels(REGION_BOXES[name], spec.image_size)
        image[r0:r1, c0:c1] = PALETTE[value]
    image = image * brightness
    if spec.jitter > 0:
        image = image + rng.normal(0.0, PIXEL_NOISE * spec.jitter, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def _save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(image * 255.0).astype(np.uint8), mode="RGB").save(path)


def generate_dataset(spec: SyntheticSpec, root: Union[str, Path]) -> SyntheticManifest:
    """
    Render the dataset under `root` and write its attribute manifest.

    Training identities are 1..num_ids; held-out identities follow. For each
    held-out identity the first max(1, images_per_id // 4) images go to the
    query split and the rest to the gallery.
    """
    spec.validate()
    root = Path(root)
    total = spec.num_ids + spec.num_test_ids
    identities = sample_identities(total, spec.seed)
    splits: Dict[str, List[str]] = {"train": [], "query": [], "gallery": []}
    num_query = max(1, spec.images_per_id // 4)

    for folder in splits:
        (root / folder).mkdir(parents=True, exist_ok=True)
    for offset, attributes in enumerate(identities):
        pid = offset + 1
        for index in range(spec.images_per_id):
            camera = index % spec.num_cameras
            rng = np.random.default_rng([spec.seed, pid, index])
            image = render_identity(attributes, spec, camera, rng)
            if pid <= spec.num_ids:
                folder = "train"
            else:
                folder = "query" if index < num_query else "gallery"
            name = image_filename(pid, camera, index)
            _save_png(image, root / folder / name)
            splits[folder].append(name)

    manifest = SyntheticManifest(
        attributes=list(DEFAULT_ATTRIBUTES),
        identities={str(i + 1): attributes for i, attributes in enumerate(identities)},
        splits=splits,
        palette={name: list(rgb) for name, rgb in PALETTE.items()},
        spec=spec.to_dict(),
    )
    manifest.save(root / ATTRIBUTE_MANIFEST_FILE)
    logger.info(
        f"Generated {sum(len(v) for v in splits.values())} images of {total} identities in {root}"
    )
    return manifest
