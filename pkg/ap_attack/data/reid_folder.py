"""
Ingestion of re-id image folders.

Files follow the Market-1501 naming convention ``PID_cCAM[sSEQ]_*.ext``, e.g.
``0001_c1_000001.png`` is identity 1 seen by camera 1. Images are resized to
the configured size and stored as float tensors in [0, 1]. Junk images
(pid ``-1``) and distractors (pid ``0000``) are skipped.
"""
from __future__ import annotations

import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import regex
import torch

from PIL import Image

from ap_attack.core.errors import DatasetError

logger = logging.getLogger(__name__)

FILENAME_PATTERN = regex.compile(r"^(\d+)_c(\d+)(?:s\d+)?_.*\.(png|jpg|jpeg)$", regex.IGNORECASE)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
# junk (-1) and distractor (0000) images of Market-style folders
SKIPPED_PATTERN = regex.compile(r"^(?:-1|0+)_")


@dataclass
class ReidDataset:
    """
    Images with identity and camera labels.

    Attributes
    ----------
    images : torch.Tensor
        (N, 3, H, W) float32 in [0, 1].
    pids, camids : list of int
        Identity and camera label of every image.
    names : list of str
        File name of every image (empty for in-memory sets).
    """

    images: torch.Tensor
    pids: List[int]
    camids: List[int]
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.images) == len(self.pids) == len(self.camids)):
            raise DatasetError(
                f"Dataset has {len(self.images)} images but {len(self.pids)} pids "
                f"and {len(self.camids)} camids"
            )

    def __len__(self) -> int:
        return len(self.pids)

    def subset(self, indices: Sequence[int]) -> "ReidDataset":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return ReidDataset(
            images=self.images.index_select(0, index),
            pids=[self.pids[i] for i in indices],
            camids=[self.camids[i] for i in indices],
            names=[self.names[i] for i in indices] if self.names else [],
        )


def parse_filename(name: str) -> Tuple[int, int]:
    """
    Identity and camera label of a re-id file name.

    Raises
    ------
    DatasetError
        If the name does not follow ``PID_cCAM_*.ext``.
    """
    match = FILENAME_PATTERN.match(name)
    if match is None:
        raise DatasetError(f"Cannot parse identity and camera from file name '{name}'")
    return int(match.group(1)), int(match.group(2))


def image_to_tensor(image: Image.Image, image_size: Tuple[int, int]) -> torch.Tensor:
    """(3, H, W) float32 tensor of a PIL image resized to (height, width)."""
    height, width = image_size
    image = image.convert("RGB")
    if image.size != (width, height):
        image = image.resize((width, height), Image.BILINEAR)
    array = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(array.transpose(2, 0, 1).copy())


def tensor_to_image(tensor: torch.Tensor) -> Image.Image:
    """PIL image of a (3, H, W) tensor in [0, 1], rounded to 8 bits."""
    array = tensor.detach().cpu().clamp(0, 1).numpy().transpose(1, 2, 0)
    return Image.fromarray(np.round(array * 255.0).astype(np.uint8), mode="RGB")


def load_reid_folder(
    path: Union[str, Path], image_size: Tuple[int, int] = (128, 64)
) -> ReidDataset:
    """
    Load every image of a folder, in file-name order.

    Raises
    ------
    DatasetError
        If the folder is missing or empty, or on the first unparseable name.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"Dataset folder '{path}' does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    skipped = [f for f in files if SKIPPED_PATTERN.match(f.name)]
    if skipped:
        logger.info(f"Skipping {len(skipped)} junk or distractor images in {path}")
        files = [f for f in files if not SKIPPED_PATTERN.match(f.name)]
    if not files:
        raise DatasetError(f"Dataset folder '{path}' holds no images")

    images, pids, camids = [], [], []
    for file in files:
        pid, camid = parse_filename(file.name)
        with Image.open(file) as image:
            images.append(image_to_tensor(image, image_size))
        pids.append(pid)
        camids.append(camid)
    logger.debug(f"Loaded {len(files)} images from {path}")
    return ReidDataset(
        images=torch.stack(images), pids=pids, camids=camids, names=[f.name for f in files]
    )
