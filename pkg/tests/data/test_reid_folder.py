import numpy as np
import pytest
import torch

from PIL import Image

from ap_attack.core.errors import DatasetError
from ap_attack.data.reid_folder import (
    ReidDataset,
    image_to_tensor,
    load_reid_folder,
    parse_filename,
    tensor_to_image,
)


def write_image(path, color, size=(16, 32)):
    Image.new("RGB", size, color).save(path)


@pytest.mark.parametrize(
    "name, expected",
    [("0001_c1_000001.png", (1, 1)), ("0815_c6s2_093.jpg", (815, 6)), ("12_c3_x.JPEG", (12, 3))],
)
def test_parse_filename(name, expected):
    assert parse_filename(name) == expected


@pytest.mark.parametrize("name", ["person.png", "0001_1_2.png", "0001_c1_2.gif"])
def test_parse_filename_rejects(name):
    with pytest.raises(DatasetError):
        parse_filename(name)


def test_load_folder_sorted_and_resized(tmp_path):
    write_image(tmp_path / "0002_c1_0.png", (255, 0, 0))
    write_image(tmp_path / "0001_c2_0.png", (0, 0, 255), size=(8, 8))
    (tmp_path / "notes.txt").write_text("ignored")

    dataset = load_reid_folder(tmp_path, (32, 16))

    assert dataset.names == ["0001_c2_0.png", "0002_c1_0.png"]
    assert dataset.pids == [1, 2]
    assert dataset.camids == [2, 1]
    assert dataset.images.shape == (2, 3, 32, 16)
    torch.testing.assert_close(dataset.images[1, :, 0, 0], torch.tensor([1.0, 0.0, 0.0]))


def test_load_folder_skips_junk_and_distractors(tmp_path):
    write_image(tmp_path / "-1_c1s1_000401_03.jpg", (0, 0, 0))
    write_image(tmp_path / "0000_c2s1_000151_01.jpg", (0, 0, 0))
    write_image(tmp_path / "0002_c1s1_000451_03.jpg", (0, 255, 0))

    dataset = load_reid_folder(tmp_path, (32, 16))

    assert dataset.names == ["0002_c1s1_000451_03.jpg"]
    assert dataset.pids == [2]


def test_load_folder_errors(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_reid_folder(tmp_path / "missing")
    with pytest.raises(DatasetError, match="no images"):
        load_reid_folder(tmp_path)
    write_image(tmp_path / "bad.png", (0, 0, 0))
    with pytest.raises(DatasetError, match="bad.png"):
        load_reid_folder(tmp_path)


def test_tensor_image_conversion():
    tensor = torch.tensor(np.linspace(0, 1, 3 * 4 * 2, dtype=np.float32).reshape(3, 4, 2))

    image = tensor_to_image(tensor)
    back = image_to_tensor(image, (4, 2))

    assert image.size == (2, 4)
    assert (back - tensor).abs().max() <= 0.5 / 255 + 1e-6


def test_dataset_checks_lengths():
    with pytest.raises(DatasetError):
        ReidDataset(torch.zeros(2, 3, 4, 4), [1], [1, 1])


def test_subset(tiny_dataset):
    subset = tiny_dataset.subset([0, 3])

    assert subset.pids == [0, 1]
    assert torch.equal(subset.images[1], tiny_dataset.images[3])
