import pytest
import torch

from ap_attack.core.encoders import JointSpaceConfig, build_reference_encoders
from ap_attack.core.prompt import Vocabulary, parse_template, tokenize

SMALL_IMAGE_SIZE = (32, 16)


@pytest.fixture
def small_space():
    return JointSpaceConfig(
        feature_dim=16,
        token_embedding_dim=16,
        image_size=SMALL_IMAGE_SIZE,
        patch_size=8,
        hidden_dim=32,
    )


@pytest.fixture
def small_encoders(small_space):
    return build_reference_encoders(0, small_space)


@pytest.fixture
def vocab():
    return Vocabulary.from_file()


@pytest.fixture
def default_tokens(vocab):
    from ap_attack.core.default.constants import DEFAULT_TEMPLATE

    return tokenize(parse_template(DEFAULT_TEMPLATE), vocab)


@pytest.fixture
def random_images():
    generator = torch.Generator().manual_seed(1234)
    return torch.rand(8, 3, *SMALL_IMAGE_SIZE, generator=generator)


@pytest.fixture
def tiny_dataset():
    from ap_attack.data.reid_folder import ReidDataset

    generator = torch.Generator().manual_seed(99)
    pids = [pid for pid in range(8) for _ in range(2)]
    return ReidDataset(
        images=torch.rand(len(pids), 3, *SMALL_IMAGE_SIZE, generator=generator),
        pids=pids,
        camids=[index % 2 for index in range(len(pids))],
    )
