import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ap_attack.core.attack import AttackConfig, train_attack
from ap_attack.core.default.constants import DEFAULT_ATTRIBUTES, DEFAULT_TEMPLATE
from ap_attack.core.encoders import (
    AttributeGrounding,
    JointSpaceConfig,
    build_reference_encoders,
    grounding_blocks,
    slot_masks,
)
from ap_attack.core.errors import ConfigError
from ap_attack.core.generator import GeneratorConfig, PerturbationGenerator
from ap_attack.core.interpret import (
    AttributeVocabulary,
    interpret_pseudo_tokens,
    interpretation_accuracy,
    rank_words,
)
from ap_attack.core.inversion import (
    InversionConfig,
    InversionNetworks,
    encode_images,
    invert,
    train_inversion,
)
from ap_attack.core.prompt import Vocabulary, parse_template, tokenize
from ap_attack.data.handcrafted import HandcraftedExtractor
from ap_attack.data.reid_folder import load_reid_folder
from ap_attack.data.synthdata import (
    ATTRIBUTE_DOMAINS,
    SyntheticManifest,
    SyntheticSpec,
    generate_dataset,
    render_identity,
    synthetic_grounding,
)

IDENTITY = {"top": "green", "underneath": "cyan", "hairstyle": "yellow", "shoes": "purple", "carrying": "nothing"}


@pytest.fixture(scope="module")
def grounded():
    vocab = Vocabulary.from_file()
    encoders = build_reference_encoders(0, JointSpaceConfig(), synthetic_grounding(), vocab)
    return encoders, vocab


@pytest.fixture(scope="module")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_dataset(
        SyntheticSpec(num_ids=16, images_per_id=4, num_cameras=2, num_test_ids=8), root
    )
    return root


def grounded_nets(seed=0):
    space = JointSpaceConfig()
    masks = slot_masks(synthetic_grounding(), space.token_embedding_dim)
    return InversionNetworks(5, space.feature_dim, space.token_embedding_dim, seed=seed, slot_masks=masks)


def hidden_codes(encoders, images):
    visual = encoders.visual
    patches = F.avg_pool2d(images, visual.config.patch_size).flatten(1)
    return torch.tanh(visual.patch_proj(patches))


def test_visual_codes_mark_drawn_colours(grounded):
    encoders, _ = grounded
    image = render_identity(IDENTITY, SyntheticSpec(), 1, np.random.default_rng(0))

    codes = hidden_codes(encoders, torch.from_numpy(image.transpose(2, 0, 1).copy()).float()[None])[0]

    for name, (start, end) in zip(DEFAULT_ATTRIBUTES, grounding_blocks(synthetic_grounding())):
        expected = ATTRIBUTE_DOMAINS[name].index(IDENTITY[name])
        block = codes[start:end]
        assert block[expected] > 0.5
        assert torch.all(torch.cat([block[:expected], block[expected + 1 :]]) < -0.5)
    assert torch.count_nonzero(codes[30:]) == 0


def test_word_rows_share_one_norm(grounded):
    encoders, vocab = grounded
    table = encoders.text.token_embedding_table
    words = {word for domain in ATTRIBUTE_DOMAINS.values() for word in domain}

    norms = [table[vocab.row_index(vocab.word_id(word))].norm().item() for word in words]

    assert norms == pytest.approx([norms[0]] * len(norms))


def test_rank_words_reads_the_slot_block(grounded):
    encoders, vocab = grounded
    table = encoders.text.token_embedding_table
    start, _ = grounding_blocks(synthetic_grounding())[0]
    pseudo = torch.zeros(table.shape[1])
    pseudo[start + ATTRIBUTE_DOMAINS["top"].index("blue")] = 1.0

    ranking = rank_words(pseudo, "top", AttributeVocabulary.from_file(), vocab, table)

    assert ranking[0].word == "blue"
    assert ranking[0].cosine == pytest.approx(0.5)
    cosines = {r.word: r.cosine for r in ranking}
    assert cosines["striped"] == pytest.approx(0.0, abs=1e-7)
    assert 0.0 < cosines["dark blue"] < cosines["blue"]


def test_slot_masks_confine_pseudo_tokens():
    nets = grounded_nets()
    blocks = grounding_blocks(synthetic_grounding())

    pseudo = invert(torch.randn(4, 32), nets)

    for slot, (start, end) in enumerate(blocks):
        outside = torch.cat([pseudo[:, slot, :start], pseudo[:, slot, end:]], dim=1)
        assert torch.count_nonzero(outside) == 0
        assert torch.count_nonzero(pseudo[:, slot, start:end]) > 0


def test_slot_masks_must_match_the_networks():
    with pytest.raises(ConfigError, match="do not match"):
        InversionNetworks(5, 32, 32, slot_masks=torch.ones(4, 32))


def test_grounding_needs_room():
    small = JointSpaceConfig(feature_dim=16, token_embedding_dim=16, image_size=(32, 16), patch_size=8, hidden_dim=32)

    with pytest.raises(ConfigError, match="encoders.grounded"):
        build_reference_encoders(0, small, synthetic_grounding(), Vocabulary.from_file())


def test_grounding_rejects_inseparable_colours():
    muddled = AttributeGrounding(
        name="top",
        box=(0.2, 0.5, 0.2, 0.8),
        words=("black", "white", "red"),
        colors=((0.4, 0.4, 0.4), (0.6, 0.6, 0.6), (0.5, 0.5, 0.5)),
    )

    with pytest.raises(ConfigError, match="top"):
        build_reference_encoders(0, JointSpaceConfig(), [muddled], Vocabulary.from_file())


def test_grounding_rejects_undrawn_attribute():
    with pytest.raises(ConfigError, match="gloves"):
        synthetic_grounding(["top", "gloves"])


def test_grounded_encoders_are_seeded(grounded):
    encoders, vocab = grounded

    again = build_reference_encoders(0, JointSpaceConfig(), synthetic_grounding(), vocab)
    other = build_reference_encoders(1, JointSpaceConfig(), synthetic_grounding(), vocab)

    assert again.checksum() == encoders.checksum()
    assert other.checksum() != encoders.checksum()


def test_handcrafted_retrieves_synthetic_identities(synthetic_root):
    from ap_attack.core.metrics import evaluate

    query = load_reid_folder(synthetic_root / "query")
    gallery = load_reid_folder(synthetic_root / "gallery")

    report = evaluate({"handcrafted:0": HandcraftedExtractor(seed=0)}, query, gallery)

    assert report.victims[0].clean_map >= 0.95


def test_stage_one_loss_goes_down(synthetic_root, grounded):
    encoders, vocab = grounded
    tokens = tokenize(parse_template(DEFAULT_TEMPLATE), vocab)
    train = load_reid_folder(synthetic_root / "train")

    result = train_inversion(
        train, encoders, grounded_nets(), tokens, InversionConfig(epochs=60, lr=2e-3), vocab=vocab
    )

    assert result.log[-1].total < result.log[0].total - 0.5
    assert result.log[-1].loss_i2t < result.log[0].loss_i2t


def test_stage_two_loss_goes_down(synthetic_root):
    train = load_reid_folder(synthetic_root / "train")
    generator = PerturbationGenerator(GeneratorConfig(preset="tiny", base_channels=4, seed=0))
    surrogate = HandcraftedExtractor(seed=0).requires_grad_(False)
    vocab = Vocabulary.from_file()
    encoders = build_reference_encoders(0, JointSpaceConfig(), synthetic_grounding(), vocab)

    result = train_attack(
        train, encoders, grounded_nets().freeze(), surrogate, generator,
        AttackConfig(epochs=15, lr=5e-3, loss_variant="surrogate"),
    )

    assert result.log[-1].total < result.log[0].total


@pytest.mark.slow
def test_held_out_attributes_are_read_back(synthetic_root, grounded):
    encoders, vocab = grounded
    tokens = tokenize(parse_template(DEFAULT_TEMPLATE), vocab)
    manifest = SyntheticManifest.load(synthetic_root)
    train = load_reid_folder(synthetic_root / "train")
    held_out = load_reid_folder(synthetic_root / "gallery")

    nets = train_inversion(train, encoders, grounded_nets(), tokens, InversionConfig(), vocab=vocab).nets
    pseudo = invert(encode_images(encoders.visual, held_out.images), nets)

    attribute_vocab = AttributeVocabulary.from_file()
    table = encoders.text.token_embedding_table
    rows = []
    for name, tokens_of_image in zip(held_out.names, pseudo):
        rows += interpret_pseudo_tokens(
            name, tokens_of_image, DEFAULT_ATTRIBUTES, attribute_vocab, vocab, table, top_k=1
        )
    truth = {name: manifest.attribute_tuple(pid) for name, pid in zip(held_out.names, held_out.pids)}

    assert interpretation_accuracy(rows, truth)["macro"] >= 0.6
