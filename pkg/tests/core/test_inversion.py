import math

import pytest
import torch

import ap_attack.core.inversion as inversion

from ap_attack.core.encoders import build_reference_encoders, is_frozen
from ap_attack.core.errors import (
    BatchCompositionError,
    ConfigError,
    FreezeViolationError,
    InputError,
    TrainingDivergedError,
)
from ap_attack.core.inversion import (
    InversionConfig,
    InversionNetworks,
    compose_prompt_batch,
    inversion_checksum,
    inversion_contrastive_loss,
    inversion_contrastive_terms,
    invert,
    load_inversion,
    train_inversion,
)
from ap_attack.core.prompt import clip_contrastive_loss


def make_nets(seed=0):
    return InversionNetworks(5, 16, 16, seed=seed)


def test_invert_shapes():
    nets = make_nets()

    assert invert(torch.randn(16), nets).shape == (5, 16)
    assert invert(torch.randn(4, 16), nets).shape == (4, 5, 16)


def test_invert_rejects_wrong_dimension():
    with pytest.raises(InputError):
        invert(torch.randn(4, 12), make_nets())


def test_network_layout():
    net = make_nets().nets[0]

    assert [layer.out_features for layer in net.linear_layers()] == [32, 32, 16]


def test_same_seed_same_networks():
    assert inversion_checksum(make_nets(1)) == inversion_checksum(make_nets(1))
    assert inversion_checksum(make_nets(1)) != inversion_checksum(make_nets(2))


def test_compose_prompt_batch(small_encoders, default_tokens):
    pseudo = torch.randn(3, 5, 16)

    features = compose_prompt_batch(pseudo, default_tokens, small_encoders.text)

    assert features.shape == (3, 16)


def test_contrastive_terms_on_orthogonal_pairs():
    features = torch.eye(2, dtype=torch.float64)

    loss_i2t, loss_t2i = inversion_contrastive_terms(features, features, [0, 1], tau=1.0)

    expected = math.log1p(math.exp(-1.0))
    assert loss_i2t.item() == pytest.approx(expected)
    assert loss_t2i.item() == pytest.approx(expected)


def test_contrastive_terms_average_over_positives():
    features = torch.eye(2, dtype=torch.float64)

    loss_i2t, _ = inversion_contrastive_terms(features, features, [7, 7], tau=1.0)

    # both entries of each row are positives: mean of -log(e/(e+1)) and -log(1/(e+1))
    expected = (2 * math.log(math.e + 1) - 1) / 2
    assert loss_i2t.item() == pytest.approx(expected)


def test_contrastive_loss_needs_positives():
    features = torch.randn(3, 4)

    with pytest.raises(BatchCompositionError):
        inversion_contrastive_loss(features, features, [0, 1, 2], include_self=False)
    with pytest.raises(BatchCompositionError):
        inversion_contrastive_loss(features[:1], features[:1], [0])


def test_contrastive_loss_gradient():
    generator = torch.Generator().manual_seed(0)
    images = torch.randn(4, 6, dtype=torch.float64, generator=generator, requires_grad=True)
    texts = torch.randn(4, 6, dtype=torch.float64, generator=generator, requires_grad=True)

    assert torch.autograd.gradcheck(
        lambda a, b: inversion_contrastive_loss(a, b, [0, 0, 1, 1], tau=0.5), (images, texts)
    )


def test_config_validation():
    with pytest.raises(ConfigError):
        InversionConfig(p=1).validate()
    with pytest.raises(ConfigError):
        InversionConfig(tau=0.0).validate()


def test_training_is_deterministic(tmp_path, tiny_dataset, small_encoders, default_tokens):
    config = InversionConfig(epochs=2, p=4, k=2, lr=1e-3)
    encoder_checksum = small_encoders.checksum()

    first = train_inversion(
        tiny_dataset, small_encoders, make_nets(), default_tokens, config,
        checkpoint_path=tmp_path / "a.ckpt",
    )
    second = train_inversion(
        tiny_dataset, small_encoders, make_nets(), default_tokens, config,
        checkpoint_path=tmp_path / "b.ckpt",
    )

    assert len(first.log) == 2
    assert [r.to_dict() for r in first.log] == [r.to_dict() for r in second.log]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert small_encoders.checksum() == encoder_checksum
    assert is_frozen(first.nets)


def test_training_changes_weights_and_round_trips(tmp_path, tiny_dataset, small_encoders, default_tokens):
    nets = make_nets()
    before = inversion_checksum(nets)

    result = train_inversion(
        tiny_dataset, small_encoders, nets, default_tokens,
        InversionConfig(epochs=1, lr=1e-2), checkpoint_path=tmp_path / "inv.ckpt",
    )
    restored = load_inversion(tmp_path / "inv.ckpt")

    assert inversion_checksum(result.nets) != before
    assert inversion_checksum(restored) == inversion_checksum(result.nets)
    assert is_frozen(restored)


def test_training_rejects_slot_mismatch(tiny_dataset, small_encoders, default_tokens):
    with pytest.raises(ConfigError, match="5 slots"):
        train_inversion(
            tiny_dataset, small_encoders, InversionNetworks(3, 16, 16), default_tokens,
            InversionConfig(epochs=1),
        )


def test_training_reports_divergence(monkeypatch, tiny_dataset, small_encoders, default_tokens):
    def diverging_terms(image_feats, text_feats, *args, **kwargs):
        nan = text_feats.sum() * float("nan")
        return nan, nan

    monkeypatch.setattr(inversion, "inversion_contrastive_terms", diverging_terms)

    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        train_inversion(
            tiny_dataset, small_encoders, make_nets(), default_tokens, InversionConfig(epochs=1)
        )


def test_contrastive_loss_ignores_scale_and_batch_order():
    generator = torch.Generator().manual_seed(3)
    images = torch.randn(6, 5, dtype=torch.float64, generator=generator)
    texts = torch.randn(6, 5, dtype=torch.float64, generator=generator)
    pids = [0, 0, 1, 1, 2, 2]
    order = [4, 1, 5, 0, 3, 2]

    loss = inversion_contrastive_loss(images, texts, pids, tau=0.2)
    scaled = inversion_contrastive_loss(3.5 * images, 0.25 * texts, pids, tau=0.2)
    permuted = inversion_contrastive_loss(
        images[order], texts[order], [pids[i] for i in order], tau=0.2
    )

    assert scaled.item() == pytest.approx(loss.item(), rel=1e-12)
    assert permuted.item() == pytest.approx(loss.item(), rel=1e-12)


def rotated_texts(theta):
    # text i leans from image i towards axis i + 1
    basis = torch.eye(5, dtype=torch.float64)
    return math.cos(theta) * basis[:4] + math.sin(theta) * basis[1:]


def test_contrastive_loss_falls_as_texts_align():
    images = torch.eye(4, 5, dtype=torch.float64)

    losses = [
        inversion_contrastive_loss(images, rotated_texts(theta), [0, 1, 2, 3], tau=0.5).item()
        for theta in (1.2, 0.8, 0.3)
    ]

    assert losses[0] > losses[1] > losses[2]


def test_contrastive_loss_with_unique_pids_is_clip_loss():
    generator = torch.Generator().manual_seed(4)
    images = torch.randn(8, 6, dtype=torch.float64, generator=generator)
    texts = torch.randn(8, 6, dtype=torch.float64, generator=generator)

    loss = inversion_contrastive_loss(images, texts, list(range(8)), tau=0.07)

    assert loss.item() == pytest.approx(clip_contrastive_loss(images, texts, tau=0.07).item(), abs=1e-12)


def test_training_requires_frozen_encoders(small_space, tiny_dataset, default_tokens):
    encoders = build_reference_encoders(0, small_space)
    encoders.visual.requires_grad_(True)

    with pytest.raises(FreezeViolationError, match="before inversion training"):
        train_inversion(tiny_dataset, encoders, make_nets(), default_tokens, InversionConfig(epochs=1))


def test_slot_masks_survive_checkpoints(tmp_path, tiny_dataset, small_encoders, default_tokens):
    masks = torch.zeros(5, 16)
    for slot in range(5):
        masks[slot, 3 * slot : 3 * slot + 3] = 1.0
    nets = InversionNetworks(5, 16, 16, seed=0, slot_masks=masks)

    train_inversion(
        tiny_dataset, small_encoders, nets, default_tokens,
        InversionConfig(epochs=1, lr=1e-2), checkpoint_path=tmp_path / "inv.ckpt",
    )
    restored = load_inversion(tmp_path / "inv.ckpt")

    torch.testing.assert_close(restored.slot_masks, masks)
    pseudo = invert(torch.randn(3, 16), restored)
    assert torch.count_nonzero(pseudo * (1.0 - masks)) == 0
