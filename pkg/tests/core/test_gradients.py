"""
Autograd gradients of the training objectives against central differences,
in float64 and away from hinge kinks.
"""
import copy

import torch

from ap_attack.core.attack import AttackConfig, AttackObjective, apply_perturbation
from ap_attack.core.encoders import EncoderPair, freeze_
from ap_attack.core.generator import GeneratorConfig, PerturbationGenerator
from ap_attack.core.inversion import (
    InversionNetworks,
    compose_prompt_batch,
    inversion_contrastive_loss,
)
from ap_attack.core.prompt import inject_pseudo_tokens
from ap_attack.data.handcrafted import HandcraftedExtractor

PIDS = [0, 0, 1, 1, 2, 2, 3, 3]
STEP = 1e-6


def double_encoders(encoders):
    return EncoderPair(
        freeze_(copy.deepcopy(encoders.visual).double()),
        freeze_(copy.deepcopy(encoders.text).double()),
    )


def check_against_central_differences(loss_fn, parameter, entries):
    parameter.grad = None
    loss_fn().backward()
    analytic = parameter.grad.flatten()[entries].clone()

    numeric = []
    flat = parameter.data.view(-1)
    with torch.no_grad():
        for entry in entries:
            original = flat[entry].item()
            flat[entry] = original + STEP
            upper = loss_fn().item()
            flat[entry] = original - STEP
            lower = loss_fn().item()
            flat[entry] = original
            numeric.append((upper - lower) / (2 * STEP))

    torch.testing.assert_close(
        analytic, torch.tensor(numeric, dtype=torch.float64), rtol=1e-4, atol=1e-8
    )


def test_inversion_loss_gradient(small_encoders, default_tokens):
    encoders = double_encoders(small_encoders)
    nets = InversionNetworks(5, 16, 16, seed=0).double()
    generator = torch.Generator().manual_seed(0)
    features = torch.randn(8, 16, dtype=torch.float64, generator=generator)

    def loss_fn():
        text = compose_prompt_batch(nets(features), default_tokens, encoders.text)
        return inversion_contrastive_loss(features, text, PIDS, tau=0.07)

    first, last = nets.nets[0].linear_layers()[0], nets.nets[4].linear_layers()[2]
    check_against_central_differences(loss_fn, first.weight, [0, 7, 100])
    check_against_central_differences(loss_fn, last.bias, [0, 5])


def test_total_attack_loss_gradient(small_encoders):
    encoders = double_encoders(small_encoders)
    nets = InversionNetworks(5, 16, 16, seed=0).double().freeze()
    surrogate = freeze_(HandcraftedExtractor((32, 16), seed=0).double())
    generator = PerturbationGenerator(GeneratorConfig(preset="tiny", base_channels=4, seed=0)).double()
    # a wide margin keeps every hinge active
    config = AttackConfig(alpha=10.0, generator=GeneratorConfig(preset="tiny", base_channels=4))
    objective = AttackObjective(config, encoders, nets, surrogate)
    noise = torch.Generator().manual_seed(1)
    images = 0.1 + 0.8 * torch.rand(8, 3, 32, 16, dtype=torch.float64, generator=noise)

    def loss_fn():
        adversarial = apply_perturbation(generator, images, config.epsilon)
        return objective(images, adversarial, PIDS)[0]

    stem = generator.model[1]
    head = generator.model[-2]
    check_against_central_differences(loss_fn, stem.weight, [0, 50, 200])
    check_against_central_differences(loss_fn, head.weight, [0, 30])


def test_encode_image_gradient(small_encoders):
    encoders = double_encoders(small_encoders)
    noise = torch.Generator().manual_seed(2)
    images = torch.rand(2, 3, 32, 16, dtype=torch.float64, generator=noise).requires_grad_(True)
    weights = torch.randn(2, 16, dtype=torch.float64, generator=noise)

    def loss_fn():
        return (encoders.visual.encode_image(images) * weights).sum()

    check_against_central_differences(loss_fn, images, [0, 77, 500, 3000])


def test_encode_token_sequence_gradient(small_encoders, default_tokens):
    encoders = double_encoders(small_encoders)
    noise = torch.Generator().manual_seed(3)
    pseudo = torch.randn(2, 5, 16, dtype=torch.float64, generator=noise).requires_grad_(True)
    weights = torch.randn(2, 16, dtype=torch.float64, generator=noise)

    def loss_fn():
        sequences = inject_pseudo_tokens(default_tokens, pseudo, encoders.text.token_embedding_table)
        return (encoders.text.encode_token_sequence(sequences) * weights).sum()

    check_against_central_differences(loss_fn, pseudo, [0, 40, 150])
