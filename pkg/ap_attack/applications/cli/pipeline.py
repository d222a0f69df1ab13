"""
Stage orchestration behind the CLI commands.

Each `run_*` function executes one command for a resolved `RunConfig`, writes
its artifacts into the command's directory under ``output_dir`` through a
`RunStore` and finishes with a ``run.json`` manifest. Later stages find the
artifacts of earlier ones by the same directory convention.
"""
from __future__ import annotations

import logging

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from PIL import Image

from ap_attack.core.attack import attack_images, train_attack
from ap_attack.core.default.paths import (
    ATTACK_LOG,
    ATTACK_MANIFEST_FILE,
    ATTRIBUTE_MANIFEST_FILE,
    ENCODERS_CHECKPOINT,
    GENERATOR_CHECKPOINT,
    INVERSION_CHECKPOINT,
    INVERSION_LOG,
    REPORT_CSV,
    REPORT_JSON,
    WORDCLOUD_CSV,
    WORDCLOUD_JSON,
    stage_path,
)
from ap_attack.core.default.run_store import RunStore
from ap_attack.core.defenses import parse_defense_chain
from ap_attack.core.encoders import (
    AttributeGrounding,
    EncoderPair,
    build_reference_encoders,
    freeze_,
    load_encoder_adapter,
    save_encoders,
    slot_masks,
)
from ap_attack.core.errors import CheckpointError, ConfigError, DatasetError
from ap_attack.core.generator import PerturbationGenerator, load_generator
from ap_attack.core.interpret import (
    AttributeVocabulary,
    WordcloudRow,
    export_wordcloud_data,
    interpret_pseudo_tokens,
    interpretation_accuracy,
)
from ap_attack.core.inversion import (
    InversionNetworks,
    encode_images,
    load_inversion,
    train_inversion,
)
from ap_attack.core.metrics import EvaluationReport, evaluate
from ap_attack.core.prompt import (
    PromptTemplate,
    TokenizedPrompt,
    Vocabulary,
    parse_template,
    tokenize,
)
from ap_attack.core.run_config import RunConfig
from ap_attack.data.handcrafted import HandcraftedExtractor
from ap_attack.data.reid_folder import (
    IMAGE_SUFFIXES,
    ReidDataset,
    image_to_tensor,
    load_reid_folder,
    parse_filename,
    tensor_to_image,
)
from ap_attack.data.synthdata import (
    SyntheticManifest,
    generate_dataset,
    synthetic_grounding,
)

logger = logging.getLogger(__name__)


def _now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class PromptSetup:
    template: PromptTemplate
    vocab: Vocabulary
    tokens: TokenizedPrompt


def build_prompt(config: RunConfig) -> PromptSetup:
    """Parse and tokenize the template and check it fits the text encoder."""
    template = parse_template(config.template, config.attribute_names)
    vocab = Vocabulary.from_file(config.vocabulary_path)
    tokens = tokenize(template, vocab)
    if len(tokens) > config.joint_space.max_sequence_length:
        raise ConfigError(
            f"Tokenized template has {len(tokens)} tokens, more than "
            f"joint_space.max_sequence_length {config.joint_space.max_sequence_length}"
        )
    largest_row = max(vocab.row_index(i) for i in vocab.id_to_token)
    if largest_row >= config.joint_space.vocab_size:
        raise ConfigError(
            f"Vocabulary needs {largest_row + 1} embedding rows but joint_space.vocab_size "
            f"is {config.joint_space.vocab_size}"
        )
    return PromptSetup(template, vocab, tokens)


def build_grounding(config: RunConfig, prompt: PromptSetup) -> Optional[List[AttributeGrounding]]:
    """Grounding of the reference encoders; None for loaded or random encoders."""
    if config.encoders.checkpoint or not config.encoders.grounded:
        return None
    return synthetic_grounding(prompt.template.attribute_names)


def build_encoders(config: RunConfig) -> EncoderPair:
    if config.encoders.checkpoint:
        encoders = load_encoder_adapter(config.encoders.checkpoint)
        if encoders.config.to_dict() != config.joint_space.to_dict():
            raise ConfigError("Encoder checkpoint joint space differs from joint_space config")
        return encoders
    if not config.encoders.grounded:
        return build_reference_encoders(config.encoders.seed, config.joint_space)
    prompt = build_prompt(config)
    return build_reference_encoders(
        config.encoders.seed,
        config.joint_space,
        grounding=build_grounding(config, prompt),
        vocab=prompt.vocab,
    )


def build_extractor(token: str, config: RunConfig, encoders: EncoderPair) -> torch.nn.Module:
    """
    Victim or surrogate from its token: ``handcrafted:<seed>`` or ``clip-visual``.

    Raises
    ------
    ConfigError
        For unknown tokens.
    """
    name, _, argument = token.partition(":")
    if name == "handcrafted":
        try:
            seed = int(argument) if argument else 0
        except ValueError:
            raise ConfigError(f"Malformed extractor token '{token}'")
        return freeze_(HandcraftedExtractor(config.joint_space.image_size, seed=seed))
    if name == "clip-visual":
        return encoders.visual
    raise ConfigError(f"Unknown feature extractor '{token}'")


def data_root(config: RunConfig) -> Path:
    if config.data.root:
        return Path(config.data.root)
    return Path(stage_path(config.output_dir, "synth-gen"))


def load_split(config: RunConfig, split: str) -> ReidDataset:
    folder = data_root(config) / split
    if not folder.is_dir():
        raise DatasetError(
            f"Split folder '{folder}' does not exist; run synth-gen or set data.root"
        )
    return load_reid_folder(folder, config.joint_space.image_size)


def _stage_artifact(config: RunConfig, command: str, name: str, hint: str) -> Path:
    path = Path(stage_path(config.output_dir, command)) / name
    if not path.is_file():
        raise CheckpointError(f"'{path}' does not exist; run {hint} first")
    return path


def load_trained_inversion(config: RunConfig) -> InversionNetworks:
    return load_inversion(
        _stage_artifact(config, "train-inversion", INVERSION_CHECKPOINT, "train-inversion")
    )


def resolve_generator(config: RunConfig, required: bool) -> Optional[PerturbationGenerator]:
    """The configured generator, else the train-attack output, else None."""
    if config.evaluation.generator:
        return load_generator(config.evaluation.generator)
    path = Path(stage_path(config.output_dir, "train-attack")) / GENERATOR_CHECKPOINT
    if path.is_file():
        return load_generator(path)
    if required:
        raise CheckpointError(f"'{path}' does not exist; run train-attack first")
    return None


def run_synth_gen(config: RunConfig) -> SyntheticManifest:
    started = _now()
    root = data_root(config)
    manifest = generate_dataset(config.data.synthetic, root)
    RunStore(root).write_manifest("synth-gen", config.digest(), config.seed, started)
    return manifest


def run_train_inversion(config: RunConfig) -> List[float]:
    """Stage 1; returns the per-epoch total losses."""
    started = _now()
    prompt = build_prompt(config)
    encoders = build_encoders(config)
    dataset = load_split(config, "train")
    store = RunStore(stage_path(config.output_dir, "train-inversion"))
    digest = config.digest()

    grounding = build_grounding(config, prompt)
    nets = InversionNetworks(
        prompt.template.num_slots,
        config.joint_space.feature_dim,
        config.joint_space.token_embedding_dim,
        seed=config.stage1.seed,
        slot_masks=(
            slot_masks(grounding, config.joint_space.token_embedding_dim) if grounding else None
        ),
    )
    result = train_inversion(
        dataset,
        encoders,
        nets,
        prompt.tokens,
        config.stage1,
        vocab=prompt.vocab,
        checkpoint_path=store.file_path(INVERSION_CHECKPOINT),
        config_digest=digest,
    )
    save_encoders(encoders, store.file_path(ENCODERS_CHECKPOINT), digest)
    store.reset_log(INVERSION_LOG)
    for record in result.log:
        store.log(INVERSION_LOG, record)
    store.write_manifest("train-inversion", digest, config.seed, started)
    return [record.total for record in result.log]


def run_train_attack(config: RunConfig) -> List[float]:
    """Stage 2; returns the per-epoch total losses."""
    started = _now()
    prompt = build_prompt(config)
    encoders = build_encoders(config)
    nets = load_trained_inversion(config)
    surrogate = build_extractor(config.evaluation.surrogate, config, encoders)
    dataset = load_split(config, "train")
    store = RunStore(stage_path(config.output_dir, "train-attack"))
    digest = config.digest()

    generator = PerturbationGenerator(config.stage2.generator)
    result = train_attack(
        dataset,
        encoders,
        nets,
        surrogate,
        generator,
        config.stage2,
        tokens=prompt.tokens,
        vocab=prompt.vocab,
        checkpoint_path=store.file_path(GENERATOR_CHECKPOINT),
        config_digest=digest,
    )
    store.reset_log(ATTACK_LOG)
    for record in result.log:
        store.log(ATTACK_LOG, record)
    store.write_manifest("train-attack", digest, config.seed, started)
    return [record.total for record in result.log]


def _read_image_folder(folder: Path, image_size: Tuple[int, int]) -> Tuple[List[str], torch.Tensor]:
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"Image folder '{folder}' holds no images")
    tensors = []
    for file in files:
        with Image.open(file) as image:
            tensors.append(image_to_tensor(image, image_size))
    return [f.name for f in files], torch.stack(tensors)


def run_attack(config: RunConfig, input_dir: Path) -> Dict:
    """
    Batch mode: attack every image of a folder and write PNGs plus a manifest.

    The per-image statistics are measured on the written 8-bit images.
    """
    started = _now()
    if not input_dir.is_dir():
        raise DatasetError(f"Image folder '{input_dir}' does not exist")
    generator = resolve_generator(config, required=True)
    generator.check_image_size(config.joint_space.image_size)
    names, images = _read_image_folder(input_dir, config.joint_space.image_size)
    adversarial = attack_images(generator, images, config.stage2.epsilon)
    store = RunStore(stage_path(config.output_dir, "attack"))

    entries = []
    for name, clean, adv in zip(names, images, adversarial):
        output_name = Path(name).with_suffix(".png").name
        written = tensor_to_image(adv)
        written.save(store.file_path(Path("images") / output_name))
        quantized = torch.from_numpy(np.asarray(written, dtype=np.float32).transpose(2, 0, 1) / 255.0)
        delta = (quantized - clean).abs()
        entries.append(
            {
                "image": output_name,
                "source": name,
                "max_abs_delta": float(delta.max()),
                "mean_abs_delta": float(delta.mean()),
            }
        )
    manifest = {"epsilon": config.stage2.epsilon, "images": entries}
    store.set_json(ATTACK_MANIFEST_FILE, manifest)
    store.write_manifest("attack", config.digest(), config.seed, started)
    return manifest


def run_evaluate(config: RunConfig, clean_only: bool = False) -> EvaluationReport:
    started = _now()
    encoders = build_encoders(config)
    victims = {
        token: build_extractor(token, config, encoders) for token in config.evaluation.victims
    }
    defenses = parse_defense_chain(config.evaluation.defenses, config.seed)
    generator = None if clean_only else resolve_generator(config, required=False)
    digest = config.digest()

    report = evaluate(
        victims,
        load_split(config, "query"),
        load_split(config, "gallery"),
        generator=generator,
        epsilon=config.stage2.epsilon,
        defenses=defenses,
        attack_gallery=config.evaluation.attack_gallery,
        distance=config.evaluation.distance,
        exclude_same_camera=config.evaluation.exclude_same_camera,
        config_digest=digest,
        seed=config.seed,
    )
    store = RunStore(stage_path(config.output_dir, "evaluate"))
    report.save_json(store.file_path(REPORT_JSON))
    report.save_csv(store.file_path(REPORT_CSV))
    store.write_manifest("evaluate", digest, config.seed, started)
    return report


@dataclass
class InterpretationSummary:
    rows: List[WordcloudRow]
    adversarial_rows: List[WordcloudRow]
    accuracy: Dict[str, float]
    adversarial_accuracy: Dict[str, float]


def _ground_truth(config: RunConfig, names: List[str]) -> Dict[str, Dict[str, str]]:
    manifest_path = data_root(config) / ATTRIBUTE_MANIFEST_FILE
    if not manifest_path.is_file():
        return {}
    manifest = SyntheticManifest.load(manifest_path)
    truth = {}
    for name in names:
        pid, _ = parse_filename(name)
        if str(pid) in manifest.identities:
            truth[name] = manifest.attribute_tuple(pid)
    return truth


def run_interpret(config: RunConfig) -> InterpretationSummary:
    """Word rankings of clean (and adversarial) pseudo-tokens plus top-1 accuracy."""
    started = _now()
    prompt = build_prompt(config)
    encoders = build_encoders(config)
    nets = load_trained_inversion(config)
    attribute_vocab = AttributeVocabulary.from_file(config.attribute_vocabulary_path)
    attribute_vocab.check_covers(prompt.template.attribute_names)
    dataset = load_split(config, config.interpretation.split)
    table = encoders.text.token_embedding_table
    store = RunStore(stage_path(config.output_dir, "interpret"))

    def rows_for(images: torch.Tensor) -> List[WordcloudRow]:
        with torch.no_grad():
            pseudo = nets(encode_images(encoders.visual, images))
        rows = []
        for name, tokens in zip(dataset.names, pseudo):
            rows.extend(
                interpret_pseudo_tokens(
                    name,
                    tokens,
                    prompt.template.attribute_names,
                    attribute_vocab,
                    prompt.vocab,
                    table,
                    config.interpretation.top_k,
                )
            )
        return rows

    truth = _ground_truth(config, dataset.names)
    rows = rows_for(dataset.images)
    export_wordcloud_data(rows, store.file_path(WORDCLOUD_CSV), store.file_path(WORDCLOUD_JSON))
    summary = InterpretationSummary(rows, [], interpretation_accuracy(rows, truth), {})

    generator = resolve_generator(config, required=False) if config.interpretation.adversarial else None
    if generator is not None:
        adversarial = attack_images(generator, dataset.images, config.stage2.epsilon)
        summary.adversarial_rows = rows_for(adversarial)
        export_wordcloud_data(
            summary.adversarial_rows,
            store.file_path("adversarial_" + WORDCLOUD_CSV),
            store.file_path("adversarial_" + WORDCLOUD_JSON),
        )
        summary.adversarial_accuracy = interpretation_accuracy(summary.adversarial_rows, truth)

    store.set_json(
        "accuracy.json",
        {"clean": summary.accuracy, "adversarial": summary.adversarial_accuracy},
    )
    store.write_manifest("interpret", config.digest(), config.seed, started)
    return summary
