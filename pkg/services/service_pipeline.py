"""
Toy conditioning pipeline: mock encoders -> text-image interaction -> N-block
denoiser with identity injection, trained by flow matching on synthetic scenes.

Flow matching:
    x_t = (1 - t) x0 + t x1,  x0 ~ N(0, I),  t ~ U[0, 1)
    loss = mean |v(x_t, t, cond) - (x1 - x0)|^2
Sampling integrates dx/dt = v with Euler steps from t = 0 to 1.
Only the interaction adapters and the injection blocks train; every frozen
base weight is hashed before and after training.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from core.core_config import RunConfig, parse_config
from core.core_constants import (
    SEED_ADAPTER_ENCODER, SEED_BASE_WEIGHTS, SEED_EVAL, SEED_LORA_DOWN, SEED_MOCK_ENCODERS,
    SEED_SAMPLE_NOISE, SEED_TRAIN_NOISE, derive_seed,
)
from core.core_errors import ConfigError, LayoutError, NumericsError, TensorFileError, TrainingDiverged
from core.core_numerics import Adam, Rng, Tensor, grad, mse
from layers.layer_attention import MmAttentionBlock, text_image_interaction
from layers.layer_injection import BlockRopes, InjectionBlock, InjectionMode, block_forward
from layers.layer_lora import ReparamLinear, adapter_scales, load_trainable_state, trainable_state
from layers.layer_rope import RopeIndex, assign_spatial_indices, assign_video_indices
from layers.layer_tokens import SubjectSpec, TokenKind, TokenStream, layout_template
from services.service_dataset import MockEncoders, SyntheticScene, make_dataset
from services.service_metrics import FeatureSet, frechet_distance, identity_similarity, temporal_consistency
from utilities.util_tensorfile import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


def time_embedding(t: float, d_model: int) -> np.ndarray:
    """Sinusoidal embedding of a flow time in [0, 1]."""
    half = d_model // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = 1000.0 * t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    return np.pad(emb, (0, d_model - emb.shape[0]))


@dataclass
class Condition:
    stream: TokenStream
    z_text: np.ndarray       # TEXT + IMG_SEM rows in stream order
    z_image: np.ndarray      # IMG_VAE rows in subject order
    image_spatial: List[RopeIndex]


class ToyDenoiser:
    """Ordered (InjectionBlock, MmAttentionBlock) pairs between patchify and unpatchify maps."""

    def __init__(self, patchify: ReparamLinear, time_proj: ReparamLinear, unpatchify: ReparamLinear,
                 blocks: List[MmAttentionBlock], injections: List[Optional[InjectionBlock]]):
        if not blocks or len(blocks) != len(injections):
            raise ConfigError("blocks", "denoiser needs >= 1 block and one injection slot per block")
        self.patchify = patchify
        self.time_proj = time_proj
        self.unpatchify = unpatchify
        self.blocks = blocks
        self.injections = injections

    def base_layers(self) -> Dict[str, ReparamLinear]:
        layers = {"patchify": self.patchify, "time_proj": self.time_proj, "unpatchify": self.unpatchify}
        for i, block in enumerate(self.blocks):
            layers.update({f"blocks.{i}.{name}": layer for name, layer in block.layers().items()})
        return layers

    def injection_layers(self) -> Dict[str, ReparamLinear]:
        layers = {}
        for i, injection in enumerate(self.injections):
            if injection is not None:
                layers.update({f"injection.{i}.{name}": layer for name, layer in injection.layers().items()})
        return layers


class ConditioningPipeline:
    def __init__(self, config: RunConfig, encoders: MockEncoders, denoiser: ToyDenoiser,
                 interaction: Optional[MmAttentionBlock]):
        self.config = config
        self.encoders = encoders
        self.denoiser = denoiser
        self.interaction = interaction
        video = assign_video_indices(config.frames, config.latent_height, config.latent_width)
        self.video_rope = video
        self.video_spatial = [RopeIndex(0, i.y, i.x) for i in video]

    @property
    def token_count(self) -> int:
        c = self.config
        return c.frames * c.latent_height * c.latent_width

    def interaction_layers(self) -> Dict[str, ReparamLinear]:
        if self.interaction is None:
            return {}
        return {f"interaction.{name}": layer for name, layer in self.interaction.layers().items()}

    def trainable_layers(self) -> Dict[str, ReparamLinear]:
        return {**self.interaction_layers(), **self.denoiser.injection_layers()}

    def trainable_parameters(self) -> List[Tensor]:
        return [p for layer in self.trainable_layers().values() for p in layer.trainable_parameters()]

    def base_digest(self) -> str:
        """sha256 over every frozen base weight, in name order."""
        layers = {**self.denoiser.base_layers(), **self.trainable_layers()}
        h = hashlib.sha256()
        for name in sorted(layers):
            layer = layers[name]
            if not layer.frozen:
                continue
            for p in layer.base_parameters():
                h.update(name.encode("utf-8"))
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def ropes(self, text_rows: int, image_spatial: Sequence[RopeIndex]) -> BlockRopes:
        return BlockRopes(self.video_rope, [RopeIndex(0, 0, 0)] * text_rows,
                          self.video_spatial, list(image_spatial))


# ============================================================================
# CONSTRUCTION
# ============================================================================
def build_pipeline(config: RunConfig) -> ConditioningPipeline:
    """Base weights, adapters and encoders, all regenerated from config.seed."""
    seed = config.seed
    d = config.d_model
    base_rng = Rng(derive_seed(seed, SEED_BASE_WEIGHTS))
    lora_rng = Rng(derive_seed(seed, SEED_LORA_DOWN))
    adapter_rng = Rng(derive_seed(seed, SEED_ADAPTER_ENCODER))
    encoders = MockEncoders(derive_seed(seed, SEED_MOCK_ENCODERS), d, config.channels)

    blocks = [MmAttentionBlock.from_rng(d, config.heads, config.ffn_mult, base_rng, config.rope_theta)
              for _ in range(config.blocks)]
    time_proj = ReparamLinear.from_rng(d, d, base_rng)
    patchify = ReparamLinear(encoders.vae_matrix, np.zeros(d))
    unpatchify = ReparamLinear(encoders.vae_matrix.T, np.zeros(config.channels))

    interaction = None
    if config.interaction:
        interaction = blocks[0].clone().adapt(config.lora_rank, config.lora_alpha, lora_rng)

    mode = InjectionMode(config.mode)
    injections: List[Optional[InjectionBlock]] = [None] * len(blocks)
    if config.injection:
        rng = adapter_rng if mode is InjectionMode.ADAPTER else lora_rng
        injections = [InjectionBlock.build(mode, block, config.lora_rank, config.lora_alpha,
                                           config.ffn_mult, rng) for block in blocks]

    denoiser = ToyDenoiser(patchify, time_proj, unpatchify, blocks, injections)
    pipeline = ConditioningPipeline(config, encoders, denoiser, interaction)
    logger.info(f"Pipeline built: {config.blocks} block(s), d={d}, mode={mode.value}, "
                f"injection={config.injection}, interaction={config.interaction}")
    return pipeline


# ============================================================================
# CONDITIONING
# ============================================================================
def encode_condition(pipeline: ConditioningPipeline, prompt: str, subjects: Sequence[SubjectSpec],
                     images: Sequence[np.ndarray]) -> Condition:
    """Lay out the template and embed text, semantic and latent image tokens."""
    if len(images) != len(subjects):
        raise LayoutError(f"{len(subjects)} subjects but {len(images)} images")
    enc = pipeline.encoders
    stream = layout_template(prompt, subjects)
    text_vectors = enc.text_embed(stream.text_tokens)

    rows, used = [], 0
    for seg in stream.segments():
        count = seg.stop - seg.start
        if seg.kind is TokenKind.TEXT:
            rows.append(text_vectors[used:used + count])
            used += count
        elif seg.kind is TokenKind.IMG_SEM:
            rows.append(enc.sem_encode(images[seg.subject_id], subjects[seg.subject_id].sem_grid))

    latents, spatial = [], []
    for spec, image in zip(subjects, images):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (*spec.vae_grid, enc.channels):
            raise LayoutError(f"image for {spec.entity_word!r} has shape {image.shape}, "
                              f"expected {(*spec.vae_grid, enc.channels)}")
        latents.append(enc.vae_encode(image.reshape(-1, enc.channels)))
        spatial += assign_spatial_indices(*spec.vae_grid)
    z_image = np.concatenate(latents) if latents else np.zeros((0, pipeline.config.d_model))
    return Condition(stream, np.concatenate(rows), z_image, spatial)


def scene_condition(pipeline: ConditioningPipeline, scene: SyntheticScene) -> Condition:
    c = pipeline.config
    return encode_condition(pipeline, scene.prompt, scene.subjects(c.sem_grid, c.vae_grid), scene.images)


def interact(pipeline: ConditioningPipeline, cond: Condition) -> Tuple[Tensor, Optional[Tensor]]:
    """Identity-enhanced text tokens and interaction-enhanced image tokens (None without subjects)."""
    z_T, z_I = Tensor(cond.z_text), Tensor(cond.z_image)
    if pipeline.interaction is not None:
        z_T, z_I = text_image_interaction(pipeline.interaction, z_T, z_I, cond.stream,
                                          pipeline.config.rope_mode)
    return z_T, (z_I if z_I.dims[0] else None)


def denoise(pipeline: ConditioningPipeline, x: Tensor, t: float, text: Tensor, image: Optional[Tensor],
            image_spatial: Sequence[RopeIndex], use_injection: bool = True) -> Tensor:
    """Velocity prediction for row-major video tokens x (n x channels)."""
    den = pipeline.denoiser
    ropes = pipeline.ropes(text.dims[0], image_spatial)
    h = den.patchify(x) + den.time_proj(Tensor(time_embedding(t, pipeline.config.d_model)[None, :]))
    for base, injection in zip(den.blocks, den.injections):
        h = block_forward(base, injection if use_injection else None, h, text, image, ropes)
    return den.unpatchify(h)


def flow_loss(pipeline: ConditioningPipeline, scene: SyntheticScene, cond: Condition,
              x0: np.ndarray, t: float) -> Tensor:
    x1 = scene.video.reshape(-1, pipeline.config.channels)
    xt = (1.0 - t) * x0 + t * x1
    text, image = interact(pipeline, cond)
    prediction = denoise(pipeline, Tensor(xt), t, text, image, cond.image_spatial)
    return mse(prediction, x1 - x0)


def evaluation_loss(pipeline: ConditioningPipeline, scenes: Sequence[SyntheticScene],
                    conditions: Optional[Sequence[Condition]] = None) -> float:
    """Mean flow loss over `scenes` with fixed evaluation noise."""
    conditions = conditions or [scene_condition(pipeline, s) for s in scenes]
    rng = Rng(derive_seed(pipeline.config.seed, SEED_EVAL))
    shape = (pipeline.token_count, pipeline.config.channels)
    values = []
    for scene, cond in zip(scenes, conditions):
        x0 = rng.normal(shape)
        t = float(rng.uniform(1)[0])
        values.append(flow_loss(pipeline, scene, cond, x0, t).item())
    return float(np.mean(values))


# ============================================================================
# TRAINING
# ============================================================================
@dataclass
class TrainResult:
    pipeline: ConditioningPipeline
    losses: List[float] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0

    def summary(self) -> Dict[str, Any]:
        return {"final_loss": self.final_loss, "initial_loss": self.initial_loss,
                "steps": len(self.losses)}


def train(config: RunConfig, scenes: Optional[Sequence[SyntheticScene]] = None,
          show_progress: bool = False) -> TrainResult:
    pipeline = build_pipeline(config)
    scenes = list(scenes) if scenes is not None else make_dataset(config.seed, config.dataset_size, config)
    if not scenes:
        raise ConfigError("dataset_size", "training needs at least one scene")
    conditions = [scene_condition(pipeline, s) for s in scenes]
    params = pipeline.trainable_parameters()
    if not params:
        logger.warning("Nothing to train: injection and interaction are both disabled")

    digest = pipeline.base_digest()
    result = TrainResult(pipeline, initial_loss=evaluation_loss(pipeline, scenes, conditions))
    optimizer = Adam(params, lr=config.learning_rate)
    rng = Rng(derive_seed(config.seed, SEED_TRAIN_NOISE))
    shape = (pipeline.token_count, config.channels)
    logger.info(f"Training {len(params)} parameter tensors for {config.train_steps} steps "
                f"on {len(scenes)} scenes")

    for step in tqdm(range(config.train_steps), desc="train", disable=not show_progress):
        k = step % len(scenes)
        x0 = rng.normal(shape)
        t = float(rng.uniform(1)[0])
        try:
            loss = flow_loss(pipeline, scenes[k], conditions[k], x0, t)
        except NumericsError as e:
            raise TrainingDiverged(f"step {step}: {e}") from e
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"step {step}: loss is {value}")
        if params:
            optimizer.step(grad(loss, params))
        result.losses.append(value)
        if (step + 1) % config.log_every == 0:
            logger.info(f"step {step + 1}/{config.train_steps} loss {value:.5f}")

    if pipeline.base_digest() != digest:
        raise NumericsError("frozen base weights changed during training")
    result.final_loss = evaluation_loss(pipeline, scenes, conditions)
    logger.info(f"Training done: eval loss {result.initial_loss:.5f} -> {result.final_loss:.5f}")
    return result


# ============================================================================
# CHECKPOINTS
# ============================================================================
def save_pipeline(pipeline: ConditioningPipeline, directory: Union[str, Path],
                  extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Trainable tensors plus config; base weights are regenerated from the seed on load."""
    layers = pipeline.trainable_layers()
    metadata = {
        "adapter_scales": adapter_scales(layers),
        "base_digest": pipeline.base_digest(),
        "config": pipeline.config.to_dict(),
    }
    metadata.update(extra or {})
    return save_checkpoint(directory, trainable_state(layers), metadata)


def load_pipeline(directory: Union[str, Path]) -> ConditioningPipeline:
    tensors, metadata = load_checkpoint(directory)
    if "config" not in metadata:
        raise TensorFileError(f"{directory}: checkpoint manifest has no config")
    pipeline = build_pipeline(parse_config(overrides=metadata["config"]))
    if pipeline.base_digest() != metadata.get("base_digest"):
        raise TensorFileError(f"{directory}: base weights rebuilt from the seed do not match the checkpoint")
    try:
        load_trainable_state(pipeline.trainable_layers(), tensors)
    except NumericsError as e:
        raise TensorFileError(f"{directory}: {e}") from None
    logger.info(f"Loaded checkpoint from {directory}")
    return pipeline


# ============================================================================
# SAMPLING AND EVALUATION
# ============================================================================
def generate(pipeline: ConditioningPipeline, prompt: str, subjects: Sequence[SubjectSpec],
             images: Sequence[np.ndarray], steps: Optional[int] = None,
             seed: Optional[int] = None) -> np.ndarray:
    """Euler integration from seeded noise; returns (frames, height, width, channels)."""
    c = pipeline.config
    steps = c.sample_steps if steps is None else steps
    if steps < 1:
        raise ConfigError("sample_steps", f"must be >= 1, got {steps}")
    rng = Rng(derive_seed(c.seed if seed is None else seed, SEED_SAMPLE_NOISE))
    cond = encode_condition(pipeline, prompt, subjects, images)
    text, image = interact(pipeline, cond)
    text = text.detach()
    image = image.detach() if image is not None else None

    x = rng.normal((pipeline.token_count, c.channels))
    dt = 1.0 / steps
    for i in range(steps):
        velocity = denoise(pipeline, Tensor(x), i * dt, text, image, cond.image_spatial)
        x = x + dt * velocity.data
    return x.reshape(c.frames, c.latent_height, c.latent_width, c.channels)


def generate_scene(pipeline: ConditioningPipeline, scene: SyntheticScene, steps: Optional[int] = None,
                   seed: Optional[int] = None) -> np.ndarray:
    c = pipeline.config
    return generate(pipeline, scene.prompt, scene.subjects(c.sem_grid, c.vae_grid), scene.images,
                    steps, seed)


def evaluate(pipeline: ConditioningPipeline, scenes: Sequence[SyntheticScene],
             steps: Optional[int] = None) -> Dict[str, Any]:
    """Identity, temporal consistency and Frechet distance over subject regions of generated videos."""
    identities, temporals, generated, reference = [], [], [], []
    eval_seed = derive_seed(pipeline.config.seed, SEED_EVAL)
    for idx, scene in enumerate(scenes):
        video = generate_scene(pipeline, scene, steps, seed=eval_seed ^ (idx + 1))
        for k, image in enumerate(scene.images):
            rows = np.stack([scene.region(video, k, f) for f in range(scene.frames)])
            frames = FeatureSet(rows, label=f"scene{idx}/subject{k}")
            identities.append(identity_similarity(image.reshape(-1), frames))
            if scene.frames >= 2:
                temporals.append(temporal_consistency(frames))
            generated.extend(rows)
            reference.extend(scene.region(scene.video, k, f) for f in range(scene.frames))

    report: Dict[str, Any] = {
        "identity_similarity": float(np.mean(identities)),
        "scenes": len(scenes),
        "subjects": len(identities),
        "temporal_consistency": float(np.mean(temporals)) if temporals else None,
        "frechet_distance": None,
    }
    if len(generated) >= 2:
        report["frechet_distance"] = frechet_distance(FeatureSet(np.stack(generated), "generated"),
                                                      FeatureSet(np.stack(reference), "reference"))
    logger.info(f"Evaluation: identity {report['identity_similarity']:.4f} over {len(identities)} subject(s)")
    return report


def per_frame_identity_profile(pipeline: ConditioningPipeline, scene: Optional[SyntheticScene] = None,
                               t: float = 0.5) -> List[float]:
    """
    Mean token norm of (conditioned - unconditioned) output of the first block,
    per frame. A fresh zero-gated block gives all zeros.
    """
    c = pipeline.config
    injection = pipeline.denoiser.injections[0]
    if injection is None:
        raise ConfigError("injection", "pipeline has no injection blocks to profile")
    scene = scene or make_dataset(c.seed, 1, c)[0]
    cond = scene_condition(pipeline, scene)
    text, image = interact(pipeline, cond)
    if image is None:
        raise LayoutError("profile needs a scene with at least one subject")

    x0 = Rng(derive_seed(c.seed, SEED_EVAL)).normal((pipeline.token_count, c.channels))
    xt = (1.0 - t) * x0 + t * scene.video.reshape(-1, c.channels)
    den = pipeline.denoiser
    h = den.patchify(Tensor(xt)) + den.time_proj(Tensor(time_embedding(t, c.d_model)[None, :]))
    ropes = pipeline.ropes(text.dims[0], cond.image_spatial)
    conditioned = block_forward(den.blocks[0], injection, h, text, image, ropes)
    plain = block_forward(den.blocks[0], None, h, text, image, ropes)
    delta = (conditioned.data - plain.data).reshape(c.frames, -1, c.d_model)
    return [float(np.mean(np.linalg.norm(delta[f], axis=1))) for f in range(c.frames)]


def coefficient_of_variation(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    return float(values.std() / mean) if mean > 0 else 0.0
