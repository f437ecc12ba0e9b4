"""Miniature wav2vec-2.0-style acoustic model.

Feature encoder (frame stacking + conv), product quantizer with Gumbel-softmax
codebooks, span masking, a pre-norm transformer context network with a
convolutional position embedding, and a CTC output head.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .augment import SpecAugmentPlan, apply_specaugment
from .autodiff import DiffValue
from .data import Batch
from .rng import Rng

BLANK = 0


@dataclass
class ModelConfig:
    input_channels: int = 16
    encoder_dim: int = 64
    num_context_layers: int = 2
    context_hidden_dim: int = 128
    num_attention_heads: int = 4
    quantizer_groups: int = 2
    codebook_entries: int = 32
    codevector_dim: int = 32
    final_dim: int = 32
    mask_prob: float = 0.5
    mask_span: int = 2
    num_distractors: int = 10
    contrastive_temperature: float = 0.1
    gumbel_temperature: tuple = (2.0, 0.5, 0.998)
    hard_quantizer: bool = True
    vocab_size: int = 21
    downsample_factor: int = 2
    feature_conv_kernel: int = 3
    pos_conv_kernel: int = 5

    def __post_init__(self):
        self.gumbel_temperature = tuple(float(v) for v in self.gumbel_temperature)
        self.validate()

    def validate(self) -> None:
        dims = {
            "input_channels": self.input_channels,
            "encoder_dim": self.encoder_dim,
            "num_context_layers": self.num_context_layers,
            "context_hidden_dim": self.context_hidden_dim,
            "num_attention_heads": self.num_attention_heads,
            "quantizer_groups": self.quantizer_groups,
            "codebook_entries": self.codebook_entries,
            "codevector_dim": self.codevector_dim,
            "final_dim": self.final_dim,
            "mask_span": self.mask_span,
            "downsample_factor": self.downsample_factor,
        }
        for name, value in dims.items():
            if int(value) <= 0:
                raise ValueError(f"model.{name} must be > 0, got {value}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"model.mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.vocab_size < 2:
            raise ValueError(f"model.vocab_size must be >= 2 (blank + one token), got {self.vocab_size}")
        if self.codevector_dim % self.quantizer_groups:
            raise ValueError("model.codevector_dim must be divisible by model.quantizer_groups")
        if self.encoder_dim % self.num_attention_heads:
            raise ValueError("model.encoder_dim must be divisible by model.num_attention_heads")
        if self.num_distractors < 0:
            raise ValueError("model.num_distractors must be >= 0")
        if self.contrastive_temperature <= 0:
            raise ValueError("model.contrastive_temperature must be > 0")
        start, end, decay = self.gumbel_temperature
        if not (start > 0 and end > 0 and 0 < decay <= 1):
            raise ValueError(f"model.gumbel_temperature must be (start>0, end>0, 0<decay<=1), got {self.gumbel_temperature}")
        for name in ("feature_conv_kernel", "pos_conv_kernel"):
            k = getattr(self, name)
            if k <= 0 or k % 2 == 0:
                raise ValueError(f"model.{name} must be a positive odd integer, got {k}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gumbel_temperature"] = list(self.gumbel_temperature)
        return d


def gumbel_temperature_at(config: ModelConfig, step: int) -> float:
    start, end, decay = config.gumbel_temperature
    return max(end, start * decay**step)


class ModelParams:
    """Named parameter arrays. ``copy()`` gives a fully independent twin."""

    def __init__(self, config: ModelConfig, arrays: dict):
        self.config = config
        self.values: dict[str, DiffValue] = {
            name: (v if isinstance(v, DiffValue) else ad.parameter(v)) for name, v in arrays.items()
        }

    def __getitem__(self, name: str) -> DiffValue:
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def parameters(self) -> list[DiffValue]:
        return list(self.values.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: v.data for name, v in self.values.items()}

    def zero_grads(self) -> None:
        ad.zero_grads(self.values.values())

    def copy(self) -> "ModelParams":
        return ModelParams(copy.deepcopy(self.config), {k: v.data.copy() for k, v in self.values.items()})

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.values.values()))

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison."""
        if set(self.values) != set(other.values):
            return False
        return all(np.array_equal(self.values[k].data, other.values[k].data) for k in self.values)


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases, unit norm gains."""
    config.validate()
    d, h = config.encoder_dim, config.context_hidden_dim
    g, v = config.quantizer_groups, config.codebook_entries
    arrays: dict[str, np.ndarray] = {}
    counter = iter(range(10_000))

    def weight(name, shape, fan_in):
        arrays[name] = rng.child("init", next(counter)).normal(0.0, 1.0 / math.sqrt(fan_in), shape)

    def zeros(name, shape):
        arrays[name] = np.zeros(shape)

    def norm(prefix, n):
        arrays[f"{prefix}.gain"] = np.ones(n)
        arrays[f"{prefix}.bias"] = np.zeros(n)

    stacked = config.downsample_factor * config.input_channels
    weight("encoder.in.weight", (stacked, d), stacked)
    zeros("encoder.in.bias", (d,))
    k = config.feature_conv_kernel
    weight("encoder.conv.weight", (k, d, d), k * d)
    zeros("encoder.conv.bias", (d,))
    norm("encoder.norm", d)

    weight("quantizer.logits.weight", (d, g * v), d)
    zeros("quantizer.logits.bias", (g * v,))
    bound = 1.0 / math.sqrt(v)
    arrays["quantizer.codebook"] = rng.child("init", "codebook").uniform(
        -bound, bound, (g, v, config.codevector_dim // g)
    )
    weight("quantizer.project.weight", (config.codevector_dim, config.final_dim), config.codevector_dim)
    zeros("quantizer.project.bias", (config.final_dim,))

    weight("mask_embedding", (d,), d)

    kp = config.pos_conv_kernel
    weight("context.pos_conv.weight", (kp, d, d), kp * d)
    zeros("context.pos_conv.bias", (d,))
    for layer in range(config.num_context_layers):
        p = f"context.layers.{layer}"
        norm(f"{p}.attn_norm", d)
        weight(f"{p}.attn.qkv.weight", (d, 3 * d), d)
        zeros(f"{p}.attn.qkv.bias", (3 * d,))
        weight(f"{p}.attn.out.weight", (d, d), d)
        zeros(f"{p}.attn.out.bias", (d,))
        norm(f"{p}.ff_norm", d)
        weight(f"{p}.ff.in.weight", (d, h), d)
        zeros(f"{p}.ff.in.bias", (h,))
        weight(f"{p}.ff.out.weight", (h, d), h)
        zeros(f"{p}.ff.out.bias", (d,))
    norm("context.final_norm", d)

    weight("contrastive.project.weight", (d, config.final_dim), d)
    zeros("contrastive.project.bias", (config.final_dim,))
    weight("ctc_head.weight", (d, config.vocab_size), d)
    zeros("ctc_head.bias", (config.vocab_size,))
    return ModelParams(config, arrays)


@dataclass
class ForwardOutput:
    ctc_log_probs: DiffValue  # (B, T', vocab)
    lengths: np.ndarray  # valid T' per utterance
    mode: str
    augmented: bool = False
    context_vectors: Optional[DiffValue] = None
    quantized_targets: Optional[DiffValue] = None
    codebook_probs: Optional[DiffValue] = None  # (G, V)
    mask_indices: list = field(default_factory=list)
    # contrastive inputs: projected context and targets at masked frames, plus
    # distractor rows (indices into the masked set)
    masked_context: Optional[DiffValue] = None
    masked_targets: Optional[DiffValue] = None
    distractors: Optional[np.ndarray] = None

    def utterance_log_probs(self, i: int) -> np.ndarray:
        return self.ctc_log_probs.data[i, : self.lengths[i]]


def output_length(num_frames: int, downsample_factor: int) -> int:
    return -(-num_frames // downsample_factor)


def compute_mask(num_frames: int, mask_prob: float, span: int, rng: Rng, min_masked: int = 2) -> np.ndarray:
    """Span mask over ``num_frames`` latent frames.

    ``round_random(mask_prob * T / span)`` span starts are drawn without
    replacement from the positions where a whole span fits; spans may overlap.
    When ``mask_prob > 0`` at least ``min_masked`` frames end up masked.
    """
    mask = np.zeros(num_frames, dtype=bool)
    if mask_prob <= 0 or num_frames == 0:
        return mask
    span = min(span, num_frames)
    num_starts = num_frames - span + 1
    count = int(mask_prob * num_frames / span + rng.random())
    count = min(max(count, 1), num_starts)
    starts = rng.choice(num_starts, size=count, replace=False)
    for s in starts:
        mask[s : s + span] = True
    need = min(min_masked, num_frames) - int(mask.sum())
    if need > 0:
        free = np.flatnonzero(~mask)
        mask[rng.choice(free, size=need, replace=False)] = True
    return mask


def sample_distractors(num_masked: int, num_distractors: int, rng: Rng) -> np.ndarray:
    """Distractor indices into an utterance's masked frames.

    Row ``j`` holds ``num_distractors`` indices of OTHER masked frames, drawn
    without replacement when enough exist and with replacement otherwise.
    """
    if num_distractors == 0:
        return np.zeros((num_masked, 0), dtype=np.int64)
    if num_masked < 2:
        raise ValueError(
            f"need at least 2 masked frames to draw distractors, got {num_masked}; "
            "raise model.mask_prob or use longer sequences"
        )
    others = num_masked - 1
    if others >= num_distractors:
        keys = rng.random((num_masked, others))
        picks = np.argsort(keys, axis=1)[:, :num_distractors]
    else:
        picks = rng.integers(0, others, size=(num_masked, num_distractors))
    rows = np.arange(num_masked)[:, None]
    return picks + (picks >= rows)


def pad_batch(batch: Batch, config: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack features into (B, T_pad, C); returns features, frame lengths, T' lengths."""
    if len(batch) == 0:
        raise ValueError("forward: empty batch")
    ds = config.downsample_factor
    frames = np.array([u.features.shape[0] for u in batch.utterances])
    for u in batch.utterances:
        if u.features.ndim != 2 or u.features.shape[1] != config.input_channels:
            raise ValueError(
                f"forward: utterance {u.id} has feature shape {u.features.shape}, "
                f"expected (T, {config.input_channels})"
            )
        if u.features.shape[0] < ds:
            raise ValueError(f"forward: utterance {u.id} has {u.features.shape[0]} frames < downsample_factor {ds}")
    out_lengths = -(-frames // ds)
    t_pad = int(out_lengths.max()) * ds
    x = np.zeros((len(batch), t_pad, config.input_channels))
    for i, u in enumerate(batch.utterances):
        x[i, : u.features.shape[0]] = u.features
    return x, frames, out_lengths


def _attention(p: ModelParams, prefix: str, x: DiffValue, key_bias: np.ndarray, heads: int) -> DiffValue:
    b, t, d = x.shape
    dh = d // heads
    qkv = ad.linear(x, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"])
    qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = ad.softmax(ad.add(scores, key_bias), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    return ad.linear(ctx, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])


def encode_features(params: ModelParams, x: np.ndarray, valid: np.ndarray) -> DiffValue:
    """Feature encoder: frames (B, T_pad, C) -> latents (B, T', D)."""
    cfg = params.config
    b, t_pad, c = x.shape
    t_out = t_pad // cfg.downsample_factor
    h = ad.reshape(ad.as_value(x), (b, t_out, cfg.downsample_factor * c))
    h = ad.gelu(ad.linear(h, params["encoder.in.weight"], params["encoder.in.bias"]))
    h = ad.mul(h, valid)
    h = ad.gelu(ad.conv1d(h, params["encoder.conv.weight"], params["encoder.conv.bias"]))
    h = ad.mul(h, valid)
    return ad.layer_norm(h, params["encoder.norm.gain"], params["encoder.norm.bias"])


def context_network(params: ModelParams, z: DiffValue, valid: np.ndarray) -> DiffValue:
    cfg = params.config
    key_bias = np.where(valid[:, None, None, :, 0], 0.0, -1e9)  # (B,1,1,T')
    z = ad.mul(z, valid)
    pos = ad.gelu(ad.conv1d(z, params["context.pos_conv.weight"], params["context.pos_conv.bias"]))
    x = ad.add(z, pos)
    for layer in range(cfg.num_context_layers):
        p = f"context.layers.{layer}"
        h = ad.layer_norm(x, params[f"{p}.attn_norm.gain"], params[f"{p}.attn_norm.bias"])
        x = ad.add(x, _attention(params, f"{p}.attn", h, key_bias, cfg.num_attention_heads))
        h = ad.layer_norm(x, params[f"{p}.ff_norm.gain"], params[f"{p}.ff_norm.bias"])
        h = ad.gelu(ad.linear(h, params[f"{p}.ff.in.weight"], params[f"{p}.ff.in.bias"]))
        x = ad.add(x, ad.linear(h, params[f"{p}.ff.out.weight"], params[f"{p}.ff.out.bias"]))
    return ad.layer_norm(x, params["context.final_norm.gain"], params["context.final_norm.bias"])


def quantize(params: ModelParams, z: DiffValue, valid: np.ndarray, temperature: float, rng: Optional[Rng]):
    """Product quantization of latents.

    Returns (targets (B,T',final_dim) or None, codebook usage probabilities (G,V)).
    Targets need ``rng`` for the Gumbel noise; usage is noise-free.
    """
    cfg = params.config
    b, t, _ = z.shape
    g, v = cfg.quantizer_groups, cfg.codebook_entries
    logits = ad.reshape(ad.linear(z, params["quantizer.logits.weight"], params["quantizer.logits.bias"]), (b, t, g, v))
    probs = ad.softmax(logits, axis=-1)
    weights = valid[..., None] / valid.sum()  # (B,T',1,1)
    usage = ad.sum_(ad.mul(probs, weights), axis=(0, 1))
    if rng is None:
        return None, usage
    onehot = ad.gumbel_softmax(logits, temperature, rng, hard=cfg.hard_quantizer)
    codes = ad.matmul(ad.reshape(onehot, (b, t, g, 1, v)), params["quantizer.codebook"])
    codes = ad.reshape(codes, (b, t, cfg.codevector_dim))
    targets = ad.linear(codes, params["quantizer.project.weight"], params["quantizer.project.bias"])
    return targets, usage


def forward(
    params: ModelParams,
    batch: Batch,
    mode: str = "ctc_only",
    rng: Optional[Rng] = None,
    augment_plan: Optional[SpecAugmentPlan] = None,
    gumbel_temperature: Optional[float] = None,
    with_codebook: bool = False,
) -> ForwardOutput:
    """Run the model on a batch.

    ``ctc_only`` computes CTC log-probabilities from unmasked inputs (plus
    noise-free codebook usage when ``with_codebook``). ``with_ssl`` also masks
    latent spans, replaces them with the mask embedding before the context
    network, and quantizes the UNMASKED latents into contrastive targets.
    """
    cfg = params.config
    if mode not in ("ctc_only", "with_ssl"):
        raise ValueError(f"forward: unknown mode {mode!r}")
    if (mode == "with_ssl" or augment_plan is not None) and rng is None:
        raise ValueError("forward: an rng is required for masking/augmentation")
    if augment_plan is not None:
        aug_rng = rng.child("specaug")
        batch = batch.with_features(
            [apply_specaugment(u.features, augment_plan, aug_rng.child(i)) for i, u in enumerate(batch.utterances)]
        )
    x, _, lengths = pad_batch(batch, cfg)
    b = x.shape[0]
    t_out = x.shape[1] // cfg.downsample_factor
    valid = (np.arange(t_out)[None, :] < lengths[:, None])[..., None].astype(np.float64)

    z = encode_features(params, x, valid)
    out = ForwardOutput(ctc_log_probs=None, lengths=lengths, mode=mode, augmented=augment_plan is not None)
    temperature = gumbel_temperature if gumbel_temperature is not None else cfg.gumbel_temperature[0]

    if mode == "ctc_only":
        context_in = z
        if with_codebook:
            _, out.codebook_probs = quantize(params, z, valid, temperature, None)
    else:
        mask_rng = rng.child("mask")
        mask = np.zeros((b, t_out), dtype=bool)
        for i in range(b):
            mask[i, : lengths[i]] = compute_mask(int(lengths[i]), cfg.mask_prob, cfg.mask_span, mask_rng.child(i))
        out.mask_indices = [np.flatnonzero(mask[i]) for i in range(b)]
        context_in = ad.where(mask[..., None], params["mask_embedding"], z)
        targets, out.codebook_probs = quantize(params, z, valid, temperature, rng.child("gumbel"))
        out.quantized_targets = targets

    c = context_network(params, context_in, valid)
    out.context_vectors = c
    logits = ad.linear(c, params["ctc_head.weight"], params["ctc_head.bias"])
    out.ctc_log_probs = ad.log_softmax(logits, axis=-1)

    if mode == "with_ssl":
        flat = np.concatenate([i * t_out + idx for i, idx in enumerate(out.mask_indices)]).astype(np.int64)
        if flat.size:
            proj = ad.linear(c, params["contrastive.project.weight"], params["contrastive.project.bias"])
            proj = ad.reshape(proj, (b * t_out, cfg.final_dim))
            tq = ad.reshape(out.quantized_targets, (b * t_out, cfg.final_dim))
            out.masked_context = proj[flat]
            out.masked_targets = tq[flat]
            dist_rng = rng.child("distractors")
            rows, offset = [], 0
            for i, idx in enumerate(out.mask_indices):
                if idx.size == 0:
                    continue
                rows.append(sample_distractors(idx.size, cfg.num_distractors, dist_rng.child(i)) + offset)
                offset += idx.size
            out.distractors = np.concatenate(rows, axis=0)
    return out
