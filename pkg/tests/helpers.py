"""Small models, batches and corpora for fast unit tests."""

from __future__ import annotations

import numpy as np

from msda.data import Batch, SyntheticShift, Utterance, make_corpora
from msda.model import ModelConfig, init_params
from msda.pipeline import Splits, Stage1Config, Stage2Config
from msda.rng import Rng

TINY_SHIFT = dict(num_words=5, channels=4, num_utterances=50, sentence_length=(2, 3), frames_per_token=(3, 4))


def tiny_config(**overrides) -> ModelConfig:
    base = dict(input_channels=4, encoder_dim=8, num_context_layers=1, context_hidden_dim=8, num_attention_heads=2,
                quantizer_groups=2, codebook_entries=4, codevector_dim=4, final_dim=4, num_distractors=3,
                vocab_size=6, pos_conv_kernel=3)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_params(seed=0, **overrides):
    return init_params(tiny_config(**overrides), Rng(seed).child("init"))


def random_batch(rng: np.random.Generator, domain="source", n=2, channels=4, vocab=6, frames=(8, 12), labels=True):
    utts = []
    for i in range(n):
        t = int(rng.integers(frames[0], frames[1] + 1))
        words = [f"w{int(k)}" for k in rng.integers(1, vocab, size=2)] if labels else None
        utts.append(Utterance(id=f"{domain}-{i}", features=rng.normal(size=(t, channels)), domain=domain,
                              transcript=words))
    return Batch(utts)


def token_ids(batch: Batch) -> list:
    return [[int(w[1:]) for w in u.transcript] for u in batch.utterances]


def tiny_splits(seed=0) -> Splits:
    c = make_corpora(SyntheticShift(**TINY_SHIFT), seed)
    return Splits.from_corpora(c["source"], c["target"])


def tiny_model_for_data(**overrides) -> ModelConfig:
    return tiny_config(vocab_size=TINY_SHIFT["num_words"] + 1, **overrides)


def short_stage1(**kw) -> Stage1Config:
    base = dict(max_epochs=1, max_steps=3, batch_size=8)
    base.update(kw)
    return Stage1Config(**base)


def short_stage2(**kw) -> Stage2Config:
    base = dict(max_epochs=1, max_steps=3, batch_size=8)
    base.update(kw)
    return Stage2Config(**base)
