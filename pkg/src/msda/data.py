"""Synthetic domain-shifted corpora, manifest ingestion and batching.

On disk a corpus is a JSON-lines manifest plus one binary feature file per
utterance: header ``b"MSDA"``, u32 version, u32 T, u32 C, then T*C
little-endian float64 values in row-major order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .rng import Rng

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MSDA"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
DOMAINS = ("source", "target")
SPLITS = ("train", "dev", "test")


class DataError(Exception):
    """Bad corpus input (manifest rows, feature files, vocabulary)."""


class Vocabulary:
    """Word tokens; id 0 is the CTC blank, words start at 1."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if not words:
            raise DataError("vocabulary must not be empty")
        if len(set(words)) != len(words):
            raise DataError("vocabulary contains duplicate words")
        self.words = words
        self._index = {w: i + 1 for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    @property
    def size_with_blank(self) -> int:
        return len(self.words) + 1

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self._index[t] for t in tokens]
        except KeyError as exc:
            raise DataError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i - 1] for i in ids]


@dataclass
class DomainSpec:
    name: str
    vocab: list
    prototype_seed: int
    channel_transform: np.ndarray  # (C, C)
    channel_bias: np.ndarray  # (C,)
    noise_std: float = 0.1
    prototype_jitter: float = 0.2
    frames_per_token: tuple = (4, 8)
    sentence_length: tuple = (3, 8)
    num_phones: int = 12
    phones_per_word: tuple = (2, 3)

    def __post_init__(self):
        self.channel_transform = np.asarray(self.channel_transform, dtype=np.float64)
        self.channel_bias = np.asarray(self.channel_bias, dtype=np.float64)
        self.validate()

    @property
    def num_words(self) -> int:
        return len(self.vocab)

    @property
    def channels(self) -> int:
        return self.channel_transform.shape[0]

    def validate(self) -> None:
        if not self.vocab:
            raise DataError(f"domain {self.name}: vocab must not be empty")
        c = self.channel_transform.shape[0]
        if self.channel_transform.shape != (c, c) or self.channel_bias.shape != (c,):
            raise DataError(f"domain {self.name}: channel_transform must be CxC with a C-vector bias")
        for label, (lo, hi) in (
            ("frames_per_token", self.frames_per_token),
            ("sentence_length", self.sentence_length),
            ("phones_per_word", self.phones_per_word),
        ):
            if not 1 <= lo <= hi:
                raise DataError(f"domain {self.name}: {label} needs 1 <= min <= max, got {(lo, hi)}")
        if self.noise_std < 0 or self.prototype_jitter < 0:
            raise DataError(f"domain {self.name}: noise_std and prototype_jitter must be >= 0")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, C)
    domain: str
    transcript: Optional[list] = None  # word tokens
    pseudo_label: Optional[list] = None  # token ids from a teacher

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


class Batch:
    """Utterances from a single domain."""

    def __init__(self, utterances: Sequence[Utterance]):
        self.utterances = list(utterances)
        domains = {u.domain for u in self.utterances}
        if len(domains) > 1:
            raise DataError(f"a batch must not mix domains, got {sorted(domains)}")
        self.domain = domains.pop() if domains else None

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([u.num_frames for u in self.utterances])

    def with_features(self, features: Sequence[np.ndarray]) -> "Batch":
        return Batch([replace(u, features=f) for u, f in zip(self.utterances, features)])


@dataclass
class Corpus:
    vocab: Vocabulary
    utterances: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def split(self, part: str) -> "Corpus":
        if part not in SPLITS:
            raise ValueError(f"unknown split {part!r}")
        return Corpus(self.vocab, [u for u in self.utterances if split_of(u.id) == part])

    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    def total_frames(self) -> int:
        return int(sum(u.num_frames for u in self.utterances))


def split_of(utt_id: str) -> str:
    """80/10/10 train/dev/test assignment by a stable hash of the id."""
    bucket = int(hashlib.md5(utt_id.encode("utf-8")).hexdigest(), 16) % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


# --------------------------------------------------------------------------
# synthetic generation


def default_vocab(num_words: int) -> list[str]:
    return [f"w{i:02d}" for i in range(num_words)]


def rotation_scale(channels: int, angle: float, scale: float, rng: Rng) -> np.ndarray:
    """``scale * expm(angle * S)`` for a random skew-symmetric S of unit spectral norm."""
    a = rng.normal(size=(channels, channels))
    skew = a - a.T
    norm = np.linalg.norm(skew, 2)
    rot = expm(angle * skew / norm) if norm > 0 else np.eye(channels)
    return scale * rot


def _word_prototypes(spec: DomainSpec) -> tuple[np.ndarray, list]:
    rng = Rng(spec.prototype_seed).child("prototypes")
    phones = rng.child("phones").normal(size=(spec.num_phones, spec.channels))
    spell_rng = rng.child("spelling")
    spellings: list = []
    seen = set()
    lo, hi = spec.phones_per_word
    while len(spellings) < spec.num_words:
        n = int(spell_rng.integers(lo, hi + 1))
        word = tuple(int(p) for p in spell_rng.integers(0, spec.num_phones, size=n))
        if word in seen or any(word[i] == word[i + 1] for i in range(n - 1)):
            continue
        seen.add(word)
        spellings.append(word)
    return phones, spellings


def _render_word(phones: np.ndarray, spelling: tuple, frames: int, jitter: float, rng: Rng) -> np.ndarray:
    n = len(spelling)
    which = (np.arange(frames) * n) // frames
    offsets = rng.normal(0.0, jitter, size=(n, phones.shape[1])) if jitter > 0 else np.zeros((n, phones.shape[1]))
    return phones[list(spelling)][which] + offsets[which]


def _synthesize(spec: DomainSpec, words: Sequence[str], rng: Rng, prototypes) -> np.ndarray:
    phones, spellings = prototypes
    index = {w: i for i, w in enumerate(spec.vocab)}
    lo, hi = spec.frames_per_token
    parts = []
    for j, w in enumerate(words):
        frames = int(rng.child("dur", j).integers(lo, hi + 1))
        parts.append(_render_word(phones, spellings[index[w]], frames, spec.prototype_jitter, rng.child("jit", j)))
    clean = np.concatenate(parts, axis=0)
    x = clean @ spec.channel_transform.T + spec.channel_bias
    if spec.noise_std > 0:
        x = x + rng.child("noise").normal(0.0, spec.noise_std, size=x.shape)
    return x


def generate_utterance(spec: DomainSpec, words: Sequence[str], rng: Rng, utt_id: str, domain: str) -> Utterance:
    """Render one utterance of the given word sequence."""
    unknown = [w for w in words if w not in spec.vocab]
    if unknown:
        raise DataError(f"words not in domain {spec.name} vocabulary: {unknown}")
    x = _synthesize(spec, words, rng, _word_prototypes(spec))
    return Utterance(id=utt_id, features=x, domain=domain, transcript=list(words))


def generate_corpus(spec: DomainSpec, num_utterances: int, rng: Rng, domain: str = "source") -> Corpus:
    """Deterministic synthetic corpus: same (spec, rng) gives bit-identical data.

    Each word is a sequence of 2-3 "phones" drawn from a small Gaussian
    inventory fixed by ``prototype_seed``; every occurrence stretches it over a
    random duration, adds a per-phone jitter, then the domain's affine channel
    map and white noise are applied.
    """
    if num_utterances < 1:
        raise DataError("num_utterances must be >= 1")
    spec.validate()
    if domain not in DOMAINS:
        raise DataError(f"domain must be one of {DOMAINS}, got {domain!r}")
    prototypes = _word_prototypes(spec)
    utterances = []
    for n in range(num_utterances):
        r = rng.child("utt", n)
        length = int(r.child("len").integers(spec.sentence_length[0], spec.sentence_length[1] + 1))
        words = [spec.vocab[int(i)] for i in r.child("words").integers(0, spec.num_words, size=length)]
        x = _synthesize(spec, words, r, prototypes)
        utterances.append(Utterance(id=f"{spec.name}-{n:05d}", features=x, domain=domain, transcript=words))
    return Corpus(Vocabulary(spec.vocab), utterances)


@dataclass
class SyntheticShift:
    """Knobs for the default source/target pair."""

    num_words: int = 20
    channels: int = 16
    num_utterances: int = 600
    frames_per_token: tuple = (4, 8)
    sentence_length: tuple = (3, 8)
    prototype_jitter: float = 0.3
    source_noise: float = 0.1
    target_noise: float = 0.3
    shift_angle: float = 1.2
    shift_scale: float = 1.0
    shift_bias: float = 0.6
    prototype_seed: int = 1234


def make_domain_pair(shift: SyntheticShift) -> tuple[DomainSpec, DomainSpec]:
    """Source (identity channel) and target (rotation+scale+bias) domains sharing prototypes."""
    vocab = default_vocab(shift.num_words)
    c = shift.channels
    # the shift belongs to the setting, not the run: keyed by the prototype seed
    rng = Rng(shift.prototype_seed).child("domain-shift")
    common = dict(
        vocab=vocab,
        prototype_seed=shift.prototype_seed,
        prototype_jitter=shift.prototype_jitter,
        frames_per_token=tuple(shift.frames_per_token),
        sentence_length=tuple(shift.sentence_length),
    )
    source = DomainSpec(
        name="src", channel_transform=np.eye(c), channel_bias=np.zeros(c), noise_std=shift.source_noise, **common
    )
    target = DomainSpec(
        name="tgt",
        channel_transform=rotation_scale(c, shift.shift_angle, shift.shift_scale, rng.child("rotation")),
        channel_bias=rng.child("bias").normal(0.0, shift.shift_bias, size=c),
        noise_std=shift.target_noise,
        **common,
    )
    return source, target


def make_corpora(shift: SyntheticShift, seed: int) -> dict[str, Corpus]:
    source_spec, target_spec = make_domain_pair(shift)
    rng = Rng(seed).child("corpus")
    return {
        "source": generate_corpus(source_spec, shift.num_utterances, rng.child("source"), "source"),
        "target": generate_corpus(target_spec, shift.num_utterances, rng.child("target"), "target"),
    }


# --------------------------------------------------------------------------
# feature files and manifests


def write_features(path: Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    t, c = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, c))
        fh.write(features.tobytes(order="C"))


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, t, c = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 8 * t * c:
        raise DataError(f"{path}: expected {t}x{c} float64 values, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(t, c).astype(np.float64)


def write_corpus(corpus: Corpus, directory: Path) -> Path:
    """Write feature files plus ``manifest.jsonl``; returns the manifest path."""
    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            rel = f"feats/{u.id}.feat"
            write_features(directory / rel, u.features)
            row = {"id": u.id, "features_path": rel, "num_frames": u.num_frames, "domain": u.domain}
            if u.transcript is not None:
                row["transcript"] = " ".join(u.transcript)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (directory / "vocab.json").write_text(json.dumps(corpus.vocab.words) + "\n", encoding="utf-8")
    return manifest


def load_manifest(
    path,
    vocab: Optional[Vocabulary] = None,
    input_channels: Optional[int] = None,
    strict: bool = True,
) -> Corpus:
    """Read a JSON-lines manifest.

    ``vocab`` defaults to ``vocab.json`` beside the manifest. With
    ``strict=False`` bad rows are skipped and reported in ``corpus.errors``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    if vocab is None:
        vocab_file = path.parent / "vocab.json"
        if not vocab_file.exists():
            raise DataError(f"{path}: no vocabulary given and {vocab_file} is missing")
        vocab = Vocabulary(json.loads(vocab_file.read_text(encoding="utf-8")))
    corpus = Corpus(vocab)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                corpus.utterances.append(_parse_row(path, lineno, line, vocab, input_channels))
            except DataError as exc:
                if strict:
                    raise
                corpus.errors.append(str(exc))
                log.warning("skipping manifest row: %s", exc)
    if not corpus.utterances and not corpus.errors:
        log.warning("manifest %s is empty", path)
    return corpus


def _parse_row(path: Path, lineno: int, line: str, vocab: Vocabulary, channels: Optional[int]) -> Utterance:
    where = f"{path}:{lineno}"
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
    if not isinstance(row, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("id", "features_path", "num_frames", "domain"):
        if key not in row:
            raise DataError(f"{where}: missing field {key!r}")
    if row["domain"] not in DOMAINS:
        raise DataError(f"{where}: domain must be one of {DOMAINS}, got {row['domain']!r}")
    feat_path = Path(row["features_path"])
    if not feat_path.is_absolute():
        feat_path = path.parent / feat_path
    if not feat_path.exists():
        raise DataError(f"{where}: feature file {feat_path} does not exist")
    features = read_features(feat_path)
    if features.shape[0] != int(row["num_frames"]):
        raise DataError(f"{feat_path}: num_frames {row['num_frames']} but file holds {features.shape[0]} frames")
    if channels is not None and features.shape[1] != channels:
        raise DataError(f"{feat_path}: {features.shape[1]} channels, expected {channels}")
    transcript = None
    if row.get("transcript") is not None:
        transcript = row["transcript"].split()
        unknown = [w for w in transcript if w not in vocab]
        if unknown:
            raise DataError(f"{where}: transcript words not in vocabulary: {unknown}")
    return Utterance(id=str(row["id"]), features=features, domain=row["domain"], transcript=transcript)


# --------------------------------------------------------------------------
# selection and batching


def subsample(corpus: Corpus, fraction: float, rng: Rng) -> Corpus:
    """Uniform subset without replacement of size round(fraction * N)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(corpus)
    size = int(round(fraction * n))
    if size == 0:
        raise DataError(f"subsample({fraction}) of {n} utterances is empty")
    if size == n:
        return Corpus(corpus.vocab, list(corpus.utterances))
    keep = np.sort(rng.choice(n, size=size, replace=False))
    return Corpus(corpus.vocab, [corpus.utterances[i] for i in keep])


def make_batches(utterances: Sequence[Utterance], batch_size: int) -> list[Batch]:
    return [Batch(utterances[i : i + batch_size]) for i in range(0, len(utterances), batch_size)]


def epoch_batch(utterances: Sequence[Utterance], batch_size: int, index: int, rng: Rng) -> Batch:
    """The ``index``-th batch of an endless shuffled stream.

    Pass ``k`` over the data is shuffled by ``rng.child(k)``, so the batch at
    any position is a pure function of (rng, index).
    """
    n = len(utterances)
    if n == 0:
        raise DataError("cannot batch an empty corpus")
    per_pass = -(-n // batch_size)
    k, j = divmod(index, per_pass)
    order = rng.child(k).permutation(n)
    chosen = order[j * batch_size : (j + 1) * batch_size]
    return Batch([utterances[i] for i in chosen])
