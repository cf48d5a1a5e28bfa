#!/usr/bin/env python3
"""
Conversation corpus data model, file codec and generators.

Corpus files are newline-delimited JSON, one file per split:

    {"format": "hcan-corpus-v1", "feature_dim": 4, "labels": ["joy", ...], "split": "train"}
    {"id": "c1", "speakers": [0, 1], "labels": [0, 2], "features": [[...], [...]]}

Features are held as float32; writing goes through the float64 repr of each
float32 value, so a write/read round trip is bit-exact.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    ConfigError,
    CorpusConsistencyError,
    CorpusParseError,
    CorpusSchemaError,
    DataError,
    TrainingDataError,
)

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "hcan-corpus-v1"
SPLITS = ("train", "val", "test")
SPLIT_SUFFIX = ".jsonl"

EMOTION_NAMES = ("neutral", "joy", "sadness", "anger", "surprise", "fear", "disgust")


@dataclass(frozen=True, eq=False)
class Utterance:
    speaker_id: int
    features: np.ndarray
    label: Optional[int] = None


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Conversation:
    """Ordered utterances of one dialogue, stored column-wise."""

    id: str
    speakers: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    @classmethod
    def create(cls, conv_id: str, speakers: Sequence[int], features: Any,
               labels: Optional[Sequence[int]] = None) -> "Conversation":
        return cls(
            id=str(conv_id),
            speakers=_frozen(np.array(speakers, dtype=np.int64)),
            features=_frozen(np.array(features, dtype=np.float32)),
            labels=None if labels is None else _frozen(np.array(labels, dtype=np.int64)),
        )

    @classmethod
    def from_utterances(cls, conv_id: str, utterances: Sequence[Utterance]) -> "Conversation":
        labels = [u.label for u in utterances]
        return cls.create(
            conv_id,
            [u.speaker_id for u in utterances],
            np.stack([np.asarray(u.features, dtype=np.float32) for u in utterances]),
            None if any(label is None for label in labels) else labels,
        )

    def __len__(self) -> int:
        return int(self.speakers.shape[0])

    @property
    def utterances(self) -> List[Utterance]:
        return [
            Utterance(
                speaker_id=int(self.speakers[i]),
                features=self.features[i],
                label=None if self.labels is None else int(self.labels[i]),
            )
            for i in range(len(self))
        ]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    @property
    def num_speakers(self) -> int:
        return len(set(self.speakers.tolist()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Conversation):
            return NotImplemented
        if self.id != other.id or (self.labels is None) != (other.labels is None):
            return False
        same_labels = self.labels is None or np.array_equal(self.labels, other.labels)
        return (
            same_labels
            and np.array_equal(self.speakers, other.speakers)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Corpus:
    label_set: Tuple[str, ...]
    feature_dim: int
    splits: Mapping[str, Tuple[Conversation, ...]]

    def split(self, name: str) -> Tuple[Conversation, ...]:
        if name not in SPLITS:
            raise DataError(f"unknown split '{name}' (expected one of {', '.join(SPLITS)})")
        return tuple(self.splits.get(name, ()))

    @property
    def num_labels(self) -> int:
        return len(self.label_set)

    @property
    def num_train(self) -> int:
        return len(self.split("train"))

    def require_labels(self, name: str) -> None:
        for conv in self.split(name):
            if not conv.is_labeled:
                raise TrainingDataError(f"labels required: conversation '{conv.id}' in split '{name}' is unlabeled")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            tuple(self.label_set) == tuple(other.label_set)
            and self.feature_dim == other.feature_dim
            and all(self.split(s) == other.split(s) for s in SPLITS)
        )


def build_corpus(label_set: Sequence[str], feature_dim: int,
                 splits: Mapping[str, Sequence[Conversation]]) -> Corpus:
    """Assemble and validate a corpus."""
    unknown = set(splits) - set(SPLITS)
    if unknown:
        raise CorpusSchemaError(f"unknown split names: {sorted(unknown)}")
    corpus = Corpus(
        label_set=tuple(label_set),
        feature_dim=int(feature_dim),
        splits={name: tuple(splits.get(name, ())) for name in SPLITS},
    )
    validate_corpus(corpus)
    return corpus


def _check_conversation(conv: Conversation, feature_dim: int, num_labels: int, where: str):
    n = len(conv)
    if n < 1:
        raise CorpusConsistencyError(f"{where}: conversation '{conv.id}' has no utterances")
    if conv.features.ndim != 2 or conv.features.shape[0] != n:
        raise CorpusConsistencyError(
            f"{where}: conversation '{conv.id}' has {n} speakers but {conv.features.shape[0]} feature rows"
        )
    if conv.features.shape[1] != feature_dim:
        raise CorpusConsistencyError(
            f"{where}: conversation '{conv.id}' feature length {conv.features.shape[1]} != feature_dim {feature_dim}"
        )
    if np.any(conv.speakers < 0):
        raise CorpusConsistencyError(f"{where}: conversation '{conv.id}' has a negative speaker id")
    if not np.all(np.isfinite(conv.features)):
        raise CorpusConsistencyError(f"{where}: conversation '{conv.id}' has non-finite features")
    if conv.labels is not None:
        if conv.labels.shape[0] != n:
            raise CorpusConsistencyError(
                f"{where}: conversation '{conv.id}' has {n} speakers but {conv.labels.shape[0]} labels"
            )
        if np.any(conv.labels < 0) or np.any(conv.labels >= num_labels):
            raise CorpusConsistencyError(
                f"{where}: conversation '{conv.id}' has a label outside [0, {num_labels})"
            )


def validate_corpus(corpus: Corpus) -> None:
    if corpus.feature_dim < 1:
        raise CorpusSchemaError(f"feature_dim must be positive, got {corpus.feature_dim}")
    if not corpus.label_set:
        raise CorpusSchemaError("label set is empty")
    for name in SPLITS:
        seen = set()
        for conv in corpus.split(name):
            _check_conversation(conv, corpus.feature_dim, corpus.num_labels, f"split '{name}'")
            if conv.id in seen:
                raise CorpusConsistencyError(f"split '{name}': duplicate conversation id '{conv.id}'")
            seen.add(conv.id)


# File codec

@dataclass(frozen=True)
class SplitHeader:
    feature_dim: int
    labels: Tuple[str, ...]
    split: str

    def to_dict(self) -> Dict[str, Any]:
        return {"format": CORPUS_FORMAT, "feature_dim": self.feature_dim, "labels": list(self.labels), "split": self.split}


def _require(obj: Dict[str, Any], key: str, kinds, where: str):
    if key not in obj:
        raise CorpusSchemaError(f"{where}: missing field '{key}'")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise CorpusSchemaError(f"{where}: field '{key}' has the wrong type ({type(value).__name__})")
    return value


def _int_list(values: Any, key: str, where: str) -> List[int]:
    if not isinstance(values, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in values):
        raise CorpusSchemaError(f"{where}: field '{key}' must be a list of integers")
    return values


def _parse_header(line: str, where: str) -> SplitHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"{where}: malformed header line ({e.msg})") from e
    if not isinstance(obj, dict):
        raise CorpusParseError(f"{where}: header must be a JSON object")
    fmt = _require(obj, "format", str, where)
    if fmt != CORPUS_FORMAT:
        raise CorpusSchemaError(f"{where}: unsupported format '{fmt}' (expected '{CORPUS_FORMAT}')")
    feature_dim = _require(obj, "feature_dim", int, where)
    labels = _require(obj, "labels", list, where)
    split = _require(obj, "split", str, where)
    if feature_dim < 1:
        raise CorpusSchemaError(f"{where}: feature_dim must be positive")
    if not labels or any(not isinstance(label, str) for label in labels):
        raise CorpusSchemaError(f"{where}: labels must be a non-empty list of strings")
    if split not in SPLITS:
        raise CorpusSchemaError(f"{where}: split must be one of {', '.join(SPLITS)}, got '{split}'")
    return SplitHeader(feature_dim=feature_dim, labels=tuple(labels), split=split)


def _parse_conversation(line: str, header: SplitHeader, where: str) -> Conversation:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"{where}: malformed line ({e.msg})") from e
    if not isinstance(obj, dict):
        raise CorpusParseError(f"{where}: conversation must be a JSON object")
    conv_id = _require(obj, "id", str, where)
    where = f"{where} (conversation '{conv_id}')"
    speakers = _int_list(_require(obj, "speakers", list, where), "speakers", where)
    if "labels" not in obj:
        raise CorpusSchemaError(f"{where}: missing field 'labels'")
    labels = obj["labels"]
    if labels is not None:
        labels = _int_list(labels, "labels", where)
    rows = _require(obj, "features", list, where)
    if len(rows) != len(speakers):
        raise CorpusConsistencyError(
            f"{where}: speakers has length {len(speakers)} but features has length {len(rows)}"
        )
    if labels is not None and len(labels) != len(speakers):
        raise CorpusConsistencyError(
            f"{where}: speakers has length {len(speakers)} but labels has length {len(labels)}"
        )
    for k, feat in enumerate(rows):
        if not isinstance(feat, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in feat):
            raise CorpusSchemaError(f"{where}: features[{k}] must be a list of numbers")
        if len(feat) != header.feature_dim:
            raise CorpusConsistencyError(
                f"{where}: features[{k}] has length {len(feat)} but feature_dim is {header.feature_dim}"
            )
    features = np.array(rows, dtype=np.float64).reshape(len(rows), header.feature_dim).astype(np.float32)
    conv = Conversation.create(conv_id, speakers, features, labels)
    _check_conversation(conv, header.feature_dim, len(header.labels), where)
    return conv


def load_split(path: Union[str, Path]) -> Tuple[SplitHeader, Tuple[Conversation, ...]]:
    """Parse one split file; raises on the first violation with its line number."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    header: Optional[SplitHeader] = None
    conversations: List[Conversation] = []
    seen = set()
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path.name}:{lineno}"
            if header is None:
                header = _parse_header(line, where)
                continue
            conv = _parse_conversation(line, header, where)
            if conv.id in seen:
                raise CorpusConsistencyError(f"{where}: duplicate conversation id '{conv.id}'")
            seen.add(conv.id)
            conversations.append(conv)
    if header is None:
        raise CorpusParseError(f"{path.name}: file is empty (no header line)")
    return header, tuple(conversations)


def load_corpus(path: Union[str, Path]) -> Corpus:
    """
    Load a corpus from a directory of split files or from a single split file.

    Args:
        path: Directory holding ``*.jsonl`` split files, or one split file

    Returns:
        Validated Corpus (splits without a file are empty)
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob(f"*{SPLIT_SUFFIX}"))
        if not files:
            raise DataError(f"no corpus files (*{SPLIT_SUFFIX}) in {path}")
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"corpus path not found: {path}")

    first: Optional[SplitHeader] = None
    splits: Dict[str, Tuple[Conversation, ...]] = {}
    for file in files:
        header, conversations = load_split(file)
        if first is None:
            first = header
        elif header.feature_dim != first.feature_dim or header.labels != first.labels:
            raise CorpusConsistencyError(f"{file.name}: header disagrees with {files[0].name} on feature_dim or labels")
        if header.split in splits:
            raise CorpusConsistencyError(f"{file.name}: split '{header.split}' appears in more than one file")
        splits[header.split] = conversations

    corpus = build_corpus(first.labels, first.feature_dim, splits)
    logger.info(
        f"Loaded corpus from {path}: "
        + ", ".join(f"{name}={len(corpus.split(name))}" for name in SPLITS)
        + f" conversations, feature_dim={corpus.feature_dim}, {corpus.num_labels} labels"
    )
    return corpus


def _conversation_line(conv: Conversation) -> str:
    return json.dumps(
        {
            "id": conv.id,
            "speakers": conv.speakers.tolist(),
            "labels": None if conv.labels is None else conv.labels.tolist(),
            "features": conv.features.astype(np.float64).tolist(),
        },
        separators=(",", ":"),
    )


def write_split(conversations: Sequence[Conversation], header: SplitHeader, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header.to_dict(), separators=(",", ":")) + "\n")
        for conv in conversations:
            f.write(_conversation_line(conv) + "\n")
    return path


def write_corpus(corpus: Corpus, out_dir: Union[str, Path]) -> List[Path]:
    """Write ``train.jsonl``, ``val.jsonl`` and ``test.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}") from e
    written = []
    for name in SPLITS:
        header = SplitHeader(feature_dim=corpus.feature_dim, labels=tuple(corpus.label_set), split=name)
        written.append(write_split(corpus.split(name), header, out_dir / f"{name}{SPLIT_SUFFIX}"))
    logger.info(f"Wrote corpus to {out_dir}")
    return written


# Statistics

@dataclass
class SplitStats:
    dialogues: int = 0
    utterances: int = 0
    labeled_utterances: int = 0
    label_histogram: Dict[str, int] = field(default_factory=dict)
    speaker_counts: Dict[int, int] = field(default_factory=dict)
    single_emotion_dialogues: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dialogues": self.dialogues,
            "utterances": self.utterances,
            "labeled_utterances": self.labeled_utterances,
            "label_histogram": dict(self.label_histogram),
            "speaker_counts": {str(k): v for k, v in sorted(self.speaker_counts.items())},
            "single_emotion_dialogues": self.single_emotion_dialogues,
        }


@dataclass
class CorpusStats:
    label_set: Tuple[str, ...]
    feature_dim: int
    splits: Dict[str, SplitStats]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": "hcan-stats-v1",
            "feature_dim": self.feature_dim,
            "labels": list(self.label_set),
            "splits": {name: s.to_dict() for name, s in self.splits.items()},
        }


def corpus_stats(corpus: Corpus) -> CorpusStats:
    splits = {}
    for name in SPLITS:
        stats = SplitStats(label_histogram={label: 0 for label in corpus.label_set})
        speaker_counts: Counter = Counter()
        for conv in corpus.split(name):
            stats.dialogues += 1
            stats.utterances += len(conv)
            speaker_counts[conv.num_speakers] += 1
            if conv.labels is not None:
                stats.labeled_utterances += len(conv)
                for label in conv.labels.tolist():
                    stats.label_histogram[corpus.label_set[label]] += 1
                if len(set(conv.labels.tolist())) == 1:
                    stats.single_emotion_dialogues += 1
        stats.speaker_counts = dict(speaker_counts)
        splits[name] = stats
    return CorpusStats(label_set=tuple(corpus.label_set), feature_dim=corpus.feature_dim, splits=splits)


# Synthetic corpora

@dataclass
class SyntheticSpec:
    num_emotions: int = 3
    num_speakers: int = 2
    feature_dim: int = 16
    conversations_per_split: Tuple[int, int, int] = (200, 50, 50)
    length_range: Tuple[int, int] = (6, 12)
    cluster_separation: float = 3.0
    speaker_offset_scale: float = 1.0
    emotion_transition_stickiness: float = 0.8
    seed: int = 7

    def validate(self) -> None:
        for key in ("num_emotions", "num_speakers", "feature_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if len(self.conversations_per_split) != len(SPLITS) or any(c < 0 for c in self.conversations_per_split):
            raise ConfigError(f"conversations_per_split needs {len(SPLITS)} non-negative counts, got {self.conversations_per_split}")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"length_range must satisfy 1 <= min <= max, got {self.length_range}")
        if self.cluster_separation < 0 or self.speaker_offset_scale < 0:
            raise ConfigError("cluster_separation and speaker_offset_scale must be non-negative")
        if not 0.0 <= self.emotion_transition_stickiness <= 1.0:
            raise ConfigError(f"emotion_transition_stickiness must lie in [0, 1], got {self.emotion_transition_stickiness}")


def emotion_names(count: int) -> Tuple[str, ...]:
    return tuple(EMOTION_NAMES[k] if k < len(EMOTION_NAMES) else f"emotion_{k}" for k in range(count))


def _sticky_chain(rng: np.random.Generator, length: int, num_states: int, stickiness: float) -> np.ndarray:
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.integers(num_states)
    for t in range(1, length):
        prev = states[t - 1]
        if num_states == 1 or rng.random() < stickiness:
            states[t] = prev
        else:
            k = rng.integers(num_states - 1)
            states[t] = k if k < prev else k + 1
    return states


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """
    Build a corpus whose emotions follow a sticky Markov chain per conversation.

    Each feature vector is the emotion's cluster centre plus the speaker's
    offset plus unit Gaussian noise; the whole corpus is a pure function of ``spec``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    directions = rng.standard_normal((spec.num_emotions, spec.feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * spec.cluster_separation
    offsets = rng.standard_normal((spec.num_speakers, spec.feature_dim)) * spec.speaker_offset_scale

    lo, hi = spec.length_range
    splits: Dict[str, List[Conversation]] = {}
    for name, count in zip(SPLITS, spec.conversations_per_split):
        conversations = []
        for c in range(count):
            n = int(rng.integers(lo, hi + 1))
            speakers = rng.integers(0, spec.num_speakers, size=n)
            emotions = _sticky_chain(rng, n, spec.num_emotions, spec.emotion_transition_stickiness)
            noise = rng.standard_normal((n, spec.feature_dim))
            features = centers[emotions] + offsets[speakers] + noise
            conversations.append(Conversation.create(f"{name}_{c:04d}", speakers, features, emotions))
        splits[name] = conversations

    corpus = build_corpus(emotion_names(spec.num_emotions), spec.feature_dim, splits)
    logger.info(f"Generated synthetic corpus: {spec.conversations_per_split} conversations, seed {spec.seed}")
    return corpus


# Benchmark layouts (structure only)

@dataclass(frozen=True)
class DatasetLayout:
    name: str
    labels: Tuple[str, ...]
    dialogues: Tuple[int, int, int]
    utterances: Tuple[int, int, int]
    speakers_per_dialogue: Tuple[int, int]


DATASET_LAYOUTS: Dict[str, DatasetLayout] = {
    "iemocap": DatasetLayout(
        name="iemocap",
        labels=("happy", "sad", "neutral", "angry", "excited", "frustrated"),
        dialogues=(120, 0, 31),
        utterances=(5810, 0, 1623),
        speakers_per_dialogue=(2, 2),
    ),
    "meld": DatasetLayout(
        name="meld",
        labels=("neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger"),
        dialogues=(1039, 114, 280),
        utterances=(9989, 1109, 2610),
        speakers_per_dialogue=(2, 3),
    ),
    "emorynlp": DatasetLayout(
        name="emorynlp",
        labels=("joyful", "mad", "peaceful", "neutral", "sad", "powerful", "scared"),
        dialogues=(659, 89, 79),
        utterances=(7551, 954, 984),
        speakers_per_dialogue=(2, 3),
    ),
}


def generate_layout(name: str, feature_dim: int = 4, seed: int = 0) -> Corpus:
    """Random-content corpus with exactly the benchmark's split and class counts."""
    layout = DATASET_LAYOUTS.get(name.lower())
    if layout is None:
        raise ConfigError(f"unknown dataset layout '{name}' (expected one of {', '.join(DATASET_LAYOUTS)})")
    if feature_dim < 1:
        raise ConfigError(f"feature_dim must be positive, got {feature_dim}")
    rng = np.random.default_rng(seed)
    lo, hi = layout.speakers_per_dialogue
    splits: Dict[str, List[Conversation]] = {}
    for split, dialogues, utterances in zip(SPLITS, layout.dialogues, layout.utterances):
        conversations = []
        if dialogues:
            base, extra = divmod(utterances, dialogues)
            for c in range(dialogues):
                n = base + (1 if c < extra else 0)
                num_speakers = int(rng.integers(lo, hi + 1))
                speakers = rng.integers(0, num_speakers, size=n)
                labels = rng.integers(0, len(layout.labels), size=n)
                features = rng.standard_normal((n, feature_dim))
                conversations.append(Conversation.create(f"{layout.name}_{split}_{c:04d}", speakers, features, labels))
        splits[split] = conversations
    return build_corpus(layout.labels, feature_dim, splits)
