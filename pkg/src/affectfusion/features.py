"""Deterministic feature preparation for the three modalities.

Text: two opinion lexicons give eight relative frequencies (positive and
negative, utterance and whole video, per lexicon) plus utterance and video
word counts.  Visual and audio frame sequences are resampled to a fixed
length, padding short sequences by repeating their last frame.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptySequenceError, ShapeError

TEXT_DIM = 10
DEFAULT_FRAMES = 20

_PUNCT = string.punctuation + "‘’“”…"


@dataclass(frozen=True)
class Lexicon:
    name: str
    positive: frozenset[str]
    negative: frozenset[str]

    def __post_init__(self):
        if not self.positive or not self.negative:
            raise ConfigError(f"lexicon {self.name!r}: polarity lists must be non-empty")
        overlap = self.positive & self.negative
        if overlap:
            raise ConfigError(
                f"lexicon {self.name!r}: words listed as both positive and negative: "
                f"{sorted(overlap)[:5]}"
            )

    @classmethod
    def from_files(cls, name: str, positive_path, negative_path) -> "Lexicon":
        return cls(name, _read_words(positive_path), _read_words(negative_path))


def _read_words(path) -> frozenset[str]:
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        w = line.strip().lower()
        if w and not w.startswith(";"):
            words.add(w)
    return frozenset(words)


_BUNDLED = Path(__file__).parent / "lexicons"


def bundled_lexicon_paths() -> dict[str, Path]:
    return {
        "pos1": _BUNDLED / "lexicon1_positive.txt",
        "neg1": _BUNDLED / "lexicon1_negative.txt",
        "pos2": _BUNDLED / "lexicon2_positive.txt",
        "neg2": _BUNDLED / "lexicon2_negative.txt",
    }


def bundled_lexicons() -> tuple[Lexicon, Lexicon]:
    p = bundled_lexicon_paths()
    return (
        Lexicon.from_files("lexicon1", p["pos1"], p["neg1"]),
        Lexicon.from_files("lexicon2", p["pos2"], p["neg2"]),
    )


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


@dataclass(frozen=True)
class Transcript:
    utterance_id: str
    raw: str
    start_time: float = 0.0
    tokens: tuple[str, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.tokens is None:
            object.__setattr__(self, "tokens", tuple(tokenize(self.raw)))

    @property
    def empty(self) -> bool:
        return not self.raw.strip()


def lexicon_counts(tokens: Sequence[str], lex: Lexicon) -> tuple[int, int]:
    pos = sum(1 for t in tokens if t in lex.positive)
    neg = sum(1 for t in tokens if t in lex.negative)
    return pos, neg


def resolve_missing_transcript(utt: Transcript, video_utts: Sequence[Transcript]) -> Transcript:
    """Borrow the text of the temporally nearest non-empty utterance.

    Ties go to the earlier utterance.  The returned copy keeps ``utt``'s id
    and start time.  If nothing in the video has text, ``utt`` comes back as is.
    """
    if not utt.empty:
        return utt
    best = None
    best_key = None
    for other in video_utts:
        if other.utterance_id == utt.utterance_id or other.empty:
            continue
        key = (abs(other.start_time - utt.start_time), other.start_time)
        if best_key is None or key < best_key:
            best, best_key = other, key
    if best is None:
        return utt
    return replace(utt, raw=best.raw, tokens=best.tokens)


def _freq(count: int, total: int) -> float:
    return count / total if total > 0 else 0.0


def text_features(
    utt: Transcript,
    video_utts: Sequence[Transcript],
    lexicons: Sequence[Lexicon],
) -> np.ndarray:
    """Ten-dim lexicon feature for one utterance.

    Layout: [L1 pos, L1 neg, L2 pos, L2 neg] utterance frequencies, the same
    four over the whole video, utterance word count, video word count.
    ``utt`` should already be resolved; video totals use the original
    transcripts so borrowed text is not counted twice.
    """
    if len(lexicons) != 2:
        raise ConfigError(f"exactly two lexicons required, got {len(lexicons)}")
    utt_tokens = list(utt.tokens)
    video_tokens = [t for u in video_utts for t in u.tokens]
    feats = []
    for tokens in (utt_tokens, video_tokens):
        for lex in lexicons:
            pos, neg = lexicon_counts(tokens, lex)
            feats += [_freq(pos, len(tokens)), _freq(neg, len(tokens))]
    feats += [float(len(utt_tokens)), float(len(video_tokens))]
    return np.array(feats, dtype=np.float64)


def video_text_features(
    video_utts: Sequence[Transcript], lexicons: Sequence[Lexicon]
) -> dict[str, np.ndarray]:
    """Text features for every utterance of one video, fallback applied."""
    ordered = sorted(video_utts, key=lambda u: (u.start_time, u.utterance_id))
    return {
        u.utterance_id: text_features(resolve_missing_transcript(u, ordered), ordered, lexicons)
        for u in ordered
    }


def _resample_indices(n: int, target: int) -> np.ndarray:
    if n >= target:
        return (np.arange(target) * n) // target
    return np.concatenate([np.arange(n), np.full(target - n, n - 1)])


def sample_frames(frames, target: int = DEFAULT_FRAMES) -> np.ndarray:
    """Pick ``target`` rows at floor(k*N/target); pad short inputs with the last row."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"frame sequence must be N x D, got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise EmptySequenceError("frame sequence has no rows")
    if target < 1:
        raise ConfigError(f"target length must be >= 1, got {target}")
    return frames[_resample_indices(frames.shape[0], target)]


def audio_frame_prep(frames, target: int = DEFAULT_FRAMES) -> np.ndarray:
    """Audio frames (one row per 0.5 s window) to a fixed-length sequence."""
    return sample_frames(frames, target)
