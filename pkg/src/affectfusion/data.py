"""Manifests, feature files, checkpoints and the synthetic dataset generator.

On-disk layout (all paths in the manifest are relative to its directory)::

    manifest.csv                 one row per utterance
    features/<id>.visual.csv     one row per video frame, Dv columns
    features/<id>.audio.csv      one row, Da columns
    features/<id>.audio_frames.csv   one row per 0.5 s window (LSTM ablation)
    transcripts/<id>.txt         UTF-8 text, possibly empty
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import features as feat
from .errors import ChecksumError, DataError, SchemaVersionError
from .features import Lexicon, Transcript
from .models import FeatureBundle, LateFusionCombiner, Model, ModelSpec

MANIFEST_COLUMNS = ("utterance_id", "video_id", "start_time", "split", "arousal", "valence",
                    "transcript_path", "visual_path", "audio_path")
SPLITS = ("train", "val", "test")
AUDIO_FRAMES_SUFFIX = ".audio_frames.csv"

CHECKPOINT_SCHEMA = "affectfusion-checkpoint"
COMBINER_SCHEMA = "affectfusion-late-fusion"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    video_id: str
    start_time: float
    split: str
    arousal: float
    valence: float
    transcript_path: Path
    visual_path: Path
    audio_path: Path

    def label(self, target: str) -> float:
        return self.arousal if target == "arousal" else self.valence

    @property
    def audio_frames_path(self) -> Path:
        name = self.audio_path.name
        stem = name[: -len(".audio.csv")] if name.endswith(".audio.csv") else self.audio_path.stem
        return self.audio_path.with_name(stem + AUDIO_FRAMES_SUFFIX)


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    path: Optional[Path] = None

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(r.split for r in self.records)
        return {s: c.get(s, 0) for s in SPLITS}

    def split(self, name: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.split == name]

    def video(self, video_id: str) -> list[UtteranceRecord]:
        return sorted((r for r in self.records if r.video_id == video_id),
                      key=lambda r: (r.start_time, r.utterance_id))


def _parse_float(value: str, column: str, line: int) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise DataError(f"line {line}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(x):
        raise DataError(f"line {line}: column {column!r} is not finite")
    return x


def load_manifest(path) -> Manifest:
    """Read and validate a manifest CSV.

    Arousal must lie in [0, 1] and valence in [-1, 1]; ids must be unique and
    every video must sit in a single split.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    video_split: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, "
                            f"got {reader.fieldnames}")
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in MANIFEST_COLUMNS):
                raise DataError(f"line {line}: expected {len(MANIFEST_COLUMNS)} fields")
            uid = row["utterance_id"].strip()
            if not uid:
                raise DataError(f"line {line}: empty utterance_id")
            if uid in seen:
                raise DataError(f"line {line}: duplicate utterance_id {uid!r}")
            seen.add(uid)
            split = row["split"].strip()
            if split not in SPLITS:
                raise DataError(f"line {line}: split {split!r} not one of {SPLITS}")
            arousal = _parse_float(row["arousal"], "arousal", line)
            valence = _parse_float(row["valence"], "valence", line)
            if not 0.0 <= arousal <= 1.0:
                raise DataError(f"line {line}: arousal {arousal} outside the label range [0, 1]")
            if not -1.0 <= valence <= 1.0:
                raise DataError(f"line {line}: valence {valence} outside the label range [-1, 1]")
            vid = row["video_id"].strip()
            if video_split.setdefault(vid, split) != split:
                raise DataError(f"line {line}: video {vid!r} appears in splits "
                                f"{video_split[vid]!r} and {split!r}")
            records.append(UtteranceRecord(
                utterance_id=uid,
                video_id=vid,
                start_time=_parse_float(row["start_time"], "start_time", line),
                split=split,
                arousal=arousal,
                valence=valence,
                transcript_path=base / row["transcript_path"].strip(),
                visual_path=base / row["visual_path"].strip(),
                audio_path=base / row["audio_path"].strip(),
            ))
    return Manifest(records, path)


def write_manifest(path, rows: Iterable[Mapping[str, object]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------- feature files

def read_matrix(path, expected_cols: Optional[int] = None, what: str = "feature") -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {what} file {path}: {exc.strerror}") from exc
    rows = []
    for k, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise DataError(f"{path}: row {k} is not numeric") from None
    if not rows:
        raise DataError(f"{path}: {what} file has no rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: rows have different widths {sorted(widths)}")
    m = np.array(rows, dtype=np.float64)
    if expected_cols is not None and m.shape[1] != expected_cols:
        raise DataError(f"{path}: {what} width is {m.shape[1]}, expected {expected_cols}")
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}: non-finite values")
    return m


def format_real(x: float) -> str:
    return format(float(x), ".17g")


def write_matrix(path, m: np.ndarray) -> None:
    m = np.atleast_2d(m)
    lines = [",".join(format_real(v) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_transcript(path) -> str:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise OSError(f"cannot read transcript {path}: {exc.strerror}") from exc


class FeatureLoader:
    """Builds ``FeatureBundle``s for manifest records.

    Text features need every transcript of the utterance's video (nearest
    transcript fallback, video-level frequencies), so they are computed per
    video and cached.
    """

    def __init__(self, manifest: Manifest, lexicons: Sequence[Lexicon],
                 visual_dim: Optional[int] = None, audio_dim: Optional[int] = None,
                 seq_len: int = feat.DEFAULT_FRAMES, audio_seq_len: int = feat.DEFAULT_FRAMES):
        self.manifest = manifest
        self.lexicons = tuple(lexicons)
        self.visual_dim = visual_dim
        self.audio_dim = audio_dim
        self.seq_len = seq_len
        self.audio_seq_len = audio_seq_len
        self._text: dict[str, np.ndarray] = {}
        self._by_video: dict[str, list[UtteranceRecord]] = {}
        for r in manifest.records:
            self._by_video.setdefault(r.video_id, []).append(r)

    def transcripts(self, video_id: str) -> list[Transcript]:
        recs = sorted(self._by_video[video_id], key=lambda r: (r.start_time, r.utterance_id))
        return [Transcript(r.utterance_id, read_transcript(r.transcript_path), r.start_time)
                for r in recs]

    def text(self, record: UtteranceRecord) -> np.ndarray:
        if record.utterance_id not in self._text:
            self._text.update(feat.video_text_features(self.transcripts(record.video_id),
                                                       self.lexicons))
        return self._text[record.utterance_id]

    def visual(self, record: UtteranceRecord) -> np.ndarray:
        m = read_matrix(record.visual_path, self.visual_dim, "visual")
        return feat.sample_frames(m, self.seq_len)

    def audio(self, record: UtteranceRecord) -> np.ndarray:
        m = read_matrix(record.audio_path, self.audio_dim, "audio")
        if m.shape[0] != 1:
            raise DataError(f"{record.audio_path}: audio file must hold one row, found {m.shape[0]}")
        return m[0]

    def audio_frames(self, record: UtteranceRecord) -> np.ndarray:
        m = read_matrix(record.audio_frames_path, self.audio_dim, "audio frame")
        return feat.audio_frame_prep(m, self.audio_seq_len)

    def load(self, record: UtteranceRecord, modalities: Iterable[str] = ("visual", "audio", "text")
             ) -> FeatureBundle:
        bundle = FeatureBundle()
        for modality in modalities:
            setattr(bundle, modality, getattr(self, modality)(record))
        return bundle

    def load_split(self, split: str, modalities: Iterable[str], target: str
                   ) -> tuple[list[FeatureBundle], np.ndarray, list[UtteranceRecord]]:
        records = self.manifest.split(split)
        modalities = tuple(modalities)
        bundles = [self.load(r, modalities) for r in records]
        labels = np.array([r.label(target) for r in records], dtype=np.float64)
        return bundles, labels, records


def load_features(record: UtteranceRecord, manifest: Manifest, lexicons: Sequence[Lexicon],
                  visual_dim: Optional[int] = None, audio_dim: Optional[int] = None,
                  seq_len: int = feat.DEFAULT_FRAMES) -> FeatureBundle:
    """Visual (resampled to ``seq_len`` frames), audio vector and text features for one record."""
    loader = FeatureLoader(manifest, lexicons, visual_dim, audio_dim, seq_len)
    return loader.load(record)


def infer_dims(record: UtteranceRecord) -> tuple[int, int]:
    return (read_matrix(record.visual_path, what="visual").shape[1],
            read_matrix(record.audio_path, what="audio").shape[1])


# ---------------------------------------------------------------- checkpoints

def _digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": " ".join(format_real(v) for v in a.reshape(-1))}


def _decode_array(d: Mapping) -> np.ndarray:
    shape = tuple(int(s) for s in d["shape"])
    flat = np.array([float(v) for v in d["data"].split()], dtype=np.float64)
    if flat.size != int(np.prod(shape)):
        raise DataError(f"array payload has {flat.size} values for shape {shape}")
    return flat.reshape(shape)


def _write_envelope(path, schema: str, payload: dict) -> None:
    doc = OrderedDict(schema=schema, version=SCHEMA_VERSION, sha256=_digest(payload),
                      payload=payload)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _read_envelope(path, schema: str) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: corrupted document ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise DataError(f"{path}: not a {schema} document")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: schema version {doc.get('version')!r} is not "
                                 f"supported (reader handles version {SCHEMA_VERSION})")
    payload = doc.get("payload")
    if _digest(payload) != doc.get("sha256"):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return payload


def config_digest(config) -> str:
    if config is None:
        return ""
    d = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    return _digest(d)


def save_checkpoint(model: Model, path, optimizer=None, config=None) -> None:
    payload = {
        "spec": model.spec.to_dict(),
        "params": {k: _encode_array(v) for k, v in model.params.items()},
        "scaler": {k: {"mean": _encode_array(m), "scale": _encode_array(s)}
                   for k, (m, s) in model.scaler.items()},
        "optimizer": None,
        "config_digest": config_digest(config),
    }
    if optimizer is not None:
        payload["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps, "step": optimizer.step,
            "m": {k: _encode_array(v) for k, v in optimizer.m.items()},
            "v": {k: _encode_array(v) for k, v in optimizer.v.items()},
        }
    _write_envelope(path, CHECKPOINT_SCHEMA, payload)


def load_checkpoint(path, with_optimizer: bool = False):
    from .nncore import OptimizerState

    payload = _read_envelope(path, CHECKPOINT_SCHEMA)
    spec = ModelSpec.from_dict(payload["spec"])
    params = {k: _decode_array(v) for k, v in payload["params"].items()}
    scaler = {k: (_decode_array(v["mean"]), _decode_array(v["scale"]))
              for k, v in payload.get("scaler", {}).items()}
    model = Model(spec, params, scaler)
    if not with_optimizer:
        return model
    opt = payload.get("optimizer")
    state = None
    if opt is not None:
        state = OptimizerState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"],
                               eps=opt["eps"], step=opt["step"],
                               m={k: _decode_array(v) for k, v in opt["m"].items()},
                               v={k: _decode_array(v) for k, v in opt["v"].items()})
    return model, state


def save_combiner(combiner: LateFusionCombiner, members: Sequence[str], path) -> None:
    _write_envelope(path, COMBINER_SCHEMA,
                    {"combiner": combiner.to_dict(), "members": list(members)})


def load_combiner(path) -> tuple[LateFusionCombiner, list[str]]:
    payload = _read_envelope(path, COMBINER_SCHEMA)
    return LateFusionCombiner.from_dict(payload["combiner"]), list(payload["members"])


def is_combiner_file(path) -> bool:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    return isinstance(doc, dict) and doc.get("schema") == COMBINER_SCHEMA


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    visual_dim: int = 16
    audio_dim: int = 12
    min_frames: int = 8
    max_frames: int = 45
    noise_visual: float = 0.6
    noise_audio: float = 0.6
    noise_text: float = 0.6
    min_words: int = 5
    max_words: int = 30
    utterances_per_video: tuple[int, int] = (3, 8)
    empty_transcript_rate: float = 0.05
    omega_range: tuple[float, float] = (0.2, 1.0)
    seed: int = 7
    lexicon_paths: Optional[dict[str, str]] = None

    def validate(self) -> None:
        from .errors import ConfigError

        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        if self.visual_dim <= 0 or self.audio_dim <= 0:
            raise ConfigError("feature dims must be positive")
        if min(self.noise_visual, self.noise_audio, self.noise_text) < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("need 1 <= min_words <= max_words")
        lo, hi = self.utterances_per_video
        if not 1 <= lo <= hi:
            raise ConfigError("utterances_per_video must be a range with 1 <= lo <= hi")
        if not 0.0 <= self.empty_transcript_rate < 1.0:
            raise ConfigError("empty_transcript_rate must be in [0, 1)")

    def lexicons(self) -> tuple[Lexicon, Lexicon]:
        if self.lexicon_paths is None:
            return feat.bundled_lexicons()
        p = self.lexicon_paths
        return (Lexicon.from_files("lexicon1", p["pos1"], p["neg1"]),
                Lexicon.from_files("lexicon2", p["pos2"], p["neg2"]))


def synth_visual(a: float, v: float, n_frames: int, omega: np.ndarray, phi: np.ndarray,
                 noise: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_frames, dtype=np.float64)[:, None]
    clean = 0.5 * a * np.sin(omega * t + phi) + 0.5 * v * np.cos(omega * t)
    return clean + rng.normal(0.0, noise, clean.shape) if noise > 0 else clean


def synth_audio(a: float, dim: int, noise: float, rng: np.random.Generator, rows: int = 1
                ) -> np.ndarray:
    clean = np.sin((np.arange(dim) + 1.0) * np.pi * a)
    clean = np.tile(clean, (rows, 1))
    return clean + rng.normal(0.0, noise, clean.shape) if noise > 0 else clean


def synth_transcript(v: float, n_words: int, positive: Sequence[str], negative: Sequence[str],
                     noise: float, rng: np.random.Generator) -> str:
    """Each word is positive with probability (v' + 1) / 2, v' = v blurred by ``noise``."""
    if noise > 0:
        v = float(np.clip(v + rng.normal(0.0, noise), -1.0, 1.0))
    p_pos = (v + 1.0) / 2.0
    words = []
    for _ in range(n_words):
        pool = positive if rng.random() < p_pos else negative
        words.append(pool[int(rng.integers(len(pool)))])
    return " ".join(words)


def generate_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write a complete dataset with known latent arousal/valence; returns the manifest path.

    Visual frames carry both latents, the audio vector carries arousal, the
    transcripts carry valence through lexicon word polarity.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(parents=True, exist_ok=True)

    lex = cfg.lexicons()
    positive = sorted(set().union(*(l.positive for l in lex)))
    negative = sorted(set().union(*(l.negative for l in lex)))
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    omega = rng.uniform(cfg.omega_range[0], cfg.omega_range[1], cfg.visual_dim)
    phi = rng.uniform(0.0, 2.0 * np.pi, cfg.visual_dim)

    rows = []
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split in SPLITS:
        remaining, video = counts[split], 0
        while remaining > 0:
            size = min(remaining, int(rng.integers(cfg.utterances_per_video[0],
                                                    cfg.utterances_per_video[1] + 1)))
            remaining -= size
            vid = f"{split}_v{video:03d}"
            video += 1
            clock = 0.0
            for k in range(size):
                uid = f"{vid}_u{k:02d}"
                a = float(rng.uniform(0.0, 1.0))
                v = float(rng.uniform(-1.0, 1.0))
                n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
                duration = n_frames / 10.0
                visual = synth_visual(a, v, n_frames, omega, phi, cfg.noise_visual, rng)
                audio = synth_audio(a, cfg.audio_dim, cfg.noise_audio, rng)
                n_windows = max(1, int(round(duration / 0.5)))
                audio_frames = synth_audio(a, cfg.audio_dim, cfg.noise_audio, rng, n_windows)
                n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
                text = synth_transcript(v, n_words, positive, negative, cfg.noise_text, rng)
                if rng.random() < cfg.empty_transcript_rate:
                    text = ""

                write_matrix(out / "features" / f"{uid}.visual.csv", visual)
                write_matrix(out / "features" / f"{uid}.audio.csv", audio)
                write_matrix(out / "features" / f"{uid}{AUDIO_FRAMES_SUFFIX}", audio_frames)
                (out / "transcripts" / f"{uid}.txt").write_text(
                    text + ("\n" if text else ""), encoding="utf-8")
                rows.append({
                    "utterance_id": uid, "video_id": vid, "start_time": format_real(clock),
                    "split": split, "arousal": format_real(a), "valence": format_real(v),
                    "transcript_path": f"transcripts/{uid}.txt",
                    "visual_path": f"features/{uid}.visual.csv",
                    "audio_path": f"features/{uid}.audio.csv",
                })
                clock = round(clock + duration + 0.5, 6)
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, rows)
    meta = asdict(cfg)
    meta["utterances_per_video"] = list(cfg.utterances_per_video)
    meta["omega_range"] = list(cfg.omega_range)
    (out / "synth_config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return manifest_path
