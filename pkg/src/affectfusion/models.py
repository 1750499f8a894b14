"""Unimodal, early-fusion and late-fusion affect regressors.

Every network is one or more modality branches feeding a shared decision
head (dense 1024 + ReLU + dropout, then a single sigmoid/tanh unit):

    visual      frames -> LSTM(64), last state -> dense 256
    audio       utterance vector -> dense 256
    audio-lstm  audio frames -> LSTM(64), last state
    text        lexicon vector (10) -> dense 256

``trimodal-early`` concatenates the visual, audio and text branch outputs
(in that order) before the head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nncore
from .errors import ConfigError, ShapeError, UsageError
from .nncore import LayerSpec, ParamSet
from .objectives import LOSSES

KINDS = ("visual", "audio", "audio-lstm", "text", "trimodal-early")
HEAD_ACTIVATION = {"arousal": "sigmoid", "valence": "tanh"}
TARGET_RANGE = {"arousal": (0.0, 1.0), "valence": (-1.0, 1.0)}

# branch name -> input modality key in a FeatureBundle / input dict
_BRANCH_INPUT = {"visual": "visual", "audio": "audio", "audio_lstm": "audio_frames", "text": "text"}
_KIND_BRANCHES = {
    "visual": ("visual",),
    "audio": ("audio",),
    "audio-lstm": ("audio_lstm",),
    "text": ("text",),
    "trimodal-early": ("visual", "audio", "text"),
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    target: str
    visual_dim: int = 4805
    audio_dim: int = 1582
    text_dim: int = 10
    seq_len: int = 20
    lstm_hidden: int = 64
    branch_hidden: int = 256
    decision_hidden: int = 1024
    dropout: float = nncore.DEFAULT_DROPOUT
    branch_activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.target not in HEAD_ACTIVATION:
            raise ConfigError(f"unknown target {self.target!r}; expected arousal or valence")
        for name in ("visual_dim", "audio_dim", "text_dim", "seq_len",
                     "lstm_hidden", "branch_hidden", "decision_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} not in [0, 1)")

    @property
    def head_activation(self) -> str:
        return HEAD_ACTIVATION[self.target]

    @property
    def branches(self) -> tuple[str, ...]:
        return _KIND_BRANCHES[self.kind]

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(_BRANCH_INPUT[b] for b in self.branches)

    def branch_layers(self, branch: str) -> list[LayerSpec]:
        h, act, p = self.branch_hidden, self.branch_activation, self.dropout
        if branch == "visual":
            return [LayerSpec("visual.lstm", "lstm", self.visual_dim, self.lstm_hidden),
                    LayerSpec("visual.dense", "dense", self.lstm_hidden, h, act, p)]
        if branch == "audio":
            return [LayerSpec("audio.dense", "dense", self.audio_dim, h, act, p)]
        if branch == "audio_lstm":
            return [LayerSpec("audio.lstm", "lstm", self.audio_dim, self.lstm_hidden)]
        if branch == "text":
            return [LayerSpec("text.dense", "dense", self.text_dim, h, act, p)]
        raise ConfigError(f"unknown branch {branch!r}")

    def branch_width(self, branch: str) -> int:
        return self.branch_layers(branch)[-1].out_dim

    @property
    def fusion_width(self) -> int:
        return sum(self.branch_width(b) for b in self.branches)

    def head_layers(self) -> list[LayerSpec]:
        return [LayerSpec("head.hidden", "dense", self.fusion_width, self.decision_hidden,
                          "relu", self.dropout),
                LayerSpec("head.out", "dense", self.decision_hidden, 1, self.head_activation)]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layers in [self.branch_layers(b) for b in self.branches] + [self.head_layers()]:
            for ls in layers:
                if ls.kind == "lstm":
                    shapes[f"{ls.name}.W"] = (ls.in_dim, 4 * ls.out_dim)
                    shapes[f"{ls.name}.U"] = (ls.out_dim, 4 * ls.out_dim)
                    shapes[f"{ls.name}.b"] = (4 * ls.out_dim,)
                else:
                    shapes[f"{ls.name}.W"] = (ls.in_dim, ls.out_dim)
                    shapes[f"{ls.name}.b"] = (ls.out_dim,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class FeatureBundle:
    """Model-ready inputs for one utterance; unused modalities may be None."""
    visual: Optional[np.ndarray] = None        # T x Dv
    audio: Optional[np.ndarray] = None         # Da
    audio_frames: Optional[np.ndarray] = None  # Ta x Da
    text: Optional[np.ndarray] = None          # 10


@dataclass
class Model:
    spec: ModelSpec
    params: ParamSet
    # modality -> (mean, scale); standardizes inputs before the branches
    scaler: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.expected_shapes()
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ShapeError(f"parameters do not match spec {self.spec.kind}: "
                             f"expected {expected}, got {got}")

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: (m.copy(), s.copy()) for k, (m, s) in self.scaler.items()})

    @property
    def n_params(self) -> int:
        return nncore.param_count(self.params)


def build_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    params: ParamSet = {}
    for branch in spec.branches:
        params.update(nncore.init_params(spec.branch_layers(branch), rng))
    params.update(nncore.init_params(spec.head_layers(), rng))
    return Model(spec, params)


def warm_start(model: Model, source: Model) -> list[str]:
    """Copy every same-named, same-shaped parameter from ``source``.

    Lets a trimodal model start from unimodally trained branches.  Returns
    the names copied.
    """
    copied = []
    for name, p in source.params.items():
        if name.startswith("head."):
            continue
        if name in model.params and model.params[name].shape == p.shape:
            model.params[name][...] = p
            copied.append(name)
    for modality, stats in source.scaler.items():
        if modality in model.spec.modalities:
            model.scaler[modality] = (stats[0].copy(), stats[1].copy())
    return copied


# ---------------------------------------------------------------- inputs

def _expected_width(spec: ModelSpec, modality: str) -> int:
    return {"visual": spec.visual_dim, "audio": spec.audio_dim,
            "audio_frames": spec.audio_dim, "text": spec.text_dim}[modality]


def stack_inputs(spec: ModelSpec, bundles: Sequence[FeatureBundle]) -> dict[str, np.ndarray]:
    """Stack per-utterance bundles into batch arrays, validating every modality."""
    if not bundles:
        raise ConfigError("empty batch")
    out = {}
    for modality in spec.modalities:
        arrays = []
        for k, b in enumerate(bundles):
            x = getattr(b, modality)
            if x is None:
                raise ShapeError(f"bundle {k} is missing the {modality} modality "
                                 f"required by a {spec.kind} model")
            x = np.asarray(x, dtype=np.float64)
            want_ndim = 2 if modality in ("visual", "audio_frames") else 1
            width = _expected_width(spec, modality)
            if x.ndim != want_ndim or x.shape[-1] != width:
                raise ShapeError(f"{modality} input of bundle {k} has shape {x.shape}, "
                                 f"expected last dim {width}")
            arrays.append(x)
        try:
            out[modality] = np.stack(arrays)
        except ValueError as exc:
            raise ShapeError(f"{modality} inputs have unequal lengths") from exc
    return out


def fit_scaler(model: Model, inputs: Mapping[str, np.ndarray]) -> None:
    """Per-feature standardization statistics from (training) inputs."""
    model.scaler = {}
    for modality in model.spec.modalities:
        x = inputs[modality]
        flat = x.reshape(-1, x.shape[-1])
        mean = flat.mean(axis=0)
        scale = flat.std(axis=0)
        scale[scale < 1e-8] = 1.0
        model.scaler[modality] = (mean, scale)


def _scaled(model: Model, modality: str, x: np.ndarray) -> np.ndarray:
    stats = model.scaler.get(modality)
    if stats is None:
        return x
    return (x - stats[0]) / stats[1]


# ---------------------------------------------------------------- forward / backward

@dataclass
class Tape:
    """Caches and dropout masks recorded by one forward pass."""
    caches: dict = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    widths: list[tuple[str, int]] = field(default_factory=list)


def _mask(name, shape, rate, mode, rng, masks, tape):
    if mode == "eval" or rate == 0.0:
        return None
    if masks is not None and name in masks:
        m = masks[name]
    else:
        if rng is None:
            raise ConfigError("train mode needs an rng for dropout")
        m = nncore.dropout_mask(shape, rate, rng)
    tape.masks[name] = m
    return m


def forward(
    model: Model,
    inputs: Mapping[str, np.ndarray],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    masks: Optional[Mapping[str, np.ndarray]] = None,
) -> tuple[np.ndarray, Tape]:
    """Batch forward pass; returns predictions (B,) and the tape for ``backward``.

    ``masks`` replays dropout masks from an earlier tape (gradient checks).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec, P = model.spec, model.params
    tape = Tape()
    feats = []
    for branch in spec.branches:
        modality = _BRANCH_INPUT[branch]
        x = _scaled(model, modality, inputs[modality])
        for ls in spec.branch_layers(branch):
            if ls.kind == "lstm":
                (_, last, cache) = nncore.lstm_forward(
                    x, P[f"{ls.name}.W"], P[f"{ls.name}.U"], P[f"{ls.name}.b"], return_cache=True)
                tape.caches[ls.name] = cache
                x = last
            else:
                x, cache = nncore.dense_forward(
                    x, P[f"{ls.name}.W"], P[f"{ls.name}.b"], ls.activation, return_cache=True)
                tape.caches[ls.name] = cache
                m = _mask(ls.name, x.shape, ls.dropout_rate, mode, rng, masks, tape)
                if m is not None:
                    x = x * m
        feats.append(x)
        tape.widths.append((branch, x.shape[1]))
    z = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)
    for ls in spec.head_layers():
        z, cache = nncore.dense_forward(
            z, P[f"{ls.name}.W"], P[f"{ls.name}.b"], ls.activation, return_cache=True)
        tape.caches[ls.name] = cache
        m = _mask(ls.name, z.shape, ls.dropout_rate, mode, rng, masks, tape)
        if m is not None:
            z = z * m
    return z[:, 0], tape


def backward(model: Model, tape: Optional[Tape], dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dpred."""
    if tape is None or not tape.caches:
        raise UsageError("no recorded forward pass: call forward() before backward()")
    spec = model.spec
    grads: dict[str, np.ndarray] = {}
    dz = np.asarray(dpred, dtype=np.float64).reshape(-1, 1)
    for ls in reversed(spec.head_layers()):
        if ls.name in tape.masks:
            dz = dz * tape.masks[ls.name]
        dz, grads[f"{ls.name}.W"], grads[f"{ls.name}.b"] = nncore.dense_backward(
            dz, tape.caches[ls.name])

    offset = 0
    for branch, width in tape.widths:
        dx = dz[:, offset:offset + width]
        offset += width
        for ls in reversed(spec.branch_layers(branch)):
            if ls.kind == "lstm":
                cache = tape.caches[ls.name]
                hs = cache[3]
                dhs = np.zeros_like(hs)
                dhs[:, -1] = dx
                _, gW, gU, gb = nncore.lstm_backward(dhs, cache)
                grads[f"{ls.name}.W"], grads[f"{ls.name}.U"], grads[f"{ls.name}.b"] = gW, gU, gb
            else:
                if ls.name in tape.masks:
                    dx = dx * tape.masks[ls.name]
                dx, grads[f"{ls.name}.W"], grads[f"{ls.name}.b"] = nncore.dense_backward(
                    dx, tape.caches[ls.name])
    return {name: grads[name] for name in model.params}


def loss_and_gradients(
    model: Model,
    inputs: Mapping[str, np.ndarray],
    targets: np.ndarray,
    loss: str = "mse",
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
    masks: Optional[Mapping[str, np.ndarray]] = None,
) -> tuple[float, dict[str, np.ndarray], Tape]:
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}; expected one of {tuple(LOSSES)}")
    pred, tape = forward(model, inputs, mode, rng, masks)
    value, dpred = LOSSES[loss](pred, targets)
    return value, backward(model, tape, dpred), tape


def jitter_biases(model: Model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move biases off zero so no ReLU pre-activation sits exactly on its kink."""
    for name, p in model.params.items():
        if name.endswith(".b"):
            p += rng.normal(0.0, scale, p.shape)


def gradient_check(
    model: Model,
    inputs: Mapping[str, np.ndarray],
    targets: np.ndarray,
    loss: str = "mse",
    eps: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    flip_sign: bool = False,
) -> tuple[float, str]:
    """Max relative error of analytic vs. central-difference gradients.

    With an ``rng`` the check runs in train mode with dropout masks frozen
    from the first pass; otherwise in eval mode.  ``flip_sign`` corrupts the
    analytic gradient on purpose, to confirm the harness notices.
    """
    mode = "train" if rng is not None else "eval"
    _, grads, tape = loss_and_gradients(model, inputs, targets, loss, mode, rng)
    if flip_sign:
        grads = {k: -g for k, g in grads.items()}
    masks = dict(tape.masks)

    def loss_fn() -> float:
        pred, _ = forward(model, inputs, mode, None, masks)
        return LOSSES[loss](pred, targets)[0]

    return nncore.finite_diff_check(loss_fn, model.params, grads, eps)


# ---------------------------------------------------------------- prediction

def predict_batch(
    model: Model,
    bundles: Sequence[FeatureBundle],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    chunk: int = 256,
) -> np.ndarray:
    out = []
    for start in range(0, len(bundles), chunk):
        inputs = stack_inputs(model.spec, bundles[start:start + chunk])
        pred, _ = forward(model, inputs, mode, rng)
        out.append(pred)
    if not out:
        raise ConfigError("empty batch")
    return np.concatenate(out)


def predict(model: Model, bundle: FeatureBundle, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> float:
    return float(predict_batch(model, [bundle], mode, rng)[0])


# ---------------------------------------------------------------- late fusion

@dataclass
class LateFusionCombiner:
    weights: np.ndarray  # visual, audio, text
    bias: float
    target: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ConfigError("late-fusion weights must be finite")
        if self.target not in TARGET_RANGE:
            raise ConfigError(f"unknown target {self.target!r}")

    def to_dict(self) -> dict:
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias),
                "target": self.target}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LateFusionCombiner":
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]), d["target"])


def late_fusion_predict(preds, combiner: LateFusionCombiner, target: Optional[str] = None):
    """w . preds + bias, clipped to the target's label range.

    ``preds`` is a length-3 vector or an n x 3 matrix of unimodal predictions.
    """
    target = target or combiner.target
    lo, hi = TARGET_RANGE[target]
    preds = np.asarray(preds, dtype=np.float64)
    out = np.clip(preds @ combiner.weights + combiner.bias, lo, hi)
    return float(out) if out.ndim == 0 else out


@dataclass
class LateFusionEnsemble:
    """Three unimodal models (visual, audio, text) plus their linear combiner."""
    models: list[Model]
    combiner: LateFusionCombiner

    def unimodal_predictions(self, bundles: Sequence[FeatureBundle]) -> np.ndarray:
        return np.column_stack([predict_batch(m, bundles) for m in self.models])

    def predict_batch(self, bundles: Sequence[FeatureBundle]) -> np.ndarray:
        return late_fusion_predict(self.unimodal_predictions(bundles), self.combiner)
