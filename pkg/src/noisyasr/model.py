"""Conv + bidirectional LSTM acoustic model with a tapped noise-type classifier.

Layout: 2-D convolutions over (frequency, time) -> stack of BiLSTM layers ->
fully-connected softmax over the character vocabulary. The output of
recurrent layer ``tap_index`` also feeds a noise head (one BiLSTM, mean
pooling over frames, two linear layers -> 8 noise logits).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1

FEATURE_EXTRACTOR = "FeatureExtractor"
RECOGNITION = "Recognition"
NOISE_CLASSIFIER = "NoiseClassifier"
GROUPS = (FEATURE_EXTRACTOR, RECOGNITION, NOISE_CLASSIFIER)


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: tuple[int, int]  # (freq, time)
    stride: tuple[int, int]


def _default_convs():
    return (ConvSpec(4, (11, 3), (2, 2)), ConvSpec(4, (11, 3), (2, 2)))


@dataclass(frozen=True)
class ModelConfig:
    vocab: tuple[str, ...] = ("_", " ", "a", "b", "c", "d", "e")
    blank_index: int = 0
    convs: tuple[ConvSpec, ...] = field(default_factory=_default_convs)
    n_recurrent: int = 5
    hidden_size: int = 32
    tap_index: int = 2
    n_noise_labels: int = 8
    noise_hidden: int = 16
    noise_fc: int = 32
    noise_rnn: bool = True
    # feature front end, stored so checkpoints decode consistently
    window_len: int = 320
    hop_len: int = 160
    window_shape: str = "hamming"
    log_floor: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "convs", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(c["channels"], tuple(c["kernel"]), tuple(c["stride"]))
            for c in self.convs))
        if self.n_recurrent < 1:
            raise ValueError("need at least one recurrent layer")
        if not 0 <= self.tap_index < self.n_recurrent:
            raise ValueError(f"tap_index {self.tap_index} outside 0..{self.n_recurrent - 1}")
        if not 0 <= self.blank_index < len(self.vocab):
            raise ValueError("blank_index outside vocab")
        blank = self.vocab[self.blank_index]
        if self.vocab.count(blank) != 1:
            raise ValueError("blank symbol must appear exactly once in vocab")

    @property
    def n_freq_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def output_frames(self, n_frames: int) -> int:
        t = n_frames
        for c in self.convs:
            t = (t - c.kernel[1]) // c.stride[1] + 1
        return t

    def min_input_frames(self) -> int:
        t = 1
        for c in reversed(self.convs):
            t = (t - 1) * c.stride[1] + c.kernel[1]
        return t

    def conv_output_dim(self) -> int:
        f, ch = self.n_freq_bins, 1
        for c in self.convs:
            f = (f - c.kernel[0]) // c.stride[0] + 1
            ch = c.channels
        if f < 1:
            raise ValueError("frequency axis collapses to zero in the conv stack")
        return f * ch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["convs"] = tuple(ConvSpec(c["channels"], tuple(c["kernel"]), tuple(c["stride"])) for c in d["convs"])
        return cls(**d)


@dataclass(frozen=True)
class ParamTag:
    group: str
    layer_id: str
    soft_freeze_member: bool


class ModelParams:
    """Named leaf tensors plus their tags, in a fixed order."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor], tags: dict[str, ParamTag]):
        self.cfg = cfg
        self.tensors = tensors
        self.tags = tags

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
                for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: ad.param(v) for k, v in self.arrays().items()}, dict(self.tags))

    def n_values(self) -> int:
        return sum(t.value.size for t in self.tensors.values())


def _layer_tag(cfg: ModelConfig, layer: str) -> ParamTag:
    last_two = {f"rec{cfg.n_recurrent - 2}", f"rec{cfg.n_recurrent - 1}"}
    if layer.startswith("noise"):
        return ParamTag(NOISE_CLASSIFIER, layer, False)
    if layer.startswith("conv"):
        return ParamTag(FEATURE_EXTRACTOR, layer, False)
    if layer == "fc":
        return ParamTag(RECOGNITION, layer, True)
    idx = int(layer[3:])
    group = FEATURE_EXTRACTOR if idx <= cfg.tap_index else RECOGNITION
    return ParamTag(group, layer, layer in last_two)


def _shapes(cfg: ModelConfig) -> list[tuple[str, str, tuple, int | None]]:
    """(layer, name, shape, fan_in or None for biases)."""
    out = []
    ch = 1
    for i, c in enumerate(cfg.convs):
        kf, kt = c.kernel
        out.append((f"conv{i}", f"conv{i}.w", (c.channels, ch, kf, kt), ch * kf * kt))
        out.append((f"conv{i}", f"conv{i}.b", (c.channels,), None))
        ch = c.channels
    H = cfg.hidden_size
    d_in = cfg.conv_output_dim()
    for l in range(cfg.n_recurrent):
        for d in ("fw", "bw"):
            out += _lstm_shapes(f"rec{l}", f"rec{l}.{d}", d_in, H)
        d_in = 2 * H
    out.append(("fc", "fc.w", (2 * H, cfg.vocab_size), 2 * H))
    out.append(("fc", "fc.b", (cfg.vocab_size,), None))
    head_in = 2 * H
    if cfg.noise_rnn:
        for d in ("fw", "bw"):
            out += _lstm_shapes("noise.rec", f"noise.rec.{d}", 2 * H, cfg.noise_hidden)
        head_in = 2 * cfg.noise_hidden
    out.append(("noise.fc0", "noise.fc0.w", (head_in, cfg.noise_fc), head_in))
    out.append(("noise.fc0", "noise.fc0.b", (cfg.noise_fc,), None))
    out.append(("noise.fc1", "noise.fc1.w", (cfg.noise_fc, cfg.n_noise_labels), cfg.noise_fc))
    out.append(("noise.fc1", "noise.fc1.b", (cfg.n_noise_labels,), None))
    return out


def _lstm_shapes(layer, prefix, d_in, h):
    return [(layer, f"{prefix}.W", (d_in, 4 * h), d_in),
            (layer, f"{prefix}.U", (h, 4 * h), h),
            (layer, f"{prefix}.b", (4 * h,), None)]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    tensors, tags = {}, {}
    for layer, name, shape, fan_in in _shapes(cfg):
        if fan_in is None:
            v = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            v = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.param(v)
        tags[name] = _layer_tag(cfg, layer)
    return ModelParams(cfg, tensors, tags)


def param_groups(params: ModelParams) -> dict[str, list[str]]:
    groups = {g: [] for g in GROUPS}
    for name, tag in params.tags.items():
        groups[tag.group].append(name)
    return groups


def soft_freeze_set(params: ModelParams) -> set[str]:
    return {name for name, tag in params.tags.items() if tag.soft_freeze_member}


def _bilstm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    fw = ad.lstm(x, params[f"{prefix}.fw.W"], params[f"{prefix}.fw.U"], params[f"{prefix}.fw.b"])
    bw = ad.lstm(x, params[f"{prefix}.bw.W"], params[f"{prefix}.bw.U"], params[f"{prefix}.bw.b"], reverse=True)
    return ad.concat([fw, bw], axis=-1)


def forward(params: ModelParams, feats) -> tuple[Tensor, Tensor]:
    """Run the recognizer.

    ``feats`` is (F, T) or a batch (B, F, T) of equal-length utterances.
    Returns (log-probs (B, T', V), tapped representation (B, T', 2H)).
    """
    cfg = params.cfg
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != cfg.n_freq_bins:
        raise ValueError(f"features must be (B, {cfg.n_freq_bins}, T), got {x.shape}")
    need = cfg.min_input_frames()
    if x.shape[2] < need:
        raise ValueError(f"input has {x.shape[2]} frames; the conv stack needs at least {need}")
    h = ad.const(x[:, None])
    for i, c in enumerate(cfg.convs):
        h = ad.hardtanh(ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], c.stride), 0.0, 20.0)
    B, C, F, T = h.shape
    h = ad.reshape(ad.transpose(h, (0, 3, 1, 2)), (B, T, C * F))
    tapped = None
    for l in range(cfg.n_recurrent):
        h = _bilstm(h, params, f"rec{l}")
        if l == cfg.tap_index:
            tapped = h
    logits = ad.add(ad.matmul(h, params["fc.w"]), params["fc.b"])
    return ad.log_softmax(logits, axis=-1), tapped


def noise_forward(params: ModelParams, tapped: Tensor, reverse: bool = False, coef: float = 1.0) -> Tensor:
    """Noise-type logits (B, n_noise_labels) from the tapped representation.

    With ``reverse`` a gradient-reversal node sits between the trunk and the head.
    """
    x = ad.grad_reverse(tapped, coef) if reverse else tapped
    if params.cfg.noise_rnn:
        x = _bilstm(x, params, "noise.rec")
    pooled = ad.reduce_mean(x, axis=1)
    hidden = ad.relu(ad.add(ad.matmul(pooled, params["noise.fc0.w"]), params["noise.fc0.b"]))
    return ad.add(ad.matmul(hidden, params["noise.fc1.w"]), params["noise.fc1.b"])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (B, K) ``logits``."""
    return ad.scale(ad.reduce_mean(ad.pick(ad.log_softmax(logits, axis=-1), labels)), -1.0)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": params.cfg.to_dict(),
        "tags": {k: asdict(t) for k, t in params.tags.items()},
        "order": list(params.tensors),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"p/{k}": v for k, v in params.arrays().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ModelParams, dict]:
    """Load (params, extra). A config differing from ``expected`` is an error."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig.from_dict(meta["config"])
        if expected is not None and cfg != expected:
            raise CheckpointError(f"{path}: checkpoint config does not match the requested model config")
        ref = init_params(cfg)
        tensors, tags = {}, {}
        for name in meta["order"]:
            v = z[f"p/{name}"]
            if v.shape != ref[name].shape:
                raise CheckpointError(f"{path}: {name} has shape {v.shape}, expected {ref[name].shape}")
            tensors[name] = ad.param(v)
            tags[name] = ParamTag(**meta["tags"][name])
        if set(tensors) != set(ref.tensors):
            raise CheckpointError(f"{path}: parameter set does not match the config")
    return ModelParams(cfg, tensors, tags), meta.get("extra", {})
