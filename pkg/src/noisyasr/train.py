"""Training regimes: Vanilla DAT, Soft-Freeze DAT, MTL and AvT.

All four share one loop: seeded shuffle, on-the-fly noise augmentation,
forward, mode-specific loss, backward, group-scaled momentum SGD. MTL adds
the noise-type cross-entropy through the hybrid loss; AvT additionally puts
a gradient-reversal node between the trunk and the noise head.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer, SpectrogramConfig, features, mix_at_snr
from .corpus import NOISE_TYPES, NoiseLabel
from .ctc import ctc_loss_batch, greedy_decode
from .evaluate import edit_distance, tokenize
from .model import (FEATURE_EXTRACTOR, NOISE_CLASSIFIER, RECOGNITION, ModelConfig, ModelParams,
                    ParamTag, cross_entropy, forward, noise_forward)

log = logging.getLogger(__name__)

MODES = ("VanillaDAT", "SoftFreezeDAT", "MTL", "AvT")
METRICS_HEADER = ["epoch", "l_ctc", "l_ce", "l_hybrid", "eta", "dev_wer", "noise_acc"]


class TrainingDataError(ValueError):
    """A corpus or feature failure, tagged with the offending utterance id."""


@dataclass
class TrainConfig:
    mode: str = "VanillaDAT"
    base_lr: float = 0.0001
    epochs: int = 25
    batch_size: int = 32
    aug_prob: float = 0.5
    train_snr_set: tuple[float, ...] = (0, 5, 10, 15, 20, 25)
    lam: float = 0.7
    eta0: float = 10.0
    anneal_factor: float = 1.05
    soft_freeze_factor: float = 0.5
    lambda_f: float = 0.8
    lambda_r: float = 0.05
    lambda_n: float = 1.0
    grl_coef: float = 1.0
    momentum: float = 0.9
    clip_norm: float | None = 400.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if not 0 <= self.aug_prob <= 1:
            raise ValueError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        for name in ("anneal_factor", "soft_freeze_factor", "lambda_f", "lambda_r", "lambda_n",
                     "grl_coef", "eta0", "base_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.train_snr_set = tuple(float(s) for s in self.train_snr_set)

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Defaults for ``mode``: AvT starts from a base LR of 0.0008."""
        if mode == "AvT" and "base_lr" not in overrides:
            overrides["base_lr"] = 0.0008
        return cls(mode=mode, **overrides)

    @property
    def uses_noise_head(self) -> bool:
        return self.mode in ("MTL", "AvT")


@dataclass
class LossBreakdown:
    l_ctc: float
    l_ce: float | None
    l_hybrid: float


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    eta: float = 10.0


# --------------------------------------------------------------------------- small rules

def _complement(x: float) -> float:
    # 1 - x in decimal: config weights are decimal literals (1 - 0.7 -> 0.3, not 0.30000000000000004)
    return float(Decimal(1) - Decimal(repr(float(x))))


def hybrid_loss(l_ctc, l_ce, lam: float, eta: float):
    """``lam * l_ctc + eta * (1 - lam) * l_ce`` for floats or graph nodes."""
    w_ce = eta * _complement(lam)
    if isinstance(l_ctc, ad.Tensor):
        return ad.add(ad.scale(l_ctc, lam), ad.scale(l_ce, w_ce))
    return lam * l_ctc + w_ce * l_ce


def anneal_eta(eta: float, anneal_factor: float) -> float:
    """One epoch of decay of the auxiliary weight."""
    return eta / anneal_factor


def effective_lr(tag: ParamTag, cfg: TrainConfig) -> float:
    if cfg.mode == "SoftFreezeDAT":
        return cfg.base_lr * cfg.soft_freeze_factor if tag.soft_freeze_member else cfg.base_lr
    if cfg.mode == "AvT":
        scale = {FEATURE_EXTRACTOR: cfg.lambda_f, RECOGNITION: cfg.lambda_r,
                 NOISE_CLASSIFIER: cfg.lambda_n}[tag.group]
        return cfg.base_lr * scale
    return cfg.base_lr


def sgd_step(params: ModelParams, state: OptimizerState, cfg: TrainConfig,
             names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Clip, momentum, update, zero grads. Returns the applied update per parameter."""
    names = list(params) if names is None else list(names)
    grads = {}
    for n in names:
        g = params[n].grad
        g = np.zeros(params[n].shape) if g is None else g
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {n}; step aborted")
        grads[n] = g
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            s = cfg.clip_norm / norm
            grads = {n: g * s for n, g in grads.items()}
    updates = {}
    for n, g in grads.items():
        v = state.velocity.get(n)
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[n] = v
        upd = effective_lr(params.tags[n], cfg) * v
        params[n].value = params[n].value - upd
        params[n].zero_grad()
        updates[n] = upd
    return updates


def trainable_names(params: ModelParams, cfg: TrainConfig) -> list[str]:
    if cfg.uses_noise_head:
        return list(params)
    return [n for n, t in params.tags.items() if t.group != NOISE_CLASSIFIER]


# --------------------------------------------------------------------------- data

@dataclass
class Utterance:
    uid: str
    audio: AudioBuffer
    transcript: str


def text_to_labels(text: str, vocab: Sequence[str], blank: int = 0) -> list[int]:
    index = {s: i for i, s in enumerate(vocab) if i != blank}
    try:
        return [index[ch] for ch in text.lower()]
    except KeyError as exc:
        raise ValueError(f"symbol {exc.args[0]!r} not in vocab") from None


def augment_batch(clean_batch: Sequence[AudioBuffer], noise_train_set: dict, cfg: TrainConfig,
                  rng: np.random.Generator) -> tuple[list[AudioBuffer], list[NoiseLabel]]:
    """Mix each utterance with probability ``aug_prob``: uniform type, uniform SNR, random file and section."""
    types = [t for t in NOISE_TYPES if noise_train_set.get(t)]
    if not types:
        raise ValueError("noise training set is empty")
    out, labels = [], []
    for clean in clean_batch:
        if rng.random() < cfg.aug_prob:
            lab = types[int(rng.integers(len(types)))]
            snr = cfg.train_snr_set[int(rng.integers(len(cfg.train_snr_set)))]
            files = noise_train_set[lab]
            nf = files[int(rng.integers(len(files)))]
            noise = nf.audio if hasattr(nf, "audio") else nf
            mixed, _ = mix_at_snr(clean, noise, snr, rng, noise_label=lab.value)
            out.append(mixed)
            labels.append(lab)
        else:
            out.append(clean)
            labels.append(NoiseLabel.CLEAN)
    return out, labels


def feature_fn(cfg: ModelConfig) -> Callable[[AudioBuffer], np.ndarray]:
    spec = SpectrogramConfig(cfg.window_len, cfg.hop_len, cfg.window_shape)
    return lambda buf: features(buf, spec, cfg.log_floor)


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Batches of equal-length items (no padding needed); shuffled when ``rng`` is given."""
    order = rng.permutation(len(lengths)) if rng is not None else np.arange(len(lengths))
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(lengths[i], []).append(int(i))
    batches = [b[k:k + batch_size] for _, b in sorted(buckets.items()) for k in range(0, len(b), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


@dataclass
class PreparedSet:
    """Fixed (already mixed) utterances with their features, for dev/test scoring."""

    uids: list[str]
    feats: list[np.ndarray]
    transcripts: list[str]
    labels: list[NoiseLabel]

    def __len__(self):
        return len(self.uids)


def prepare(utts: Sequence[Utterance], model_cfg: ModelConfig, labels: Sequence[NoiseLabel] | None = None,
            audio: Sequence[AudioBuffer] | None = None) -> PreparedSet:
    feat = feature_fn(model_cfg)
    audio = [u.audio for u in utts] if audio is None else audio
    feats = []
    for u, a in zip(utts, audio):
        try:
            feats.append(feat(a))
        except ValueError as exc:
            raise TrainingDataError(f"{u.uid}: {exc}") from exc
    labels = [NoiseLabel.CLEAN] * len(utts) if labels is None else list(labels)
    return PreparedSet([u.uid for u in utts], feats, [u.transcript for u in utts], labels)


def make_dev_set(utts: Sequence[Utterance], noise_set: dict, cfg: TrainConfig, model_cfg: ModelConfig,
                 seed: int) -> PreparedSet:
    """Dev utterances mixed once, with the training augmentation law and a fixed seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE5]))
    if cfg.aug_prob > 0:
        audio, labels = augment_batch([u.audio for u in utts], noise_set, cfg, rng)
    else:
        audio, labels = [u.audio for u in utts], [NoiseLabel.CLEAN] * len(utts)
    return prepare(utts, model_cfg, labels, audio)


# --------------------------------------------------------------------------- one step

def compute_loss(params: ModelParams, feats: np.ndarray, targets: Sequence[Sequence[int]],
                 noise_labels: Sequence[int] | None, cfg: TrainConfig, eta: float,
                 mode: str | None = None):
    """Build the mode's loss graph. Returns (root node, LossBreakdown, noise logits or None)."""
    mode = mode or cfg.mode
    log_probs, tapped = forward(params, feats)
    l_ctc = ctc_loss_batch(log_probs, targets, params.cfg.blank_index)
    if mode in ("VanillaDAT", "SoftFreezeDAT"):
        return l_ctc, LossBreakdown(float(l_ctc.value), None, float(l_ctc.value)), None
    logits = noise_forward(params, tapped, reverse=(mode == "AvT"), coef=cfg.grl_coef)
    l_ce = cross_entropy(logits, noise_labels)
    root = hybrid_loss(l_ctc, l_ce, cfg.lam, eta)
    return root, LossBreakdown(float(l_ctc.value), float(l_ce.value), float(root.value)), logits


def train_step(params: ModelParams, state: OptimizerState, feats, targets, noise_labels,
               cfg: TrainConfig, names=None) -> LossBreakdown:
    root, breakdown, _ = compute_loss(params, feats, targets, noise_labels, cfg, state.eta)
    ad.backward(root)
    sgd_step(params, state, cfg, names)
    return breakdown


# --------------------------------------------------------------------------- scoring

def _batched(params: ModelParams, data: PreparedSet, batch_size: int = 64):
    lengths = [f.shape[1] for f in data.feats]
    for batch in length_batches(lengths, batch_size, None):
        feats = np.stack([data.feats[i] for i in batch])
        yield batch, feats


def decode_set(params: ModelParams, data: PreparedSet) -> list[str]:
    hyps = [""] * len(data)
    cfg = params.cfg
    for batch, feats in _batched(params, data):
        lp, _ = forward(params, feats)
        for k, i in enumerate(batch):
            hyps[i] = greedy_decode(lp.value[k], cfg.vocab, cfg.blank_index)
    return hyps


def score_set(params: ModelParams, data: PreparedSet, with_noise: bool = False) -> dict:
    """Pooled WER (%), mean CTC loss and (optionally) noise-head accuracy over a prepared set."""
    cfg = params.cfg
    edits = words = 0
    loss_sum = 0.0
    correct = 0
    for batch, feats in _batched(params, data):
        lp, tapped = forward(params, feats)
        targets = [text_to_labels(data.transcripts[i], cfg.vocab, cfg.blank_index) for i in batch]
        loss_sum += float(ctc_loss_batch(lp, targets, cfg.blank_index).value) * len(batch)
        for k, i in enumerate(batch):
            ref = tokenize(data.transcripts[i])
            edits += edit_distance(ref, tokenize(greedy_decode(lp.value[k], cfg.vocab, cfg.blank_index)))
            words += len(ref)
        if with_noise:
            pred = np.argmax(noise_forward(params, tapped).value, axis=1)
            correct += sum(int(pred[k] == data.labels[i].index) for k, i in enumerate(batch))
    out = {"wer": 100.0 * edits / max(words, 1), "loss": loss_sum / max(len(data), 1)}
    if with_noise:
        out["noise_acc"] = correct / max(len(data), 1)
    return out


# --------------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    best: ModelParams
    final: ModelParams
    metrics: list[dict]
    best_epoch: int


def train(cfg: TrainConfig, params: ModelParams, train_utts: Sequence[Utterance], noise_set: dict,
          dev_utts: Sequence[Utterance] = (), on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``params`` in place for ``cfg.epochs`` and keep the best-dev copy.

    The best epoch minimizes dev WER, ties broken by dev CTC loss; with no dev
    set the final epoch is taken.
    """
    model_cfg = params.cfg
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    feat = feature_fn(model_cfg)
    targets = []
    for u in train_utts:
        try:
            targets.append(text_to_labels(u.transcript, model_cfg.vocab, model_cfg.blank_index))
        except ValueError as exc:
            raise TrainingDataError(f"{u.uid}: {exc}") from exc
    n_frames = [SpectrogramConfig(model_cfg.window_len, model_cfg.hop_len).n_frames(len(u.audio))
                for u in train_utts]
    for u, n in zip(train_utts, n_frames):
        if n < model_cfg.min_input_frames():
            raise TrainingDataError(f"{u.uid}: {n} frames is shorter than the conv stack's minimum")
    dev = make_dev_set(dev_utts, noise_set, cfg, model_cfg, cfg.seed) if dev_utts else None
    names = trainable_names(params, cfg)
    state = OptimizerState(eta=cfg.eta0)
    metrics: list[dict] = []
    best_key, best_arrays, best_epoch = None, params.arrays(), cfg.epochs - 1

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        sums = np.zeros(3)
        n_seen = 0
        for batch in length_batches(n_frames, cfg.batch_size, rng):
            clean = [train_utts[i].audio for i in batch]
            if cfg.aug_prob > 0:
                audio, labels = augment_batch(clean, noise_set, cfg, rng)
            else:
                audio, labels = clean, [NoiseLabel.CLEAN] * len(batch)
            feats = []
            for i, a in zip(batch, audio):
                try:
                    feats.append(feat(a))
                except ValueError as exc:
                    raise TrainingDataError(f"{train_utts[i].uid}: {exc}") from exc
            try:
                lb = train_step(params, state, np.stack(feats), [targets[i] for i in batch],
                                [l.index for l in labels], cfg, names)
            except ValueError as exc:
                ids = ",".join(train_utts[i].uid for i in batch)
                raise TrainingDataError(f"batch [{ids}]: {exc}") from exc
            sums += [lb.l_ctc, lb.l_ce or 0.0, lb.l_hybrid]
            n_seen += 1
        mean = sums / max(n_seen, 1)
        row = {"epoch": epoch, "l_ctc": mean[0], "l_ce": mean[1] if cfg.uses_noise_head else None,
               "l_hybrid": mean[2], "eta": state.eta if cfg.uses_noise_head else None,
               "dev_wer": None, "noise_acc": None, "dev_loss": None}
        if dev is not None:
            sc = score_set(params, dev, with_noise=cfg.uses_noise_head)
            row.update(dev_wer=sc["wer"], dev_loss=sc["loss"], noise_acc=sc.get("noise_acc"))
            key = (sc["wer"], sc["loss"])
            if best_key is None or key < best_key:
                best_key, best_arrays, best_epoch = key, params.arrays(), epoch
        metrics.append(row)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4g}" for k, v in row.items()
                                                  if v is not None and k != "epoch"))
        if on_epoch is not None:
            on_epoch(row)
        if cfg.uses_noise_head:
            state.eta = anneal_eta(state.eta, cfg.anneal_factor)

    if dev is None:
        best_arrays = params.arrays()
    best = ModelParams(model_cfg, {k: ad.param(v) for k, v in best_arrays.items()}, dict(params.tags))
    return TrainResult(best, params, metrics, best_epoch)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def write_metrics_csv(metrics: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in metrics:
            w.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
