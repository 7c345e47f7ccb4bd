"""Finite-difference check of the full recognizer + noise head on a tiny model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ConvSpec, ModelConfig, ModelParams, init_params
from .train import TrainConfig, compute_loss

TINY_MODEL = ModelConfig(vocab=("_", "a", "b", "c"), convs=(ConvSpec(2, (5, 3), (4, 2)),), n_recurrent=2,
                         hidden_size=4, tap_index=0, noise_hidden=3, noise_fc=5, window_len=32, hop_len=16)


@dataclass(frozen=True)
class GradCheckResult:
    seed: int
    max_rel_error: float
    n_values: int


def random_point(cfg: ModelConfig, seed: int, spread: float = 0.5) -> ModelParams:
    """Parameters drawn uniformly in ±spread, away from the near-zero gradients of a fresh init."""
    params = init_params(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    for name in params:
        params[name].value = rng.uniform(-spread, spread, params[name].shape)
    return params


def check_model(seed: int, h: float = 1e-4, cfg: ModelConfig = TINY_MODEL, batch: int = 2,
                frames: int = 24) -> GradCheckResult:
    """Hybrid (CTC + noise cross-entropy) loss gradient vs central differences for every parameter."""
    params = random_point(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))
    feats = rng.standard_normal((batch, cfg.n_freq_bins, frames))
    t_out = cfg.output_frames(frames)
    targets = [list(rng.integers(1, cfg.vocab_size, size=int(rng.integers(1, t_out // 2 + 1))))
               for _ in range(batch)]
    labels = list(rng.integers(0, cfg.n_noise_labels, size=batch))
    tc = TrainConfig(mode="MTL")

    def build():
        return compute_loss(params, feats, targets, labels, tc, tc.eta0)[0]

    err = ad.check_gradients(build, [params[n] for n in params], h)
    return GradCheckResult(seed, err, params.n_values())


def run_suite(seeds=(0, 1, 2, 3, 4), h: float = 1e-4) -> list[GradCheckResult]:
    return [check_model(s, h) for s in seeds]
