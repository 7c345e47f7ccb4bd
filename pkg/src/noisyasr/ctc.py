"""CTC loss (log-space forward-backward), a brute-force oracle, greedy decoding."""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .autodiff import Tensor, logsumexp

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted in the available number of frames."""


def min_frames(target: Sequence[int]) -> int:
    """Frames needed: one per label plus a blank between adjacent repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _validate(lp: np.ndarray, target: Sequence[int], blank: int):
    if lp.ndim != 2:
        raise ValueError(f"log-probs must be (T, V), got {lp.shape}")
    T, V = lp.shape
    if len(target) < 1:
        raise ValueError("empty target")
    for s in target:
        if not 0 <= s < V or s == blank:
            raise ValueError(f"invalid target symbol {s} (vocab size {V}, blank {blank})")
    need = min_frames(target)
    if T < need:
        raise InfeasibleTargetError(f"target of length {len(target)} needs {need} frames, got {T}")


def _extended(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    # a label may be reached from two positions back unless it repeats the previous label
    skip = np.zeros(ext.size, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def ctc_forward_backward(lp: np.ndarray, target: Sequence[int], blank: int = 0):
    """Negative log-likelihood and its gradient w.r.t. ``lp`` (T x V log-probs)."""
    lp = np.asarray(lp, dtype=np.float64)
    target = [int(s) for s in target]
    _validate(lp, target, blank)
    T = lp.shape[0]
    ext, skip = _extended(target, blank)
    S = ext.size
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_p):
        raise InfeasibleTargetError("target has zero probability under the given frames")
    occupancy = np.exp(alpha + beta - log_p)  # (T, S)
    grad = np.zeros_like(lp)
    np.add.at(grad, (slice(None), ext), -occupancy)
    return float(-log_p), grad


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Scalar CTC loss node for one utterance of (T, V) log-probabilities."""
    nll, grad = ctc_forward_backward(log_probs.value, target, blank)
    return Tensor(nll, (log_probs,), "ctc", lambda g: (g * grad,))


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]], blank: int = 0) -> Tensor:
    """Mean over utterances of per-utterance CTC loss; ``log_probs`` is (B, T, V)."""
    B = log_probs.shape[0]
    if len(targets) != B:
        raise ValueError(f"{B} utterances but {len(targets)} targets")
    nll = np.empty(B)
    grad = np.empty_like(log_probs.value)
    for b in range(B):
        nll[b], grad[b] = ctc_forward_backward(log_probs.value[b], targets[b], blank)
    grad /= B
    return Tensor(nll.mean(), (log_probs,), "ctc", lambda g: (g * grad,))


def collapse(path: Sequence[int], blank: int = 0) -> list[int]:
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force(lp: np.ndarray, target: Sequence[int], blank: int = 0) -> float:
    """CTC negative log-likelihood by summing over all V**T frame paths."""
    lp = np.asarray(lp, dtype=np.float64)
    T, V = lp.shape
    if T > 6 or V > 4:
        raise ValueError(f"enumeration bound is T <= 6, V <= 4; got T={T}, V={V}")
    target = [int(s) for s in target]
    logs = [lp[np.arange(T), path].sum()
            for path in itertools.product(range(V), repeat=T)
            if collapse(path, blank) == target]
    if not logs:
        raise InfeasibleTargetError(f"no path of {T} frames collapses to {target}")
    return float(-logsumexp(np.array(logs)))


def greedy_path(log_probs: np.ndarray, blank: int = 0) -> list[int]:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return collapse(np.argmax(np.asarray(log_probs), axis=-1).tolist(), blank)


def greedy_decode(log_probs: np.ndarray, vocab: Sequence[str], blank: int = 0) -> str:
    """Per-frame argmax, merge repeats, drop blanks, map to characters."""
    return "".join(vocab[i] for i in greedy_path(log_probs, blank))
