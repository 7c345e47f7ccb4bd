"""Word error rate and the (noise type x SNR) results grid."""
from __future__ import annotations

import csv
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import NOISE_TYPES, NoiseLabel, load_audio

RESULTS_HEADER = ["method", "noise_label", "snr_db", "wer"]
TEST_SNRS = (0, 5, 10, 15, 20)


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace split, strip surrounding punctuation."""
    toks = (t.strip(string.punctuation) for t in text.lower().split())
    return [t for t in toks if t]


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance (unit-cost substitutions, insertions, deletions)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: str, hyp: str) -> float:
    """Word error rate in percent; may exceed 100 when insertions dominate."""
    r = tokenize(ref)
    if not r:
        raise ValueError("reference has no words")
    return 100.0 * edit_distance(r, tokenize(hyp)) / len(r)


@dataclass
class CellCounts:
    edits: int = 0
    words: int = 0

    def add(self, ref: str, hyp: str):
        r = tokenize(ref)
        self.edits += edit_distance(r, tokenize(hyp))
        self.words += len(r)

    @property
    def wer(self) -> float:
        if self.words == 0:
            raise ValueError("cell has no reference words")
        return 100.0 * self.edits / self.words


@dataclass
class ResultsGrid:
    method: str
    cells: dict[tuple[str, float], float] = field(default_factory=dict)
    clean_wer: float | None = None

    def rows(self) -> list[list[str]]:
        out = []
        for (label, snr), w in sorted(self.cells.items(), key=lambda kv: (_label_order(kv[0][0]), kv[0][1])):
            out.append([self.method, label, f"{snr:g}", f"{w:.1f}"])
        if self.clean_wer is not None:
            out.append([self.method, "Clean", "", f"{self.clean_wer:.1f}"])
        return out

    def mean_at(self, snr: float) -> float:
        vals = [w for (_, s), w in self.cells.items() if s == snr]
        return float(np.mean(vals))


def _label_order(label: str) -> int:
    try:
        return NoiseLabel(label).index
    except ValueError:
        return 99


def score_grid(method: str, records: Sequence[tuple], noise_types: Sequence[str] | None = None,
               snrs: Sequence[float] = TEST_SNRS) -> ResultsGrid:
    """Pool (noise_label or None/"Clean", snr_db, ref, hyp) records into a grid.

    Each cell's WER is corpus-level: total edits over total reference words.
    Every (type, snr) cell and the clean cell must be covered.
    """
    noise_types = [t.value for t in NOISE_TYPES] if noise_types is None else list(noise_types)
    counts: dict[tuple[str, float], CellCounts] = {}
    clean = CellCounts()
    for label, snr, ref, hyp in records:
        label = getattr(label, "value", label)
        if label in (None, "", "Clean"):
            clean.add(ref, hyp)
        else:
            counts.setdefault((label, float(snr)), CellCounts()).add(ref, hyp)
    missing = [(t, float(s)) for t in noise_types for s in snrs if (t, float(s)) not in counts]
    if clean.words == 0:
        missing.append(("Clean", None))
    if missing:
        raise ValueError("missing grid cells: " + ", ".join(f"({t}, {s})" for t, s in missing))
    return ResultsGrid(method, {k: c.wer for k, c in counts.items()}, clean.wer)


def evaluate_grid(params, entries, base_dir, method: str = "model", snrs: Sequence[float] = TEST_SNRS,
                  noise_types: Sequence[str] | None = None) -> ResultsGrid:
    """Decode every manifest entry with greedy decoding and build the grid.

    ``base_dir`` resolves relative audio paths; it may also map utterance id to directory.
    """
    from .train import PreparedSet, decode_set, feature_fn
    feat = feature_fn(params.cfg)
    base = base_dir.get if isinstance(base_dir, dict) else (lambda _uid: base_dir)
    data = PreparedSet([e.utterance_id for e in entries],
                       [feat(load_audio(e, base(e.utterance_id))) for e in entries],
                       [e.transcript for e in entries], [e.noise_label for e in entries])
    hyps = decode_set(params, data)
    records = [(e.noise_label, e.snr_db, e.transcript, h) for e, h in zip(entries, hyps)]
    return score_grid(method, records, noise_types, snrs)


def write_results_csv(grids: Sequence[ResultsGrid], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for g in grids:
            w.writerows(g.rows())
