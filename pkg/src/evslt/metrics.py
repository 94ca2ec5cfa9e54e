"""Corpus BLEU-1..4 and ROUGE-L over token id sequences."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from evslt.errors import DataError, EmptyCorpus

Sentence = Sequence[Hashable]


@dataclass
class ScoreReport:
    rouge_l: float
    bleu: dict[int, float]
    corpus_size: int

    def to_json(self) -> str:
        d = asdict(self)
        d["bleu"] = {str(k): v for k, v in self.bleu.items()}
        return json.dumps(d, sort_keys=True)


def ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EmptyCorpus("nothing to score")


def _as_ref_lists(references) -> list[list[Sentence]]:
    # a reference entry is either one sentence or a list of alternative sentences
    out = []
    for ref in references:
        if ref and isinstance(ref[0], (list, tuple)):
            out.append([list(r) for r in ref])
        else:
            out.append([list(ref)])
    return out


def modified_precisions(candidates: Sequence[Sentence], references, n_max: int = 4,
                        smooth: bool = False) -> list[tuple[int, int]]:
    """Corpus (clipped matches, candidate n-grams) for n = 1..n_max."""
    refs = _as_ref_lists(references)
    stats = []
    for n in range(1, n_max + 1):
        match = total = 0
        for cand, alts in zip(candidates, refs):
            cand_counts = ngrams(list(cand), n)
            max_ref: Counter = Counter()
            for r in alts:
                for g, c in ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], c)
            match += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            total += sum(cand_counts.values())
        if smooth and n > 1:
            match, total = match + 1, total + 1
        stats.append((match, total))
    return stats


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len > ref_len:
        return 1.0
    if cand_len == 0:
        return 0.0
    return math.exp(1.0 - ref_len / cand_len)


def _closest_ref_len(cand_len: int, alts: list[Sentence]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in alts)[1]


def bleu_n(candidates: Sequence[Sentence], references, n_max: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU with uniform weights over orders 1..n_max and brevity penalty.

    Any zero precision gives 0 unless ``smooth`` adds one to the counts of
    orders above 1.
    """
    _check(candidates, references)
    if not 1 <= n_max <= 4:
        raise ValueError("n_max must be in 1..4")
    refs = _as_ref_lists(references)
    c = sum(len(cand) for cand in candidates)
    r = sum(_closest_ref_len(len(cand), alts) for cand, alts in zip(candidates, refs))
    log_p = 0.0
    for match, total in modified_precisions(candidates, refs, n_max, smooth):
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total) / n_max
    return brevity_penalty(c, r) * math.exp(log_p)


def lcs_lengths(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise LCS lengths of integer token arrays ``a`` (N, La) and ``b`` (N, Lb).

    Negative entries are padding and never match, so ragged batches can be
    padded to a common width.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b):
        raise ValueError("expected (N, La) and (N, Lb) arrays")
    n, lb = b.shape
    dtype = np.int16 if max(a.shape[1], lb) < 2**15 else np.int64
    bt = np.ascontiguousarray(b.T)
    prev = np.zeros((lb + 1, n), dtype)
    for i in range(a.shape[1]):
        eq = ((bt == a[:, i]) & (bt >= 0)).astype(dtype)
        cur = np.zeros_like(prev)
        for j in range(lb):
            # with a match prev[j] + 1 always dominates the other two cells
            np.maximum(prev[j] + eq[j], prev[j + 1], out=cur[j + 1])
            np.maximum(cur[j + 1], cur[j], out=cur[j + 1])
        prev = cur
    return prev[-1].astype(np.int64)


def lcs_length(a: Sentence, b: Sentence) -> int:
    if not len(a) or not len(b):
        return 0
    ids: dict = {}
    ia = np.array([[ids.setdefault(t, len(ids)) for t in a]])
    ib = np.array([[ids.setdefault(t, len(ids)) for t in b]])
    return int(lcs_lengths(ia, ib)[0])


def rouge_l_pair(cand: Sentence, ref: Sentence, beta: float = 1.2) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref)
    precision = lcs / len(cand)
    return (1 + beta**2) * recall * precision / (recall + beta**2 * precision)


def rouge_l(candidates: Sequence[Sentence], references: Sequence[Sentence], beta: float = 1.2) -> float:
    """Mean sentence-level LCS F-measure."""
    _check(candidates, references)
    return sum(rouge_l_pair(list(c), list(r), beta) for c, r in zip(candidates, references)) / len(candidates)


def score_corpus(candidates: Sequence[Sentence], references: Sequence[Sentence],
                 smooth: bool = False, beta: float = 1.2) -> ScoreReport:
    return ScoreReport(
        rouge_l=rouge_l(candidates, references, beta),
        bleu={n: bleu_n(candidates, references, n, smooth) for n in range(1, 5)},
        corpus_size=len(candidates),
    )


def read_predictions(path) -> tuple[list[list[str]], list[list[str]]]:
    """(hypotheses, references) as whitespace token lists from a JSON Lines dump."""
    hyps, refs = [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for ln in lines:
        if not ln.strip():
            continue
        rec = json.loads(ln)
        hyps.append(rec["hypothesis"].split())
        refs.append(rec["reference"].split())
    return hyps, refs


def score_prediction_file(path, smooth: bool = False) -> ScoreReport:
    hyps, refs = read_predictions(path)
    return score_corpus(hyps, refs, smooth)
