"""Corpus-level automatic generation metrics: BLEU-4, Distinct-1/2,
ROUGE-L, and CIDEr, all hand-verifiable (see tests for the oracles)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

BLEU_EPS = 1e-9
CIDER_SIGMA = 6.0


class MetricsError(ValueError):
    pass


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Corpus BLEU with n=1..4 modified precisions and brevity penalty.
    Zero precisions are floored at a tiny epsilon instead of zeroing the
    whole score (short replies often have no 4-gram matches)."""
    if not hypotheses:
        raise MetricsError("bleu4 needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise MetricsError(f"bleu4: {len(hypotheses)} hypotheses vs {len(references)} references")
    matched = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h_counts = _ngrams(hyp, n)
            r_counts = _ngrams(ref, n)
            total[n - 1] += sum(h_counts.values())
            matched[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    precisions = []
    for n in range(4):
        p = matched[n] / total[n] if total[n] else 0.0
        precisions.append(max(p, BLEU_EPS))
    geo_mean = math.exp(sum(math.log(p) for p in precisions) / 4.0)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(1, hyp_len))
    return 100.0 * bp * geo_mean


def distinct_n(hypotheses: list[list[str]], n: int) -> float:
    """Distinct n-grams across all hypotheses over total n-gram count."""
    if n not in (1, 2):
        raise MetricsError(f"distinct_n supports n in {{1, 2}}, got {n}")
    seen = set()
    total = 0
    for hyp in hypotheses:
        for i in range(len(hyp) - n + 1):
            seen.add(tuple(hyp[i : i + n]))
            total += 1
    return 100.0 * len(seen) / total if total else 0.0


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l_pair(hypothesis: list[str], reference: list[str]) -> float:
    """LCS F1 (harmonic mean of precision and recall), in percent."""
    if not reference:
        return 0.0
    if not hypothesis:
        return 0.0
    lcs = _lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(hypothesis)
    r = lcs / len(reference)
    return 100.0 * 2.0 * p * r / (p + r)


def rouge_l(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    if len(hypotheses) != len(references):
        raise MetricsError(f"rouge_l: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise MetricsError("rouge_l needs at least one pair")
    return sum(rouge_l_pair(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def cider(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """TF-IDF n-gram cosine similarity (n=1..4) averaged over n, with a
    gaussian length penalty, x10; IDF comes from the reference set."""
    if len(hypotheses) != len(references):
        raise MetricsError(f"cider: {len(hypotheses)} hypotheses vs {len(references)} references")
    if len(references) < 2:
        raise MetricsError("IDF undefined: cider needs a corpus of >= 2 examples")
    m = len(references)
    doc_freq: list[Counter] = [Counter() for _ in range(4)]
    for ref in references:
        for n in range(1, 5):
            for gram in set(_ngrams(ref, n)):
                doc_freq[n - 1][gram] += 1

    def tfidf(tokens, n):
        vec = {}
        for gram, count in _ngrams(tokens, n).items():
            idf = math.log(m / doc_freq[n - 1][gram]) if doc_freq[n - 1][gram] else math.log(m)
            vec[gram] = count * idf
        return vec

    scores = []
    for hyp, ref in zip(hypotheses, references):
        penalty = math.exp(-((len(hyp) - len(ref)) ** 2) / (2.0 * CIDER_SIGMA**2))
        sims = []
        for n in range(1, 5):
            hv = tfidf(hyp, n)
            rv = tfidf(ref, n)
            hn = math.sqrt(sum(v * v for v in hv.values()))
            rn = math.sqrt(sum(v * v for v in rv.values()))
            if hn == 0.0 or rn == 0.0:
                sims.append(0.0)
                continue
            dotp = sum(v * rv.get(g, 0.0) for g, v in hv.items())
            sims.append(penalty * dotp / (hn * rn))
        scores.append(10.0 * sum(sims) / 4.0)
    return sum(scores) / len(scores)


@dataclass
class EvalReport:
    bleu4: float
    dist1: float
    dist2: float
    rouge_l: float
    cider: float
    n_examples: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "bleu4": self.bleu4,
                "dist1": self.dist1,
                "dist2": self.dist2,
                "rouge_l": self.rouge_l,
                "cider": self.cider,
                "n_examples": self.n_examples,
            },
            indent=2,
            sort_keys=True,
        )

    def row(self) -> list[float]:
        return [self.bleu4, self.dist1, self.dist2, self.rouge_l, self.cider]


REPORT_COLUMNS = ("B-4", "Dist-1", "Dist-2", "R-L", "CIDEr")


def evaluate_corpus(hypotheses: list[list[str]], references: list[list[str]]) -> EvalReport:
    return EvalReport(
        bleu4=bleu4(hypotheses, references),
        dist1=distinct_n(hypotheses, 1),
        dist2=distinct_n(hypotheses, 2),
        rouge_l=rouge_l(hypotheses, references),
        cider=cider(hypotheses, references),
        n_examples=len(hypotheses),
    )


def format_table(rows: dict[str, EvalReport], extra: dict[str, dict[str, float]] | None = None) -> str:
    """Aligned text table: one row per variant, Table-1 column order
    (Dist-n is corpus-level, the common convention)."""
    extra = extra or {}
    extra_cols: list[str] = sorted({k for cols in extra.values() for k in cols})
    header = ["model"] + list(REPORT_COLUMNS) + extra_cols
    lines = [header]
    for name, report in rows.items():
        cells = [name] + [f"{v:.3f}" for v in report.row()]
        cells += [f"{extra.get(name, {}).get(c, float('nan')):.4f}" for c in extra_cols]
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = []
    for row in lines:
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(out)
