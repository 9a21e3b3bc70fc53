"""Automatic metrics: dual-granularity perplexity, ROUGE, latent export.

Perplexity is teacher-forced over the story targets with the latent fixed
to the prior mean, then the summed NLL is normalized either by the number
of scored subword targets or by the whitespace word count of the story
texts.  ROUGE lowercases and whitespace-tokenizes both sides; ROUGE-n uses
clipped n-gram counts and ROUGE-L the longest common subsequence.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import latent as lt
from .corpus import EncodedExample, word_tokens
from .model import StoryVAE
from .transformer import ContractError


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # an empty side was scored as all zeros

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.precision, self.recall, self.f1)


@dataclass
class EvalReport:
    ppl_subword: float
    ppl_word: float
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore
    n_examples: int
    n_subword_targets: int
    n_words: int

    def to_dict(self) -> dict:
        def score(s: RougeScore) -> dict:
            return {"precision": s.precision, "recall": s.recall, "f1": s.f1}

        return {
            "perplexity": {"subword": self.ppl_subword, "word": self.ppl_word},
            "rouge1": score(self.rouge1),
            "rouge2": score(self.rouge2),
            "rougeL": score(self.rougeL),
            "n_examples": self.n_examples,
            "n_subword_targets": self.n_subword_targets,
            "n_words": self.n_words,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def _rouge_tokens(text: str) -> list[str]:
    return text.lower().split()


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            row.append(prev[j - 1] + 1 if x == y else max(prev[j], row[-1]))
        prev = row
    return prev[-1]


def rouge_scores(candidate_text: str, reference_text: str, variant) -> RougeScore:
    """ROUGE-1/2/L precision, recall and F1 for one candidate/reference pair.

    An empty side yields an all-zero score flagged as degenerate rather
    than an error, so corpus aggregation can continue.
    """
    if variant not in (1, 2, "1", "2", "L", "l"):
        raise ContractError(f"unknown ROUGE variant: {variant!r}")
    cand = _rouge_tokens(candidate_text)
    ref = _rouge_tokens(reference_text)
    if not cand or not ref:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    if variant in ("L", "l"):
        lcs = _lcs_length(cand, ref)
        p = lcs / len(cand)
        r = lcs / len(ref)
        return RougeScore(p, r, _f1(p, r))
    n = int(variant)
    cand_counts = _ngram_counts(cand, n)
    ref_counts = _ngram_counts(ref, n)
    if not cand_counts or not ref_counts:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    overlap = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    p = overlap / sum(cand_counts.values())
    r = overlap / sum(ref_counts.values())
    return RougeScore(p, r, _f1(p, r))


def story_nll(model: StoryVAE, example: EncodedExample) -> float:
    """Teacher-forced masked NLL of one example with the prior-mean latent."""
    latent = lt.mean_code(model.encode_prior(example.prior_input), lt.LatentSource.PRIOR_MEAN)
    logits = model.decode_logits(example.decoder_input, latent)
    total, _ = ag.cross_entropy(logits, example.targets, example.loss_mask)
    return float(total.data)


def corpus_nll(model: StoryVAE, examples) -> tuple[float, int, int]:
    """Total masked NLL plus the subword and word normalizer counts."""
    if not examples:
        raise ContractError("perplexity needs a nonempty corpus")
    total = 0.0
    subwords = 0
    words = 0
    for ex in examples:
        total += story_nll(model, ex)
        subwords += int(ex.loss_mask.sum())
        words += len(word_tokens(ex.pair.story_text))
    return total, subwords, words


def ppl_from_totals(total_nll: float, token_count: int) -> float:
    if token_count < 1:
        raise ContractError("perplexity normalizer must be positive")
    return math.exp(total_nll / token_count)


def perplexity(model: StoryVAE, examples, granularity: str) -> float:
    if granularity not in ("subword", "word"):
        raise ContractError(f"granularity must be 'subword' or 'word', got {granularity!r}")
    total, subwords, words = corpus_nll(model, examples)
    return ppl_from_totals(total, subwords if granularity == "subword" else words)


def export_latents(model: StoryVAE, examples, which: str, path) -> int:
    """Write one TSV row per example: index, label, then the d' mean coordinates."""
    if which not in ("prior-mean", "posterior-mean"):
        raise ContractError(f"which must be 'prior-mean' or 'posterior-mean', got {which!r}")
    lines = []
    for i, ex in enumerate(examples):
        if which == "prior-mean":
            gaussian = model.encode_prior(ex.prior_input)
        else:
            sep = int(ex.decoder_input[len(ex.prior_input)])
            story = ex.decoder_input[len(ex.prior_input) + 1:]
            gaussian = model.encode_posterior(ex.prior_input, story, sep)
        label = ex.pair.label if ex.pair is not None else ""
        cells = [str(i), label] + [repr(float(v)) for v in gaussian.mu.data]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines)


def evaluate(model: StoryVAE, examples, generated_stories: list[str]) -> EvalReport:
    """Corpus report: PPL at both granularities plus mean ROUGE of the generations."""
    if len(generated_stories) != len(examples):
        raise ContractError("need exactly one generated story per example")
    total, subwords, words = corpus_nll(model, examples)

    sums = {v: np.zeros(3) for v in (1, 2, "L")}
    for ex, story in zip(examples, generated_stories):
        for v in (1, 2, "L"):
            sums[v] += np.array(rouge_scores(story, ex.pair.story_text, v).as_tuple())
    n = len(examples)
    means = {v: sums[v] / n for v in sums}
    return EvalReport(
        ppl_subword=ppl_from_totals(total, subwords),
        ppl_word=ppl_from_totals(total, words),
        rouge1=RougeScore(*means[1]),
        rouge2=RougeScore(*means[2]),
        rougeL=RougeScore(*means["L"]),
        n_examples=n,
        n_subword_targets=subwords,
        n_words=words,
    )
