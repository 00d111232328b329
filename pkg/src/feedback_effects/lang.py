"""Language-convergence metrics over request transcriptions.

Perplexity comes from a tri-gram model with stupid backoff (each backoff
level scales by ``alpha``) over Lidstone-smoothed unigrams.  Sentences
are padded with two start markers and one end marker; scored positions
are the content tokens plus the end marker, so start markers never enter
the normalization count.  Out-of-vocabulary tokens map to an unknown
sentinel.

Diversity metrics are means over unordered sentence pairs of
(1 - similarity): up-to-4-gram BLEU, Jaccard overlap of token sets, and
cosine similarity of mean-pooled word embeddings.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaincc

from .domain import Cohort, CohortAssignment, StudyWindow, Subgroup, ValidatedLog
from .errors import ConfigError, ValidationError

START = "<s>"
END = "</s>"
UNK = "<unk>"

_BLEU_EPS = 1e-9


# --- tri-gram language model --------------------------------------------------


@dataclass
class TrigramLm:
    """N-gram count tables (orders 1-3) with smoothing parameters.

    Immutable in spirit once trained; scoring never mutates state, so a
    trained model is safe to share across workers.
    """

    k: float
    alpha: float
    unigrams: dict[str, int]
    bigrams: dict[tuple[str, str], int]
    trigrams: dict[tuple[str, str, str], int]
    bigram_context: dict[str, int] = field(default_factory=dict)
    trigram_context: dict[tuple[str, str], int] = field(default_factory=dict)
    total_tokens: int = 0

    def __post_init__(self):
        if not self.bigram_context:
            for (c1, _), count in self.bigrams.items():
                self.bigram_context[c1] = self.bigram_context.get(c1, 0) + count
        if not self.trigram_context:
            for (c2, c1, _), count in self.trigrams.items():
                key = (c2, c1)
                self.trigram_context[key] = self.trigram_context.get(key, 0) + count
        if not self.total_tokens:
            self.total_tokens = sum(self.unigrams.values())

    @property
    def vocabulary(self) -> set[str]:
        return set(self.unigrams)

    def _map(self, token: str) -> str:
        if token == START or token in self.unigrams:
            return token
        return UNK

    def unigram_prob(self, token: str) -> float:
        """Lidstone-smoothed unigram probability over the vocabulary."""
        v = len(self.unigrams)
        denom = self.total_tokens + self.k * v
        if denom <= 0.0:
            raise ValidationError("empty model")
        return (self.unigrams.get(self._map(token), 0) + self.k) / denom

    def score(self, token: str, context: tuple[str, str]) -> float:
        """Stupid-backoff score of a token given its two predecessors.

        Each backoff hop (tri to bi, bi to uni) scales by ``alpha``.
        """
        w = self._map(token)
        c2, c1 = self._map(context[0]), self._map(context[1])
        tri_total = self.trigram_context.get((c2, c1), 0)
        if tri_total > 0:
            count = self.trigrams.get((c2, c1, w), 0)
            if count > 0:
                return count / tri_total
        bi_total = self.bigram_context.get(c1, 0)
        if bi_total > 0:
            count = self.bigrams.get((c1, w), 0)
            if count > 0:
                return self.alpha * (count / bi_total)
        return self.alpha * self.alpha * self.unigram_prob(w)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": 1,
                "k": self.k,
                "alpha": self.alpha,
                "unigrams": self.unigrams,
                "bigrams": {" ".join(k): v for k, v in self.bigrams.items()},
                "trigrams": {" ".join(k): v for k, v in self.trigrams.items()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TrigramLm":
        doc = json.loads(text)
        if doc.get("format_version") != 1:
            raise ConfigError(f"unsupported model format {doc.get('format_version')!r}")
        return cls(
            k=float(doc["k"]),
            alpha=float(doc["alpha"]),
            unigrams={k: int(v) for k, v in doc["unigrams"].items()},
            bigrams={tuple(k.split(" ")): int(v) for k, v in doc["bigrams"].items()},
            trigrams={tuple(k.split(" ")): int(v) for k, v in doc["trigrams"].items()},
        )


def train_trigram(
    corpus: Iterable[Sequence[str]], k: float = 0.01, alpha: float = 0.4
) -> TrigramLm:
    """Count padded n-grams over the corpus.

    Every token is kept (no pruning) and the unknown sentinel enters the
    vocabulary with count zero, so it owns exactly the Lidstone mass.
    """
    if k < 0.0:
        raise ConfigError("Lidstone k must be >= 0")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError("backoff alpha must lie in (0, 1]")
    unigrams: Counter = Counter()
    bigrams: Counter = Counter()
    trigrams: Counter = Counter()
    n_sentences = 0
    for sentence in corpus:
        tokens = list(sentence)
        if not tokens:
            continue
        if any((not tok) or (" " in tok) for tok in tokens):
            raise ValidationError("tokens must be nonempty and whitespace-free")
        n_sentences += 1
        padded = [START, START, *tokens, END]
        for i in range(2, len(padded)):
            unigrams[padded[i]] += 1
            bigrams[(padded[i - 1], padded[i])] += 1
            trigrams[(padded[i - 2], padded[i - 1], padded[i])] += 1
    if n_sentences == 0:
        raise ValidationError("corpus must contain at least one nonempty sentence")
    unigrams.setdefault(UNK, 0)
    return TrigramLm(
        k=k,
        alpha=alpha,
        unigrams=dict(unigrams),
        bigrams=dict(bigrams),
        trigrams=dict(trigrams),
    )


def perplexity(lm: TrigramLm, sentence: Sequence[str]) -> float:
    """PP of a sentence: inverse joint probability, normalized by the
    number of scored positions (content tokens plus the end marker).

    Computed in log space; always >= 1.
    """
    tokens = list(sentence)
    if not tokens:
        raise ValidationError("cannot score an empty sentence")
    padded = [START, START, *tokens, END]
    log_prob = 0.0
    for i in range(2, len(padded)):
        p = lm.score(padded[i], (padded[i - 2], padded[i - 1]))
        if p <= 0.0:
            return math.inf
        log_prob += math.log(p)
    n = len(tokens) + 1
    return math.exp(-log_prob / n)


# --- cohort perplexity trend ---------------------------------------------------


@dataclass(frozen=True)
class PpTrend:
    """Mean perplexity per cohort per consecutive window; ``None`` marks
    a window with no records for that cohort."""

    window_starts_h: tuple[float, ...]
    series: dict[str, tuple[float | None, ...]]
    retained_mean_pp: float | None
    dropout_mean_pp: float | None


def cohort_pp_trend(
    lm: TrigramLm,
    log: ValidatedLog,
    cohorts: Sequence[CohortAssignment],
    window: StudyWindow,
    window_days: int = 30,
) -> PpTrend:
    """Per-cohort perplexity trajectories over consecutive windows, plus
    overall retained/dropout means within the New cohort."""
    if window_days < 1:
        raise ConfigError("window_days must be >= 1")
    cohort_of = {a.user_id: a.cohort for a in cohorts}
    subgroup_of = {a.user_id: a.subgroup for a in cohorts}

    step = 24.0 * window_days
    n_windows = max(1, math.ceil((window.end_h - window.start_h) / step))
    starts = tuple(window.start_h + i * step for i in range(n_windows))

    sums = {c.value: [0.0] * n_windows for c in Cohort}
    counts = {c.value: [0] * n_windows for c in Cohort}
    sub_sums = {Subgroup.RETAINED: 0.0, Subgroup.DROPOUT: 0.0}
    sub_counts = {Subgroup.RETAINED: 0, Subgroup.DROPOUT: 0}

    for rec in log:
        cohort = cohort_of.get(rec.user_id)
        if cohort is None or not window.start_h <= rec.timestamp_h <= window.end_h:
            continue
        idx = min(int((rec.timestamp_h - window.start_h) // step), n_windows - 1)
        pp = perplexity(lm, rec.tokens)
        sums[cohort.value][idx] += pp
        counts[cohort.value][idx] += 1
        sub = subgroup_of.get(rec.user_id, Subgroup.NEITHER)
        if sub in sub_sums:
            sub_sums[sub] += pp
            sub_counts[sub] += 1

    series = {
        name: tuple(
            (sums[name][i] / counts[name][i]) if counts[name][i] else None
            for i in range(n_windows)
        )
        for name in sums
    }
    return PpTrend(
        window_starts_h=starts,
        series=series,
        retained_mean_pp=(
            sub_sums[Subgroup.RETAINED] / sub_counts[Subgroup.RETAINED]
            if sub_counts[Subgroup.RETAINED]
            else None
        ),
        dropout_mean_pp=(
            sub_sums[Subgroup.DROPOUT] / sub_counts[Subgroup.DROPOUT]
            if sub_counts[Subgroup.DROPOUT]
            else None
        ),
    )


# --- pairwise diversity metrics -------------------------------------------------


def _require_pairable(sentences: Sequence[Sequence[str]]) -> list[list[str]]:
    sents = [list(s) for s in sentences]
    if len(sents) < 2:
        raise ValidationError("diversity needs at least two sentences")
    if any(not s for s in sents):
        raise ValidationError("sentences must be nonempty")
    return sents


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_order: int = 4) -> float:
    """Sentence BLEU with uniform weights over the orders the candidate
    supports, add-epsilon smoothing of zero match counts, and the usual
    brevity penalty."""
    log_precisions = []
    for n in range(1, max_order + 1):
        cand = _ngram_counts(candidate, n)
        total = sum(cand.values())
        if total == 0:
            break
        ref = _ngram_counts(reference, n)
        matched = sum(min(count, ref[gram]) for gram, count in cand.items())
        log_precisions.append(math.log(max(matched, _BLEU_EPS) / total))
    if not log_precisions:
        return 0.0
    geo_mean = math.exp(sum(log_precisions) / len(log_precisions))
    c, r = len(candidate), len(reference)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * geo_mean


def self_bleu_diversity(sentences: Sequence[Sequence[str]]) -> float:
    """Mean over unordered pairs of 1 - BLEU, with BLEU symmetrized by
    averaging the two directions."""
    sents = _require_pairable(sentences)
    total, pairs = 0.0, 0
    for i in range(len(sents)):
        for j in range(i + 1, len(sents)):
            sim = 0.5 * (bleu(sents[i], sents[j]) + bleu(sents[j], sents[i]))
            total += 1.0 - sim
            pairs += 1
    return total / pairs


def jaccard_diversity(sentences: Sequence[Sequence[str]]) -> float:
    """Mean over unordered pairs of 1 - |A intersect B| / |A union B|
    on token sets."""
    sents = _require_pairable(sentences)
    sets = [set(s) for s in sents]
    total, pairs = 0.0, 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            inter = len(sets[i] & sets[j])
            union = len(sets[i] | sets[j])
            total += 1.0 - inter / union
            pairs += 1
    return total / pairs


@dataclass(frozen=True)
class EmbeddingTable:
    """Token embeddings of one fixed dimension, user-supplied."""

    vectors: dict[str, np.ndarray]
    unk_token: str = UNK

    def __post_init__(self):
        if not self.vectors:
            raise ValidationError("embedding table is empty")
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValidationError("all embeddings must share one 1-D shape")
        if any(not np.isfinite(v).all() for v in self.vectors.values()):
            raise ValidationError("embeddings must be finite")

    def lookup(self, token: str) -> np.ndarray:
        if token in self.vectors:
            return self.vectors[token]
        if self.unk_token in self.vectors:
            return self.vectors[self.unk_token]
        raise ValidationError(
            f"token {token!r} missing from the embedding table and no "
            f"{self.unk_token!r} fallback is present"
        )

    def sentence_embedding(self, tokens: Sequence[str]) -> np.ndarray:
        return np.mean([self.lookup(t) for t in tokens], axis=0)


def read_embeddings(path, unk_token: str = UNK) -> EmbeddingTable:
    """Read ``token v1 v2 ... vd`` lines into an embedding table."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ValidationError(f"bad embedding line {lineno}: {exc}") from exc
    return EmbeddingTable(vectors, unk_token)


def wed_diversity(sentences: Sequence[Sequence[str]], table: EmbeddingTable) -> float:
    """Mean over unordered pairs of 1 - cosine similarity of mean-pooled
    sentence embeddings, clamped into [0, 1]."""
    sents = _require_pairable(sentences)
    embs = [table.sentence_embedding(s) for s in sents]
    total, pairs = 0.0, 0
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            ni, nj = np.linalg.norm(embs[i]), np.linalg.norm(embs[j])
            if ni == 0.0 or nj == 0.0:
                raise ValidationError("zero-norm sentence embedding")
            cos = float(embs[i] @ embs[j] / (ni * nj))
            total += min(1.0, max(0.0, 1.0 - cos))
            pairs += 1
    return total / pairs


# --- quality x perplexity contingency -------------------------------------------


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Counts of helpful/unhelpful responses split by high/low perplexity."""

    helpful_high: int
    helpful_low: int
    unhelpful_high: int
    unhelpful_low: int

    def __post_init__(self):
        if min(
            self.helpful_high, self.helpful_low, self.unhelpful_high, self.unhelpful_low
        ) < 0:
            raise ValidationError("contingency counts must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                [self.helpful_high, self.helpful_low],
                [self.unhelpful_high, self.unhelpful_low],
            ],
            dtype=float,
        )

    def unhelpful_rate_high(self) -> float:
        return self.unhelpful_high / (self.helpful_high + self.unhelpful_high)

    def unhelpful_rate_low(self) -> float:
        return self.unhelpful_low / (self.helpful_low + self.unhelpful_low)


def contingency_table(
    pp_scores: Sequence[float],
    unhelpful: Sequence[int],
    threshold: float | None = None,
    threshold_quantile: float = 0.9,
) -> ContingencyTable2x2:
    """Split scored requests at a perplexity threshold (default: the 90th
    percentile of the scores) and cross-tabulate against the labels."""
    pp = np.asarray(pp_scores, dtype=float)
    z = np.asarray(unhelpful, dtype=np.int64)
    if len(pp) != len(z) or len(pp) == 0:
        raise ValidationError("need matching, nonempty scores and labels")
    cut = float(np.quantile(pp, threshold_quantile)) if threshold is None else threshold
    high = pp > cut
    return ContingencyTable2x2(
        helpful_high=int(((z == 0) & high).sum()),
        helpful_low=int(((z == 0) & ~high).sum()),
        unhelpful_high=int(((z == 1) & high).sum()),
        unhelpful_low=int(((z == 1) & ~high).sum()),
    )


def chi_squared_2x2(table: ContingencyTable2x2) -> tuple[float, float]:
    """Pearson chi-squared test of independence, no continuity correction.

    Returns (statistic, p-value); the p-value is the chi-squared(1)
    survival function, a regularized upper incomplete gamma.
    """
    counts = table.as_array()
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    total = counts.sum()
    if np.any(rows <= 0.0) or np.any(cols <= 0.0):
        raise ValidationError("every row and column margin must be positive")
    expected = np.outer(rows, cols) / total
    stat = float(((counts - expected) ** 2 / expected).sum())
    p_value = float(gammaincc(0.5, stat / 2.0))
    return stat, p_value


# --- corpus files ---------------------------------------------------------------


def read_corpus(path) -> list[list[str]]:
    """One whitespace-tokenized sentence per line; blank lines skipped."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if tokens:
                sentences.append(tokens)
    return sentences
