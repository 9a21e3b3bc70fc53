"""Tokenization and corpus assembly.

A byte-level BPE vocabulary is fitted from scratch: ids 0..255 are the
raw bytes, merges take the next ids in the order they were learned, and
the final id is reserved for the separator that splits prompt from story
(and doubles as the end-of-story target).  Because every merge bottoms
out in bytes, decode(encode(s)) == s for any text.

Corpus files are JSON Lines with string fields "prompt" and "story"
plus an optional "label" used only by the latent export.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_BYTE_TOKENS = 256
MIN_VOCAB_SIZE = N_BYTE_TOKENS + 1  # bytes plus the separator


class CorpusError(ValueError):
    """A corpus file or record violates the expected structure."""


def _pair_counts(sequences: list[list[int]]) -> Counter:
    counts: Counter = Counter()
    for seq in sequences:
        counts.update(zip(seq, seq[1:]))
    return counts


def _merge_sequence(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


class Vocabulary:
    """Byte-level BPE vocabulary with a reserved separator token.

    ``merges`` is the learned list of (left_id, right_id) pairs; merge k
    defines token id 256+k.  The separator takes the last id and is never
    produced by ``encode``, since no byte or merge maps to it.
    """

    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = [(int(a), int(b)) for a, b in merges]
        self.separator_id = N_BYTE_TOKENS + len(self.merges)
        self.size = self.separator_id + 1
        self._bytes_of: list[bytes] = [bytes([i]) for i in range(N_BYTE_TOKENS)]
        for a, b in self.merges:
            if a >= len(self._bytes_of) or b >= len(self._bytes_of):
                raise CorpusError(f"merge ({a}, {b}) references an undefined token")
            self._bytes_of.append(self._bytes_of[a] + self._bytes_of[b])

    def encode(self, text: str) -> list[int]:
        ids = list(text.encode("utf-8"))
        for rank, pair in enumerate(self.merges):
            if len(ids) < 2:
                break
            new_id = N_BYTE_TOKENS + rank
            if pair[0] in ids:
                ids = _merge_sequence(ids, pair, new_id)
        return ids

    def decode(self, ids) -> str:
        """Inverse of encode on encoded text; free-running generations may
        produce byte sequences that are not UTF-8, which decode to U+FFFD."""
        chunks = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise CorpusError(f"token id {i} out of range for vocabulary of size {self.size}")
            if i == self.separator_id:
                raise CorpusError("the separator id has no text form")
            chunks.append(self._bytes_of[i])
        return b"".join(chunks).decode("utf-8", errors="replace")

    def save(self, path) -> None:
        lines = [str(self.size)]
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="ascii").splitlines()
        if not lines:
            raise CorpusError(f"empty vocabulary file: {path}")
        declared = int(lines[0])
        merges = [tuple(int(x) for x in line.split()) for line in lines[1:] if line.strip()]
        vocab = cls(merges)
        if vocab.size != declared:
            raise CorpusError(f"vocabulary header says {declared} tokens but merges imply {vocab.size}")
        return vocab


def fit_vocabulary(texts, target_size: int) -> Vocabulary:
    """Learn a byte-level BPE vocabulary of at most ``target_size`` tokens.

    Greedily merges the most frequent adjacent pair; frequency ties break
    on the smaller (left_id, right_id) tuple.  Fitting stops early once no
    pair occurs twice, so the result can be smaller than requested.  Pure
    function of the corpus bytes and the target size.
    """
    if target_size < MIN_VOCAB_SIZE:
        raise CorpusError(f"target size {target_size} is below the minimum {MIN_VOCAB_SIZE}")
    sequences = [list(t.encode("utf-8")) for t in texts]
    if not sequences:
        raise CorpusError("cannot fit a vocabulary on an empty corpus")

    merges: list[tuple[int, int]] = []
    n_merges = target_size - MIN_VOCAB_SIZE
    for rank in range(n_merges):
        counts = _pair_counts(sequences)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        new_id = N_BYTE_TOKENS + rank
        sequences = [_merge_sequence(s, pair, new_id) if len(s) > 1 else s for s in sequences]
        merges.append(pair)
    return Vocabulary(merges)


def word_tokens(text: str) -> list[str]:
    """Word-level tokens for word-granularity perplexity: whitespace split."""
    return text.split()


@dataclass
class PromptStoryPair:
    """One corpus record; token fields are filled by ``encode_pair``."""

    prompt_text: str
    story_text: str
    label: str = ""
    prompt_tokens: list[int] | None = None
    story_tokens: list[int] | None = None


@dataclass
class EncodedExample:
    """Model-ready views of one pair.

    ``decoder_input`` is prompt ++ [SEP] ++ story; position i predicts the
    next token, and the final position predicts a terminal separator.
    ``loss_mask`` is True exactly where the prediction target is a story
    token or that terminal separator, so it sums to len(story) + 1.
    """

    prior_input: np.ndarray
    posterior_input: np.ndarray
    decoder_input: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    pair: PromptStoryPair = field(repr=False, default=None)


def load_corpus(path) -> list[PromptStoryPair]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({e})") from e
            if not isinstance(record, dict) or "prompt" not in record or "story" not in record:
                raise CorpusError(f"{path}:{lineno}: record needs string fields 'prompt' and 'story'")
            pairs.append(
                PromptStoryPair(
                    prompt_text=str(record["prompt"]),
                    story_text=str(record["story"]),
                    label=str(record.get("label", "")),
                )
            )
    if not pairs:
        raise CorpusError(f"corpus file has no records: {path}")
    return pairs


def encode_pair(pair: PromptStoryPair, vocab: Vocabulary, max_len: int) -> PromptStoryPair:
    """Tokenize a pair, keeping the prompt whole and truncating the story tail.

    Pairs whose prompt alone exceeds max_len / 2 are rejected, since the
    prompt is the conditioning signal and must survive intact.
    """
    x = vocab.encode(pair.prompt_text)
    y = vocab.encode(pair.story_text)
    if not x or not y:
        raise CorpusError("prompt and story must both be nonempty after encoding")
    if len(x) > max_len // 2:
        raise CorpusError(f"prompt of {len(x)} tokens exceeds half the sequence budget ({max_len // 2})")
    room = max_len - len(x) - 1
    if len(y) > room:
        y = y[:room]
    pair.prompt_tokens = x
    pair.story_tokens = y
    return pair


def build_example(pair: PromptStoryPair, vocab: Vocabulary, max_len: int) -> EncodedExample:
    if pair.prompt_tokens is None or pair.story_tokens is None:
        pair = encode_pair(pair, vocab, max_len)
    x, y = pair.prompt_tokens, pair.story_tokens
    sep = vocab.separator_id
    decoder_input = np.array(x + [sep] + y, dtype=np.int64)
    targets = np.array(x[1:] + [sep] + y + [sep], dtype=np.int64)
    loss_mask = np.zeros(len(decoder_input), dtype=bool)
    loss_mask[len(x):] = True
    return EncodedExample(
        prior_input=np.array(x, dtype=np.int64),
        posterior_input=decoder_input.copy(),
        decoder_input=decoder_input,
        targets=targets,
        loss_mask=loss_mask,
        pair=pair,
    )


def prepare_corpus(pairs: list[PromptStoryPair], vocab: Vocabulary, max_len: int) -> list[EncodedExample]:
    return [build_example(p, vocab, max_len) for p in pairs]


def toy_corpus_path() -> Path:
    """Path of the bundled 32-pair toy corpus (4 prompt types, 8 stories each)."""
    return Path(__file__).parent / "data" / "toy_corpus.jsonl"
