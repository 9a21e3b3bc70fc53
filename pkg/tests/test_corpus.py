import json
from collections import Counter

import numpy as np
import pytest

from storyvae import corpus as cp


def random_texts(rng, n):
    out = []
    for _ in range(n):
        length = int(rng.integers(0, 40))
        out.append("".join(chr(int(c)) for c in rng.integers(32, 0x2FFF, size=length)))
    return out


class TestFitVocabulary:
    def test_minimum_size_is_bytes_plus_separator(self):
        vocab = cp.fit_vocabulary(["anything at all"], 257)
        assert vocab.size == 257
        assert vocab.merges == []
        assert vocab.separator_id == 256

    def test_single_merge_on_aaaa(self):
        vocab = cp.fit_vocabulary(["aaaa"], 258)
        assert vocab.merges == [(ord("a"), ord("a"))]
        assert vocab.size == 258
        # frequency oracle: (a, a) is the only adjacent pair
        counts = Counter(zip(b"aaaa", b"aaaa"[1:]))
        assert counts[(97, 97)] == 3

    def test_most_frequent_pair_merges_first(self):
        corpus = ["ababab", "cd"]
        vocab = cp.fit_vocabulary(corpus, 258)
        counts = Counter()
        for text in corpus:
            data = text.encode()
            counts.update(zip(data, data[1:]))
        best = max(counts.values())
        expected = min(p for p, c in counts.items() if c == best)
        assert vocab.merges[0] == expected

    def test_deterministic_across_runs(self):
        texts = ["the cat sat on the mat", "the bat and the rat", "mats and cats"]
        a = cp.fit_vocabulary(texts, 300)
        b = cp.fit_vocabulary(texts, 300)
        assert a.merges == b.merges

    def test_stops_early_when_nothing_repeats(self):
        vocab = cp.fit_vocabulary(["abcdefg"], 400)
        assert vocab.size == 257  # no adjacent pair occurs twice

    def test_too_small_target_rejected(self):
        with pytest.raises(cp.CorpusError):
            cp.fit_vocabulary(["abc"], 256)

    def test_empty_corpus_rejected(self):
        with pytest.raises(cp.CorpusError):
            cp.fit_vocabulary([], 300)


class TestEncodeDecode:
    def test_empty_string(self):
        vocab = cp.fit_vocabulary(["abc abc"], 260)
        assert vocab.encode("") == []
        assert vocab.decode([]) == ""

    def test_byte_vocab_encodes_raw_bytes(self):
        vocab = cp.fit_vocabulary(["zzzz"], 257)
        assert vocab.encode("ab") == [0x61, 0x62]

    def test_roundtrip_random_unicode(self):
        rng = np.random.default_rng(0)
        vocab = cp.fit_vocabulary(["common words repeat common words repeat"], 300)
        for text in random_texts(rng, 1000):
            assert vocab.decode(vocab.encode(text)) == text

    def test_separator_never_emitted(self):
        vocab = cp.fit_vocabulary(["sep sep sep"], 280)
        rng = np.random.default_rng(1)
        for text in random_texts(rng, 200) + ["sep", "<|endoftext|>"]:
            assert vocab.separator_id not in vocab.encode(text)

    def test_decode_out_of_range_rejected(self):
        vocab = cp.fit_vocabulary(["abc"], 257)
        with pytest.raises(cp.CorpusError):
            vocab.decode([vocab.size])
        with pytest.raises(cp.CorpusError):
            vocab.decode([vocab.separator_id])

    def test_fitted_corpus_is_fixed_point(self):
        texts = ["round and round it goes", "around the roundabout"]
        vocab = cp.fit_vocabulary(texts, 290)
        for t in texts:
            assert vocab.decode(vocab.encode(t)) == t


class TestVocabularyFile:
    def test_save_load_roundtrip(self, tmp_path):
        vocab = cp.fit_vocabulary(["the rain in spain stays mainly in the plain"], 300)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = cp.Vocabulary.load(path)
        assert loaded.merges == vocab.merges
        assert loaded.size == vocab.size
        assert loaded.encode("rain in spain") == vocab.encode("rain in spain")

    def test_file_bytes_reproducible(self, tmp_path):
        texts = ["mississippi", "missing pieces"]
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        cp.fit_vocabulary(texts, 280).save(a)
        cp.fit_vocabulary(texts, 280).save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_header_mismatch_detected(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("400\n97 98\n")
        with pytest.raises(cp.CorpusError):
            cp.Vocabulary.load(path)


class TestBuildExample:
    @pytest.fixture
    def vocab(self):
        return cp.fit_vocabulary(["ab ab ab", "cd cd"], 257)

    def test_worked_layout(self):
        vocab = cp.fit_vocabulary(["x"], 257)
        pair = cp.PromptStoryPair("p", "s")
        pair.prompt_tokens = [5]
        pair.story_tokens = [7]
        ex = cp.build_example(pair, vocab, max_len=16)
        assert list(ex.posterior_input) == [5, 256, 7]
        assert list(ex.decoder_input) == [5, 256, 7]
        assert list(ex.targets) == [256, 7, 256]
        assert list(ex.loss_mask) == [False, True, True]

    def test_prior_input_has_no_separator_or_story(self, vocab):
        pair = cp.PromptStoryPair("ab ab", "cd")
        ex = cp.build_example(pair, vocab, max_len=32)
        assert vocab.separator_id not in ex.prior_input
        assert list(ex.prior_input) == pair.prompt_tokens

    def test_mask_counts_story_plus_terminal(self, vocab):
        rng = np.random.default_rng(2)
        for _ in range(25):
            prompt = "".join(rng.choice(list("abcd"), size=rng.integers(1, 6)))
            story = "".join(rng.choice(list("abcd"), size=rng.integers(1, 10)))
            ex = cp.build_example(cp.PromptStoryPair(prompt, story), vocab, max_len=64)
            assert ex.loss_mask.sum() == len(ex.pair.story_tokens) + 1

    def test_posterior_is_prior_plus_sep_plus_story(self, vocab):
        ex = cp.build_example(cp.PromptStoryPair("ab", "cd cd"), vocab, max_len=32)
        rebuilt = list(ex.prior_input) + [vocab.separator_id] + list(ex.pair.story_tokens)
        assert list(ex.posterior_input) == rebuilt

    def test_story_tail_truncated_to_fit(self, vocab):
        pair = cp.PromptStoryPair("ab", "c" * 100)
        ex = cp.build_example(pair, vocab, max_len=16)
        assert len(ex.decoder_input) == 16
        assert list(ex.prior_input) == pair.prompt_tokens  # prompt kept whole

    def test_oversized_prompt_rejected(self, vocab):
        with pytest.raises(cp.CorpusError, match="prompt"):
            cp.build_example(cp.PromptStoryPair("a" * 20, "b"), vocab, max_len=16)

    def test_empty_sides_rejected(self, vocab):
        with pytest.raises(cp.CorpusError):
            cp.build_example(cp.PromptStoryPair("", "story"), vocab, max_len=16)
        with pytest.raises(cp.CorpusError):
            cp.build_example(cp.PromptStoryPair("prompt", ""), vocab, max_len=16)


class TestCorpusFile:
    def test_load_jsonl(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(
            json.dumps({"prompt": "p1", "story": "s1"}) + "\n"
            + json.dumps({"prompt": "p2", "story": "s2", "label": "x"}) + "\n"
        )
        pairs = cp.load_corpus(path)
        assert [p.prompt_text for p in pairs] == ["p1", "p2"]
        assert pairs[1].label == "x"

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"prompt": "p"}) + "\n")
        with pytest.raises(cp.CorpusError):
            cp.load_corpus(path)

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(cp.CorpusError, match="invalid JSON"):
            cp.load_corpus(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(cp.CorpusError):
            cp.load_corpus(tmp_path / "nope.jsonl")

    def test_toy_corpus_ships_with_package(self):
        pairs = cp.load_corpus(cp.toy_corpus_path())
        assert len(pairs) == 32
        assert len({p.label for p in pairs}) == 4


def test_word_tokens_whitespace_rule():
    assert cp.word_tokens("  the  quick\tbrown\nfox ") == ["the", "quick", "brown", "fox"]
    assert cp.word_tokens("") == []
