import numpy as np
import pytest

from kwspot.errors import (
    BatchTooSmall,
    CollisionUnresolvable,
    DegenerateEmbedding,
    ExhaustedVocabulary,
    KeywordTooShort,
    NoEligibleKeyword,
)
from kwspot.negatives import (
    DEFAULT_MIXTURE,
    NegativeStrategy,
    SimilarCharMap,
    char_substitute,
    concat_negative,
    cosine_distance,
    make_training_pair,
    nearest_keyword,
    normalize_mixture,
    random_negative,
)


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


VOCAB = ["apple", "banana", "cherry", "date", "elder", "fig", "grape",
         "kiwi", "lemon", "mango", "olive", "peach"]


class TestRandomNegative:
    def test_forced_choice(self):
        for seed in range(20):
            assert random_negative({"a", "b", "c"}, ["a", "b"], rng(seed)) == "c"

    def test_never_in_transcript(self):
        g = rng(1)
        for _ in range(10_000):
            out = random_negative(VOCAB, ["apple", "fig"], g)
            assert out not in ("apple", "fig")

    def test_exhausted(self):
        with pytest.raises(ExhaustedVocabulary):
            random_negative({"a", "b"}, ["a", "b"], rng(0))

    def test_uniformity_chi_squared(self):
        from scipy.stats import chisquare

        g = rng(2)
        cands = sorted(set(VOCAB) - {"apple", "fig"})
        counts = {c: 0 for c in cands}
        n = 10_000
        for _ in range(n):
            counts[random_negative(VOCAB, ["apple", "fig"], g)] += 1
        stat, p = chisquare(list(counts.values()))
        assert p > 0.01


class TestCharSubstitute:
    def test_paper_examples(self):
        m = SimilarCharMap()
        assert char_substitute("pass", m, rng(0), positions=[0]) == "bass"
        assert char_substitute("so", m, rng(0), positions=[0]) == "zo"

    def test_output_differs_from_input(self):
        m = SimilarCharMap()
        g = rng(3)
        for _ in range(10_000):
            w = VOCAB[int(g.integers(len(VOCAB)))]
            assert char_substitute(w, m, g) != w

    def test_unmapped_falls_back_to_random_alphabet(self):
        m = SimilarCharMap({"q": ["x"]})
        g = rng(4)
        out = char_substitute("hh", m, g, positions=[0])
        assert out[0] != "h" and out[1] == "h"

    def test_random_mode(self):
        m = SimilarCharMap()
        g = rng(5)
        for _ in range(200):
            out = char_substitute("pass", m, g, mode="random", positions=[0])
            assert out != "pass" and out[1:] == "ass"

    def test_two_substitutions(self):
        m = SimilarCharMap()
        g = rng(6)
        out = char_substitute("pass", m, g, n_subs=2, positions=[0, 1])
        assert out[0] != "p" and out[1] != "a" and out[2:] == "ss"

    def test_too_short(self):
        with pytest.raises(KeywordTooShort):
            char_substitute("a", SimilarCharMap(), rng(0))

    def test_collision_unresolvable(self):
        # transcript contains every possible single-sub variant of "so"
        m = SimilarCharMap({"s": ["z"], "o": ["u"]})
        with pytest.raises(CollisionUnresolvable):
            char_substitute("so", m, rng(0), transcript={"zo", "su"})

    def test_self_map_rejected(self):
        with pytest.raises(ValueError):
            SimilarCharMap({"a": ["a"]})

    def test_json_round_trip(self, tmp_path):
        m = SimilarCharMap()
        path = tmp_path / "map.json"
        import json

        path.write_text(json.dumps(m.to_json()))
        loaded = SimilarCharMap.from_json_file(path)
        assert loaded.mapping == m.mapping


class TestConcatNegative:
    def test_prefix_or_suffix(self):
        g = rng(7)
        for _ in range(500):
            out = concat_negative("world", VOCAB, ["world"], g)
            assert out.startswith("world") or out.endswith("world")
            inner = out[:-5] if out.endswith("world") else out[5:]
            assert inner in VOCAB

    def test_length_additive(self):
        g = rng(8)
        for _ in range(500):
            out = concat_negative("fig", VOCAB, ["fig"], g)
            other = out.replace("fig", "", 1)
            assert len(out) == len("fig") + len(other)

    def test_both_sides_occur(self):
        g = rng(9)
        sides = {"prefix": 0, "suffix": 0}
        for _ in range(200):
            out = concat_negative("kiwi", VOCAB, ["kiwi"], g)
            if out.startswith("kiwi"):
                sides["suffix"] += 1
            else:
                sides["prefix"] += 1
        assert sides["prefix"] > 0 and sides["suffix"] > 0

    def test_exhausted(self):
        with pytest.raises(ExhaustedVocabulary):
            concat_negative("a", {"a"}, ["a"], rng(0))


class TestNearestKeyword:
    def test_forced_single_candidate(self):
        emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
        assert nearest_keyword("a", ["a", "b"], emb) == "b"

    def test_identical_embedding_selected(self):
        emb = {"a": np.array([1.0, 1.0]), "b": np.array([1.0, 1.0]),
               "c": np.array([-1.0, 1.0])}
        assert nearest_keyword("a", ["a", "b", "c"], emb) == "b"

    def test_tie_breaks_lexicographic(self):
        emb = {"a": np.array([1.0, 0.0]), "zed": np.array([0.0, 1.0]),
               "bee": np.array([0.0, 1.0])}
        assert nearest_keyword("a", ["a", "zed", "bee"], emb) == "bee"

    def test_zero_norm_rejected(self):
        emb = {"a": np.array([1.0, 0.0]), "b": np.zeros(2)}
        with pytest.raises(DegenerateEmbedding):
            nearest_keyword("a", ["a", "b"], emb)

    def test_batch_too_small(self):
        emb = {"a": np.array([1.0, 0.0])}
        with pytest.raises(BatchTooSmall):
            nearest_keyword("a", ["a"], emb)

    def test_excludes_transcript_words(self):
        emb = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 0.1]),
               "c": np.array([0.0, 1.0])}
        assert nearest_keyword("a", ["a", "b", "c"], emb, exclude={"b"}) == "c"

    def test_matches_brute_force_over_random_batches(self):
        g = rng(10)
        alphabet = "abcdefghij"
        for _ in range(1000):
            n = int(g.integers(2, 17))
            words = set()
            while len(words) < n:
                length = int(g.integers(3, 8))
                words.add("".join(alphabet[i] for i in g.integers(0, 10, length)))
            words = sorted(words)
            emb = {w: g.standard_normal(8) for w in words}
            target = words[int(g.integers(len(words)))]
            got = nearest_keyword(target, words, emb)

            # brute force oracle: full pairwise scan with lexicographic ties
            best, best_d = None, np.inf
            for cand in sorted(words):
                if cand == target:
                    continue
                d = cosine_distance(emb[target], emb[cand])
                if d < best_d:
                    best, best_d = cand, d
            assert got == best


class TestMakeTrainingPair:
    FEATS = np.zeros((4, 2), dtype=np.float32)

    def test_degenerate_mixture_always_random(self):
        g = rng(11)
        mix = {NegativeStrategy.RANDOM: 1.0}
        for _ in range(200):
            pair = make_training_pair(self.FEATS, ["apple", "fig"], VOCAB, mix, g)
            assert pair.strategy is NegativeStrategy.RANDOM
            assert pair.negative not in ("apple", "fig")

    def test_positive_from_eligible_words(self):
        g = rng(12)
        for _ in range(200):
            pair = make_training_pair(self.FEATS, ["ox", "apple", "an"], VOCAB,
                                      DEFAULT_MIXTURE, g)
            assert pair.positive == "apple"  # only word with >= 3 chars

    def test_no_eligible_keyword(self):
        with pytest.raises(NoEligibleKeyword):
            make_training_pair(self.FEATS, ["ox", "an"], VOCAB, DEFAULT_MIXTURE, rng(0))

    def test_nk_deferred(self):
        g = rng(13)
        mix = {NegativeStrategy.NEAREST_KEYWORD: 1.0}
        pair = make_training_pair(self.FEATS, ["apple"], VOCAB, mix, g)
        assert pair.negative is None
        assert pair.strategy is NegativeStrategy.NEAREST_KEYWORD

    def test_mixture_frequencies(self):
        g = rng(14)
        counts = {s: 0 for s in NegativeStrategy}
        n = 10_000
        for _ in range(n):
            pair = make_training_pair(self.FEATS, ["apple", "lemon"], VOCAB,
                                      DEFAULT_MIXTURE, g)
            counts[pair.strategy] += 1
        for s, c in counts.items():
            assert abs(c / n - 0.25) < 0.03, (s, c)

    def test_negative_never_in_transcript(self):
        g = rng(15)
        mix = {NegativeStrategy.RANDOM: 1 / 3, NegativeStrategy.CHAR_SUB: 1 / 3,
               NegativeStrategy.CONCAT: 1 / 3}
        for _ in range(10_000):
            pair = make_training_pair(self.FEATS, ["apple", "lemon", "fig"],
                                      VOCAB, mix, g)
            assert pair.negative is not None
            assert pair.negative not in ("apple", "lemon", "fig")
            assert pair.negative == pair.negative.lower()
            assert len(pair.negative) > 0

    def test_seeded_reproducibility(self):
        def run(seed):
            g = rng(seed)
            out = []
            for _ in range(100):
                pair = make_training_pair(self.FEATS, ["apple", "lemon"], VOCAB,
                                          DEFAULT_MIXTURE, g)
                out.append((pair.positive, pair.negative, pair.strategy))
            return out

        assert run(42) == run(42)
        assert run(42) != run(43)


class TestMixtureValidation:
    def test_normalizes(self):
        mix = normalize_mixture({"random": 2.0, "concat": 2.0})
        assert mix[NegativeStrategy.RANDOM] == 0.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            normalize_mixture({"random": -1.0, "concat": 2.0})

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            normalize_mixture({})
