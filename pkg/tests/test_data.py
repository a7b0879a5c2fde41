"""Test vocabulary, synthetic corpora, corpus files, batching and sampling."""

# Import built-in modules
import json
import math
import os

# Import third-party modules
import numpy as np
import pytest
from scipy import stats

# Import local modules
from dtnmt.data import Dataset
from dtnmt.data import DomainCorpus
from dtnmt.data import SamplerState
from dtnmt.data import SyntheticTask
from dtnmt.data import Vocabulary
from dtnmt.data import add_domain_tags
from dtnmt.data import generate_synthetic
from dtnmt.data import load_corpus
from dtnmt.data import load_dataset
from dtnmt.data import make_batches
from dtnmt.data import pad_fraction
from dtnmt.data import sample_domain
from dtnmt.data import sampling_distribution
from dtnmt.data import save_corpus
from dtnmt.data import save_dataset
from dtnmt.data import split_corpus
from dtnmt.data import synthetic_vocabulary
from dtnmt.errors import CorpusFormatError
from dtnmt.errors import DomainError
from dtnmt.errors import VocabularyError


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


def test_vocabulary_layout(vocab):
    """Specials come first, then one tag per domain, then the alphabet."""
    assert vocab.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert vocab.tag_id("identity") == 4
    assert vocab.tag_id("reversal") == 5
    assert vocab.token(6) == "a"
    assert len(vocab) == 14


def test_vocabulary_maps_unknown_tokens_to_unk(vocab):
    assert vocab.encode(["a", "zz"]) == [6, 3]
    assert vocab.decode([6, 7]) == ["a", "b"]


def test_vocabulary_errors(vocab):
    with pytest.raises(VocabularyError, match="no domain tag"):
        vocab.tag_id("medical")
    with pytest.raises(VocabularyError):
        vocab.token(99)
    with pytest.raises(VocabularyError):
        Vocabulary(["a", "b"])
    with pytest.raises(VocabularyError, match="unique"):
        Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "a", "a"])


def test_vocabulary_file_round_trip(vocab, tmp_path):
    path = str(tmp_path / "vocab.txt")
    vocab.save(path)
    assert Vocabulary.load(path) == vocab


def test_large_alphabets_use_numbered_tokens():
    assert synthetic_vocabulary(30, ["identity"]).token(5) == "w00"


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


def test_synthetic_corpora_are_deterministic():
    a = generate_synthetic(11, n_domains=4, sizes=[5, 5, 5, 5], len_range=(3, 6), alphabet_size=8)
    b = generate_synthetic(11, n_domains=4, sizes=[5, 5, 5, 5], len_range=(3, 6), alphabet_size=8)
    assert [c.pairs for c in a] == [c.pairs for c in b]
    assert [c.name for c in a] == ["identity", "reversal", "shift", "drop_even"]


def test_domain_rules():
    """Each domain composes the shared cipher with its own rule."""
    task = SyntheticTask(5, n_domains=4, alphabet_size=8)
    letters = [0, 1, 2, 3, 7]
    cipher = task.cipher
    assert task.apply_rule(0, letters) == [int(cipher[a]) for a in letters]
    assert task.apply_rule(1, letters) == [int(cipher[a]) for a in letters[::-1]]
    assert task.apply_rule(2, letters) == [int(cipher[(a + 1) % 8]) for a in letters]
    assert task.apply_rule(3, letters) == [int(cipher[1]), int(cipher[3])]
    assert task.apply_rule(3, [4]) == [int(cipher[4])]


def test_synthetic_lengths_and_ids(corpora):
    for corpus in corpora:
        assert len(corpus) == 50
        for src, tgt in corpus.pairs:
            assert 3 <= len(src) <= 6
            assert all(6 <= i < 14 for i in src + tgt)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"alphabet_size": 3},
        {"n_domains": 5},
        {"n_domains": 2, "sizes": [1]},
        {"n_domains": 1, "sizes": [3], "len_range": (0, 2)},
    ],
)
def test_synthetic_rejects_bad_settings(kwargs):
    with pytest.raises(DomainError):
        generate_synthetic(1, **kwargs)


def test_split_corpus(corpora):
    head, tail = split_corpus(corpora[0], 10)
    assert len(head) == 40 and len(tail) == 10
    assert head.pairs + tail.pairs == corpora[0].pairs
    with pytest.raises(DomainError):
        split_corpus(corpora[0], 51)


def test_domain_tags(corpora, vocab):
    tagged = add_domain_tags(corpora[1], vocab)
    assert all(src[0] == 5 for src in tagged.sources)
    assert tagged.targets == corpora[1].targets
    forced = add_domain_tags(corpora[1], vocab, tag_domain="identity")
    assert all(src[0] == 4 for src in forced.sources)


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def test_corpus_file_round_trip(corpora, vocab, tmp_path):
    path = str(tmp_path / "identity.tsv")
    save_corpus(corpora[0], path, vocab)
    loaded = load_corpus(path, vocab, domain=0)
    assert loaded.pairs == [(list(s), list(t)) for s, t in corpora[0].pairs]
    assert loaded.name == "identity"


@pytest.mark.parametrize("content, line", [("a b\n", 1), ("a\tb\nc\t\n", 2), ("a\tb\tc\n", 1)])
def test_corpus_format_errors_name_the_line(vocab, tmp_path, content, line):
    path = tmp_path / "bad.tsv"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(CorpusFormatError) as info:
        load_corpus(str(path), vocab)
    assert info.value.line_number == line
    assert f"bad.tsv:{line}" in str(info.value)


def test_unknown_tokens_are_reported_per_line(vocab, tmp_path, caplog):
    """Out-of-vocabulary tokens map to <unk> and each affected line is logged."""
    path = tmp_path / "noisy.tsv"
    path.write_text("a b\tb a\nz a\ta q\n<unk> c\tc\n", encoding="utf-8")
    with caplog.at_level("WARNING", logger="dtnmt.data"):
        loaded = load_corpus(str(path), vocab)
    assert loaded.pairs[1] == ([vocab.unk_id, vocab.id("a")], [vocab.id("a"), vocab.unk_id])
    messages = [r.getMessage() for r in caplog.records]
    assert messages == [f"{path}:2: 2 unknown tokens mapped to <unk>"]


def test_dataset_round_trip(train_corpora, test_corpora, vocab, tmp_path):
    """A saved dataset reloads with the same corpora and records artifact hashes."""
    directory = str(tmp_path / "data")
    written = save_dataset(directory, Dataset(vocab, train_corpora, test_corpora, {"seed": 3}))
    assert os.path.join(directory, "manifest.json") in written
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as handle:
        manifest = json.load(handle)
    assert sorted(manifest["artifacts"]) == [
        "identity.tsv", "reversal.tsv", "test/identity.tsv", "test/reversal.tsv", "vocab.txt"
    ]
    dataset = load_dataset(directory)
    assert dataset.names == ["identity", "reversal"]
    assert [c.pairs for c in dataset.train] == [[(list(s), list(t)) for s, t in c.pairs] for c in train_corpora]
    assert [len(c) for c in dataset.test] == [10, 10]
    assert dataset.meta["seed"] == 3


def test_dataset_without_manifest(tmp_path):
    with pytest.raises(DomainError, match="manifest.json"):
        load_dataset(str(tmp_path))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def test_batches_cover_every_pair_once(train_corpora):
    corpus = train_corpora[0]
    batches = make_batches(corpus, 40)
    seen = sorted(i for b in batches for i in b.indices)
    assert seen == list(range(len(corpus)))
    assert all(b.slot_count() // 2 <= 40 for b in batches)
    assert all(b.domain == 0 for b in batches)


def test_batch_layout():
    """Targets are shifted by BOS on input and closed by EOS on output."""
    corpus = DomainCorpus(0, "identity", [([6, 7], [8]), ([6], [9, 10])])
    (batch,) = make_batches(corpus, 100, sort=False)
    np.testing.assert_array_equal(batch.src_ids, [[6, 7], [6, 0]])
    np.testing.assert_array_equal(batch.tgt_in, [[1, 8, 0], [1, 9, 10]])
    np.testing.assert_array_equal(batch.tgt_out, [[8, 2, 0], [9, 10, 2]])
    np.testing.assert_array_equal(batch.tgt_mask, [[True, True, False], [True, True, True]])
    assert batch.pad_count() == 2


def test_sorting_reduces_padding(train_corpora):
    corpus = train_corpora[1]
    assert pad_fraction(make_batches(corpus, 40)) <= pad_fraction(make_batches(corpus, 40, sort=False))
    assert pad_fraction([]) == 0.0


def test_oversized_sentence_raises():
    corpus = DomainCorpus(0, "identity", [([6] * 10, [6] * 10)])
    with pytest.raises(DomainError, match="batch_tokens"):
        make_batches(corpus, 8)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _direct_q(counts, alpha):
    total = math.fsum(counts)
    powered = [math.pow(n / total, alpha) for n in counts]
    norm = math.fsum(powered)
    return [w / norm for w in powered]


@pytest.mark.parametrize("alpha", [0.1, 0.7, 1.0])
def test_equal_counts_sample_uniformly(alpha):
    np.testing.assert_allclose(sampling_distribution([1, 1, 1, 1], alpha), [0.25] * 4)


def test_alpha_one_is_proportional():
    np.testing.assert_allclose(sampling_distribution([1, 3], 1.0), [0.25, 0.75])


def test_sampling_distribution_matches_direct_evaluation():
    counts = [0.59, 0.87, 0.31, 0.53]
    np.testing.assert_allclose(sampling_distribution(counts, 0.7), _direct_q(counts, 0.7), rtol=1e-14)


def test_flattening_is_monotone():
    """Smaller alpha lowers the largest share and raises the smallest."""
    counts = [0.59, 0.87, 0.31, 0.53]
    qs = [sampling_distribution(counts, a) for a in (1.0, 0.7, 0.5, 0.1)]
    for wider, flatter in zip(qs, qs[1:]):
        assert flatter.max() < wider.max()
        assert flatter.min() > wider.min()
    np.testing.assert_allclose(sampling_distribution(counts, 1e-9), [0.25] * 4, atol=1e-8)


def test_zero_counts_are_never_sampled():
    q = sampling_distribution([0, 4, 4], 0.5)
    assert q[0] == 0.0
    np.testing.assert_allclose(q[1:], [0.5, 0.5])


@pytest.mark.parametrize("counts", [[-1, 2], [0, 0]])
def test_sampling_rejects_bad_counts(counts):
    with pytest.raises(DomainError):
        sampling_distribution(counts, 0.7)


@pytest.mark.parametrize(
    "counts, alpha",
    [
        ([0.59, 0.87, 0.31, 0.53], 0.7),
        ([400, 40, 4], 0.5),
        ([1, 3], 1.0),
    ],
)
def test_sampler_frequencies_fit_q(counts, alpha):
    """Empirical domain frequencies over 100k draws pass a chi-square test against q."""
    state = SamplerState(counts=counts, alpha=alpha, rng=np.random.default_rng(2024))
    draws = [sample_domain(state) for _ in range(100_000)]
    observed = np.bincount(draws, minlength=len(counts))
    expected = state.q * len(draws)
    assert stats.chisquare(observed, expected).pvalue > 0.001


def test_sampler_is_reproducible():
    a = SamplerState(counts=[3, 1], rng=np.random.default_rng(9))
    b = SamplerState(counts=[3, 1], rng=np.random.default_rng(9))
    assert [sample_domain(a) for _ in range(50)] == [sample_domain(b) for _ in range(50)]


def test_sampler_counts_batches(train_corpora):
    batches = [make_batches(c, 40) for c in train_corpora]
    state = SamplerState.from_batches(batches, 0.7, np.random.default_rng(0))
    assert state.counts == [float(len(b)) for b in batches]
    np.testing.assert_allclose(state.p.sum(), 1.0)
