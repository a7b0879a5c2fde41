"""Vocabulary, synthetic multi-domain corpora, corpus files, batching and domain sampling."""

# Import future modules
from __future__ import annotations

# Import built-in modules
from dataclasses import dataclass
from dataclasses import field
import json
import logging
import os
import string
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt.checkpoint import file_hash
from dtnmt.errors import CorpusFormatError
from dtnmt.errors import DomainError
from dtnmt.errors import VocabularyError


logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
RULES = ("identity", "reversal", "shift", "drop_even")
MANIFEST = "manifest.json"
VOCAB_FILE = "vocab.txt"
TEST_DIR = "test"

Pair = Tuple[List[int], List[int]]


class Vocabulary:
    """Bijective token/id map with the special tokens at ids 0-3."""

    def __init__(self, tokens: Sequence[str]) -> None:
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabularyError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabularyError(f"id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.token(int(i)) for i in ids]

    @staticmethod
    def tag(domain_name: str) -> str:
        return f"<2{domain_name}>"

    def tag_id(self, domain_name: str) -> int:
        token = self.tag(domain_name)
        if token not in self.index:
            raise VocabularyError(f"vocabulary has no domain tag {token}")
        return self.index[token]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str) -> Vocabulary:
        with open(path, encoding="utf-8") as handle:
            return cls([line.rstrip("\n") for line in handle if line.rstrip("\n")])


def alphabet_tokens(alphabet_size: int) -> List[str]:
    if alphabet_size <= len(string.ascii_lowercase):
        return list(string.ascii_lowercase[:alphabet_size])
    return [f"w{i:02d}" for i in range(alphabet_size)]


def synthetic_vocabulary(alphabet_size: int, domain_names: Sequence[str]) -> Vocabulary:
    """Specials, then one tag per domain, then the alphabet."""
    tags = [Vocabulary.tag(name) for name in domain_names]
    return Vocabulary([*SPECIALS, *tags, *alphabet_tokens(alphabet_size)])


@dataclass
class DomainCorpus:
    """Parallel sentence pairs of one domain, as vocabulary ids.

    Attributes:
        kept_gold: Pairs whose gold target was kept because a teacher
            produced an empty sequence.
    """

    domain: int
    name: str
    pairs: List[Pair] = field(default_factory=list)
    rule: str = ""
    kept_gold: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> List[List[int]]:
        return [src for src, _ in self.pairs]

    @property
    def targets(self) -> List[List[int]]:
        return [tgt for _, tgt in self.pairs]

    def target_tokens(self) -> int:
        """Target tokens the decoder predicts, one EOS per sentence included."""
        return sum(len(tgt) + 1 for _, tgt in self.pairs)


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


class SyntheticTask:
    """A shared substitution cipher composed with one small rule per domain.

    Domain 0 applies the cipher alone; domain 1 reverses first; domain 2
    shifts every token by +1 (cyclically) first; domain 3 keeps only the
    odd-indexed tokens, never fewer than one. Source sentences draw a
    ``domain_skew`` share of their tokens from a band of the alphabet owned
    by their domain, so domains also differ in vocabulary.
    """

    def __init__(self, seed: int, n_domains: int = 4, alphabet_size: int = 24, domain_skew: float = 0.5) -> None:
        if alphabet_size < 4:
            raise DomainError(f"alphabet_size must be at least 4, got {alphabet_size}")
        if not 1 <= n_domains <= len(RULES):
            raise DomainError(f"the synthetic task defines 1 to {len(RULES)} domains, got {n_domains}")
        self.seed = seed
        self.n_domains = n_domains
        self.alphabet_size = alphabet_size
        self.domain_skew = domain_skew
        self.cipher = np.random.default_rng(seed).permutation(alphabet_size)
        self.names = list(RULES[:n_domains])
        self.vocab = synthetic_vocabulary(alphabet_size, self.names)
        self.offset = len(SPECIALS) + n_domains

    def band(self, domain: int) -> Tuple[int, int]:
        width = max(1, self.alphabet_size // self.n_domains)
        start = min(domain * width, self.alphabet_size - width)
        return start, start + width

    def apply_rule(self, domain: int, letters: Sequence[int]) -> List[int]:
        """Map alphabet indices of a source to alphabet indices of its target."""
        rule = RULES[domain]
        if rule == "identity":
            inner = list(letters)
        elif rule == "reversal":
            inner = list(letters)[::-1]
        elif rule == "shift":
            inner = [(a + 1) % self.alphabet_size for a in letters]
        else:
            inner = list(letters)[1::2] or list(letters)[:1]
        return [int(self.cipher[a]) for a in inner]

    def sample_letters(self, domain: int, length: int, rng: np.random.Generator) -> List[int]:
        lo, hi = self.band(domain)
        in_band = rng.random(length) < self.domain_skew
        uniform = rng.integers(0, self.alphabet_size, size=length)
        banded = rng.integers(lo, hi, size=length)
        return [int(b) if flag else int(u) for flag, u, b in zip(in_band, uniform, banded)]

    def to_ids(self, letters: Sequence[int]) -> List[int]:
        return [self.offset + int(a) for a in letters]

    def to_letters(self, ids: Sequence[int]) -> List[int]:
        return [int(i) - self.offset for i in ids]

    def generate(self, domain: int, size: int, len_range: Sequence[int]) -> DomainCorpus:
        lo, hi = int(len_range[0]), int(len_range[1])
        if not 1 <= lo <= hi:
            raise DomainError(f"len_range must satisfy 1 <= min <= max, got {list(len_range)}")
        rng = np.random.default_rng([self.seed, domain + 1])
        pairs = []
        for _ in range(size):
            letters = self.sample_letters(domain, int(rng.integers(lo, hi + 1)), rng)
            pairs.append((self.to_ids(letters), self.to_ids(self.apply_rule(domain, letters))))
        return DomainCorpus(domain=domain, name=self.names[domain], pairs=pairs, rule=RULES[domain])


def generate_synthetic(
    seed: int,
    n_domains: int = 4,
    sizes: Optional[Sequence[int]] = None,
    len_range: Sequence[int] = (3, 12),
    alphabet_size: int = 24,
    domain_skew: float = 0.5,
) -> List[DomainCorpus]:
    """Generate one corpus per domain; identical seeds give identical corpora.

    Ids refer to ``synthetic_vocabulary(alphabet_size, RULES[:n_domains])``.
    """
    sizes = list(sizes) if sizes is not None else [4000, 4000, 1000, 1000][:n_domains]
    if len(sizes) != n_domains:
        raise DomainError(f"sizes has {len(sizes)} entries for {n_domains} domains")
    task = SyntheticTask(seed, n_domains, alphabet_size, domain_skew)
    return [task.generate(domain, size, len_range) for domain, size in enumerate(sizes)]


def split_corpus(corpus: DomainCorpus, n_heldout: int) -> Tuple[DomainCorpus, DomainCorpus]:
    """Split off the last ``n_heldout`` pairs."""
    if not 0 <= n_heldout <= len(corpus):
        raise DomainError(f"cannot hold out {n_heldout} of {len(corpus)} pairs")
    cut = len(corpus) - n_heldout
    head = DomainCorpus(corpus.domain, corpus.name, corpus.pairs[:cut], corpus.rule)
    tail = DomainCorpus(corpus.domain, corpus.name, corpus.pairs[cut:], corpus.rule)
    return head, tail


def add_domain_tags(corpus: DomainCorpus, vocab: Vocabulary, tag_domain: Optional[str] = None) -> DomainCorpus:
    """Prepend a domain tag to every source; ``tag_domain`` overrides the corpus's own."""
    tag = vocab.tag_id(tag_domain or corpus.name)
    pairs = [([tag, *src], list(tgt)) for src, tgt in corpus.pairs]
    return DomainCorpus(corpus.domain, corpus.name, pairs, corpus.rule)


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def save_corpus(corpus: DomainCorpus, path: str, vocab: Vocabulary) -> None:
    """Write ``source tokens<TAB>target tokens`` lines, UTF-8."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for src, tgt in corpus.pairs:
            handle.write(" ".join(vocab.decode(src)) + "\t" + " ".join(vocab.decode(tgt)) + "\n")


def load_corpus(path: str, vocab: Vocabulary, domain: int = 0, name: Optional[str] = None) -> DomainCorpus:
    """Parse a corpus file written by :func:`save_corpus`.

    Raises:
        CorpusFormatError: A line lacks exactly one tab or has an empty side.
    """
    name = name or os.path.splitext(os.path.basename(path))[0]
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        logger.warning("corpus file %s is empty", path)
    pairs = []
    for number, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise CorpusFormatError(path, number, f"expected one tab separator, found {len(fields) - 1}")
        src, tgt = fields[0].split(), fields[1].split()
        if not src or not tgt:
            raise CorpusFormatError(path, number, "empty source or target sentence")
        unknown = sum(1 for token in src + tgt if token != UNK and token not in vocab.index)
        if unknown:
            logger.warning("%s:%d: %d unknown tokens mapped to %s", path, number, unknown, UNK)
        pairs.append((vocab.encode(src), vocab.encode(tgt)))
    return DomainCorpus(domain=domain, name=name, pairs=pairs, rule=name)


@dataclass
class Dataset:
    """A data directory: vocabulary plus train and test corpora per domain."""

    vocab: Vocabulary
    train: List[DomainCorpus]
    test: List[DomainCorpus]
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.train]


def save_dataset(directory: str, dataset: Dataset) -> List[str]:
    """Write the manifest, vocabulary and corpora; return the written paths."""
    os.makedirs(os.path.join(directory, TEST_DIR), exist_ok=True)
    written = []
    vocab_path = os.path.join(directory, VOCAB_FILE)
    dataset.vocab.save(vocab_path)
    written.append(vocab_path)
    for corpus in dataset.train:
        path = os.path.join(directory, f"{corpus.name}.tsv")
        save_corpus(corpus, path, dataset.vocab)
        written.append(path)
    for corpus in dataset.test:
        path = os.path.join(directory, TEST_DIR, f"{corpus.name}.tsv")
        save_corpus(corpus, path, dataset.vocab)
        written.append(path)
    manifest = dict(dataset.meta)
    manifest["domains"] = dataset.names
    manifest["artifacts"] = {os.path.relpath(p, directory).replace(os.sep, "/"): file_hash(p) for p in written}
    manifest_path = os.path.join(directory, MANIFEST)
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, sort_keys=True, indent=2)
        handle.write("\n")
    written.append(manifest_path)
    return written


def load_dataset(directory: str) -> Dataset:
    """Load a directory written by :func:`save_dataset`."""
    manifest_path = os.path.join(directory, MANIFEST)
    try:
        with open(manifest_path, encoding="utf-8") as handle:
            meta = json.load(handle)
        names = list(meta["domains"])
    except (OSError, ValueError, KeyError) as exc:
        raise DomainError(f"{directory} has no readable {MANIFEST}: {exc}") from exc
    vocab = Vocabulary.load(os.path.join(directory, VOCAB_FILE))
    train = [load_corpus(os.path.join(directory, f"{n}.tsv"), vocab, i, n) for i, n in enumerate(names)]
    test = []
    for i, n in enumerate(names):
        path = os.path.join(directory, TEST_DIR, f"{n}.tsv")
        if os.path.exists(path):
            test.append(load_corpus(path, vocab, i, n))
    return Dataset(vocab=vocab, train=train, test=test, meta=meta)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded single-domain batch.

    ``tgt_in`` is BOS-shifted, ``tgt_out`` ends with EOS; masks are ``True``
    on real tokens.
    """

    src_ids: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    domain: int
    indices: List[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.src_ids.shape[0])

    def pad_count(self) -> int:
        return int((~self.src_mask).sum() + (~self.tgt_mask).sum())

    def slot_count(self) -> int:
        return int(self.src_mask.size + self.tgt_mask.size)


def pair_length(pair: Pair) -> int:
    src, tgt = pair
    return max(len(src), len(tgt) + 1)


def collate(
    pairs: Sequence[Pair], domain: int, pad_id: int, bos_id: int, eos_id: int, indices: Sequence[int] = ()
) -> Batch:
    n = len(pairs)
    src_len = max(len(src) for src, _ in pairs)
    tgt_len = max(len(tgt) for _, tgt in pairs) + 1
    src_ids = np.full((n, src_len), pad_id, dtype=np.int64)
    tgt_in = np.full((n, tgt_len), pad_id, dtype=np.int64)
    tgt_out = np.full((n, tgt_len), pad_id, dtype=np.int64)
    for row, (src, tgt) in enumerate(pairs):
        src_ids[row, : len(src)] = src
        tgt_in[row, : len(tgt) + 1] = [bos_id, *tgt]
        tgt_out[row, : len(tgt) + 1] = [*tgt, eos_id]
    src_mask = np.zeros((n, src_len), dtype=bool)
    tgt_mask = np.zeros((n, tgt_len), dtype=bool)
    for row, (src, tgt) in enumerate(pairs):
        src_mask[row, : len(src)] = True
        tgt_mask[row, : len(tgt) + 1] = True
    return Batch(src_ids, src_mask, tgt_in, tgt_out, tgt_mask, domain, list(indices))


def make_batches(
    corpus: DomainCorpus,
    batch_tokens: int,
    pad_id: int = Vocabulary.pad_id,
    bos_id: int = Vocabulary.bos_id,
    eos_id: int = Vocabulary.eos_id,
    sort: bool = True,
) -> List[Batch]:
    """Pack every pair exactly once into batches of at most ``batch_tokens`` slots.

    A batch's cost is ``rows * longest row``; sorting by length first keeps
    padding low.

    Raises:
        DomainError: A single sentence is longer than ``batch_tokens``.
    """
    for i, pair in enumerate(corpus.pairs):
        if pair_length(pair) > batch_tokens:
            raise DomainError(
                f"sentence {i} of {corpus.name} needs {pair_length(pair)} slots, above batch_tokens={batch_tokens}"
            )
    order = list(range(len(corpus)))
    if sort:
        order.sort(key=lambda i: (len(corpus.pairs[i][0]), len(corpus.pairs[i][1]), i))
    batches: List[Batch] = []
    current: List[int] = []
    longest = 0
    for i in order:
        length = pair_length(corpus.pairs[i])
        if current and (len(current) + 1) * max(longest, length) > batch_tokens:
            batches.append(collate([corpus.pairs[j] for j in current], corpus.domain, pad_id, bos_id, eos_id, current))
            current, longest = [], 0
        current.append(i)
        longest = max(longest, length)
    if current:
        batches.append(collate([corpus.pairs[j] for j in current], corpus.domain, pad_id, bos_id, eos_id, current))
    return batches


def pad_fraction(batches: Sequence[Batch]) -> float:
    slots = sum(b.slot_count() for b in batches)
    return sum(b.pad_count() for b in batches) / slots if slots else 0.0


# ---------------------------------------------------------------------------
# Domain-aware sampling
# ---------------------------------------------------------------------------


def sampling_distribution(counts: Sequence[float], alpha: float) -> np.ndarray:
    """``q_i = p_i^alpha / sum_j p_j^alpha`` with ``p_i = n_i / sum_k n_k``."""
    n = np.asarray(counts, dtype=np.float64)
    if np.any(n < 0):
        raise DomainError(f"domain counts must not be negative: {list(counts)}")
    if n.sum() <= 0:
        raise DomainError("at least one domain needs a positive count")
    p = n / n.sum()
    weights = np.where(p > 0, p**alpha, 0.0)
    return weights / weights.sum()


@dataclass
class SamplerState:
    """Per-step multinomial choice of the next batch's domain.

    Attributes:
        counts: Number of batches per domain.
        alpha: Balance factor; 1 samples proportionally, smaller values
            flatten toward uniform.
    """

    counts: List[float]
    alpha: float = 0.7
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def from_batches(cls, batches: Sequence[Sequence[Batch]], alpha: float, rng: np.random.Generator) -> SamplerState:
        return cls(counts=[float(len(b)) for b in batches], alpha=alpha, rng=rng)

    @property
    def p(self) -> np.ndarray:
        n = np.asarray(self.counts, dtype=np.float64)
        return n / n.sum()

    @property
    def q(self) -> np.ndarray:
        return sampling_distribution(self.counts, self.alpha)


def sample_domain(state: SamplerState) -> int:
    """Draw a domain id with probability ``q_i`` (with replacement)."""
    q = state.q
    return int(state.rng.choice(len(q), p=q))
