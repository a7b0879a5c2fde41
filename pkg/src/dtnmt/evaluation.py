"""BLEU, paired bootstrap significance, cross-domain decoding, probes and representation export."""

# Import future modules
from __future__ import annotations

# Import built-in modules
import collections
import csv
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
import io
import json
import logging
import math
import os
from typing import Any
from typing import Dict
from typing import Hashable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

# Import third-party modules
import numpy as np
from sklearn.decomposition import PCA
from sklearn.metrics import accuracy_score

# Import local modules
from dtnmt import tensor as T
from dtnmt.config import OptimConfig
from dtnmt.data import DomainCorpus
from dtnmt.data import Vocabulary
from dtnmt.errors import EvaluationError
from dtnmt.model import ModelParams
from dtnmt.optim import Adam
from dtnmt.supervision import ClassifierParams
from dtnmt.supervision import attention_pool
from dtnmt.supervision import classifier_nll
from dtnmt.supervision import classify_domain
from dtnmt.tensor import Tensor
from dtnmt.training import LoadedModel
from dtnmt.transform import DtnBank
from dtnmt.transform import encode_for_domain
from dtnmt.transform import translate


logger = logging.getLogger(__name__)

MAX_ORDER = 4
SITES = ("encoder_out", "dtn_out")
SITE_LABELS = {"encoder_out": "H", "dtn_out": "H'"}
PROBE_STREAM = 3

Tokens = Sequence[Hashable]


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(segment: Tokens, max_order: int) -> collections.Counter:
    counts: collections.Counter = collections.Counter()
    for order in range(1, max_order + 1):
        for i in range(0, len(segment) - order + 1):
            counts[tuple(segment[i : i + order])] += 1
    return counts


def sentence_stats(hypothesis: Tokens, reference: Tokens, max_order: int = MAX_ORDER) -> np.ndarray:
    """Sufficient statistics of one pair.

    Returns:
        ``[matches_1..matches_n, totals_1..totals_n, hyp_len, ref_len]`` as
        integers.
    """
    stats = np.zeros(2 * max_order + 2, dtype=np.int64)
    overlap = _ngrams(hypothesis, max_order) & _ngrams(reference, max_order)
    for ngram, count in overlap.items():
        stats[len(ngram) - 1] += count
    for order in range(1, max_order + 1):
        stats[max_order + order - 1] = max(len(hypothesis) - order + 1, 0)
    stats[-2] = len(hypothesis)
    stats[-1] = len(reference)
    return stats


def corpus_stats(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_order: int = MAX_ORDER) -> np.ndarray:
    if len(hypotheses) != len(references):
        raise EvaluationError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise EvaluationError("BLEU needs at least one hypothesis")
    return np.stack([sentence_stats(h, r, max_order) for h, r in zip(hypotheses, references)])


def bleu_from_stats(totals: np.ndarray, max_order: int = MAX_ORDER) -> float:
    """Corpus BLEU (0-100) from summed sufficient statistics, without smoothing."""
    matches = totals[:max_order]
    possible = totals[max_order : 2 * max_order]
    hyp_len, ref_len = float(totals[-2]), float(totals[-1])
    if hyp_len == 0 or np.any(possible == 0) or np.any(matches == 0):
        return 0.0
    log_precision = sum(math.log(float(m) / float(p)) for m, p in zip(matches, possible)) / max_order
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_order: int = MAX_ORDER) -> float:
    """Corpus-level 4-gram BLEU with a single reference per hypothesis.

    Raises:
        EvaluationError: The lists differ in length or are empty.
    """
    return bleu_from_stats(corpus_stats(hypotheses, references, max_order).sum(axis=0), max_order)


def bootstrap_significance(
    hyps_a: Sequence[Tokens],
    hyps_b: Sequence[Tokens],
    references: Sequence[Tokens],
    n_resamples: int = 1000,
    seed: int = 1,
) -> float:
    """Paired bootstrap over sentence indices.

    Returns:
        The share of resamples on which system A scores above system B,
        ties counting one half; small values mean B is significantly better.
    """
    if not len(hyps_a) == len(hyps_b) == len(references):
        raise EvaluationError(
            f"misaligned inputs: {len(hyps_a)} / {len(hyps_b)} hypotheses for {len(references)} references"
        )
    if n_resamples < 1:
        raise EvaluationError("n_resamples must be positive")
    stats_a = corpus_stats(hyps_a, references)
    stats_b = corpus_stats(hyps_b, references)
    n = len(references)
    indices = np.random.default_rng(seed).integers(0, n, size=(n_resamples, n))
    a_better = 0.0
    for sample in indices:
        score_a = bleu_from_stats(stats_a[sample].sum(axis=0))
        score_b = bleu_from_stats(stats_b[sample].sum(axis=0))
        if score_a > score_b:
            a_better += 1.0
        elif score_a == score_b:
            a_better += 0.5
    return a_better / n_resamples


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def translate_corpus(
    params: ModelParams,
    corpus: DomainCorpus,
    bank: Optional[DtnBank] = None,
    domain: Optional[int] = None,
    tag_id: Optional[int] = None,
    batch_size: int = 128,
) -> List[List[int]]:
    """Greedy translations of ``corpus``'s sources, through DTN ``domain`` and behind ``tag_id`` when given."""
    sources = corpus.sources
    if tag_id is not None:
        sources = [[tag_id, *src] for src in sources]
    if not sources:
        return []
    return translate(params, sources, bank=bank, domain=domain, batch_size=batch_size)


def decode_tests(
    model: LoadedModel,
    tests: Sequence[DomainCorpus],
    vocab: Optional[Vocabulary] = None,
    batch_size: int = 128,
) -> Dict[str, List[List[int]]]:
    """Decode each test corpus the way ``model`` expects its inputs.

    Unified models decode through the test domain's own DTN; domain-control
    models see the test domain's tag.
    """
    outputs = {}
    for corpus in tests:
        tag_id = None
        if model.domain_tags:
            if vocab is None:
                raise EvaluationError("a vocabulary is needed to tag domain-control inputs")
            tag_id = vocab.tag_id(corpus.name)
        domain = corpus.domain if model.bank is not None else None
        outputs[corpus.name] = translate_corpus(model.params, corpus, model.bank, domain, tag_id, batch_size)
    return outputs


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-domain BLEU of one system, optionally compared with a reference system.

    Attributes:
        deltas: BLEU difference to the reference per domain.
        p_values: Paired bootstrap p-value per domain (reference vs system).
        significant: ``p < threshold`` per domain.
    """

    system: str
    domains: List[str]
    bleu: Dict[str, float]
    average: float
    reference: Optional[str] = None
    reference_bleu: Dict[str, float] = field(default_factory=dict)
    deltas: Dict[str, float] = field(default_factory=dict)
    average_delta: Optional[float] = None
    p_values: Dict[str, float] = field(default_factory=dict)
    significant: Dict[str, bool] = field(default_factory=dict)
    threshold: float = 0.01
    checkpoint_sha256: Optional[str] = None
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        if path:
            _write_text(path, text)
        return text

    def to_csv(self, path: Optional[str] = None) -> str:
        """One row per system in the ``domains..., Avg., Δ`` layout."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["system", *self.domains, "Avg.", "Δ"])
        if self.reference is not None:
            reference = [_fmt(self.reference_bleu[d]) for d in self.domains]
            writer.writerow([self.reference, *reference, _fmt(_mean(self.reference_bleu)), ""])
        marks = ["*" if self.significant.get(d) else "" for d in self.domains]
        delta = _fmt(self.average_delta, signed=True) if self.average_delta is not None else ""
        writer.writerow(
            [self.system, *(_fmt(self.bleu[d]) + m for d, m in zip(self.domains, marks)), _fmt(self.average), delta]
        )
        text = buffer.getvalue()
        if path:
            _write_text(path, text)
        return text

    def format_table(self) -> str:
        rows = list(csv.reader(io.StringIO(self.to_csv())))
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = [
            "  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
            for row in rows
        ]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.reference is not None:
            lines.append(f"* significantly better than {self.reference} (p < {self.threshold})")
        return "\n".join(lines)


def _fmt(value: Optional[float], signed: bool = False) -> str:
    if value is None:
        return ""
    return f"{value:+.2f}" if signed else f"{value:.2f}"


def _mean(values: Dict[str, float]) -> float:
    return float(np.mean(list(values.values()))) if values else 0.0


def _write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
    except OSError as exc:
        raise EvaluationError(f"cannot write {path}: {exc}") from exc


def build_report(
    system: str,
    hypotheses: Dict[str, List[List[int]]],
    references: Dict[str, List[List[int]]],
    reference_hypotheses: Optional[Dict[str, List[List[int]]]] = None,
    reference_name: Optional[str] = None,
    checkpoint_sha256: Optional[str] = None,
    config: Optional[Dict[str, Any]] = None,
    seed: int = 1,
    n_resamples: int = 1000,
    threshold: float = 0.01,
) -> EvalReport:
    """Score ``system`` on every domain and compare it with the reference system if given."""
    domains = list(references)
    missing = [d for d in domains if d not in hypotheses]
    if missing:
        raise EvaluationError(f"no hypotheses for domains {missing}")
    scores = {d: bleu(hypotheses[d], references[d]) for d in domains}
    report = EvalReport(
        system=system,
        domains=domains,
        bleu=scores,
        average=_mean(scores),
        threshold=threshold,
        checkpoint_sha256=checkpoint_sha256,
        config=dict(config or {}),
        seed=seed,
    )
    if reference_hypotheses is not None:
        report.reference = reference_name or "reference"
        report.reference_bleu = {d: bleu(reference_hypotheses[d], references[d]) for d in domains}
        report.deltas = {d: scores[d] - report.reference_bleu[d] for d in domains}
        report.average_delta = report.average - _mean(report.reference_bleu)
        for d in domains:
            p = bootstrap_significance(reference_hypotheses[d], hypotheses[d], references[d], n_resamples, seed)
            report.p_values[d] = p
            report.significant[d] = p < threshold
    return report


# ---------------------------------------------------------------------------
# Cross-domain decoding
# ---------------------------------------------------------------------------


@dataclass
class CrossDomainMatrix:
    """``scores[i, j]`` is the BLEU on domain ``j``'s test set decoded through DTN ``i``."""

    names: List[str]
    scores: np.ndarray

    @property
    def dominant(self) -> List[bool]:
        """Per column, whether the matching DTN scores strictly higher than every other; ties are not dominant."""
        flags = []
        for j in range(len(self.names)):
            others = np.delete(self.scores[:, j], j)
            flags.append(bool(others.size == 0 or self.scores[j, j] > others.max()))
        return flags

    def to_csv(self, path: Optional[str] = None) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["dtn", *self.names])
        for i, name in enumerate(self.names):
            writer.writerow([name, *(f"{v:.2f}" for v in self.scores[i])])
        writer.writerow(["dominant", *("yes" if f else "no" for f in self.dominant)])
        text = buffer.getvalue()
        if path:
            _write_text(path, text)
        return text


def cross_domain_matrix(
    params: ModelParams,
    bank: Optional[DtnBank],
    tests: Sequence[DomainCorpus],
    batch_size: int = 128,
) -> CrossDomainMatrix:
    """Decode every test domain through every DTN.

    Raises:
        EvaluationError: There is no DTN bank or a domain lacks a test corpus.
    """
    if bank is None:
        raise EvaluationError("the checkpoint holds no DTN bank")
    by_domain = {c.domain: c for c in tests}
    missing = [d for d in range(bank.n_domains) if d not in by_domain or not by_domain[d].pairs]
    if missing:
        raise EvaluationError(f"missing test corpora for domains {missing}")
    ordered = [by_domain[d] for d in range(bank.n_domains)]
    scores = np.zeros((bank.n_domains, bank.n_domains))
    for i in range(bank.n_domains):
        for j, corpus in enumerate(ordered):
            hyps = translate_corpus(params, corpus, bank, i, batch_size=batch_size)
            scores[i, j] = bleu(hyps, corpus.targets)
    matrix = CrossDomainMatrix(names=[c.name for c in ordered], scores=scores)
    for name, ok in zip(matrix.names, matrix.dominant):
        if not ok:
            logger.warning("column %s is not diagonal-dominant", name)
    return matrix


# ---------------------------------------------------------------------------
# Frozen representations
# ---------------------------------------------------------------------------


def sentence_representations(
    params: ModelParams,
    bank: Optional[DtnBank],
    corpus: DomainCorpus,
    site: str,
    batch_size: int = 128,
) -> List[np.ndarray]:
    """Per-sentence ``(length, d_model)`` arrays of ``H`` or ``H'`` for ``corpus``'s sources."""
    if site not in SITES:
        raise EvaluationError(f"unknown site {site!r}; expected one of {SITES}")
    if site == "dtn_out" and bank is None:
        raise EvaluationError("site dtn_out needs a checkpoint with a DTN bank")
    domain = corpus.domain if site == "dtn_out" else None
    pad_id = params.config.pad_id
    sources = corpus.sources
    out: List[np.ndarray] = []
    with T.no_grad():
        for start in range(0, len(sources), batch_size):
            chunk = sources[start : start + batch_size]
            src_ids, src_mask = _pad(chunk, pad_id)
            H = encode_for_domain(params, bank, src_ids, src_mask, domain)
            out.extend(H.data[row, : len(src)].copy() for row, src in enumerate(chunk))
    return out


def _pad(sequences: Sequence[Sequence[int]], pad_id: int) -> Tuple[np.ndarray, np.ndarray]:
    longest = max(len(s) for s in sequences)
    ids = np.full((len(sequences), longest), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), longest), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return ids, mask


def _stack(reprs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    longest = max(r.shape[0] for r in reprs)
    d = reprs[0].shape[1]
    H = np.zeros((len(reprs), longest, d))
    mask = np.zeros((len(reprs), longest), dtype=bool)
    for row, r in enumerate(reprs):
        H[row, : r.shape[0]] = r
        mask[row, : r.shape[0]] = True
    return H, mask


def probe_classifier_accuracy(
    params: ModelParams,
    bank: Optional[DtnBank],
    corpora: Sequence[DomainCorpus],
    site: str,
    steps: int = 300,
    seed: int = 1,
    optim: Optional[OptimConfig] = None,
    heldout_fraction: float = 0.25,
    batch_size: int = 64,
) -> float:
    """Train a fresh pooled softmax classifier on frozen representations; return held-out accuracy.

    The last ``heldout_fraction`` of each domain's sentences is held out.
    """
    if site not in SITES:
        raise EvaluationError(f"unknown site {site!r}; expected one of {SITES}")
    if len(corpora) == 1:
        return 1.0
    if not 0.0 < heldout_fraction < 1.0:
        raise EvaluationError("heldout_fraction must lie in (0, 1)")
    labels = {c.domain: i for i, c in enumerate(corpora)}
    train: List[Tuple[np.ndarray, int]] = []
    heldout: List[Tuple[np.ndarray, int]] = []
    for corpus in corpora:
        if len(corpus) < 2:
            raise EvaluationError(f"probe needs at least two sentences of {corpus.name}")
        reprs = sentence_representations(params, bank, corpus, site)
        cut = len(reprs) - max(1, int(round(heldout_fraction * len(reprs))))
        train.extend((r, labels[corpus.domain]) for r in reprs[:cut])
        heldout.extend((r, labels[corpus.domain]) for r in reprs[cut:])

    rng = np.random.default_rng([seed, PROBE_STREAM])
    d = params.config.d_model
    probe = ModelParams(params.config)
    W = probe.add("probe.W", rng.normal(0.0, d**-0.5, size=(d, len(corpora))))
    query = probe.add("probe.query", rng.normal(0.0, d**-0.5, size=(d,)))
    optimizer = Adam(optim or OptimConfig())
    order: List[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(int(i) for i in rng.permutation(len(train)))
        picked, order = order[:batch_size], order[batch_size:]
        H, mask = _stack([train[i][0] for i in picked])
        T.get_tape().reset()
        probe.zero_grad()
        loss = classifier_nll(attention_pool(Tensor(H), mask, query), W, [train[i][1] for i in picked])
        T.backward(loss)
        optimizer.step(probe, list(probe))

    predictions: List[int] = []
    with T.no_grad():
        for start in range(0, len(heldout), batch_size):
            chunk = heldout[start : start + batch_size]
            H, mask = _stack([r for r, _ in chunk])
            probs = classify_domain(attention_pool(Tensor(H), mask, query), W)
            predictions.extend(int(i) for i in probs.data.argmax(axis=-1))
    accuracy = float(accuracy_score([label for _, label in heldout], predictions))
    logger.info("probe at %s: held-out accuracy %.4f over %d sentences", site, accuracy, len(heldout))
    return accuracy


def _pool(reprs: Sequence[np.ndarray], query: np.ndarray) -> np.ndarray:
    H, mask = _stack(reprs)
    with T.no_grad():
        return attention_pool(Tensor(H), mask, Tensor(query)).data


def export_representations(
    params: ModelParams,
    bank: Optional[DtnBank],
    corpora: Sequence[DomainCorpus],
    out_path: str,
    projection_path: Optional[str] = None,
    classifiers: Optional[ClassifierParams] = None,
) -> Tuple[str, str]:
    """Write attention-pooled ``H`` and ``H'`` per sentence, plus a 2-component PCA projection.

    Sentences are pooled with :func:`~dtnmt.supervision.attention_pool`, the
    pooling the domain classifiers read: ``H`` with the adversarial query and
    ``H'`` with the specific query when ``classifiers`` are given, otherwise
    with a zero query, which weights every real token equally. Without a DTN
    bank the untransformed ``H`` stands in for ``H'``.

    Returns:
        The paths of the representation CSV and the projection CSV.
    """
    if not corpora or not any(c.pairs for c in corpora):
        raise EvaluationError("nothing to export")
    d = params.config.d_model
    if classifiers is not None:
        queries = {"encoder_out": classifiers.adv_query.data, "dtn_out": classifiers.spec_query.data}
    else:
        queries = {site: np.zeros(d) for site in SITES}
    keys: List[Tuple[int, str, str]] = []
    rows: List[np.ndarray] = []
    sentence_id = 0
    for corpus in corpora:
        if not corpus.pairs:
            continue
        raw = sentence_representations(params, None, corpus, "encoder_out")
        if bank is not None:
            raw_prime = sentence_representations(params, bank, corpus, "dtn_out")
        else:
            raw_prime = raw
        encoded = _pool(raw, queries["encoder_out"])
        transformed = _pool(raw_prime, queries["dtn_out"])
        for h, h_prime in zip(encoded, transformed):
            keys.append((sentence_id, corpus.name, SITE_LABELS["encoder_out"]))
            rows.append(h)
            keys.append((sentence_id, corpus.name, SITE_LABELS["dtn_out"]))
            rows.append(h_prime)
            sentence_id += 1
    matrix = np.stack(rows)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sentence_id", "domain", "site", *(f"d{i}" for i in range(d))])
    for key, row in zip(keys, matrix):
        writer.writerow([*key, *(repr(float(v)) for v in row)])
    _write_text(out_path, buffer.getvalue())

    components = min(2, matrix.shape[0], matrix.shape[1])
    projected = PCA(n_components=components, svd_solver="full").fit_transform(matrix)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sentence_id", "domain", "site", *(f"pc{i + 1}" for i in range(components))])
    for key, row in zip(keys, projected):
        writer.writerow([*key, *(repr(float(v)) for v in row)])
    projection_path = projection_path or f"{os.path.splitext(out_path)[0]}.projection.csv"
    _write_text(projection_path, buffer.getvalue())
    logger.info("exported %d representations to %s", len(rows), out_path)
    return out_path, projection_path
