"""Domain distillation, domain discrimination and the two-phase update.

The adversarial classifier (ψ, ``cls.adv.*``) reads the pooled encoder
output ``H``; the specific classifier (γ, ``cls.spec.*``) reads the pooled
transformed output ``H'``. Each has its own pooling query. Phase A trains the
model and γ on likelihood, specific classification and the negated entropy of
ψ's prediction; phase B trains ψ alone to classify domains.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
from dataclasses import dataclass
from dataclasses import field
import logging
import math
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt import model as M
from dtnmt import tensor as T
from dtnmt.checkpoint import load_checkpoint
from dtnmt.config import SupervisionFlags
from dtnmt.data import Batch
from dtnmt.data import DomainCorpus
from dtnmt.errors import DivergenceError
from dtnmt.errors import DomainError
from dtnmt.errors import ModelError
from dtnmt.errors import ShapeError
from dtnmt.errors import TrainingError
from dtnmt.model import ModelParams
from dtnmt.optim import Adam
from dtnmt.optim import trainable_names
from dtnmt.tensor import Tensor
from dtnmt.transform import DtnBank
from dtnmt.transform import transform
from dtnmt.transform import translate


logger = logging.getLogger(__name__)

ADV_PREFIX = "cls.adv."
SPEC_PREFIX = "cls.spec."
PHASE_A = 0
PHASE_B = 1
COMPONENTS = ("nll_or_kd", "specific_cls", "adv_entropy", "adv_cls")


@dataclass
class TeacherSet:
    """Frozen fine-tuned models, one per domain."""

    teachers: Dict[int, ModelParams]
    lam: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ModelError(f"lambda must lie in [0, 1], got {self.lam}")
        for params in self.teachers.values():
            params.freeze()

    @classmethod
    def from_checkpoints(cls, paths: Dict[int, str], lam: float = 0.1) -> TeacherSet:
        return cls({domain: load_checkpoint(path)[0] for domain, path in paths.items()}, lam=lam)

    def teacher(self, domain: int) -> ModelParams:
        if domain not in self.teachers:
            raise TrainingError(f"no teacher for domain {domain}")
        return self.teachers[domain]

    def content_hashes(self) -> Dict[int, str]:
        return {domain: params.content_hash() for domain, params in sorted(self.teachers.items())}


@dataclass
class ClassifierParams:
    """Views on the two domain classifiers stored in the model parameters."""

    params: ModelParams
    n_domains: int
    delta: float = 0.1

    @property
    def adv_weights(self) -> Tensor:
        return self.params[f"{ADV_PREFIX}W"]

    @property
    def adv_query(self) -> Tensor:
        return self.params[f"{ADV_PREFIX}query"]

    @property
    def spec_weights(self) -> Tensor:
        return self.params[f"{SPEC_PREFIX}W"]

    @property
    def spec_query(self) -> Tensor:
        return self.params[f"{SPEC_PREFIX}query"]


def init_classifiers(
    params: ModelParams, n_domains: int, rng: np.random.Generator, delta: float = 0.1
) -> ClassifierParams:
    d = params.config.d_model
    for prefix in (ADV_PREFIX, SPEC_PREFIX):
        params.add(f"{prefix}W", rng.normal(0.0, d**-0.5, size=(d, n_domains)))
        params.add(f"{prefix}query", rng.normal(0.0, d**-0.5, size=(d,)))
    return ClassifierParams(params=params, n_domains=n_domains, delta=delta)


def attach_classifiers(params: ModelParams, n_domains: int, delta: float = 0.1) -> Optional[ClassifierParams]:
    if f"{ADV_PREFIX}W" not in params:
        return None
    return ClassifierParams(params=params, n_domains=n_domains, delta=delta)


def attention_pool(H: Tensor, src_mask: np.ndarray, query: Tensor) -> Tensor:
    """Weighted sum of positions, weights ``softmax(H_i . query / sqrt(d))`` over real tokens."""
    batch, length, d = H.shape
    if query.shape != (d,):
        raise ShapeError("attention_pool", H.shape, query.shape)
    mask = np.asarray(src_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ShapeError("attention_pool", H.shape, mask.shape, detail="a row is fully masked")
    scores = (H @ query.reshape(d, 1)).reshape(batch, length) * (1.0 / math.sqrt(d))
    weights = T.softmax(T.masked_fill(scores, ~mask, M.NEG_INF), axis=-1)
    return T.matmul(weights.reshape(batch, 1, length), H).reshape(batch, d)


def domain_logits(pooled: Tensor, weights: Tensor) -> Tensor:
    if pooled.ndim != 2 or weights.ndim != 2 or pooled.shape[1] != weights.shape[0]:
        raise ShapeError("classify_domain", pooled.shape, weights.shape)
    return pooled @ weights


def classify_domain(pooled: Tensor, weights: Tensor) -> Tensor:
    """Row-wise probabilities over the ``N`` domains."""
    return T.softmax(domain_logits(pooled, weights), axis=-1)


def classifier_nll(pooled: Tensor, weights: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean negative log-probability of the gold domain labels.

    ``labels`` is one domain id for the whole batch or one id per row.
    """
    log_probs = T.log_softmax(domain_logits(pooled, weights), axis=-1)
    rows = pooled.shape[0]
    gold_ids = np.broadcast_to(np.asarray(labels, dtype=np.int64), (rows,))
    if gold_ids.min() < 0 or gold_ids.max() >= weights.shape[1]:
        raise DomainError(f"domain label outside 0..{weights.shape[1] - 1}")
    gold = np.zeros(log_probs.shape)
    gold[np.arange(rows), gold_ids] = 1.0
    return -T.sum_(log_probs * gold) / float(rows)


def entropy(p: Tensor) -> Tensor:
    """Natural-log entropy along the last axis, ``0 log 0 := 0``."""
    if np.any(p.data < 0):
        raise ModelError("entropy: probabilities must not be negative")
    totals = p.data.sum(axis=-1)
    if np.any(np.abs(totals - 1.0) > 1e-9):
        raise ModelError(f"entropy: probabilities must sum to 1, got {totals.tolist()}")
    return -T.sum_(T.xlogx(p), axis=-1)


def kd_word_loss(
    student_logits: Tensor,
    teacher_logits: np.ndarray,
    tgt_out_ids: np.ndarray,
    tgt_mask: np.ndarray,
    lam: float,
) -> Tensor:
    """``(1 - lam) * NLL + lam * CE(teacher softmax, student)`` over real tokens.

    Written as ``NLL + lam * (CE - NLL)``, which is ``NLL`` bit for bit both
    at ``lam = 0`` and when the teacher distribution is one-hot on the gold
    token. Teacher logits are constants.
    """
    if not 0.0 <= lam <= 1.0:
        raise ModelError(f"lambda must lie in [0, 1], got {lam}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ShapeError("kd_word_loss", student_logits.shape, teacher.shape)
    nll = M.nll_loss(student_logits, tgt_out_ids, tgt_mask)
    if lam == 0.0:
        return nll
    soft = T.softmax_array(teacher, axis=-1) * np.asarray(tgt_mask, dtype=bool)[..., None]
    count = float(np.asarray(tgt_mask, dtype=bool).sum())
    cross = -T.sum_(T.log_softmax(student_logits, axis=-1) * soft) / count
    return nll + (cross - nll) * lam


def teacher_logits(
    teacher: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray, tgt_in: np.ndarray, tgt_mask: np.ndarray
) -> np.ndarray:
    """Teacher forward pass without dropout or tape recording."""
    with T.no_grad():
        memory = M.encode(teacher, src_ids, src_mask)
        return M.decode_logits(teacher, memory, src_mask, tgt_in, tgt_mask).data


def kd_sequence_targets(teacher: ModelParams, corpus: DomainCorpus, batch_size: int = 128) -> DomainCorpus:
    """Replace gold targets with the teacher's greedy translations.

    A pair keeps its gold target when the teacher emits nothing; the number
    of such pairs is stored in ``kept_gold``.
    """
    if not corpus.pairs:
        return DomainCorpus(corpus.domain, corpus.name, [], corpus.rule)
    hypotheses = translate(teacher, corpus.sources, batch_size=batch_size)
    pairs = []
    kept = 0
    for (src, gold), hyp in zip(corpus.pairs, hypotheses):
        if hyp:
            pairs.append((list(src), list(hyp)))
        else:
            pairs.append((list(src), list(gold)))
            kept += 1
    if kept:
        logger.warning("teacher produced %d empty translations for %s; kept the gold targets", kept, corpus.name)
    return DomainCorpus(corpus.domain, corpus.name, pairs, corpus.rule, kept_gold=kept)


@dataclass
class LossReport:
    """Loss components of one batch plus the per-phase totals."""

    components: Dict[str, Tensor]
    phase_a: Tensor
    phase_b: Optional[Tensor] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        return {name: t.item() for name, t in self.components.items()}


def unified_objective(
    batch: Batch,
    params: ModelParams,
    dtn_bank: Optional[DtnBank],
    classifiers: Optional[ClassifierParams],
    teachers: Optional[TeacherSet],
    flags: SupervisionFlags,
    cls_weight: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    cached_teacher_logits: Optional[np.ndarray] = None,
) -> LossReport:
    """Compute every loss component for one single-domain batch.

    ``nll_or_kd`` is word-level distillation when ``flags.distill_word`` is
    set and plain NLL otherwise (sequence distillation changes the data, not
    the loss). With ``flags.discriminate`` unset the classifier components are
    zero.
    """
    domain = int(batch.domain)
    src_ids, src_mask = batch.src_ids, batch.src_mask
    tgt_in, tgt_out, tgt_mask = batch.tgt_in, batch.tgt_out, batch.tgt_mask

    H = M.encode(params, src_ids, src_mask, rng=rng)
    H_prime = transform(dtn_bank, H, src_mask, domain, rng=rng) if flags.transform and dtn_bank is not None else H
    logits = M.decode_logits(params, H_prime, src_mask, tgt_in, tgt_mask, rng=rng)

    if flags.distill_word:
        if teachers is None:
            raise TrainingError("word-level distillation needs teachers")
        soft = cached_teacher_logits
        if soft is None:
            soft = teacher_logits(teachers.teacher(domain), src_ids, src_mask, tgt_in, tgt_mask)
        likelihood = kd_word_loss(logits, soft, tgt_out, tgt_mask, teachers.lam)
    else:
        likelihood = M.nll_loss(logits, tgt_out, tgt_mask)

    zero = Tensor(0.0)
    components = {"nll_or_kd": likelihood, "specific_cls": zero, "adv_entropy": zero, "adv_cls": zero}
    phase_a = likelihood
    if flags.discriminate:
        if classifiers is None:
            raise TrainingError("domain discrimination needs classifier parameters")
        if domain >= classifiers.n_domains:
            raise DomainError(f"batch domain {domain} outside the classifiers' {classifiers.n_domains} domains")
        spec_pooled = attention_pool(H_prime, src_mask, classifiers.spec_query)
        specific = classifier_nll(spec_pooled, classifiers.spec_weights, domain)
        pooled = attention_pool(H, src_mask, classifiers.adv_query)
        probs = classify_domain(pooled, classifiers.adv_weights)
        adv_entropy = T.mean(entropy(probs)) * (-classifiers.delta)
        adv_cls = classifier_nll(pooled, classifiers.adv_weights, domain)
        components.update(specific_cls=specific, adv_entropy=adv_entropy, adv_cls=adv_cls)
        phase_a = likelihood + (specific + adv_entropy) * cls_weight
        return LossReport(components, phase_a=phase_a, phase_b=adv_cls * cls_weight)
    return LossReport(components, phase_a=phase_a)


def phase_names(params: ModelParams, phase: int) -> List[str]:
    """Tensors a phase may update: A is everything but ψ, B is ψ alone."""
    if phase == PHASE_A:
        return trainable_names(params, [ADV_PREFIX])
    if phase == PHASE_B:
        return params.names(ADV_PREFIX)
    raise TrainingError(f"invalid phase index {phase}; expected {PHASE_A} or {PHASE_B}")


def _check_finite(report: Dict[str, float], step: int) -> None:
    if not all(math.isfinite(v) for v in report.values()):
        raise DivergenceError(step, report)


def two_phase_step(
    optimizer: Adam,
    params: ModelParams,
    batch: Batch,
    phase: int,
    dtn_bank: Optional[DtnBank] = None,
    classifiers: Optional[ClassifierParams] = None,
    teachers: Optional[TeacherSet] = None,
    flags: Optional[SupervisionFlags] = None,
    cls_weight: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    cached_teacher_logits: Optional[np.ndarray] = None,
    step: int = 0,
) -> Dict[str, float]:
    """Run one phase on ``batch`` and update only that phase's tensors.

    Phase A minimizes ``nll_or_kd + specific_cls + adv_entropy`` over the model
    and γ; gradients pass through the frozen ψ classifier into the encoder.
    Phase B minimizes ``adv_cls`` over ψ with the encoder frozen.

    Returns:
        The phase's loss components as floats.
    """
    names = phase_names(params, phase)
    flags = flags or SupervisionFlags()
    T.get_tape().reset()
    params.zero_grad()
    if phase == PHASE_A:
        report = unified_objective(
            batch, params, dtn_bank, classifiers, teachers, flags, cls_weight, rng, cached_teacher_logits
        )
        values = report.values()
        values["total"] = report.phase_a.item()
        _check_finite(values, step)
        T.backward(report.phase_a)
        values["lr"] = optimizer.step(params, names)
        return values

    if classifiers is None:
        raise TrainingError("phase B needs classifier parameters")
    domain = int(batch.domain)
    with T.no_grad():
        H = M.encode(params, batch.src_ids, batch.src_mask)
    pooled = attention_pool(T.detach(H), batch.src_mask, classifiers.adv_query)
    adv_cls = classifier_nll(pooled, classifiers.adv_weights, domain)
    values = {"adv_cls": adv_cls.item()}
    _check_finite(values, step)
    T.backward(adv_cls * cls_weight)
    values["lr"] = optimizer.step(params, names, advance=False)
    return values
