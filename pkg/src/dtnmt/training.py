"""Training recipes: mixed baseline, fine-tuned teachers, domain control and the unified model.

Every recipe runs on :class:`Trainer`, which owns the optimizer, the domain
sampler, one random generator and the CSV training log.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
import csv
from dataclasses import dataclass
from dataclasses import field
import logging
import os
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import TextIO
from typing import Union

# Import third-party modules
import numpy as np
from tqdm import tqdm

# Import local modules
from dtnmt.checkpoint import file_hash
from dtnmt.checkpoint import load_arrays
from dtnmt.checkpoint import load_checkpoint
from dtnmt.checkpoint import save_arrays
from dtnmt.checkpoint import save_checkpoint
from dtnmt.config import SupervisionFlags
from dtnmt.config import TrainConfig
from dtnmt.data import Batch
from dtnmt.data import DomainCorpus
from dtnmt.data import SamplerState
from dtnmt.data import Vocabulary
from dtnmt.data import add_domain_tags
from dtnmt.data import make_batches
from dtnmt.data import sample_domain
from dtnmt.errors import TrainingError
from dtnmt.errors import VocabularyError
from dtnmt.model import ModelParams
from dtnmt.model import init_params
from dtnmt.optim import Adam
from dtnmt.supervision import COMPONENTS
from dtnmt.supervision import PHASE_A
from dtnmt.supervision import PHASE_B
from dtnmt.supervision import ClassifierParams
from dtnmt.supervision import TeacherSet
from dtnmt.supervision import attach_classifiers
from dtnmt.supervision import init_classifiers
from dtnmt.supervision import kd_sequence_targets
from dtnmt.supervision import teacher_logits
from dtnmt.supervision import two_phase_step
from dtnmt.transform import DtnBank
from dtnmt.transform import attach_dtn
from dtnmt.transform import init_dtn_from_config


logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "phase", "domain", *COMPONENTS)

# Independent random streams derived from the run seed.
INIT_STREAM = 0
TRAIN_STREAM = 1
EXTENSION_STREAM = 2

BaseModel = Union[str, ModelParams]


@dataclass
class TrainState:
    """Everything besides parameters and optimizer moments that a resumed run needs.

    Attributes:
        step: Completed training steps.
        phase: Phase of the last update (0 = model, 1 = adversary).
        cursors: Next position in each domain's batch order.
        orders: Current batch permutation per domain.
        rolling: Sums of loss components since the last progress line.
    """

    step: int = 0
    phase: int = PHASE_A
    cursors: List[int] = field(default_factory=list)
    orders: List[List[int]] = field(default_factory=list)
    rolling: Dict[str, float] = field(default_factory=dict)
    rolling_count: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "phase": self.phase,
            "cursors": list(self.cursors),
            "orders": [list(o) for o in self.orders],
            "rolling": dict(self.rolling),
            "rolling_count": self.rolling_count,
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> TrainState:
        return cls(
            step=int(values["step"]),
            phase=int(values["phase"]),
            cursors=[int(c) for c in values["cursors"]],
            orders=[[int(i) for i in o] for o in values["orders"]],
            rolling={k: float(v) for k, v in values["rolling"].items()},
            rolling_count=int(values["rolling_count"]),
        )


class Trainer:
    """Step loop shared by every recipe.

    Each step draws a domain with the sampler, takes that domain's next batch
    (reshuffling its batch order after a full pass) and runs phase A. When
    discrimination is on, ``adv_ratio`` phase B updates follow on the same
    batch. Teacher logits for word-level distillation are computed once per
    batch and cached for the rest of the run.
    """

    def __init__(
        self,
        config: TrainConfig,
        params: ModelParams,
        corpora: Sequence[DomainCorpus],
        alpha: Optional[float] = None,
        flags: Optional[SupervisionFlags] = None,
        bank: Optional[DtnBank] = None,
        classifiers: Optional[ClassifierParams] = None,
        teachers: Optional[TeacherSet] = None,
        log_path: Optional[str] = None,
    ) -> None:
        if not corpora:
            raise TrainingError("training needs at least one domain corpus")
        for corpus in corpora:
            if not corpus.pairs:
                raise TrainingError(f"domain corpus {corpus.name!r} is empty")
        self.config = config
        self.params = params
        self.flags = flags or SupervisionFlags(transform=False)
        self.bank = bank
        self.classifiers = classifiers
        self.teachers = teachers
        self.log_path = log_path
        self.rng = np.random.default_rng([config.seed, TRAIN_STREAM])
        self.optimizer = Adam(config.optim)
        self.batches = [make_batches(c, config.data.batch_tokens) for c in corpora]
        self.domains = [c.domain for c in corpora]
        self.sampler = SamplerState.from_batches(self.batches, config.alpha if alpha is None else alpha, self.rng)
        self.state = TrainState(
            cursors=[len(b) for b in self.batches],
            orders=[list(range(len(b))) for b in self.batches],
        )
        self._teacher_cache: Dict[tuple, np.ndarray] = {}
        self._log_handle: Optional[TextIO] = None
        self._log_writer: Any = None
        logger.debug(
            "sampling distribution q=%s over %s batches", np.round(self.sampler.q, 4).tolist(), self.sampler.counts
        )

    # -- batches ---------------------------------------------------------

    def _next_batch(self, position: int) -> int:
        state = self.state
        if state.cursors[position] >= len(state.orders[position]):
            state.orders[position] = [int(i) for i in self.rng.permutation(len(self.batches[position]))]
            state.cursors[position] = 0
        index = state.orders[position][state.cursors[position]]
        state.cursors[position] += 1
        return index

    def _cached_teacher_logits(self, position: int, index: int, batch: Batch) -> Optional[np.ndarray]:
        if not self.flags.distill_word or self.teachers is None:
            return None
        key = (position, index)
        if key not in self._teacher_cache:
            teacher = self.teachers.teacher(batch.domain)
            self._teacher_cache[key] = teacher_logits(
                teacher, batch.src_ids, batch.src_mask, batch.tgt_in, batch.tgt_mask
            )
        return self._teacher_cache[key]

    # -- logging ---------------------------------------------------------

    def _open_log(self) -> None:
        if not self.log_path or self._log_handle is not None:
            return
        os.makedirs(os.path.dirname(os.path.abspath(self.log_path)), exist_ok=True)
        resume = self.state.step > 0 and os.path.exists(self.log_path)
        self._log_handle = open(self.log_path, "a" if resume else "w", encoding="utf-8", newline="")
        self._log_writer = csv.writer(self._log_handle, lineterminator="\n")
        if not resume:
            self._log_writer.writerow(LOG_FIELDS)

    def _log_row(self, step: int, phase: int, domain: int, values: Dict[str, float]) -> None:
        if self._log_writer is None:
            return
        cells = [f"{values[name]:.6f}" if name in values else "" for name in COMPONENTS]
        self._log_writer.writerow([step, phase, domain, *cells])

    def close(self) -> None:
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None
            self._log_writer = None

    def _accumulate(self, values: Dict[str, float]) -> None:
        for name in COMPONENTS:
            if name in values:
                self.state.rolling[name] = self.state.rolling.get(name, 0.0) + values[name]
        self.state.rolling_count += 1
        if self.state.step % self.config.log_every == 0:
            count = max(self.state.rolling_count, 1)
            summary = " ".join(f"{k}={v / count:.4f}" for k, v in sorted(self.state.rolling.items()))
            logger.info("step %d: %s", self.state.step, summary)
            self.state.rolling = {}
            self.state.rolling_count = 0

    # -- training --------------------------------------------------------

    def train_step(self) -> Dict[str, float]:
        """Run one training step and return its phase A loss components."""
        position = sample_domain(self.sampler)
        index = self._next_batch(position)
        batch = self.batches[position][index]
        step = self.state.step + 1
        common: Dict[str, Any] = dict(
            dtn_bank=self.bank,
            classifiers=self.classifiers,
            teachers=self.teachers,
            flags=self.flags,
            cls_weight=self.config.cls_weight,
            step=step,
        )
        values = two_phase_step(
            self.optimizer,
            self.params,
            batch,
            PHASE_A,
            rng=self.rng,
            cached_teacher_logits=self._cached_teacher_logits(position, index, batch),
            **common,
        )
        self.state.step = step
        self.state.phase = PHASE_A
        self._log_row(step, PHASE_A, batch.domain, values)
        if self.flags.discriminate:
            for _ in range(self.config.adv_ratio):
                adversary = two_phase_step(self.optimizer, self.params, batch, PHASE_B, **common)
                self.state.phase = PHASE_B
                self._log_row(step, PHASE_B, batch.domain, adversary)
                values["adv_cls"] = adversary["adv_cls"]
        self._accumulate(values)
        return values

    def run(self, steps: int, desc: str = "train") -> TrainState:
        """Train until ``steps`` steps are complete (counting resumed ones)."""
        self._open_log()
        try:
            remaining = max(steps - self.state.step, 0)
            quiet = logging.getLogger("dtnmt").getEffectiveLevel() > logging.INFO
            with tqdm(total=remaining, desc=desc, disable=quiet or remaining == 0, leave=False) as bar:
                while self.state.step < steps:
                    values = self.train_step()
                    bar.set_postfix(loss=f"{values['nll_or_kd']:.3f}")
                    bar.update(1)
        finally:
            self.close()
        return self.state

    # -- resume ----------------------------------------------------------

    def save_state(self, path: str) -> None:
        """Write parameters, optimizer moments, sampler position and RNG state."""
        arrays = {f"param/{name}": t.data for name, t in self.params.items()}
        optim = self.optimizer.state_dict()
        arrays.update({f"optim/{name}": value for name, value in optim["arrays"].items()})
        meta = {
            "state": self.state.to_dict(),
            "rng": self.rng.bit_generator.state,
            "optim": {"step_count": optim["step_count"], "t": optim["t"]},
            "param_order": list(self.params),
        }
        save_arrays(path, arrays, meta)

    def load_state(self, path: str) -> None:
        arrays, meta = load_arrays(path)
        order = meta["param_order"]
        if order != list(self.params):
            raise TrainingError(f"{path} was saved for different parameters")
        for name in order:
            self.params[name].data[...] = arrays[f"param/{name}"]
        self.optimizer.load_state_dict(
            {
                "step_count": meta["optim"]["step_count"],
                "t": meta["optim"]["t"],
                "arrays": {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")},
            }
        )
        self.rng.bit_generator.state = meta["rng"]
        self.state = TrainState.from_dict(meta["state"])


# ---------------------------------------------------------------------------
# Results and loading
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    """A trained model plus the metadata stored with its checkpoint."""

    params: ModelParams
    meta: Dict[str, Any]
    path: Optional[str] = None
    sha256: Optional[str] = None
    bank: Optional[DtnBank] = None
    classifiers: Optional[ClassifierParams] = None


@dataclass
class LoadedModel:
    """A checkpoint with its DTN bank and classifiers reattached."""

    params: ModelParams
    meta: Dict[str, Any]
    bank: Optional[DtnBank] = None
    classifiers: Optional[ClassifierParams] = None
    sha256: Optional[str] = None

    @property
    def domain_tags(self) -> Optional[List[str]]:
        tags = self.meta.get("domain_tags")
        return list(tags) if tags else None


def load_model(path: str) -> LoadedModel:
    """Load a checkpoint written by any recipe."""
    params, meta = load_checkpoint(path)
    bank = attach_dtn(params, meta["dtn"]) if meta.get("dtn") else None
    classifiers = None
    if meta.get("classifiers"):
        described = meta["classifiers"]
        classifiers = attach_classifiers(params, int(described["n_domains"]), float(described["delta"]))
    return LoadedModel(params=params, meta=meta, bank=bank, classifiers=classifiers, sha256=file_hash(path))


def _base_params(base: BaseModel) -> ModelParams:
    if isinstance(base, ModelParams):
        return base.copy()
    return load_checkpoint(base)[0]


def _resolve_vocab(config: TrainConfig, corpora: Sequence[DomainCorpus]) -> TrainConfig:
    if config.model.vocab_size_src and config.model.vocab_size_tgt:
        return config
    highest = max((max(max(s), max(t)) for c in corpora for s, t in c.pairs), default=0)
    specials = max(config.model.pad_id, config.model.bos_id, config.model.eos_id)
    size = max(highest, specials) + 1
    logger.info("model vocabulary size unset; using %d from the corpora", size)
    return config.with_vocab(size)


def _finish(params: ModelParams, meta: Dict[str, Any], path: Optional[str], **views: Any) -> TrainResult:
    digest = save_checkpoint(path, params, meta) if path else None
    return TrainResult(params=params, meta=meta, path=path, sha256=digest, **views)


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------


def train_baseline(config: TrainConfig, corpora: Sequence[DomainCorpus], path: Optional[str] = None) -> TrainResult:
    """Plain mixed-domain likelihood training, batches sampled in proportion to size.

    Returns:
        The trained parameters; the checkpoint holds no DTN or classifier.
    """
    config = _resolve_vocab(config, corpora)
    params = init_params(config.model, np.random.default_rng([config.seed, INIT_STREAM]))
    trainer = Trainer(config, params, corpora, alpha=1.0, log_path=config.log_path)
    trainer.run(config.max_steps, desc="baseline")
    meta = {"recipe": "baseline", "config": config.to_dict(), "steps": trainer.state.step}
    return _finish(params, meta, path or config.checkpoint_path)


def finetune_teacher(
    base: BaseModel,
    corpus: DomainCorpus,
    config: TrainConfig,
    path: Optional[str] = None,
) -> TrainResult:
    """Continue training ``base`` on a single domain for ``finetune_steps`` steps."""
    if not corpus.pairs:
        raise TrainingError(f"cannot fine-tune on empty domain corpus {corpus.name!r}")
    params = _base_params(base)
    trainer = Trainer(config, params, [corpus], alpha=1.0, log_path=config.log_path)
    trainer.run(config.finetune_steps, desc=f"finetune {corpus.name}")
    meta = {
        "recipe": "finetune",
        "domain": corpus.domain,
        "domain_name": corpus.name,
        "config": config.to_dict(),
        "steps": trainer.state.step,
    }
    return _finish(params, meta, path)


def train_domain_control(
    config: TrainConfig,
    corpora: Sequence[DomainCorpus],
    vocab: Vocabulary,
    path: Optional[str] = None,
) -> TrainResult:
    """Baseline training with each source prefixed by its domain tag."""
    try:
        tagged = [add_domain_tags(c, vocab) for c in corpora]
    except VocabularyError as exc:
        raise TrainingError(f"domain control needs one tag token per domain: {exc}") from exc
    config = _resolve_vocab(config, tagged)
    params = init_params(config.model, np.random.default_rng([config.seed, INIT_STREAM]))
    trainer = Trainer(config, params, tagged, alpha=1.0, log_path=config.log_path)
    trainer.run(config.max_steps, desc="domain control")
    meta = {
        "recipe": "domain_control",
        "domain_tags": [c.name for c in corpora],
        "config": config.to_dict(),
        "steps": trainer.state.step,
    }
    return _finish(params, meta, path or config.checkpoint_path)


def train_unified(
    base: BaseModel,
    corpora: Sequence[DomainCorpus],
    config: TrainConfig,
    teachers: Optional[TeacherSet] = None,
    path: Optional[str] = None,
) -> TrainResult:
    """Train the multi-domain model from a baseline.

    The encoder and decoder start from ``base``; DTNs start as the identity;
    batches are drawn with the balance factor ``config.alpha``. Which signals
    are active follows ``config.supervision``.

    Raises:
        TrainingError: Teachers are needed but missing, or the corpora do not
            cover domains ``0..n_domains-1`` in order.
    """
    flags = config.supervision
    n_domains = config.data.n_domains
    if [c.domain for c in corpora] != list(range(n_domains)):
        raise TrainingError(
            f"expected corpora for domains 0..{n_domains - 1}, got {[c.domain for c in corpora]}"
        )
    if flags.needs_teachers:
        if teachers is None:
            raise TrainingError("distillation is enabled but no teachers were given")
        missing = [c.name for c in corpora if c.domain not in teachers.teachers]
        if missing:
            raise TrainingError(f"missing teachers for domains {missing}")
    params = _base_params(base)
    if params.names("dtn.") or params.names("cls."):
        raise TrainingError("the base model already holds DTN or classifier parameters")

    rng = np.random.default_rng([config.seed, EXTENSION_STREAM])
    bank = init_dtn_from_config(params, n_domains, config.dtn, rng) if flags.transform else None
    classifiers = init_classifiers(params, n_domains, rng, delta=config.delta) if flags.discriminate else None
    hashes = teachers.content_hashes() if teachers is not None else {}

    train_corpora = list(corpora)
    if flags.distill_seq and teachers is not None:
        train_corpora = [
            kd_sequence_targets(teachers.teacher(c.domain), c, config.decode_batch_size) for c in corpora
        ]
    trainer = Trainer(
        config,
        params,
        train_corpora,
        alpha=config.alpha,
        flags=flags,
        bank=bank,
        classifiers=classifiers,
        teachers=teachers if flags.distill_word else None,
        log_path=config.log_path,
    )
    trainer.run(config.unified_steps, desc="unified")

    if teachers is not None and teachers.content_hashes() != hashes:
        raise TrainingError("a teacher model changed during unified training")
    meta: Dict[str, Any] = {
        "recipe": "unified",
        "config": config.to_dict(),
        "steps": trainer.state.step,
        "dtn": bank.describe() if bank is not None else None,
        "classifiers": {"n_domains": n_domains, "delta": config.delta} if classifiers is not None else None,
        "teacher_hashes": {str(k): v for k, v in hashes.items()},
        "kept_gold": {c.name: c.kept_gold for c in train_corpora if c.kept_gold},
    }
    return _finish(params, meta, path or config.checkpoint_path, bank=bank, classifiers=classifiers)
