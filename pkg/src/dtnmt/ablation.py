"""The supervision ladder: which combination of transformation, distillation and discrimination helps."""

# Import future modules
from __future__ import annotations

# Import built-in modules
import csv
import dataclasses
from dataclasses import dataclass
import io
import logging
import os
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt.config import SupervisionFlags
from dtnmt.config import TrainConfig
from dtnmt.data import DomainCorpus
from dtnmt.errors import EvaluationError
from dtnmt.evaluation import bleu
from dtnmt.evaluation import translate_corpus
from dtnmt.model import ModelParams
from dtnmt.supervision import TeacherSet
from dtnmt.training import finetune_teacher
from dtnmt.training import train_baseline
from dtnmt.training import train_unified


logger = logging.getLogger(__name__)

LADDER: Tuple[Tuple[str, SupervisionFlags], ...] = (
    ("Transformer", SupervisionFlags(transform=False)),
    ("+ Distillation (sequence)", SupervisionFlags(transform=False, distill_seq=True)),
    ("+ Distillation (word)", SupervisionFlags(transform=False, distill_word=True)),
    ("+ Domain Transformation", SupervisionFlags(transform=True)),
    ("+ DTN + Distillation (sequence)", SupervisionFlags(transform=True, distill_seq=True)),
    ("+ DTN + Distillation (word)", SupervisionFlags(transform=True, distill_word=True)),
    ("+ DTN + Discrimination", SupervisionFlags(transform=True, discriminate=True)),
    (
        "+ DTN + Discrimination + Distillation (word)",
        SupervisionFlags(transform=True, distill_word=True, discriminate=True),
    ),
)


@dataclass
class AblationRow:
    system: str
    flags: SupervisionFlags
    bleu: Dict[str, float]
    average: float
    delta: float = 0.0
    sha256: Optional[str] = None


def _score(params: ModelParams, bank: object, tests: Sequence[DomainCorpus], batch_size: int) -> Dict[str, float]:
    scores = {}
    for corpus in tests:
        domain = corpus.domain if bank is not None else None
        hyps = translate_corpus(params, corpus, bank, domain, batch_size=batch_size)  # type: ignore[arg-type]
        scores[corpus.name] = bleu(hyps, corpus.targets)
    return scores


def train_teachers(base: ModelParams, corpora: Sequence[DomainCorpus], config: TrainConfig) -> TeacherSet:
    """Fine-tune one teacher per domain from ``base``."""
    quiet = dataclasses.replace(config, log_path=None)
    teachers = {c.domain: finetune_teacher(base, c, quiet).params for c in corpora}
    return TeacherSet(teachers, lam=config.lam)


def run_ablation(
    config: TrainConfig,
    corpora: Sequence[DomainCorpus],
    tests: Sequence[DomainCorpus],
    out_path: Optional[str] = None,
    base: Optional[ModelParams] = None,
    teachers: Optional[TeacherSet] = None,
    ladder: Sequence[Tuple[str, SupervisionFlags]] = LADDER,
    checkpoint_dir: Optional[str] = None,
) -> List[AblationRow]:
    """Train every ladder configuration from the same baseline and score it on ``tests``.

    Every row, the plain ``Transformer`` row included, continues from the
    baseline for ``unified_steps`` steps, so rows differ only in supervision.
    A missing baseline or teacher set is trained first.
    """
    if not tests:
        raise EvaluationError("the ablation needs test corpora")
    quiet = dataclasses.replace(config, log_path=None, checkpoint_path=None)
    if base is None:
        logger.info("training the shared baseline")
        base = train_baseline(quiet, corpora).params
    if teachers is None and any(flags.needs_teachers for _, flags in ladder):
        logger.info("fine-tuning %d teachers", len(corpora))
        teachers = train_teachers(base, corpora, quiet)

    rows: List[AblationRow] = []
    for index, (system, flags) in enumerate(ladder):
        logger.info("ablation row %d/%d: %s", index + 1, len(ladder), system)
        row_config = dataclasses.replace(quiet, supervision=dataclasses.replace(flags))
        path = os.path.join(checkpoint_dir, f"ablation_{index}.ckpt") if checkpoint_dir else None
        result = train_unified(base, corpora, row_config, teachers if flags.needs_teachers else None, path=path)
        scores = _score(result.params, result.bank, tests, config.decode_batch_size)
        rows.append(
            AblationRow(
                system=system,
                flags=flags,
                bleu=scores,
                average=float(np.mean(list(scores.values()))),
                sha256=result.sha256,
            )
        )
    for row in rows:
        row.delta = row.average - rows[0].average
    if out_path:
        write_ablation_csv(rows, [c.name for c in tests], out_path)
    return rows


def format_ablation_csv(rows: Sequence[AblationRow], domains: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["system", *domains, "Avg.", "Δ"])
    for row in rows:
        writer.writerow(
            [row.system, *(f"{row.bleu[d]:.2f}" for d in domains), f"{row.average:.2f}", f"{row.delta:+.2f}"]
        )
    return buffer.getvalue()


def write_ablation_csv(rows: Sequence[AblationRow], domains: Sequence[str], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(format_ablation_csv(rows, domains))
