"""Multi-domain neural machine translation with domain transformation networks."""

# Import local modules
from .__version__ import __version__
from .config import TrainConfig
from .config import load_config
from .errors import DtnmtError
from .evaluation import bleu
from .evaluation import bootstrap_significance
from .training import finetune_teacher
from .training import load_model
from .training import train_baseline
from .training import train_domain_control
from .training import train_unified


__all__ = [
    "__version__",
    "DtnmtError",
    "TrainConfig",
    "bleu",
    "bootstrap_significance",
    "finetune_teacher",
    "load_config",
    "load_model",
    "train_baseline",
    "train_domain_control",
    "train_unified",
]
