"""Configuration handling for dtnmt.

Values resolve in three layers, last one wins: dataclass defaults, a TOML run
file, then ``section.key=value`` overrides from the command line.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
import dataclasses
from dataclasses import dataclass
from dataclasses import field
import sys
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Tuple

# Import local modules
from dtnmt.errors import ConfigError


if sys.version_info >= (3, 11):
    # Import built-in modules
    import tomllib
else:
    # Import third-party modules
    import tomli as tomllib


@dataclass
class ModelConfig:
    """Transformer dimensions and special token ids.

    Attributes:
        vocab_size_src: Source vocabulary size; filled from the data when 0.
        vocab_size_tgt: Target vocabulary size; filled from the data when 0.
        d_model: Width of every representation.
        n_heads: Attention heads; must divide ``d_model``.
        n_enc_layers: Encoder depth.
        n_dec_layers: Decoder depth.
        d_ffn: Hidden width of feed-forward sublayers.
        max_len: Longest sequence the positional table covers.
        dropout_rate: Dropout probability at the standard sites.
    """

    vocab_size_src: int = 0
    vocab_size_tgt: int = 0
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def validate(self) -> List[str]:
        errors = []
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ffn", "max_len"):
            if getattr(self, name) < 1:
                errors.append(f"model.{name} must be a positive integer")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            errors.append(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            errors.append("model.dropout_rate must lie in [0, 1)")
        specials = (self.pad_id, self.bos_id, self.eos_id)
        if len(set(specials)) != 3:
            errors.append("model.pad_id, model.bos_id and model.eos_id must be distinct")
        for size_name in ("vocab_size_src", "vocab_size_tgt"):
            size = getattr(self, size_name)
            if size < 0:
                errors.append(f"model.{size_name} must not be negative")
            elif size and max(specials) >= size:
                errors.append(f"special token ids must be smaller than model.{size_name}")
        return errors


@dataclass
class OptimConfig:
    """Adam with an inverse square-root warmup schedule."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 200

    def validate(self) -> List[str]:
        errors = []
        if self.lr <= 0:
            errors.append("optim.lr must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errors.append(f"optim.{name} must lie in [0, 1)")
        if self.eps <= 0:
            errors.append("optim.eps must be positive")
        if self.warmup_steps < 1:
            errors.append("optim.warmup_steps must be at least 1")
        return errors


@dataclass
class DataConfig:
    """Synthetic task shape and batching."""

    n_domains: int = 4
    sizes: List[int] = field(default_factory=lambda: [4000, 4000, 1000, 1000])
    test_size: int = 200
    len_range: List[int] = field(default_factory=lambda: [3, 12])
    alphabet_size: int = 24
    domain_skew: float = 0.5
    batch_tokens: int = 1000

    def validate(self) -> List[str]:
        errors = []
        if self.n_domains < 1:
            errors.append("data.n_domains must be at least 1")
        if len(self.sizes) != self.n_domains:
            errors.append(f"data.sizes needs {self.n_domains} entries, got {len(self.sizes)}")
        if any(s < 1 for s in self.sizes):
            errors.append("data.sizes entries must be positive")
        if self.test_size < 0:
            errors.append("data.test_size must not be negative")
        if len(self.len_range) != 2 or not 1 <= self.len_range[0] <= self.len_range[1]:
            errors.append("data.len_range must be [min, max] with 1 <= min <= max")
        if self.alphabet_size < 4:
            errors.append("data.alphabet_size must be at least 4")
        if not 0.0 <= self.domain_skew <= 1.0:
            errors.append("data.domain_skew must lie in [0, 1]")
        if self.len_range and self.batch_tokens < self.len_range[-1] + 1:
            errors.append("data.batch_tokens must cover the longest sentence")
        return errors


@dataclass
class DtnConfig:
    """Shape of the per-domain transformation networks."""

    kind: str = "attention"
    depth: int = 1

    def validate(self) -> List[str]:
        errors = []
        if self.kind not in ("attention", "ffn"):
            errors.append(f"dtn.kind must be 'attention' or 'ffn', got {self.kind!r}")
        if self.depth < 1:
            errors.append("dtn.depth must be at least 1")
        return errors


@dataclass
class SupervisionFlags:
    """Which training signals the unified model uses."""

    transform: bool = True
    distill_word: bool = False
    distill_seq: bool = False
    discriminate: bool = False

    @property
    def needs_teachers(self) -> bool:
        return self.distill_word or self.distill_seq

    def validate(self) -> List[str]:
        if self.distill_word and self.distill_seq:
            return ["supervision.distill_word and supervision.distill_seq are mutually exclusive"]
        return []


@dataclass
class TrainConfig:
    """Every hyperparameter of a run.

    ``lam`` and ``delta`` default to 0.1 and ``alpha`` to 0.7. Step counts are
    desk-scale.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dtn: DtnConfig = field(default_factory=DtnConfig)
    supervision: SupervisionFlags = field(default_factory=SupervisionFlags)
    max_steps: int = 2000
    finetune_steps: int = 400
    unified_steps: int = 1000
    probe_steps: int = 300
    lam: float = 0.1
    delta: float = 0.1
    alpha: float = 0.7
    cls_weight: float = 1.0
    adv_ratio: int = 1
    decode_batch_size: int = 128
    seed: int = 1
    log_every: int = 100
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    def validate(self) -> List[str]:
        errors = []
        for section in (self.model, self.optim, self.data, self.dtn, self.supervision):
            errors.extend(section.validate())
        for name in ("max_steps", "finetune_steps", "unified_steps", "probe_steps"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must not be negative")
        if not 0.0 <= self.lam <= 1.0:
            errors.append("lam must lie in [0, 1]")
        if self.delta < 0:
            errors.append("delta must not be negative")
        if not 0.0 < self.alpha <= 1.0:
            errors.append("alpha must lie in (0, 1]")
        if self.cls_weight < 0:
            errors.append("cls_weight must not be negative")
        if self.adv_ratio < 1:
            errors.append("adv_ratio must be at least 1")
        if self.decode_batch_size < 1:
            errors.append("decode_batch_size must be at least 1")
        if self.log_every < 1:
            errors.append("log_every must be at least 1")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> TrainConfig:
        config = cls()
        _merge(config, values, prefix="")
        return config

    def with_vocab(self, vocab_size: int) -> TrainConfig:
        """Return a copy whose model config uses ``vocab_size`` on both sides."""
        model = dataclasses.replace(self.model, vocab_size_src=vocab_size, vocab_size_tgt=vocab_size)
        return dataclasses.replace(self, model=model)


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError([f"{key} expects a boolean, got {value!r}"])
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError([f"{key} expects an integer, got {value!r}"])
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError([f"{key} expects a number, got {value!r}"])
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError([f"{key} expects a list, got {value!r}"])
        return list(value)
    return value


def _merge(target: Any, values: Dict[str, Any], prefix: str) -> None:
    names = {f.name for f in dataclasses.fields(target)}
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError([f"unknown configuration key {dotted!r}"])
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError([f"{dotted} is a section, got {value!r}"])
            _merge(current, value, prefix=f"{dotted}.")
        else:
            setattr(target, key, _coerce(current, value, dotted))


def parse_override(text: str) -> Tuple[str, Any]:
    """Split ``section.key=value`` and parse the value as a TOML literal."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError([f"override {text!r} has an empty key"])
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def _nest(key: str, value: Any) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Resolve defaults < TOML file < overrides, then validate.

    Raises:
        ConfigError: The file does not parse, a key is unknown, or the
            resolved values fail validation. Every problem is listed.
    """
    config = TrainConfig()
    if path:
        try:
            with open(path, "rb") as handle:
                values = tomllib.load(handle)
        except OSError as exc:
            raise ConfigError([f"cannot read config file {path}: {exc.strerror}"]) from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        _merge(config, values, prefix="")
    errors: List[str] = []
    for text in overrides:
        try:
            key, value = parse_override(text)
            _merge(config, _nest(key, value), prefix="")
        except ConfigError as exc:
            errors.extend(exc.errors)
    errors.extend(config.validate())
    if errors:
        raise ConfigError(errors)
    return config
