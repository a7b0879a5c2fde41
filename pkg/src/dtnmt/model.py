"""Transformer encoder-decoder on the dtnmt tensor tape.

Pre-norm layers with sinusoidal positions, learned untied embeddings and a
separate output projection. Masks are boolean arrays that are ``True`` on
real tokens and ``False`` on padding.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
from collections import OrderedDict
import copy
import hashlib
import logging
import math
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Tuple

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt import tensor as T
from dtnmt.config import ModelConfig
from dtnmt.errors import ModelError
from dtnmt.tensor import Tensor


logger = logging.getLogger(__name__)

NEG_INF = -1e9


class ModelParams:
    """Named trainable tensors plus the model config they were built for.

    Paths are dotted, e.g. ``enc.layer0.attn.Wq``; DTN parameters live under
    ``dtn.<domain>.*`` and domain classifiers under ``cls.adv.*`` and
    ``cls.spec.*``.
    """

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self._tensors: Dict[str, Tensor] = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ModelError(f"duplicate parameter path {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ModelError(f"no parameter named {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters under ``prefix``."""
        return sum(self._tensors[n].size for n in self.names(prefix))

    def zero_grad(self) -> None:
        """Drop accumulated gradients; tensors the next pass never reaches keep ``None``."""
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> ModelParams:
        """Deep copy: new arrays, no gradients."""
        clone = ModelParams(copy.deepcopy(self.config))
        for name, t in self._tensors.items():
            clone.add(name, t.data.copy())
        return clone

    def freeze(self) -> ModelParams:
        """Make every tensor read-only and drop it from gradient tracking."""
        for t in self._tensors.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        return self

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._tensors):
            data = np.ascontiguousarray(self._tensors[name].data)
            digest.update(name.encode("utf-8"))
            digest.update(str(data.shape).encode("ascii"))
            digest.update(data.tobytes())
        return digest.hexdigest()


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_attention(
    params: ModelParams, prefix: str, d_model: int, rng: np.random.Generator, zero_out: bool = False
) -> None:
    for name in ("Wq", "Wk", "Wv"):
        params.add(f"{prefix}.{name}", _xavier(rng, d_model, d_model))
    out = np.zeros((d_model, d_model)) if zero_out else _xavier(rng, d_model, d_model)
    params.add(f"{prefix}.Wo", out)


def add_ffn(
    params: ModelParams, prefix: str, d_model: int, d_ffn: int, rng: np.random.Generator, zero_out: bool = False
) -> None:
    params.add(f"{prefix}.W1", _xavier(rng, d_model, d_ffn))
    params.add(f"{prefix}.b1", np.zeros(d_ffn))
    out = np.zeros((d_ffn, d_model)) if zero_out else _xavier(rng, d_ffn, d_model)
    params.add(f"{prefix}.W2", out)
    params.add(f"{prefix}.b2", np.zeros(d_model))


def add_layer_norm(params: ModelParams, prefix: str, d_model: int) -> None:
    params.add(f"{prefix}.gain", np.ones(d_model))
    params.add(f"{prefix}.bias", np.zeros(d_model))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Build encoder, decoder, embeddings and output projection."""
    errors = config.validate()
    if not config.vocab_size_src or not config.vocab_size_tgt:
        errors.append("vocabulary sizes must be set before building a model")
    if errors:
        raise ModelError("; ".join(errors))
    d = config.d_model
    params = ModelParams(config)
    params.add("emb.src", rng.normal(0.0, d**-0.5, size=(config.vocab_size_src, d)))
    params.add("emb.tgt", rng.normal(0.0, d**-0.5, size=(config.vocab_size_tgt, d)))
    for i in range(config.n_enc_layers):
        prefix = f"enc.layer{i}"
        add_layer_norm(params, f"{prefix}.ln1", d)
        add_attention(params, f"{prefix}.attn", d, rng)
        add_layer_norm(params, f"{prefix}.ln2", d)
        add_ffn(params, f"{prefix}.ffn", d, config.d_ffn, rng)
    add_layer_norm(params, "enc.ln", d)
    for i in range(config.n_dec_layers):
        prefix = f"dec.layer{i}"
        add_layer_norm(params, f"{prefix}.ln1", d)
        add_attention(params, f"{prefix}.self_attn", d, rng)
        add_layer_norm(params, f"{prefix}.ln2", d)
        add_attention(params, f"{prefix}.cross_attn", d, rng)
        add_layer_norm(params, f"{prefix}.ln3", d)
        add_ffn(params, f"{prefix}.ffn", d, config.d_ffn, rng)
    add_layer_norm(params, "dec.ln", d)
    params.add("out.W", _xavier(rng, d, config.vocab_size_tgt))
    params.add("out.b", np.zeros(config.vocab_size_tgt))
    logger.debug("initialized %d tensors (%d scalars)", len(params), params.count())
    return params


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


def layer_norm(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def feed_forward(
    params: ModelParams, prefix: str, x: Tensor, rate: float, rng: Optional[np.random.Generator]
) -> Tensor:
    hidden = T.relu(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    hidden = T.dropout(hidden, rate, rng)
    return hidden @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, length, width = x.shape
    return T.transpose(x.reshape(batch, length, n_heads, width // n_heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, depth = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(batch, length, heads * depth)


def multi_head_attention(
    params: ModelParams,
    prefix: str,
    queries: Tensor,
    keys: Tensor,
    key_mask: np.ndarray,
    n_heads: int,
    causal: bool = False,
    rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``key_mask`` is ``(batch, keys)``; masked keys receive no weight. With
    ``causal`` a query may only attend to keys at or before its position.
    """
    q = _split_heads(queries @ params[f"{prefix}.Wq"], n_heads)
    k = _split_heads(keys @ params[f"{prefix}.Wk"], n_heads)
    v = _split_heads(keys @ params[f"{prefix}.Wv"], n_heads)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        length_q, length_k = queries.shape[1], keys.shape[1]
        future = np.triu(np.ones((length_q, length_k), dtype=bool), k=1)
        blocked = blocked | future[None, None, :, :]
    weights = T.softmax(T.masked_fill(scores, blocked, NEG_INF), axis=-1)
    weights = T.dropout(weights, rate, rng)
    return _merge_heads(T.matmul(weights, v)) @ params[f"{prefix}.Wo"]


def _check_ids(ids: np.ndarray, vocab_size: int, max_len: int, side: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ModelError(f"{side} ids must be a (batch, length) matrix, got shape {ids.shape}")
    if ids.shape[1] > max_len:
        raise ModelError(f"{side} length {ids.shape[1]} exceeds max_len {max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids.max()) if ids.max() >= vocab_size else int(ids.min())
        raise ModelError(f"{side} id {bad} outside vocabulary of size {vocab_size}")
    return ids


def _embed(params: ModelParams, table: str, ids: np.ndarray, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    d = params.config.d_model
    x = T.embedding(params[table], ids) * math.sqrt(d)
    x = x + positional_encoding(ids.shape[1], d)
    return T.dropout(x, rate, rng)


def encode(
    params: ModelParams,
    src_ids: np.ndarray,
    src_mask: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Return the encoder output ``H`` of shape ``(batch, I, d_model)``.

    Dropout is active only when ``rng`` is given.
    """
    config = params.config
    src_ids = _check_ids(src_ids, config.vocab_size_src, config.max_len, "source")
    rate = config.dropout_rate
    x = _embed(params, "emb.src", src_ids, rate, rng)
    for i in range(config.n_enc_layers):
        prefix = f"enc.layer{i}"
        h = layer_norm(params, f"{prefix}.ln1", x)
        h = multi_head_attention(params, f"{prefix}.attn", h, h, src_mask, config.n_heads, rate=rate, rng=rng)
        x = x + T.dropout(h, rate, rng)
        h = feed_forward(params, f"{prefix}.ffn", layer_norm(params, f"{prefix}.ln2", x), rate, rng)
        x = x + T.dropout(h, rate, rng)
    return layer_norm(params, "enc.ln", x)


def decode_logits(
    params: ModelParams,
    memory: Tensor,
    src_mask: np.ndarray,
    tgt_in_ids: np.ndarray,
    tgt_mask: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Return next-token logits ``(batch, J, vocab_size_tgt)``.

    ``memory`` is the encoder output or its domain transformation;
    ``tgt_in_ids`` starts with BOS. Position ``j`` sees only target positions
    up to ``j``.
    """
    config = params.config
    tgt_in_ids = _check_ids(tgt_in_ids, config.vocab_size_tgt, config.max_len, "target")
    rate = config.dropout_rate
    y = _embed(params, "emb.tgt", tgt_in_ids, rate, rng)
    for i in range(config.n_dec_layers):
        prefix = f"dec.layer{i}"
        h = layer_norm(params, f"{prefix}.ln1", y)
        h = multi_head_attention(
            params, f"{prefix}.self_attn", h, h, tgt_mask, config.n_heads, causal=True, rate=rate, rng=rng
        )
        y = y + T.dropout(h, rate, rng)
        h = layer_norm(params, f"{prefix}.ln2", y)
        h = multi_head_attention(
            params, f"{prefix}.cross_attn", h, memory, src_mask, config.n_heads, rate=rate, rng=rng
        )
        y = y + T.dropout(h, rate, rng)
        h = feed_forward(params, f"{prefix}.ffn", layer_norm(params, f"{prefix}.ln3", y), rate, rng)
        y = y + T.dropout(h, rate, rng)
    y = layer_norm(params, "dec.ln", y)
    return y @ params["out.W"] + params["out.b"]


def token_weights(tgt_out_ids: np.ndarray, tgt_mask: np.ndarray, vocab_size: int) -> Tuple[np.ndarray, float]:
    """One-hot gold distribution with padded positions zeroed, and the token count."""
    mask = np.asarray(tgt_mask, dtype=bool)
    count = float(mask.sum())
    if count == 0:
        raise ModelError("every target position is masked")
    gold = np.eye(vocab_size)[np.asarray(tgt_out_ids, dtype=np.int64)]
    return gold * mask[..., None], count


def nll_loss(logits: Tensor, tgt_out_ids: np.ndarray, tgt_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over unmasked target tokens."""
    if logits.shape[:2] != np.shape(tgt_out_ids):
        raise ModelError(f"logits {logits.shape} do not match targets {np.shape(tgt_out_ids)}")
    weights, count = token_weights(tgt_out_ids, tgt_mask, logits.shape[-1])
    return -T.sum_(T.log_softmax(logits, axis=-1) * weights) / count


def greedy_decode(
    params: ModelParams,
    memory: Tensor,
    src_mask: np.ndarray,
    max_steps: int,
) -> List[List[int]]:
    """Greedily extend BOS until EOS or ``max_steps`` tokens, per batch row.

    Returned sequences exclude BOS and EOS.
    """
    config = params.config
    if max_steps > config.max_len:
        raise ModelError(f"max_steps {max_steps} exceeds max_len {config.max_len}")
    batch = memory.shape[0]
    outputs: List[List[int]] = [[] for _ in range(batch)]
    if max_steps <= 0:
        return outputs
    prefix = np.full((batch, 1), config.bos_id, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    with T.no_grad():
        for _ in range(max_steps):
            mask = np.ones(prefix.shape, dtype=bool)
            logits = decode_logits(params, memory, src_mask, prefix, mask)
            chosen = logits.data[:, -1, :].argmax(axis=-1)
            for row, token in enumerate(chosen):
                if finished[row]:
                    continue
                if token == config.eos_id:
                    finished[row] = True
                else:
                    outputs[row].append(int(token))
            if finished.all():
                break
            prefix = np.concatenate([prefix, chosen[:, None]], axis=1)
    return outputs
