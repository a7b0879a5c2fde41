"""Per-domain residual transformation networks.

Each domain ``n`` owns a disjoint parameter set under ``dtn.<n>.*`` and maps
the encoder output to ``H' = F(H, W_n) + H``. The last projection of every
block starts at zero, so a fresh bank is the identity and training resumes
exactly where the pretrained baseline stopped.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
from dataclasses import dataclass
import logging
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt import model as M
from dtnmt import tensor as T
from dtnmt.config import DtnConfig
from dtnmt.errors import DomainError
from dtnmt.model import ModelParams
from dtnmt.tensor import Tensor


logger = logging.getLogger(__name__)

KINDS = ("attention", "ffn")


@dataclass
class DtnBank:
    """The transformation networks of all domains.

    The tensors live inside ``params`` so they are saved, optimized and
    hashed together with the rest of the model.
    """

    n_domains: int
    kind: str
    depth: int
    params: ModelParams

    def prefix(self, domain: int) -> str:
        return f"dtn.{domain}."

    def check_domain(self, domain: int) -> None:
        if not 0 <= int(domain) < self.n_domains:
            raise DomainError(f"unknown domain id {domain}; the bank has {self.n_domains} domains")

    def parameter_count(self, domain: int = 0) -> int:
        self.check_domain(domain)
        return self.params.count(self.prefix(domain))

    def describe(self) -> Dict[str, object]:
        return {"n_domains": self.n_domains, "kind": self.kind, "depth": self.depth}


def init_dtn(
    params: ModelParams,
    n_domains: int,
    kind: str = "attention",
    depth: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> DtnBank:
    """Register ``n_domains`` zero-output transformation networks in ``params``.

    ``attention`` blocks hold a self-attention and a feed-forward sublayer,
    each with its own layer norm; ``ffn`` blocks hold only the feed-forward
    sublayer.
    """
    if n_domains < 1:
        raise DomainError(f"n_domains must be at least 1, got {n_domains}")
    if kind not in KINDS:
        raise DomainError(f"unknown DTN kind {kind!r}; expected one of {KINDS}")
    if depth < 1:
        raise DomainError(f"DTN depth must be at least 1, got {depth}")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = params.config.d_model
    for domain in range(n_domains):
        for block in range(depth):
            prefix = f"dtn.{domain}.block{block}"
            if kind == "attention":
                M.add_layer_norm(params, f"{prefix}.ln1", d)
                M.add_attention(params, f"{prefix}.attn", d, rng, zero_out=True)
            M.add_layer_norm(params, f"{prefix}.ln2", d)
            M.add_ffn(params, f"{prefix}.ffn", d, params.config.d_ffn, rng, zero_out=True)
    bank = DtnBank(n_domains=n_domains, kind=kind, depth=depth, params=params)
    logger.debug("DTN bank: %d x %s (%d parameters each)", n_domains, kind, bank.parameter_count(0))
    return bank


def init_dtn_from_config(params: ModelParams, n_domains: int, config: DtnConfig, rng: np.random.Generator) -> DtnBank:
    return init_dtn(params, n_domains, kind=config.kind, depth=config.depth, rng=rng)


def attach_dtn(params: ModelParams, description: Dict[str, object]) -> DtnBank:
    """Rebuild the bank view over DTN tensors already present in ``params``."""
    bank = DtnBank(
        n_domains=int(description["n_domains"]),  # type: ignore[arg-type]
        kind=str(description["kind"]),
        depth=int(description["depth"]),  # type: ignore[arg-type]
        params=params,
    )
    for domain in range(bank.n_domains):
        if not params.names(bank.prefix(domain)):
            raise DomainError(f"checkpoint has no DTN parameters for domain {domain}")
    return bank


def transform(
    bank: DtnBank,
    H: Tensor,
    src_mask: np.ndarray,
    domain: int,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Return ``H' = F(H, W_domain) + H``; only domain ``domain``'s tensors take part."""
    bank.check_domain(domain)
    params = bank.params
    config = params.config
    rate = config.dropout_rate
    x = H
    for block in range(bank.depth):
        prefix = f"dtn.{int(domain)}.block{block}"
        if bank.kind == "attention":
            h = M.layer_norm(params, f"{prefix}.ln1", x)
            x = x + M.multi_head_attention(
                params, f"{prefix}.attn", h, h, src_mask, config.n_heads, rate=rate, rng=rng
            )
        x = x + M.feed_forward(params, f"{prefix}.ffn", M.layer_norm(params, f"{prefix}.ln2", x), rate, rng)
    return x


def encode_for_domain(
    params: ModelParams,
    bank: Optional[DtnBank],
    src_ids: np.ndarray,
    src_mask: np.ndarray,
    domain: Optional[int],
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Encoder output, transformed by ``domain``'s DTN when a bank and domain are given."""
    H = M.encode(params, src_ids, src_mask, rng=rng)
    if bank is None or domain is None:
        return H
    return transform(bank, H, src_mask, domain, rng=rng)


def translate(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    bank: Optional[DtnBank] = None,
    domain: Optional[int] = None,
    batch_size: int = 128,
) -> List[List[int]]:
    """Greedy-decode ``sources`` in order, optionally through one domain's DTN.

    Each batch decodes at most ``2 * longest source + 2`` tokens (capped at
    ``max_len``).
    """
    config = params.config
    outputs: List[List[int]] = []
    with T.no_grad():
        for start in range(0, len(sources), batch_size):
            chunk = [list(s) for s in sources[start : start + batch_size]]
            longest = max(len(s) for s in chunk)
            src_ids = np.full((len(chunk), longest), config.pad_id, dtype=np.int64)
            src_mask = np.zeros((len(chunk), longest), dtype=bool)
            for row, src in enumerate(chunk):
                src_ids[row, : len(src)] = src
                src_mask[row, : len(src)] = True
            memory = encode_for_domain(params, bank, src_ids, src_mask, domain)
            steps = min(config.max_len, 2 * longest + 2)
            outputs.extend(M.greedy_decode(params, memory, src_mask, steps))
    return outputs
