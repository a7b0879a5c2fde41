"""Adam with an inverse square-root warmup schedule and name masks."""

# Import future modules
from __future__ import annotations

# Import built-in modules
import math
from typing import Any
from typing import Dict
from typing import Iterable
from typing import List

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt.config import OptimConfig
from dtnmt.model import ModelParams


class Adam:
    """Adam over a :class:`ModelParams`.

    Each step updates only the tensors named in ``names``, which is how a
    single optimizer serves both phases of adversarial training. Bias
    correction counts per tensor, so a tensor that was frozen for a while
    resumes with the correction it would have had.
    """

    def __init__(self, config: OptimConfig) -> None:
        self.config = config
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def learning_rate(self, step: int) -> float:
        """Peak rate scaled by ``min(step / warmup, sqrt(warmup / step))``."""
        step = max(step, 1)
        warmup = self.config.warmup_steps
        return self.config.lr * min(step / warmup, math.sqrt(warmup / step))

    def step(self, params: ModelParams, names: Iterable[str], advance: bool = True) -> float:
        """Apply one update to ``names`` from their accumulated gradients.

        With ``advance`` unset the schedule step is not incremented, so a
        second update within the same training step uses the same rate.

        Returns:
            The learning rate used.
        """
        if advance:
            self.step_count += 1
        lr = self.learning_rate(self.step_count)
        beta1, beta2, eps = self.config.beta1, self.config.beta2, self.config.eps
        for name in names:
            param = params[name]
            if param.grad is None:
                continue
            grad = param.grad
            t = self.t.get(name, 0) + 1
            m = beta1 * self.m.get(name, np.zeros_like(grad)) + (1.0 - beta1) * grad
            v = beta2 * self.v.get(name, np.zeros_like(grad)) + (1.0 - beta2) * grad * grad
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
            self.m[name], self.v[name], self.t[name] = m, v, t
        return lr

    def state_dict(self) -> Dict[str, Any]:
        arrays = {}
        for name in self.m:
            arrays[f"m/{name}"] = self.m[name]
            arrays[f"v/{name}"] = self.v[name]
        return {"step_count": self.step_count, "t": dict(self.t), "arrays": arrays}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.step_count = int(state["step_count"])
        self.t = {k: int(v) for k, v in state["t"].items()}
        arrays = state["arrays"]
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}


def trainable_names(params: ModelParams, exclude_prefixes: Iterable[str] = ()) -> List[str]:
    excluded = tuple(exclude_prefixes)
    return [n for n in params if not (excluded and n.startswith(excluded))]
