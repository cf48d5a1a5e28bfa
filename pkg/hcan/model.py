#!/usr/bin/env python3
"""
The HCAN network: ECE -> EAE -> recognition/prediction heads.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .eae import AttributionTrace, EaeParams, eae_forward
from .ece import EceParams, ece_forward, linear_projection
from .errors import CheckpointError, ConfigError, DimensionError
from .loss import EmotionDistributions, HeadParams, heads_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ForwardResult:
    dists: EmotionDistributions
    g: Tensor
    v_hat: Tensor
    trace: Optional[AttributionTrace] = None


class HcanModel:
    """
    Parameters plus the forward pass for one label set and feature width.

    Every sub-module is initialized in a fixed order from ``seed`` whatever the
    ablation flags, so ablated and full models share their common weights.
    """

    def __init__(self, feature_dim: int, num_labels: int, *, lstm_layers: int = 1, ece_heads: int = 8,
                 ia_heads: int = 4, dropout: float = 0.2, distance_mode: str = "index",
                 scale_ia_logits: bool = True, no_ece: bool = False, no_eae: bool = False,
                 seed: int = 0, dtype: Any = T.DEFAULT_DTYPE):
        if feature_dim < 1 or num_labels < 1:
            raise ConfigError(f"feature_dim and num_labels must be positive, got {feature_dim}, {num_labels}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {dropout}")
        self.feature_dim = feature_dim
        self.num_labels = num_labels
        self.no_ece = no_ece
        self.no_eae = no_eae
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        self.ece = EceParams.initialize(feature_dim, rng, layer_count=lstm_layers, head_count=ece_heads,
                                        dropout=dropout, dtype=dtype)
        self.eae = EaeParams.initialize(feature_dim, rng, head_count=ia_heads, distance_mode=distance_mode,
                                        scale_logits=scale_ia_logits, dtype=dtype)
        self.heads = HeadParams.initialize(feature_dim, num_labels, rng, dtype=dtype)
        self.bypass = T.uniform_parameter(rng, (feature_dim, 2 * feature_dim), "ece.bypass", dtype)

    # Parameters

    def all_parameters(self) -> List[Tuple[str, Tensor]]:
        """Every weight, active or not, in a stable order."""
        return (
            self.ece.named_parameters()
            + [("ece.bypass", self.bypass)]
            + self.eae.named_parameters()
            + self.heads.named_parameters()
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Weights the forward pass actually uses."""
        named = [("ece.bypass", self.bypass)] if self.no_ece else self.ece.named_parameters()
        if not self.no_eae:
            named += self.eae.named_parameters()
        return named + self.heads.named_parameters()

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def parameter_count(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.all_parameters()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = dict(self.all_parameters())
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise CheckpointError(f"missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {p.shape}")
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=self.dtype)
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype: Any) -> "HcanModel":
        self.dtype = np.dtype(dtype)
        for _, p in self.all_parameters():
            p.data = p.data.astype(self.dtype)
            p.grad = np.zeros_like(p.data)
        return self

    # Forward

    def forward(self, features: Any, speakers: Sequence[int], training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardResult:
        x = features if isinstance(features, Tensor) else T.constant(features, dtype=self.dtype)
        if x.data.ndim != 2 or x.shape[1] != self.feature_dim:
            raise DimensionError(f"expected n x {self.feature_dim} features, got shape {x.shape}")
        n = x.shape[0]
        if len(speakers) != n:
            raise DimensionError(f"speakers has length {len(speakers)} but features has {n} rows")

        g = linear_projection(x, self.bypass) if self.no_ece else ece_forward(x, self.ece, training, rng)
        if self.no_eae:
            v_hat = T.constant(np.zeros((n, 4 * self.feature_dim)), dtype=self.dtype)
            trace = None
        else:
            v_hat, trace = eae_forward(g, speakers, self.eae)
        return ForwardResult(dists=heads_forward(v_hat, g, self.heads), g=g, v_hat=v_hat, trace=trace)

    def infer(self, conversation: Any) -> ForwardResult:
        """Deterministic forward pass with nothing recorded."""
        with T.suspend_tape():
            return self.forward(conversation.features, conversation.speakers, training=False)

    def __repr__(self):
        flags = [name for name, on in (("no_ece", self.no_ece), ("no_eae", self.no_eae)) if on]
        return (f"HcanModel(d_u={self.feature_dim}, labels={self.num_labels}, "
                f"params={self.parameter_count}, dtype={self.dtype}{', ' + ', '.join(flags) if flags else ''})")
