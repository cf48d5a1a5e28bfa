#!/usr/bin/env python3
"""
Emotional Continuation Encoding.

A stacked bidirectional LSTM over the utterance features, followed by an
unmasked multi-head self-attention whose output is added back onto the LSTM
states (so a zero value projection leaves the LSTM states untouched).
"""

import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class LstmDirection:
    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]


@dataclass
class LstmLayer:
    forward: LstmDirection
    backward: LstmDirection


@dataclass
class EceParams:
    layers: List[LstmLayer]
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    head_count: int = 8
    dropout: float = 0.0

    @property
    def hidden_size(self) -> int:
        return self.layers[0].forward.hidden_size

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        width = 2 * self.hidden_size
        if self.layer_count < 1:
            raise ConfigError("ECE needs at least one LSTM layer")
        if self.head_count < 1 or width % self.head_count:
            raise ConfigError(f"attention width {width} is not divisible by {self.head_count} heads")

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for li, layer in enumerate(self.layers):
            for direction, params in (("fwd", layer.forward), ("bwd", layer.backward)):
                prefix = f"ece.lstm{li}.{direction}"
                named += [(f"{prefix}.w_x", params.w_x), (f"{prefix}.w_h", params.w_h), (f"{prefix}.bias", params.bias)]
        named += [("ece.attn.w_q", self.w_q), ("ece.attn.w_k", self.w_k), ("ece.attn.w_v", self.w_v)]
        return named

    @classmethod
    def initialize(cls, feature_dim: int, rng: np.random.Generator, layer_count: int = 1,
                   head_count: int = 8, dropout: float = 0.0, dtype: Any = T.DEFAULT_DTYPE) -> "EceParams":
        d = feature_dim
        layers = []
        for li in range(layer_count):
            in_width = d if li == 0 else 2 * d
            directions = []
            for direction in ("fwd", "bwd"):
                prefix = f"ece.lstm{li}.{direction}"
                bias = np.zeros((1, 4 * d))
                bias[0, d:2 * d] = 1.0
                directions.append(LstmDirection(
                    w_x=T.uniform_parameter(rng, (in_width, 4 * d), f"{prefix}.w_x", dtype),
                    w_h=T.uniform_parameter(rng, (d, 4 * d), f"{prefix}.w_h", dtype),
                    bias=T.parameter(bias, name=f"{prefix}.bias", dtype=dtype),
                ))
            layers.append(LstmLayer(*directions))
        params = cls(
            layers=layers,
            w_q=T.uniform_parameter(rng, (2 * d, 2 * d), "ece.attn.w_q", dtype),
            w_k=T.uniform_parameter(rng, (2 * d, 2 * d), "ece.attn.w_k", dtype),
            w_v=T.uniform_parameter(rng, (2 * d, 2 * d), "ece.attn.w_v", dtype),
            head_count=head_count,
            dropout=dropout,
        )
        params.validate()
        return params


def lstm_direction(x: Tensor, params: LstmDirection, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over the rows of ``x``; rows of the result align with ``x``."""
    n = x.shape[0]
    d = params.hidden_size
    if x.shape[1] != params.w_x.shape[0]:
        raise DimensionError(f"LSTM input width {x.shape[1]} does not match weights {params.w_x.shape}")
    projected = x @ params.w_x + T.expand(params.bias, (n, 4 * d))
    return T.lstm_scan(projected, params.w_h, reverse=reverse)


def bilstm_forward(features: Tensor, params: EceParams, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Stacked bidirectional LSTM: n x d_u -> n x 2d_u."""
    if features.data.ndim != 2 or features.shape[0] < 1:
        raise DimensionError(f"expected an n x d_u feature matrix, got shape {features.shape}")
    x = features
    for li, layer in enumerate(params.layers):
        if li > 0:
            x = T.dropout(x, params.dropout, training, rng)
        x = T.concat([lstm_direction(x, layer.forward), lstm_direction(x, layer.backward, reverse=True)], axis=1)
    return x


def global_attention(g_lstm: Tensor, params: EceParams, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """Multi-head self-attention over all positions plus the residual ``g_lstm``."""
    width = g_lstm.shape[1]
    if width != params.w_q.shape[0]:
        raise DimensionError(f"attention input width {width} does not match weights {params.w_q.shape}")
    if width % params.head_count:
        raise ConfigError(f"attention width {width} is not divisible by {params.head_count} heads")
    head_width = width // params.head_count
    attended, _ = T.attention(g_lstm @ params.w_q, g_lstm @ params.w_k, g_lstm @ params.w_v, params.head_count,
                              scale=float(1.0 / np.sqrt(head_width)))
    return T.dropout(attended, params.dropout, training, rng) + g_lstm


def ece_forward(features: Tensor, params: EceParams, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    return global_attention(bilstm_forward(features, params, training, rng), params, training, rng)


def linear_projection(features: Tensor, weight: Tensor) -> Tensor:
    """Stand-in for the whole encoder when it is ablated: d_u -> 2d_u, no bias."""
    if features.shape[1] != weight.shape[0]:
        raise DimensionError(f"projection input width {features.shape[1]} does not match weights {weight.shape}")
    return features @ weight
