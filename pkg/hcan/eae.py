#!/usr/bin/env python3
"""
Emotional Attribution Encoding.

IA-attention lets utterance i attend only to earlier utterances j < i. Each
logit comes from the intra-speaker query when speakers[j] == speakers[i] and
from the inter-speaker query otherwise; one softmax normalizes both families
together. A learnable Gaussian over turn distance then reweights the
attended states.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DISTANCE_MODES = ("index", "turn-taking")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class GaussianDecay:
    mu: Tensor
    rho: Tensor
    distance_mode: str = "index"

    @property
    def sigma(self) -> float:
        return float(np.exp(self.rho.item()))

    def validate(self) -> None:
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"distance_mode must be one of {', '.join(DISTANCE_MODES)}, got '{self.distance_mode}'")


@dataclass
class EaeParams:
    w_qa: Tensor
    w_qe: Tensor
    w_k: Tensor
    w_v: Tensor
    gaussian: GaussianDecay
    head_count: int = 4
    scale_logits: bool = True

    def validate(self) -> None:
        width = self.w_qa.shape[1]
        for name, w in (("w_qa", self.w_qa), ("w_qe", self.w_qe), ("w_k", self.w_k), ("w_v", self.w_v)):
            if w.shape != (width // 2, width):
                raise ConfigError(f"IA-attention {name} must be 2d_u x 4d_u, got {w.shape}")
        if self.head_count < 1 or width % self.head_count:
            raise ConfigError(f"IA-attention width {width} is not divisible by {self.head_count} heads")
        self.gaussian.validate()

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [
            ("eae.w_qa", self.w_qa),
            ("eae.w_qe", self.w_qe),
            ("eae.w_k", self.w_k),
            ("eae.w_v", self.w_v),
            ("eae.gaussian.mu", self.gaussian.mu),
            ("eae.gaussian.rho", self.gaussian.rho),
        ]

    @classmethod
    def initialize(cls, feature_dim: int, rng: np.random.Generator, head_count: int = 4,
                   distance_mode: str = "index", scale_logits: bool = True,
                   dtype: Any = T.DEFAULT_DTYPE) -> "EaeParams":
        shape = (2 * feature_dim, 4 * feature_dim)
        params = cls(
            w_qa=T.uniform_parameter(rng, shape, "eae.w_qa", dtype),
            w_qe=T.uniform_parameter(rng, shape, "eae.w_qe", dtype),
            w_k=T.uniform_parameter(rng, shape, "eae.w_k", dtype),
            w_v=T.uniform_parameter(rng, shape, "eae.w_v", dtype),
            gaussian=GaussianDecay(
                mu=T.parameter([[1.0]], name="eae.gaussian.mu", dtype=dtype),
                rho=T.parameter([[0.0]], name="eae.gaussian.rho", dtype=dtype),
                distance_mode=distance_mode,
            ),
            head_count=head_count,
            scale_logits=scale_logits,
        )
        params.validate()
        return params


@dataclass
class AttributionTrace:
    """Per-conversation record of who attended to whom, for inspection."""

    speakers: np.ndarray
    attention: np.ndarray          # heads x n x n, rows sum to 1 for i >= 2
    intra: np.ndarray              # n x n, True where j < i and speakers match
    gaussian: Optional[np.ndarray] = None  # n x n, phi(d_ij) for j < i, else 0

    @property
    def mean_attention(self) -> np.ndarray:
        return self.attention.mean(axis=0)

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        mean = self.mean_attention
        for i in range(len(self.speakers)):
            attended = []
            for j in range(i):
                attended.append({
                    "j": j,
                    "speaker": int(self.speakers[j]),
                    "relation": "intra" if self.intra[i, j] else "inter",
                    "weight": float(mean[i, j]),
                    "head_weights": [float(w) for w in self.attention[:, i, j]],
                    "gaussian": None if self.gaussian is None else float(self.gaussian[i, j]),
                })
            rows.append({"i": i, "speaker": int(self.speakers[i]), "attended": attended})
        return rows


def _speakers(speakers: Sequence[int], n: int) -> np.ndarray:
    arr = np.asarray(speakers, dtype=np.int64).reshape(-1)
    if arr.shape[0] != n:
        raise DimensionError(f"speakers has length {arr.shape[0]} but there are {n} utterances")
    return arr


def causal_mask(n: int) -> np.ndarray:
    """True strictly below the diagonal (j < i)."""
    return np.tril(np.ones((n, n), dtype=bool), k=-1)


def distance_matrix(speakers: Sequence[int], mode: str = "index") -> np.ndarray:
    """
    Turn distance d_ij for every j < i (0 elsewhere).

    ``index`` counts positions (i - j); ``turn-taking`` counts speaker changes
    at positions j+1..i.
    """
    arr = np.asarray(speakers, dtype=np.int64).reshape(-1)
    n = arr.shape[0]
    if mode == "index":
        pos = np.arange(n, dtype=np.float64)
    elif mode == "turn-taking":
        changes = np.concatenate([[0], (arr[1:] != arr[:-1]).astype(np.int64)])
        pos = np.cumsum(changes).astype(np.float64)
    else:
        raise ConfigError(f"distance_mode must be one of {', '.join(DISTANCE_MODES)}, got '{mode}'")
    return np.where(causal_mask(n), pos[:, None] - pos[None, :], 0.0)


def ia_attention(g: Tensor, speakers: Sequence[int], params: EaeParams) -> Tuple[Tensor, AttributionTrace]:
    """Causal intra/inter-speaker attention: n x 2d_u -> n x 4d_u."""
    n, width = g.shape
    spk = _speakers(speakers, n)
    if width != params.w_qa.shape[0]:
        raise DimensionError(f"IA-attention input width {width} does not match weights {params.w_qa.shape}")
    out_width = params.w_qa.shape[1]
    if out_width % params.head_count:
        raise ConfigError(f"IA-attention width {out_width} is not divisible by {params.head_count} heads")
    sub = out_width // params.head_count

    same = spk[:, None] == spk[None, :]
    causal = causal_mask(n)
    scale = 1.0 / math.sqrt(sub) if params.scale_logits else 1.0
    out, weights = T.attention(g @ params.w_qa, g @ params.w_k, g @ params.w_v, params.head_count, scale=scale,
                               mask=causal, alt_q=g @ params.w_qe, use_q=same)
    trace = AttributionTrace(speakers=spk, attention=weights, intra=same & causal)
    return out, trace


def gaussian_weights(speakers: Sequence[int], decay: GaussianDecay, dtype: Any = T.DEFAULT_DTYPE) -> Tensor:
    """Matrix of phi(d_ij | mu, sigma) for j < i, zero elsewhere."""
    spk = np.asarray(speakers, dtype=np.int64).reshape(-1)
    n = spk.shape[0]
    shape = (n, n)
    distances = T.constant(distance_matrix(spk, decay.distance_mode), dtype=dtype)
    inv_sigma = T.expand(T.exp(-decay.rho), shape)
    z = (distances - T.expand(decay.mu, shape)) * inv_sigma
    density = T.exp(z * z * -0.5) * inv_sigma * _INV_SQRT_2PI
    return T.where(causal_mask(n), density, T.constant(np.zeros(shape), dtype=dtype))


def gaussian_reweight(v_tilde: Tensor, speakers: Sequence[int], decay: GaussianDecay) -> Tensor:
    """v_hat_i = sum over j < i of phi(d_ij) * v_tilde_j (weights are not normalized)."""
    _speakers(speakers, v_tilde.shape[0])
    return gaussian_weights(speakers, decay, v_tilde.dtype) @ v_tilde


def eae_forward(g: Tensor, speakers: Sequence[int], params: EaeParams) -> Tuple[Tensor, AttributionTrace]:
    v_tilde, trace = ia_attention(g, speakers, params)
    phi = gaussian_weights(speakers, params.gaussian, v_tilde.dtype)
    trace.gaussian = phi.data.copy()
    return phi @ v_tilde, trace
