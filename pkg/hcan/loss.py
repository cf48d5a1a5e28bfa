#!/usr/bin/env python3
"""
Emotional cognitive loss.

Recognition / prediction heads, utterance cross-entropy, the KL consistency
term between predicted and recognized emotions, the one-step FGV adversarial
term, and their weighted total

    L_EC = L_cross + alpha * L_KL + beta * L_adv,   L_adv = L_cross + L'_cross
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingDataError
from .tensor import Tensor

logger = logging.getLogger(__name__)

FGV_NORMS = ("global", "per_utterance")
NOISE_FLOOR = 1e-12

Scalar = Union[Tensor, float]


@dataclass
class HeadParams:
    lambda_theta: Tensor   # 4d_u x 2d_u
    w_d: Tensor            # 2d_u x |E|, shared by both distributions
    w_o: Tensor            # |E| x |E|
    b_o: Tensor            # 1 x |E|

    @property
    def num_labels(self) -> int:
        return self.w_d.shape[1]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [
            ("heads.lambda_theta", self.lambda_theta),
            ("heads.w_d", self.w_d),
            ("heads.w_o", self.w_o),
            ("heads.b_o", self.b_o),
        ]

    @classmethod
    def initialize(cls, feature_dim: int, num_labels: int, rng: np.random.Generator,
                   dtype: Any = T.DEFAULT_DTYPE) -> "HeadParams":
        # w_o starts at the identity so the classifier first ranks classes as D^src does
        return cls(
            lambda_theta=T.uniform_parameter(rng, (4 * feature_dim, 2 * feature_dim), "heads.lambda_theta", dtype),
            w_d=T.uniform_parameter(rng, (2 * feature_dim, num_labels), "heads.w_d", dtype),
            w_o=T.parameter(np.eye(num_labels), name="heads.w_o", dtype=dtype),
            b_o=T.parameter(np.zeros((1, num_labels)), name="heads.b_o", dtype=dtype),
        )


@dataclass
class EmotionDistributions:
    d_src: Tensor
    d_tmp: Tensor
    y_hat: Tensor
    log_d_src: Tensor
    log_d_tmp: Tensor
    log_y_hat: Tensor


@dataclass
class LossConfig:
    alpha: float = 0.2
    beta: float = 0.05
    epsilon: float = 0.1
    fgv_norm: str = "global"
    ablate_kl: bool = False
    ablate_adv: bool = False
    ablate_eae: bool = False

    @property
    def uses_kl(self) -> bool:
        return not (self.ablate_kl or self.ablate_eae)

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.fgv_norm not in FGV_NORMS:
            raise ConfigError(f"fgv_norm must be one of {', '.join(FGV_NORMS)}, got '{self.fgv_norm}'")


def heads_forward(v_hat: Tensor, g: Tensor, params: HeadParams) -> EmotionDistributions:
    n = v_hat.shape[0]
    if v_hat.shape[1] != params.lambda_theta.shape[0] or g.shape[1] != params.lambda_theta.shape[1]:
        raise DimensionError(
            f"heads expect widths {params.lambda_theta.shape}, got v_hat {v_hat.shape} and g {g.shape}"
        )
    if g.shape[0] != n:
        raise DimensionError(f"v_hat has {n} rows but g has {g.shape[0]}")
    state = v_hat @ params.lambda_theta
    src_logits = (state + g) @ params.w_d
    tmp_logits = state @ params.w_d
    d_src = T.softmax(src_logits)
    out_logits = d_src @ params.w_o + T.expand(params.b_o, (n, params.num_labels))
    return EmotionDistributions(
        d_src=d_src,
        d_tmp=T.softmax(tmp_logits),
        y_hat=T.softmax(out_logits),
        log_d_src=T.log_softmax(src_logits),
        log_d_tmp=T.log_softmax(tmp_logits),
        log_y_hat=T.log_softmax(out_logits),
    )


def cross_entropy(log_y_hats: Union[Tensor, Sequence[Tensor]], labels: Any) -> Tensor:
    """
    Mean of -log y_hat[gold] over every utterance of a batch of conversations.

    Args:
        log_y_hats: One n_l x |E| tensor of log-probabilities per conversation (or a single tensor)
        labels: Matching gold label arrays (or a single array)

    Returns:
        Scalar tensor; the normalizer is the total utterance count
    """
    if isinstance(log_y_hats, Tensor):
        log_y_hats, labels = [log_y_hats], [labels]
    total: Optional[Tensor] = None
    count = 0
    for log_y_hat, gold in zip(log_y_hats, labels):
        if gold is None:
            raise TrainingDataError("labels required: cross-entropy got an unlabeled conversation")
        gold = np.asarray(gold, dtype=np.int64).reshape(-1)
        n, num_labels = log_y_hat.shape
        if gold.shape[0] != n:
            raise DimensionError(f"{gold.shape[0]} labels for {n} predictions")
        if np.any(gold < 0) or np.any(gold >= num_labels):
            raise TrainingDataError(f"label outside [0, {num_labels})")
        onehot = np.zeros(log_y_hat.shape)
        onehot[np.arange(n), gold] = 1.0
        term = T.sum(log_y_hat * T.constant(onehot, dtype=log_y_hat.dtype))
        total = term if total is None else total + term
        count += n
    if total is None:
        raise TrainingDataError("cross-entropy over an empty batch")
    return total * (-1.0 / count)


def kl_loss(log_d_tmp: Tensor, log_d_src: Tensor) -> Tensor:
    """Mean over utterances of KL(d_tmp || d_src) from log-probabilities; gradients reach both sides."""
    if log_d_tmp.shape != log_d_src.shape:
        raise DimensionError(f"KL needs matching shapes, got {log_d_tmp.shape} and {log_d_src.shape}")
    return T.sum(T.exp(log_d_tmp) * (log_d_tmp - log_d_src)) * (1.0 / log_d_tmp.shape[0])


def fgv_perturbation(grad: np.ndarray, epsilon: float, norm: str = "global") -> np.ndarray:
    """Fast gradient value noise eps * g / ||g||; zero when ||g|| is below 1e-12."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    g = np.asarray(grad)
    if norm == "global":
        length = float(np.linalg.norm(g))
        if length < NOISE_FLOOR:
            return np.zeros_like(g)
        return g * (epsilon / length)
    if norm == "per_utterance":
        lengths = np.linalg.norm(g, axis=-1, keepdims=True)
        safe = np.where(lengths < NOISE_FLOOR, 1.0, lengths)
        return np.where(lengths < NOISE_FLOOR, 0.0, g * (epsilon / safe))
    raise ConfigError(f"fgv_norm must be one of {', '.join(FGV_NORMS)}, got '{norm}'")


@dataclass
class AdversarialResult:
    l_adv: Tensor
    l_cross: Tensor
    l_cross_perturbed: Tensor
    noise: np.ndarray
    clean: Any


def adversarial_loss(model: Any, conversation: Any, config: LossConfig, *, training: bool = False,
                     rng: Optional[np.random.Generator] = None,
                     noise: Optional[np.ndarray] = None) -> AdversarialResult:
    """
    Two forward passes: clean features, then features plus FGV noise.

    The noise direction is the gradient of the clean cross-entropy w.r.t. the
    input features; the second pass treats the noise as a constant. A
    precomputed ``noise`` skips the gradient step.
    """
    labels = conversation.labels
    if labels is None:
        raise TrainingDataError(f"labels required: conversation '{conversation.id}' is unlabeled")
    features = T.Tensor(conversation.features, requires_grad=True, dtype=model.dtype)
    recording = nullcontext() if T.active_tape() is not None else T.Tape()
    with recording:
        clean = model.forward(features, conversation.speakers, training=training, rng=rng)
        l_cross = cross_entropy(clean.dists.log_y_hat, labels)
        if noise is None:
            (grad,) = T.gradients(l_cross, [features])
            noise = fgv_perturbation(grad, config.epsilon, config.fgv_norm)
    perturbed_features = T.constant(features.data + noise, dtype=model.dtype)
    perturbed = model.forward(perturbed_features, conversation.speakers, training=training, rng=rng)
    l_cross_perturbed = cross_entropy(perturbed.dists.log_y_hat, labels)
    return AdversarialResult(
        l_adv=l_cross + l_cross_perturbed,
        l_cross=l_cross,
        l_cross_perturbed=l_cross_perturbed,
        noise=noise,
        clean=clean,
    )


@dataclass
class LossComponents:
    cross: Scalar
    kl: Optional[Scalar] = None
    adv: Optional[Scalar] = None
    total: Optional[Scalar] = None
    forward: Any = None
    noise: Optional[np.ndarray] = None


def total_loss(components: Union[LossComponents, Sequence[Scalar]], config: LossConfig) -> Scalar:
    """L_cross + alpha * L_KL + beta * L_adv; an ablated term is skipped, not computed."""
    if not isinstance(components, LossComponents):
        components = LossComponents(*components)
    auxiliary = None
    for coefficient, term, active, name in (
        (config.alpha, components.kl, config.uses_kl, "KL"),
        (config.beta, components.adv, not config.ablate_adv, "adversarial"),
    ):
        if not active:
            continue
        if term is None:
            raise ConfigError(f"{name} term is enabled but was not computed")
        weighted = term * coefficient
        auxiliary = weighted if auxiliary is None else auxiliary + weighted
    return components.cross if auxiliary is None else components.cross + auxiliary


def objective(model: Any, conversation: Any, config: LossConfig, *, training: bool = False,
              rng: Optional[np.random.Generator] = None,
              noise: Optional[np.ndarray] = None) -> LossComponents:
    """All loss components and L_EC for one labeled conversation."""
    if conversation.labels is None:
        raise TrainingDataError(f"labels required: conversation '{conversation.id}' is unlabeled")
    if config.ablate_adv:
        features = T.constant(conversation.features, dtype=model.dtype)
        clean = model.forward(features, conversation.speakers, training=training, rng=rng)
        components = LossComponents(cross=cross_entropy(clean.dists.log_y_hat, conversation.labels), forward=clean)
    else:
        adv = adversarial_loss(model, conversation, config, training=training, rng=rng, noise=noise)
        clean = adv.clean
        components = LossComponents(cross=adv.l_cross, adv=adv.l_adv, forward=clean, noise=adv.noise)
    if config.uses_kl:
        components.kl = kl_loss(clean.dists.log_d_tmp, clean.dists.log_d_src)
    components.total = total_loss(components, config)
    return components
