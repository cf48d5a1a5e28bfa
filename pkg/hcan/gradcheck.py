#!/usr/bin/env python3
"""
Gradient self-check suite.

Compares tape gradients with central finite differences at 64-bit for every
primitive and for the encoders and the full L_EC objective of a small model.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .dataio import Conversation
from .eae import eae_forward
from .ece import ece_forward
from .errors import ConfigError, NumericError, VerificationError
from .loss import LossConfig, objective
from .model import HcanModel
from .tensor import Tensor

logger = logging.getLogger(__name__)

PRIMITIVE_THRESHOLD = 1e-5
MODEL_THRESHOLD = 1e-3
# smallest relative-error denominators
PRIMITIVE_FLOOR = 1e-8
MODEL_FLOOR = 1e-5
SIZES = ("small", "full")

# Model check geometry
FEATURE_DIM = 8
CONVERSATION_LENGTH = 5
SPEAKERS = (0, 1, 1, 0, 1)
NUM_LABELS = 3
SMALL_MAX_COORDS = 12


@dataclass
class CheckResult:
    name: str
    kind: str
    error: float
    threshold: float
    passed: bool
    message: str = ""
    checked: int = 0
    below_floor: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "worst_relative_error": self.error,
            "threshold": self.threshold,
            "status": "PASS" if self.passed else "FAIL",
            "message": self.message,
            "checked": self.checked,
            "below_floor": self.below_floor,
        }


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    # sum(softmax) is constant, so every output is folded through fixed random weights
    return T.sum(out * T.constant(weights))


def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tensor], List[Tensor]]]:
    def leaf(shape, low=-2.0, high=2.0):
        return T.parameter(rng.uniform(low, high, size=shape))

    def weights(shape):
        return rng.standard_normal(shape)

    a, b = leaf((3, 4)), leaf((3, 4))
    m1, m2 = leaf((3, 4)), leaf((4, 2))
    pos = leaf((3, 4), 0.5, 2.0)
    col = leaf((1, 4))
    scalar = leaf((1, 1))
    masked = leaf((4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool), k=-1)
    wide = leaf((3, 6))
    sel = rng.random((3, 4)) < 0.5
    gates, w_h = leaf((5, 8)), leaf((2, 8), -0.5, 0.5)
    q, k, v = leaf((4, 6)), leaf((4, 6)), leaf((4, 6))
    qm, km, vm, alt = leaf((4, 4)), leaf((4, 4)), leaf((4, 4)), leaf((4, 4))
    use_q = rng.random((4, 4)) < 0.5

    w34, w32, w44, w43, w36, w14, w15 = (weights(s) for s in ((3, 4), (3, 2), (4, 4), (4, 3), (3, 6), (1, 4), (1, 5)))
    w_cat0 = weights((6, 4))
    w_cat1 = weights((3, 8))
    w52, w46 = weights((5, 2)), weights((4, 6))

    return [
        ("matmul", lambda: _weighted(T.matmul(m1, m2), w32), [m1, m2]),
        ("add", lambda: _weighted(T.add(a, b), w34), [a, b]),
        ("sub", lambda: _weighted(T.sub(a, b), w34), [a, b]),
        ("mul", lambda: _weighted(T.mul(a, b), w34), [a, b]),
        ("scale", lambda: _weighted(T.scale(a, -1.7), w34), [a]),
        ("tanh", lambda: _weighted(T.tanh(a), w34), [a]),
        ("sigmoid", lambda: _weighted(T.sigmoid(a), w34), [a]),
        ("exp", lambda: _weighted(T.exp(a), w34), [a]),
        ("log", lambda: _weighted(T.log(pos), w34), [pos]),
        ("softmax", lambda: _weighted(T.softmax(a), w34), [a]),
        ("softmax_masked", lambda: _weighted(T.softmax(masked, mask=mask), w44), [masked]),
        ("concat_rows", lambda: _weighted(T.concat([a, b], axis=0), w_cat0), [a, b]),
        ("concat_cols", lambda: _weighted(T.concat([a, b], axis=1), w_cat1), [a, b]),
        ("dropout", lambda: _weighted(T.dropout(a, 0.3, True, np.random.default_rng(5)), w34), [a]),
        ("transpose", lambda: _weighted(T.transpose(a), w43), [a]),
        ("slice_cols", lambda: _weighted(T.slice_cols(wide, 1, 5), w34), [wide]),
        ("row", lambda: _weighted(T.row(a, 1), w14), [a]),
        ("sum", lambda: T.sum(a) * 0.7, [a]),
        ("mean", lambda: T.mean(a) * 1.3, [a]),
        ("expand", lambda: _weighted(T.expand(col, (3, 4)), w34) + _weighted(T.expand(scalar, (1, 5)), w15), [col, scalar]),
        ("where", lambda: _weighted(T.where(sel, a, b), w34), [a, b]),
        ("log_softmax", lambda: _weighted(T.log_softmax(a), w34), [a]),
        ("lstm_scan", lambda: _weighted(T.lstm_scan(gates, w_h), w52), [gates, w_h]),
        ("lstm_scan_reverse", lambda: _weighted(T.lstm_scan(gates, w_h, reverse=True), w52), [gates, w_h]),
        ("attention", lambda: _weighted(T.attention(q, k, v, 3, scale=0.5)[0], w46), [q, k, v]),
        ("attention_masked", lambda: _weighted(
            T.attention(qm, km, vm, 2, mask=mask, alt_q=alt, use_q=use_q)[0], w44), [qm, km, vm, alt]),
    ]


def check_conversation(rng: np.random.Generator) -> Conversation:
    features = rng.standard_normal((CONVERSATION_LENGTH, FEATURE_DIM))
    labels = rng.integers(0, NUM_LABELS, size=CONVERSATION_LENGTH)
    return Conversation.create("gradcheck", SPEAKERS, features, labels)


def check_model(seed: int = 0) -> HcanModel:
    return HcanModel(FEATURE_DIM, NUM_LABELS, lstm_layers=1, ece_heads=4, ia_heads=4, dropout=0.0,
                     seed=seed, dtype=np.float64)


class GradCheckSuite:
    """Runs every check and keeps a pass/fail ledger."""

    def __init__(self, size: str = "small", seed: int = 0):
        if size not in SIZES:
            raise ConfigError(f"size must be one of {', '.join(SIZES)}, got '{size}'")
        self.size = size
        self.seed = seed
        self.max_coords = SMALL_MAX_COORDS if size == "small" else None
        self.results: List[CheckResult] = []

    def log_check(self, name: str, kind: str, error: float, threshold: float, message: str = "") -> CheckResult:
        passed = bool(np.isfinite(error)) and error <= threshold
        result = CheckResult(name=name, kind=kind, error=float(error), threshold=threshold, passed=passed, message=message)
        self.results.append(result)
        if passed:
            logger.info(f"PASS {name}: worst relative error {error:.3e} (threshold {threshold:.0e}) {message}".rstrip())
        else:
            logger.error(f"FAIL {name}: worst relative error {error:.3e} exceeds {threshold:.0e} {message}".rstrip())
        return result

    def _run(self, name: str, kind: str, f: Callable[[], Tensor], params: Sequence[Tensor], threshold: float,
             rng: np.random.Generator, max_coords: Optional[int] = None,
             floor: float = PRIMITIVE_FLOOR) -> CheckResult:
        try:
            report = T.finite_diff_report(f, params, floor=floor, max_coords=max_coords, rng=rng)
        except NumericError as e:
            return self.log_check(name, kind, float("inf"), threshold, str(e))
        message = f"{report.checked} coordinates, {report.below_floor} below floor {floor:.0e}"
        result = self.log_check(name, kind, report.worst, threshold, message)
        result.checked, result.below_floor = report.checked, report.below_floor
        return result

    def check_primitives(self) -> None:
        rng = np.random.default_rng(self.seed)
        for name, f, params in _primitive_cases(rng):
            self._run(name, "primitive", f, params, PRIMITIVE_THRESHOLD, rng)

    def check_model(self) -> None:
        rng = np.random.default_rng(self.seed + 1)
        model = check_model(self.seed)
        conv = check_conversation(rng)
        x = T.constant(conv.features)
        params = [p for _, p in model.named_parameters()]
        ece_params = [p for _, p in model.ece.named_parameters()]
        eae_params = [p for _, p in model.eae.named_parameters()]
        g_weights = rng.standard_normal((CONVERSATION_LENGTH, 2 * FEATURE_DIM))
        v_weights = rng.standard_normal((CONVERSATION_LENGTH, 4 * FEATURE_DIM))
        g_fixed = T.constant(rng.standard_normal((CONVERSATION_LENGTH, 2 * FEATURE_DIM)))

        self._run("ece", "component", lambda: _weighted(ece_forward(x, model.ece), g_weights),
                  ece_params, MODEL_THRESHOLD, rng, self.max_coords, MODEL_FLOOR)
        self._run("eae", "component", lambda: _weighted(eae_forward(g_fixed, conv.speakers, model.eae)[0], v_weights),
                  eae_params, MODEL_THRESHOLD, rng, self.max_coords, MODEL_FLOOR)

        # noise is fixed at the base point so both sides treat it as a constant
        config = LossConfig(alpha=0.2, beta=0.05, epsilon=0.1)
        noise = objective(model, conv, config).noise
        self._run("full_model", "model", lambda: objective(model, conv, config, noise=noise).total,
                  params, MODEL_THRESHOLD, rng, self.max_coords, MODEL_FLOOR)

    def run_all(self) -> Dict[str, Any]:
        started = time.time()
        self.results = []
        self.check_primitives()
        self.check_model()
        return self.report(time.time() - started)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def report(self, duration_sec: float = 0.0) -> Dict[str, Any]:
        return {
            "schema": "hcan-gradcheck-v1",
            "size": self.size,
            "passed": sum(1 for r in self.results if r.passed),
            "failed": len(self.failures),
            "duration_sec": duration_sec,
            "checks": [r.to_dict() for r in self.results],
        }

    def raise_on_failure(self) -> None:
        if self.failures:
            names = ", ".join(r.name for r in self.failures)
            raise VerificationError(f"gradient check failed for: {names}")


def run_gradcheck(size: str = "small", seed: int = 0) -> Dict[str, Any]:
    """Run the suite; raises VerificationError naming every failing check."""
    suite = GradCheckSuite(size=size, seed=seed)
    report = suite.run_all()
    suite.raise_on_failure()
    return report
