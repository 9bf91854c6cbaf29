"""State encoding and the question-selection strategies.

The learned selector is a small fully-connected actor network mapping the
ternary response state to a masked softmax over the question bank; the
critic shares the architecture with a scalar head. Both are plain
parameter-dict networks built on the nnops kernels, batched over students.

Classical strategies (uniform random, uncertainty sampling) are stateless
functions. Every selector breaks ties toward the lowest question index.
"""

from __future__ import annotations

import numpy as np

from . import nnops
from .data import PaddedResponses, derived_rng
from .errors import (DimensionError, NoAvailableQuestionError,
                     ValidationError)


def encode_state(administered, num_questions: int) -> np.ndarray:
    """Ternary state: +1 correct, -1 incorrect, 0 not administered."""
    x = np.zeros(num_questions)
    seen = set()
    for j, y in administered:
        j = int(j)
        if j < 0 or j >= num_questions:
            raise DimensionError(f"question index {j} out of range")
        if j in seen:
            raise ValidationError(f"question {j} administered twice")
        seen.add(j)
        x[j] = 2.0 * float(y) - 1.0
    return x


def encode_states(admin: PaddedResponses, num_questions: int) -> np.ndarray:
    """Batched state encoding from padded administered responses."""
    batch = admin.qidx.shape[0]
    x = np.zeros((batch, num_questions))
    rows = np.repeat(np.arange(batch), admin.qidx.shape[1])
    flat_q = admin.qidx.reshape(-1)
    flat_v = admin.valid.reshape(-1)
    x[rows[flat_v], flat_q[flat_v]] = 2.0 * admin.y.reshape(-1)[flat_v] - 1.0
    return x


def _require_available(avail: np.ndarray) -> np.ndarray:
    avail = np.asarray(avail, dtype=bool)
    flat = avail.reshape(1, -1) if avail.ndim == 1 else avail
    if not flat.any(axis=-1).all():
        raise NoAvailableQuestionError("no question available to select")
    return avail


def select_random(avail, rng: np.random.Generator):
    """Uniform choice among available indices. Batched when avail is 2-D."""
    avail = _require_available(avail)
    single = avail.ndim == 1
    mask = avail.reshape(1, -1) if single else avail
    counts = mask.sum(axis=1)
    picks = (rng.random(mask.shape[0]) * counts).astype(np.int64)
    picks = np.minimum(picks, counts - 1)
    cum = mask.cumsum(axis=1)
    actions = (cum > picks[:, None]).argmax(axis=1)
    return int(actions[0]) if single else actions


def select_active(theta_hat, difficulties, avail):
    """Uncertainty sampling for IRT: closest difficulty to the ability.

    Invariant to shifting theta_hat and all difficulties by the same
    constant; ties go to the lowest index.
    """
    avail = _require_available(avail)
    single = avail.ndim == 1
    mask = avail.reshape(1, -1) if single else avail
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=np.float64))
    gap = np.abs(np.asarray(difficulties)[None, :] - theta[:, None])
    gap = np.where(mask, gap, np.inf)
    actions = gap.argmin(axis=1)
    return int(actions[0]) if single else actions


def select_uncertain(probs_correct, avail):
    """Model-agnostic uncertainty sampling: predicted probability nearest 0.5.

    Coincides with select_active under a 1PL model; used for the neural
    response model, which has no per-question difficulty scalar.
    """
    avail = _require_available(avail)
    single = avail.ndim == 1
    mask = avail.reshape(1, -1) if single else avail
    p = np.atleast_2d(np.asarray(probs_correct, dtype=np.float64))
    gap = np.where(mask, np.abs(p - 0.5), np.inf)
    actions = gap.argmin(axis=1)
    return int(actions[0]) if single else actions


class _MlpHead:
    """Input -> hidden -> hidden -> output with Tanh hidden activations.

    The output layer starts at zero: the policy then opens uniform over
    available questions and the critic opens at value 0.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator):
        s_in = 1.0 / np.sqrt(in_dim)
        s_h = 1.0 / np.sqrt(hidden_dim)
        self.params = {
            "w1": rng.uniform(-s_in, s_in, size=(hidden_dim, in_dim)),
            "b1": np.zeros(hidden_dim),
            "w2": rng.uniform(-s_h, s_h, size=(hidden_dim, hidden_dim)),
            "b2": np.zeros(hidden_dim),
            "w3": np.zeros((out_dim, hidden_dim)),
            "b3": np.zeros(out_dim),
        }

    def forward(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t1 = np.tanh(nnops.affine(x, self.params["w1"], self.params["b1"]))
        t2 = np.tanh(nnops.affine(t1, self.params["w2"], self.params["b2"]))
        out = nnops.affine(t2, self.params["w3"], self.params["b3"])
        return out, (x, t1, t2)

    def backward(self, dout: np.ndarray, cache) -> dict:
        x, t1, t2 = cache
        dt2, dw3, db3 = nnops.affine_backward(dout, t2, self.params["w3"])
        da2 = nnops.tanh_backward(dt2, t2)
        dt1, dw2, db2 = nnops.affine_backward(da2, t1, self.params["w2"])
        da1 = nnops.tanh_backward(dt1, t1)
        _, dw1, db1 = nnops.affine_backward(da1, x, self.params["w1"])
        return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2,
                "w3": dw3, "b3": db3}


class PolicyNet(_MlpHead):
    """Actor over the question bank with a masked-softmax output."""

    def __init__(self, num_questions: int, hidden_dim: int = 256,
                 seed: int = 0):
        self.num_questions = int(num_questions)
        self.hidden_dim = int(hidden_dim)
        super().__init__(num_questions, hidden_dim, num_questions,
                         derived_rng(seed, "policy-init"))

    def probs(self, states, avail, with_cache: bool = False):
        avail = _require_available(avail)
        logits, cache = self.forward(states)
        p = nnops.masked_softmax(logits, avail)
        return (p, cache) if with_cache else p

    def sample(self, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One categorical draw per row."""
        probs = np.atleast_2d(probs)
        cdf = probs.cumsum(axis=1)
        u = rng.random(probs.shape[0])
        hit = cdf > u[:, None] * cdf[:, -1:]
        actions = hit.argmax(axis=1)
        # float-edge fallback: if no bucket was hit, take the last nonzero
        missed = ~hit.any(axis=1)
        if missed.any():
            last = (probs > 0).cumsum(axis=1).argmax(axis=1)
            actions[missed] = last[missed]
        return actions

    @staticmethod
    def greedy(probs: np.ndarray) -> np.ndarray:
        """Mode of the distribution; argmax takes the lowest tied index."""
        return np.atleast_2d(probs).argmax(axis=1)


class CriticNet(_MlpHead):
    """State-value head used by the clipped policy-gradient update."""

    def __init__(self, num_questions: int, hidden_dim: int = 256,
                 seed: int = 0):
        self.num_questions = int(num_questions)
        self.hidden_dim = int(hidden_dim)
        super().__init__(num_questions, hidden_dim, 1,
                         derived_rng(seed, "critic-init"))

    def values(self, states, with_cache: bool = False):
        out, cache = self.forward(states)
        v = out[:, 0]
        return (v, cache) if with_cache else v


def log_prob_of(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Floored log probability of the chosen actions."""
    chosen = np.atleast_2d(probs)[np.arange(len(actions)), actions]
    return np.log(np.maximum(chosen, nnops.PROB_FLOOR))
