"""Response models: bilevel 1PL IRT, bilevel MLP, and the plain IRT fits.

Both bilevel models share one shape of interface: global parameters live in
a ``params`` dict (split into a student side and a question side for the
two outer optimizers), per-student local parameters are rows of a batch
array, and adaptation takes K full-batch gradient steps on the summed BCE
of the administered responses starting from the global initialization.
Question-side parameters are never touched by adaptation.

The influence-score machinery needs local gradients and a Gauss-Newton
Hessian of the inner loss; both models expose those through
``local_grad_dirs`` / ``score_dots`` so the estimator code stays
model-agnostic (for IRT the local dimension is simply 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops
from .data import Dataset, PaddedResponses, derived_rng
from .errors import DimensionError, NumericError, ValidationError


@dataclass
class AdaptConfig:
    """Inner-loop settings: K gradient steps at rate lr from the global init."""

    num_steps: int = 5
    lr: float = 0.1
    eval_mode: bool = False

    def __post_init__(self):
        if self.num_steps < 0:
            raise ValidationError(f"num_steps must be >= 0, got {self.num_steps}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")


def _check_qidx(qidx, num_questions):
    qidx = np.asarray(qidx, dtype=np.int64)
    if qidx.size and (qidx.min() < 0 or qidx.max() >= num_questions):
        raise DimensionError("question index out of range")
    return qidx


class BilevelIrt:
    """1PL model: P(correct on j) = sigmoid(theta_i - b_j).

    Globals are the difficulty vector (question side) and the ability
    prior mean used as the adaptation start (student side). The local
    parameter is the scalar ability.
    """

    kind = "biirt"
    student_param_names = ("ability_prior",)
    question_param_names = ("difficulty",)

    def __init__(self, num_questions: int, seed: int = 0):
        self.num_questions = int(num_questions)
        self.local_dim = 1
        self.params = {
            "difficulty": np.zeros(num_questions),
            "ability_prior": np.zeros(1),
        }

    # -- forward ---------------------------------------------------------

    def init_local(self, batch_size: int) -> np.ndarray:
        return np.full((batch_size, 1), self.params["ability_prior"][0])

    def predict_items(self, local, qidx, eval_mode: bool = True, rng=None):
        """Probabilities for per-row question lists qidx (batch, width)."""
        qidx = _check_qidx(qidx, self.num_questions)
        return nnops.sigmoid(local[:, 0:1] - self.params["difficulty"][qidx])

    def predict_all(self, local, eval_mode: bool = True, rng=None):
        return nnops.sigmoid(local[:, 0:1] - self.params["difficulty"][None, :])

    # -- adaptation ------------------------------------------------------

    def adapt(self, admin: PaddedResponses, cfg: AdaptConfig, rng=None):
        """K gradient steps on the summed BCE of the administered items."""
        theta = np.full(admin.qidx.shape[0], self.params["ability_prior"][0])
        b = self.params["difficulty"]
        for _ in range(cfg.num_steps):
            p = nnops.sigmoid(theta[:, None] - b[admin.qidx])
            grad = ((p - admin.y) * admin.valid).sum(axis=1)
            theta = theta - cfg.lr * grad
        return theta[:, None]

    def inner_loss(self, local, admin: PaddedResponses):
        p = self.predict_items(local, admin.qidx)
        return (nnops.bce_loss(p, admin.y) * admin.valid).sum(axis=1)

    # -- meta set --------------------------------------------------------

    def meta_loss(self, local, meta: PaddedResponses, eval_mode: bool = True,
                  rng=None):
        """Per-student (mean BCE, accuracy, probabilities) on the meta set."""
        counts = meta.counts
        if (counts == 0).any():
            raise ValidationError("meta set must be nonempty for every student")
        p = self.predict_items(local, meta.qidx, eval_mode, rng)
        losses = (nnops.bce_loss(p, meta.y) * meta.valid).sum(axis=1) / counts
        # p = 0.5 predicts class 0
        pred = p > 0.5
        acc = ((pred == (meta.y > 0.5)) * meta.valid).sum(axis=1) / counts
        return losses, acc, p

    def meta_grads(self, local, meta: PaddedResponses, eval_mode: bool = True,
                   rng=None):
        """Gradients of mean-over-batch meta loss.

        Returns (question-side grads dict, per-student local gradient). The
        local gradient doubles as the first-order update direction for the
        student-side globals.
        """
        batch = local.shape[0]
        p = self.predict_items(local, meta.qidx, eval_mode, rng)
        w = meta.valid / np.maximum(meta.counts, 1)[:, None] / batch
        dlogit = (p - meta.y) * w
        ddiff = np.zeros(self.num_questions)
        np.add.at(ddiff, meta.qidx, -dlogit)
        dlocal = dlogit.sum(axis=1)[:, None]
        return {"difficulty": ddiff}, dlocal

    # -- influence-score hooks ------------------------------------------

    def local_grad_dirs(self, local, qidx):
        """Directions u_j with grad_local ell_j = (p_j - y_j) u_j."""
        qidx = _check_qidx(qidx, self.num_questions)
        return np.ones(qidx.shape + (1,))

    def score_dots(self, local, v):
        """Dot products v . u_j for every question j, shape (batch, Q)."""
        return np.repeat(v, self.num_questions, axis=1)


class BilevelMlp:
    """Neural response model over a per-student input vector w.

    Probabilities come from sigmoid(W2 . Dropout(ReLU(W1 w + b1)) + b2);
    only w adapts in the inner loop, the shared layers stay frozen there
    and train in the outer loop.
    """

    kind = "binn"
    student_param_names = ("w_init",)
    question_param_names = ("w1", "b1", "w2", "b2")

    def __init__(self, num_questions: int, seed: int = 0,
                 hidden_dim: int = 256, dropout_rate: float = 0.2):
        self.num_questions = int(num_questions)
        self.local_dim = int(hidden_dim)
        self.dropout_rate = float(dropout_rate)
        d = self.local_dim
        rng = derived_rng(seed, "mlp-init")
        s1 = 1.0 / np.sqrt(d)
        self.params = {
            "w_init": rng.normal(0.0, 0.01, size=d),
            "w1": rng.uniform(-s1, s1, size=(d, d)),
            "b1": np.zeros(d),
            "w2": rng.uniform(-s1, s1, size=(self.num_questions, d)),
            "b2": np.zeros(self.num_questions),
        }

    def init_local(self, batch_size: int) -> np.ndarray:
        return np.tile(self.params["w_init"], (batch_size, 1))

    def _hidden(self, local, eval_mode: bool, rng):
        """Returns (z1, dropped hidden, dropout mask or None)."""
        z1 = local @ self.params["w1"].T + self.params["b1"]
        h = nnops.relu(z1)
        if eval_mode or self.dropout_rate == 0.0:
            return z1, h, None
        if rng is None:
            raise ValidationError("training-mode forward needs an rng")
        mask = nnops.dropout_mask(rng, h.shape, self.dropout_rate)
        return z1, h * mask, mask

    def predict_items(self, local, qidx, eval_mode: bool = True, rng=None):
        qidx = _check_qidx(qidx, self.num_questions)
        _, hd, _ = self._hidden(local, eval_mode, rng)
        logits = np.einsum("bwd,bd->bw", self.params["w2"][qidx], hd) \
            + self.params["b2"][qidx]
        return nnops.sigmoid(logits)

    def predict_all(self, local, eval_mode: bool = True, rng=None):
        _, hd, _ = self._hidden(local, eval_mode, rng)
        return nnops.sigmoid(hd @ self.params["w2"].T + self.params["b2"])

    def adapt(self, admin: PaddedResponses, cfg: AdaptConfig, rng=None):
        """K gradient steps on w only; a fresh dropout mask per step."""
        w = self.init_local(admin.qidx.shape[0])
        w1, b2 = self.params["w1"], self.params["b2"]
        w2_rows = self.params["w2"][admin.qidx]  # (batch, width, d)
        for _ in range(cfg.num_steps):
            z1, hd, mask = self._hidden(w, cfg.eval_mode, rng)
            logits = np.einsum("bwd,bd->bw", w2_rows, hd) + b2[admin.qidx]
            p = nnops.sigmoid(logits)
            dlogit = (p - admin.y) * admin.valid
            dhd = np.einsum("bw,bwd->bd", dlogit, w2_rows)
            if mask is not None:
                dhd = dhd * mask
            dz1 = dhd * (z1 > 0.0)
            w = w - cfg.lr * (dz1 @ w1)
        return w

    def inner_loss(self, local, admin: PaddedResponses):
        p = self.predict_items(local, admin.qidx)
        return (nnops.bce_loss(p, admin.y) * admin.valid).sum(axis=1)

    def meta_loss(self, local, meta: PaddedResponses, eval_mode: bool = True,
                  rng=None):
        counts = meta.counts
        if (counts == 0).any():
            raise ValidationError("meta set must be nonempty for every student")
        p = self.predict_items(local, meta.qidx, eval_mode, rng)
        losses = (nnops.bce_loss(p, meta.y) * meta.valid).sum(axis=1) / counts
        pred = p > 0.5
        acc = ((pred == (meta.y > 0.5)) * meta.valid).sum(axis=1) / counts
        return losses, acc, p

    def meta_grads(self, local, meta: PaddedResponses, eval_mode: bool = False,
                   rng=None):
        batch = local.shape[0]
        z1, hd, mask = self._hidden(local, eval_mode, rng)
        w2_rows = self.params["w2"][meta.qidx]
        logits = np.einsum("bwd,bd->bw", w2_rows, hd) + self.params["b2"][meta.qidx]
        p = nnops.sigmoid(logits)
        wgt = meta.valid / np.maximum(meta.counts, 1)[:, None] / batch
        dlogit = (p - meta.y) * wgt

        dw2 = np.zeros_like(self.params["w2"])
        flat_q = meta.qidx.reshape(-1)
        np.add.at(dw2, flat_q,
                  (dlogit[:, :, None] * hd[:, None, :]).reshape(flat_q.size, -1))
        db2 = np.zeros(self.num_questions)
        np.add.at(db2, flat_q, dlogit.reshape(-1))

        dhd = np.einsum("bw,bwd->bd", dlogit, w2_rows)
        if mask is not None:
            dhd = dhd * mask
        dz1 = dhd * (z1 > 0.0)
        dw1 = dz1.T @ local
        db1 = dz1.sum(axis=0)
        dlocal = dz1 @ self.params["w1"]
        qgrads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
        return qgrads, dlocal

    # -- influence-score hooks ------------------------------------------

    def local_grad_dirs(self, local, qidx):
        """u_j = W1^T (relu'(z1) * W2_j) per row, evaluated without dropout."""
        qidx = _check_qidx(qidx, self.num_questions)
        z1 = local @ self.params["w1"].T + self.params["b1"]
        act = (z1 > 0.0).astype(np.float64)  # (batch, d)
        rows = self.params["w2"][qidx]       # (batch, width, d)
        return np.einsum("bwd,de->bwe", rows * act[:, None, :], self.params["w1"])

    def score_dots(self, local, v):
        z1 = local @ self.params["w1"].T + self.params["b1"]
        act = (z1 > 0.0).astype(np.float64)
        inner = (v @ self.params["w1"].T) * act  # (batch, d)
        return inner @ self.params["w2"].T


def make_model(kind: str, num_questions: int, seed: int = 0,
               hidden_dim: int = 256, dropout_rate: float = 0.2):
    if kind == "biirt":
        return BilevelIrt(num_questions, seed=seed)
    if kind == "binn":
        return BilevelMlp(num_questions, seed=seed, hidden_dim=hidden_dim,
                          dropout_rate=dropout_rate)
    raise ValidationError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Plain IRT: MAP ability estimation and the joint MLE fit used by baselines.
# ---------------------------------------------------------------------------


def map_ability_batch(packed: PaddedResponses, difficulties, lam2: float,
                      prior_mean: float, tol: float = 1e-8,
                      max_iters: int = 100) -> np.ndarray:
    """Damped-Newton MAP ability per row of a padded response batch.

    Minimizes sum bce(sigmoid(theta - b_j), y_j) + lam2*(theta - mu)^2.
    Rows with no responses return mu. Raises NumericError if any row fails
    to reach |gradient| < tol within max_iters (e.g. lam2=0 with one-sided
    responses, where no finite optimum exists).
    """
    if lam2 < 0:
        raise ValidationError(f"lam2 must be >= 0, got {lam2}")
    b = np.asarray(difficulties, dtype=np.float64)
    theta = np.full(packed.qidx.shape[0], float(prior_mean))
    for _ in range(max_iters):
        p = nnops.sigmoid(theta[:, None] - b[packed.qidx])
        grad = ((p - packed.y) * packed.valid).sum(axis=1) \
            + 2.0 * lam2 * (theta - prior_mean)
        active = np.abs(grad) >= tol
        if not active.any():
            return theta
        hess = (p * (1.0 - p) * packed.valid).sum(axis=1) + 2.0 * lam2
        if (hess[active] <= 0.0).any():
            raise NumericError("ability estimate diverged (zero curvature)")
        step = np.clip(grad / hess, -10.0, 10.0)
        theta = theta - np.where(active, step, 0.0)
    raise NumericError(
        f"ability estimation did not converge for {int(active.sum())} rows")


def irt_map_ability(qidx, y, difficulties, lam2: float, prior_mean: float,
                    tol: float = 1e-8, max_iters: int = 100) -> float:
    """Scalar convenience wrapper around map_ability_batch."""
    packed = PaddedResponses.from_lists([list(qidx)], [list(y)])
    return float(map_ability_batch(packed, difficulties, lam2, prior_mean,
                                   tol=tol, max_iters=max_iters)[0])


@dataclass
class FittedIrt:
    """Joint-MLE result: difficulties plus per-student abilities."""

    difficulties: np.ndarray
    abilities: dict
    prior_mean: float
    lam1: float
    sweeps: int

    def ability_of(self, student_id: str) -> float:
        return self.abilities[student_id]


def fit_irt_mle(dataset: Dataset, students=None, lam1: float = 1e-3,
                tol: float = 1e-5, max_sweeps: int = 500,
                init_rng=None) -> FittedIrt:
    """Joint penalized MLE over abilities and difficulties.

    Alternating coordinate-Newton sweeps (all abilities with difficulties
    fixed, then the reverse) until the mean absolute parameter change per
    sweep drops below tol. The L2 penalty lam1 keeps the translation
    degree of freedom pinned and one-sided questions finite.
    """
    students = sorted(students) if students is not None else list(dataset.student_ids)
    if not students:
        raise ValidationError("no students to fit")
    s_chunks, q_chunks, y_chunks = [], [], []
    for row, sid in enumerate(students):
        qidx, y = dataset.responses(sid)
        s_chunks.append(np.full(qidx.size, row, dtype=np.int64))
        q_chunks.append(qidx)
        y_chunks.append(y)
    s_idx = np.concatenate(s_chunks)
    q_idx = np.concatenate(q_chunks)
    y = np.concatenate(y_chunks)
    num_s = len(students)
    num_q = dataset.num_questions
    answered = np.bincount(q_idx, minlength=num_q)
    if lam1 <= 0 and (answered == 0).any():
        raise ValidationError("every question needs >= 1 response when lam1 = 0")

    if init_rng is None:
        theta = np.zeros(num_s)
        b = np.zeros(num_q)
    else:
        theta = init_rng.normal(0.0, 0.5, size=num_s)
        b = init_rng.normal(0.0, 0.5, size=num_q)

    for sweep in range(1, max_sweeps + 1):
        p = nnops.sigmoid(theta[s_idx] - b[q_idx])
        g = np.zeros(num_s)
        h = np.zeros(num_s)
        np.add.at(g, s_idx, p - y)
        np.add.at(h, s_idx, p * (1.0 - p))
        g += 2.0 * lam1 * theta
        h += 2.0 * lam1
        if (h <= 0.0).any():
            raise NumericError("zero curvature in ability sweep")
        d_theta = np.clip(g / h, -5.0, 5.0)
        theta = theta - d_theta

        p = nnops.sigmoid(theta[s_idx] - b[q_idx])
        g = np.zeros(num_q)
        h = np.zeros(num_q)
        np.add.at(g, q_idx, -(p - y))
        np.add.at(h, q_idx, p * (1.0 - p))
        g += 2.0 * lam1 * b
        h += 2.0 * lam1
        if (h <= 0.0).any():
            raise NumericError("zero curvature in difficulty sweep")
        d_b = np.clip(g / h, -5.0, 5.0)
        b = b - d_b

        # The likelihood only sees theta - b, so the shared-shift direction is
        # flat and coordinate sweeps damp it at rate ~lam1. Minimize the
        # penalty along that exact null direction in closed form each sweep.
        shift = -(theta.sum() + b.sum()) / (num_s + num_q)
        theta = theta + shift
        b = b + shift

        mean_change = (np.abs(d_theta).sum() + np.abs(d_b).sum()) \
            / (num_s + num_q) + abs(shift)
        if mean_change < tol:
            return FittedIrt(difficulties=b,
                             abilities={sid: float(t) for sid, t
                                        in zip(students, theta)},
                             prior_mean=float(theta.mean()),
                             lam1=float(lam1), sweeps=sweep)
    raise NumericError(f"IRT fit did not converge in {max_sweeps} sweeps")
