"""Policy-gradient estimators for the outer selection objective.

Two routes to d(outer loss)/d(policy):

* the unbiased score-function route, generalized to a clipped PPO update
  with an entropy bonus and a learned state-value critic, run after the
  full episode has been collected;
* the biased influence-function route, which scores every available
  question by how much adding it to the inner problem would move the meta
  loss, then backpropagates those scores straight through the masked
  softmax as if they were d(loss)/d(probability). This one updates the
  policy every step.

Rewards default to meta-set accuracy with a per-student baseline from one
fresh uniform-random rollout; a config switch flips to negative mean BCE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .data import PaddedResponses
from .errors import NumericError, ValidationError
from .models import AdaptConfig


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    entropy_weight: float = 0.01
    critic_weight: float = 0.5

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValidationError(f"clip_eps must be > 0, got {self.clip_eps}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class EpisodeTrace:
    """One student's episode under the collection-time policy."""

    states: np.ndarray      # (n, Q) ternary states seen before each pick
    avail: np.ndarray       # (n, Q) availability at each pick
    actions: np.ndarray     # (n,) selected question indices
    probs_old: np.ndarray   # (n,) collection-time probability of each pick
    reward: float
    baseline: float

    def __post_init__(self):
        if not ((self.probs_old > 0.0) & (self.probs_old <= 1.0)).all():
            raise ValidationError("stored probabilities must be in (0,1]")
        steps = np.arange(self.actions.size)
        if not self.avail[steps, self.actions].all():
            raise ValidationError("an action was taken on an unavailable question")


def clip(ratio, lo, hi):
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValidationError("clip bounds out of order")
    return np.minimum(hi, np.maximum(ratio, lo))


def advantage(reward, baseline, value):
    """A = (r - b_i) - V(x) under the accuracy-reward convention."""
    return np.asarray(reward) - np.asarray(baseline) - np.asarray(value)


def reward_from_meta(model, local, meta: PaddedResponses,
                     kind: str = "accuracy") -> np.ndarray:
    """Per-student episode reward measured on the meta set (eval mode)."""
    loss, acc, _ = model.meta_loss(local, meta, eval_mode=True)
    if kind == "accuracy":
        return acc
    if kind == "neg-loss":
        return -loss
    raise ValidationError(f"unknown reward kind {kind!r}")


def random_rollout_baseline(model, pool_avail, responses_all, n: int,
                            meta: PaddedResponses, adapt_cfg: AdaptConfig,
                            rng: np.random.Generator,
                            kind: str = "accuracy") -> np.ndarray:
    """Reward of one fresh uniform-random selection of length n per student.

    Selections are drawn without replacement from each student's initial
    pool; the model adapts on them with the same inner config as the
    policy episode.
    """
    pool = np.asarray(pool_avail, dtype=bool)
    batch, num_q = pool.shape
    if n > 0:
        if (pool.sum(axis=1) < n).any():
            raise ValidationError("pool smaller than episode length")
        keys = np.where(pool, rng.random((batch, num_q)), np.inf)
        order = np.argsort(keys, axis=1)[:, :n]
        y = np.take_along_axis(np.asarray(responses_all), order, axis=1)
        admin = PaddedResponses(qidx=order.astype(np.int64),
                               y=y.astype(np.float64),
                               valid=np.ones((batch, n), dtype=bool))
    else:
        admin = PaddedResponses.from_lists([[]] * batch, [[]] * batch)
    local = model.adapt(admin, adapt_cfg, rng)
    return reward_from_meta(model, local, meta, kind)


# ---------------------------------------------------------------------------
# Unbiased route: REINFORCE single-sample estimator and the PPO update.
# ---------------------------------------------------------------------------


def score_function_grad(trace: EpisodeTrace, policy) -> dict:
    """Loss-gradient estimate -(r - b_i) * sum_t grad log pi(a_t | x_t)."""
    probs, cache = policy.probs(trace.states, trace.avail, with_cache=True)
    steps = np.arange(trace.actions.size)
    onehot = np.zeros_like(probs)
    onehot[steps, trace.actions] = 1.0
    chosen = probs[steps, trace.actions]
    live = (chosen > nnops.PROB_FLOOR).astype(np.float64)
    # grad of log pi(a) wrt logits is (onehot - pi); the floor freezes it
    dlogits = -(trace.reward - trace.baseline) \
        * live[:, None] * (onehot - probs)
    return policy.backward(dlogits, cache)


def _stack_traces(traces):
    states = np.concatenate([t.states for t in traces], axis=0)
    avail = np.concatenate([t.avail for t in traces], axis=0)
    actions = np.concatenate([t.actions for t in traces])
    probs_old = np.concatenate([t.probs_old for t in traces])
    reward = np.concatenate([np.full(t.actions.size, t.reward) for t in traces])
    baseline = np.concatenate([np.full(t.actions.size, t.baseline)
                               for t in traces])
    return states, avail, actions, probs_old, reward, baseline


def ppo_components(policy, critic, states, avail, actions, probs_old, adv,
                   targets, cfg: PpoConfig):
    """Losses and per-component gradients of the clipped objective.

    Returns (losses, actor_grads_l1, actor_grads_l2, critic_grads_l3)
    where losses is a dict with keys l1, l2, l3, total and the total is
    exactly l1 + entropy_weight*l2 + critic_weight*l3.
    """
    m = actions.size
    steps = np.arange(m)
    probs, cache = policy.probs(states, avail, with_cache=True)
    chosen = probs[steps, actions]
    ratio = np.maximum(chosen, nnops.PROB_FLOOR) \
        / np.maximum(probs_old, nnops.PROB_FLOOR)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    pg1 = ratio * adv
    pg2 = clip(ratio, lo, hi) * adv
    l1 = -np.minimum(pg1, pg2).mean()

    # d l1 / d ratio: unclipped branch active when it is the min or the
    # ratio sits inside the clip band (where both branches coincide)
    use = (pg1 <= pg2) | ((ratio >= lo) & (ratio <= hi))
    dratio = -(use * adv) / m
    dchosen = dratio / np.maximum(probs_old, nnops.PROB_FLOOR) \
        * (chosen > nnops.PROB_FLOOR)
    dprobs_l1 = np.zeros_like(probs)
    dprobs_l1[steps, actions] = dchosen
    actor_l1 = policy.backward(
        nnops.masked_softmax_backward(dprobs_l1, probs), cache)

    logp = np.log(np.maximum(probs, nnops.PROB_FLOOR))
    ent_rows = (probs * logp).sum(axis=1)
    l2 = ent_rows.mean()
    dprobs_l2 = (logp + 1.0) / m
    actor_l2 = policy.backward(
        nnops.masked_softmax_backward(dprobs_l2, probs), cache)

    values, vcache = critic.values(states, with_cache=True)
    err = values - targets
    l3 = (err ** 2).mean()
    critic_l3 = critic.backward((2.0 * err / m)[:, None], vcache)

    losses = {"l1": float(l1), "l2": float(l2), "l3": float(l3)}
    losses["total"] = losses["l1"] + cfg.entropy_weight * losses["l2"] \
        + cfg.critic_weight * losses["l3"]
    return losses, actor_l1, actor_l2, critic_l3


def ppo_update(policy, critic, traces, cfg: PpoConfig, optimizer):
    """Run cfg.epochs clipped update passes over a batch of episodes.

    Advantages use the critic as of entry and stay fixed across epochs;
    the critic regression target is (r - b_i). Returns the per-epoch loss
    components.
    """
    states, avail, actions, probs_old, reward, baseline = _stack_traces(traces)
    v_old = critic.values(states)
    adv = advantage(reward, baseline, v_old)
    targets = reward - baseline
    history = []
    for _ in range(cfg.epochs):
        losses, a1, a2, c3 = ppo_components(
            policy, critic, states, avail, actions, probs_old, adv, targets,
            cfg)
        grads = {}
        for name in policy.params:
            grads[f"actor.{name}"] = a1[name] + cfg.entropy_weight * a2[name]
        for name in critic.params:
            grads[f"critic.{name}"] = cfg.critic_weight * c3[name]
        params = {f"actor.{k}": v for k, v in policy.params.items()}
        params.update({f"critic.{k}": v for k, v in critic.params.items()})
        optimizer.step(params, grads)
        history.append(losses)
    return history


# ---------------------------------------------------------------------------
# Biased route: influence scores and the straight-through policy gradient.
# ---------------------------------------------------------------------------

HESSIAN_MODES = ("exact-scalar", "cg", "identity")


def _meta_grad_local(model, local, meta: PaddedResponses) -> np.ndarray:
    """Per-student gradient of its mean meta BCE wrt the local params."""
    p = model.predict_items(local, meta.qidx)
    wgt = meta.valid / np.maximum(meta.counts, 1)[:, None]
    coef = (p - meta.y) * wgt
    dirs = model.local_grad_dirs(local, meta.qidx)
    return np.einsum("bw,bwd->bd", coef, dirs)


def influence_scores(model, local, candidate_y, avail, admin: PaddedResponses,
                     meta: PaddedResponses, hessian_mode: str = "cg",
                     damping: float = 0.01, cg_iters: int = 20) -> np.ndarray:
    """Influence of each available question on the meta loss.

    score(j) = -g_meta^T (H + damping*I)^{-1} grad_local bce(Y_j, g(j)),
    with H the Gauss-Newton Hessian of the summed inner loss at the
    adapted local params. Rows are students; unavailable questions get 0.
    """
    if hessian_mode not in HESSIAN_MODES:
        raise ValidationError(f"unknown hessian mode {hessian_mode!r}")
    avail = np.asarray(avail, dtype=bool)
    batch, d = local.shape[0], model.local_dim

    g = _meta_grad_local(model, local, meta)  # (batch, d)

    if hessian_mode == "identity":
        v = g
    else:
        u = model.local_grad_dirs(local, admin.qidx)       # (batch, T, d)
        p_adm = model.predict_items(local, admin.qidx)
        curv = p_adm * (1.0 - p_adm) * admin.valid         # (batch, T)
        if hessian_mode == "exact-scalar":
            if d != 1:
                raise ValidationError(
                    "exact-scalar mode needs a scalar local parameter")
            h = (curv * u[:, :, 0] ** 2).sum(axis=1) + damping
            if (h <= 0.0).any():
                raise NumericError("singular inner Hessian (damping too small)")
            v = g / h[:, None]
        else:
            v = np.empty_like(g)
            for i in range(batch):
                ui, ci = u[i], curv[i]

                def hvp(x, ui=ui, ci=ci):
                    return ui.T @ (ci * (ui @ x))

                v[i], _, _ = nnops.cg_solve(hvp, g[i], damping=damping,
                                            max_iters=cg_iters)

    p_all = model.predict_all(local)
    y = np.where(avail, np.asarray(candidate_y, dtype=np.float64), 0.0)
    scores = -(p_all - y) * model.score_dots(local, v)
    return np.where(avail, scores, 0.0)


def approx_policy_grad(scores, policy, states, avail):
    """Straight-through gradient: treat scores as d(loss)/d(probability).

    The objective is mean over the batch of sum_j pi(j|x) * score(j);
    backpropagation runs through the masked softmax and the policy net.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    probs, cache = policy.probs(states, avail, with_cache=True)
    dprobs = scores / scores.shape[0]
    dlogits = nnops.masked_softmax_backward(dprobs, probs)
    return policy.backward(dlogits, cache)
