"""Bilevel training loop.

Each epoch re-partitions every training student into a selection pool and
a held-out meta set, then walks mini-batches of students through
n-question episodes. Inside an episode the configured policy picks one
question at a time, the response model re-adapts its per-student
parameters from the global initialization after every administration, and
the policy parameters are updated by the configured estimator (per step
for the influence route, once per batch for the clipped score-function
route). After the episode the global model parameters take a first-order
meta-gradient step. Validation on fixed partitions drives early stopping.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np

from . import estimators, nnops
from .data import (Dataset, EvalPartitionSet, FoldSplit, PaddedResponses,
                   derived_rng, make_eval_partitions, partition_student)
from .errors import ConfigError, NumericError, ValidationError
from .estimators import EpisodeTrace, PpoConfig
from .models import AdaptConfig, make_model
from .policies import (CriticNet, PolicyNet, select_active, select_random,
                       select_uncertain)

MODEL_KINDS = ("biirt", "binn")
POLICY_KINDS = ("random", "active", "unbiased", "approx")


@dataclass
class TrainConfig:
    model: str = "biirt"
    policy: str = "random"
    n_questions: int = 5
    inner_steps: int = 5
    inner_lr: float = 0.1
    question_lr: float = 1e-3
    student_lr: float = 1e-4
    student_momentum: float = 0.9
    policy_lr: float = 0.002
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    hidden_dim: int = 256
    dropout_rate: float = 0.2
    reward_kind: str = "accuracy"
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    entropy_weight: float = 0.01
    critic_weight: float = 0.5
    hessian_mode: str = "auto"
    damping: float = 0.01
    cg_iters: int = 20
    partition_ratio: float = 0.8
    val_repeats: int = 1
    workers: int = 1

    def __post_init__(self):
        problems = []
        if self.model not in MODEL_KINDS:
            problems.append(f"unknown model {self.model!r}")
        if self.policy not in POLICY_KINDS:
            problems.append(f"unknown policy {self.policy!r}")
        if self.n_questions < 1:
            problems.append("n_questions must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.inner_steps < 0:
            problems.append("inner_steps must be >= 0")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.ppo_epochs < 1:
            problems.append("ppo_epochs must be >= 1")
        if self.cg_iters < 1:
            problems.append("cg_iters must be >= 1")
        if self.val_repeats < 1:
            problems.append("val_repeats must be >= 1")
        for name in ("inner_lr", "question_lr", "student_lr", "policy_lr",
                     "clip_eps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        for name in ("entropy_weight", "critic_weight", "damping"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("student_momentum", "dropout_rate"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must be in [0, 1)")
        if not 0 < self.partition_ratio < 1:
            problems.append("partition_ratio must be in (0, 1)")
        if self.reward_kind not in ("accuracy", "neg-loss"):
            problems.append(f"unknown reward kind {self.reward_kind!r}")
        if self.hessian_mode not in ("auto",) + estimators.HESSIAN_MODES:
            problems.append(f"unknown hessian mode {self.hessian_mode!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        return cls(**d)

    def resolved_hessian_mode(self) -> str:
        if self.hessian_mode != "auto":
            return self.hessian_mode
        return "exact-scalar" if self.model == "biirt" else "cg"

    def adapt_config(self, eval_mode: bool = False) -> AdaptConfig:
        return AdaptConfig(num_steps=self.inner_steps, lr=self.inner_lr,
                           eval_mode=eval_mode)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(clip_eps=self.clip_eps, epochs=self.ppo_epochs,
                         entropy_weight=self.entropy_weight,
                         critic_weight=self.critic_weight)


@dataclass
class EpisodeBatchData:
    """Per-student pools for a batch of episodes."""

    student_ids: list
    avail0: np.ndarray      # (B, Q) bool selection pool
    responses: np.ndarray   # (B, Q) recorded answers, NaN off-pool
    meta: PaddedResponses


def make_episode_batch(dataset: Dataset, student_ids, partitions) -> EpisodeBatchData:
    """partitions: student_id -> StudentPartition (pool/meta index split)."""
    student_ids = list(student_ids)
    num_q = dataset.num_questions
    mat, _ = dataset.response_matrix(student_ids)
    avail0 = np.zeros((len(student_ids), num_q), dtype=bool)
    meta_q, meta_y = [], []
    for i, sid in enumerate(student_ids):
        part = partitions[sid]
        avail0[i, part.omega] = True
        meta_q.append(part.gamma.tolist())
        meta_y.append(mat[i, part.gamma].tolist())
    return EpisodeBatchData(student_ids, avail0, mat,
                            PaddedResponses.from_lists(meta_q, meta_y))


def select_actions(policy_kind: str, policy_net, model, local, states, avail,
                   rng, greedy: bool):
    if policy_kind == "random":
        return select_random(avail, rng)
    if policy_kind == "active":
        if model.kind == "biirt":
            return select_active(local[:, 0], model.params["difficulty"],
                                 avail)
        return select_uncertain(model.predict_all(local), avail)
    probs = policy_net.probs(states, avail)
    if greedy:
        return policy_net.greedy(probs)
    return policy_net.sample(probs, rng)


def play_episodes(model, policy_kind, policy_net, data: EpisodeBatchData,
                  n: int, adapt_cfg: AdaptConfig, select_rng, model_rng,
                  greedy: bool = False, trace_sink=None, pre_select=None):
    """Roll n-question episodes for the whole batch.

    Returns (qidx (B, n), y (B, n), final locals). ``pre_select(t, states,
    avail, local, admin)`` runs before each pick and may mutate the policy
    (the influence-route update). ``trace_sink`` collects per-step
    (states, avail, actions, chosen probabilities) copies.
    """
    batch, num_q = data.avail0.shape
    if (data.avail0.sum(axis=1) < n).any():
        raise ValidationError("a selection pool is smaller than the episode")
    states = np.zeros((batch, num_q))
    avail = data.avail0.copy()
    qidx = np.zeros((batch, n), dtype=np.int64)
    y = np.zeros((batch, n))
    rows = np.arange(batch)
    local = model.init_local(batch)
    for t in range(n):
        admin = PaddedResponses(qidx[:, :t], y[:, :t],
                                np.ones((batch, t), dtype=bool)) \
            if t > 0 else PaddedResponses.from_lists([[]] * batch,
                                                     [[]] * batch)
        if pre_select is not None:
            pre_select(t, states, avail, local, admin)
        if trace_sink is not None:
            probs = policy_net.probs(states, avail)
            actions = policy_net.greedy(probs) if greedy \
                else policy_net.sample(probs, select_rng)
            trace_sink.append((states.copy(), avail.copy(), actions.copy(),
                               np.atleast_2d(probs)[rows, actions].copy()))
        else:
            actions = select_actions(policy_kind, policy_net, model, local,
                                     states, avail, select_rng, greedy)
        outcomes = data.responses[rows, actions]
        if not np.isfinite(outcomes).all():
            raise ValidationError("selected a question with no recorded answer")
        qidx[:, t] = actions
        y[:, t] = outcomes
        states[rows, actions] = np.where(outcomes > 0.5, 1.0, -1.0)
        avail[rows, actions] = False
        admin = PaddedResponses(qidx[:, :t + 1], y[:, :t + 1],
                                np.ones((batch, t + 1), dtype=bool))
        local = model.adapt(admin, adapt_cfg, model_rng)
    return qidx, y, local


def outer_update_gamma(model, question_grads, dlocal, question_opt,
                       student_opt) -> None:
    """First-order meta step on the global model parameters.

    ``dlocal`` holds each student's gradient of the batch meta loss at the
    adapted point; summed over the batch it acts as the gradient for the
    shared student-side initialization.
    """
    qparams = {k: model.params[k] for k in model.question_param_names}
    question_opt.step(qparams, {k: question_grads[k]
                                for k in model.question_param_names})
    init_grad = dlocal.sum(axis=0)
    sparams = {k: model.params[k] for k in model.student_param_names}
    sgrads = {k: init_grad.reshape(model.params[k].shape)
              for k in model.student_param_names}
    student_opt.step(sparams, sgrads)


def validation_accuracy(model, cfg: TrainConfig, policy_net, dataset,
                        partitions: EvalPartitionSet, students) -> float:
    """Greedy-rollout meta accuracy on fixed validation partitions."""
    adapt_cfg = cfg.adapt_config(eval_mode=True)
    accs = []
    for rep in range(cfg.val_repeats):
        per_student = {sid: partitions.get(sid, rep) for sid in students}
        rng = derived_rng(cfg.seed, "val-rollout", rep)
        for start in range(0, len(students), cfg.batch_size):
            chunk = list(students)[start:start + cfg.batch_size]
            data = make_episode_batch(dataset, chunk, per_student)
            _, _, local = play_episodes(
                model, cfg.policy, policy_net, data, cfg.n_questions,
                adapt_cfg, rng, None, greedy=True)
            _, acc, _ = model.meta_loss(local, data.meta, eval_mode=True)
            accs.append(acc)
    return float(np.concatenate(accs).mean())


def _snapshot(model, policy_net, critic_net, cfg: TrainConfig, dataset,
              epoch: int, val_acc: float) -> dict:
    payload = {
        "model_kind": model.kind,
        "num_questions": model.num_questions,
        "question_ids": list(dataset.question_ids),
        "config": dataclasses.asdict(cfg),
        "model_params": {k: v.copy() for k, v in model.params.items()},
        "policy_params": None,
        "critic_params": None,
        "epoch": epoch,
        "val_accuracy": val_acc,
    }
    if policy_net is not None:
        payload["policy_params"] = {k: v.copy()
                                    for k, v in policy_net.params.items()}
        payload["critic_params"] = {k: v.copy()
                                    for k, v in critic_net.params.items()}
    return payload


def restore_nets(payload: dict):
    """Rebuild model (and nets, when present) from a checkpoint payload."""
    cfg = TrainConfig.from_dict(payload["config"])
    model = make_model(payload["model_kind"], payload["num_questions"],
                       seed=cfg.seed, hidden_dim=cfg.hidden_dim,
                       dropout_rate=cfg.dropout_rate)
    for k, v in payload["model_params"].items():
        model.params[k] = np.array(v, dtype=np.float64)
    policy_net = critic_net = None
    if payload.get("policy_params"):
        policy_net = PolicyNet(model.num_questions, cfg.hidden_dim, cfg.seed)
        for k, v in payload["policy_params"].items():
            policy_net.params[k] = np.array(v, dtype=np.float64)
        critic_net = CriticNet(model.num_questions, cfg.hidden_dim, cfg.seed)
        for k, v in payload["critic_params"].items():
            critic_net.params[k] = np.array(v, dtype=np.float64)
    return model, policy_net, critic_net, cfg


def train(dataset: Dataset, fold: FoldSplit, cfg: TrainConfig,
          log_path=None):
    """Run the full loop on one fold. Returns (best checkpoint, history)."""
    if not fold.train:
        raise ValidationError("no training students")
    model = make_model(cfg.model, dataset.num_questions, seed=cfg.seed,
                       hidden_dim=cfg.hidden_dim,
                       dropout_rate=cfg.dropout_rate)
    learned_policy = cfg.policy in ("unbiased", "approx")
    policy_net = critic_net = policy_opt = None
    if learned_policy:
        policy_net = PolicyNet(dataset.num_questions, cfg.hidden_dim,
                               cfg.seed)
        critic_net = CriticNet(dataset.num_questions, cfg.hidden_dim,
                               cfg.seed)
        policy_opt = nnops.Adam(lr=cfg.policy_lr)
    question_opt = nnops.Adam(lr=cfg.question_lr)
    student_opt = nnops.SgdMomentum(lr=cfg.student_lr,
                                    momentum=cfg.student_momentum)

    val_parts = make_eval_partitions(dataset, fold.val, cfg.val_repeats,
                                     cfg.seed, cfg.partition_ratio)
    train_ids = sorted(fold.train)
    adapt_cfg = cfg.adapt_config(eval_mode=False)
    hessian_mode = cfg.resolved_hessian_mode()
    ppo_cfg = cfg.ppo_config() if cfg.policy == "unbiased" else None

    best = None
    best_acc = -np.inf
    since_best = 0
    history = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            t0 = time.monotonic()
            part_rng = derived_rng(cfg.seed, "epoch", epoch, "partitions")
            partitions = {sid: partition_student(dataset.responses(sid)[0],
                                                 cfg.partition_ratio,
                                                 part_rng)
                          for sid in train_ids}
            order_rng = derived_rng(cfg.seed, "epoch", epoch, "order")
            order = [train_ids[i]
                     for i in order_rng.permutation(len(train_ids))]
            losses, accs, ppo_log = [], [], None
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                chunk = order[start:start + cfg.batch_size]
                try:
                    ppo_log = _run_batch(
                        model, cfg, policy_net, critic_net, policy_opt,
                        question_opt, student_opt, dataset, chunk,
                        partitions, adapt_cfg, hessian_mode, ppo_cfg,
                        epoch, b, losses, accs) or ppo_log
                except NumericError as exc:
                    raise NumericError(
                        f"epoch {epoch} batch {b}: {exc}") from exc
            val_acc = validation_accuracy(model, cfg, policy_net, dataset,
                                          val_parts, fold.val)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "train_accuracy": float(np.mean(accs)),
                "val_accuracy": val_acc,
                "wall_time": time.monotonic() - t0,
            }
            if ppo_log is not None:
                record["ppo"] = ppo_log
            if val_acc > best_acc:
                best_acc = val_acc
                best = _snapshot(model, policy_net, critic_net, cfg, dataset,
                                 epoch, val_acc)
                since_best = 0
                record["best"] = True
            else:
                since_best += 1
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if since_best >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    return best, history


def _run_batch(model, cfg, policy_net, critic_net, policy_opt, question_opt,
               student_opt, dataset, chunk, partitions, adapt_cfg,
               hessian_mode, ppo_cfg, epoch, b, losses, accs):
    data = make_episode_batch(dataset, chunk, partitions)
    select_rng = derived_rng(cfg.seed, "epoch", epoch, "batch", b, "select")
    model_rng = derived_rng(cfg.seed, "epoch", epoch, "batch", b, "model")
    base_rng = derived_rng(cfg.seed, "epoch", epoch, "batch", b, "baseline")
    batch = len(chunk)
    resp_filled = np.nan_to_num(data.responses)
    ppo_log = None

    pre_select = None
    trace_sink = None
    if cfg.policy == "approx":
        def pre_select(t, states, avail, local, admin):
            scores = estimators.influence_scores(
                model, local, resp_filled, avail, admin, data.meta,
                hessian_mode=hessian_mode, damping=cfg.damping,
                cg_iters=cfg.cg_iters)
            grads = estimators.approx_policy_grad(scores, policy_net,
                                                  states, avail)
            policy_opt.step(policy_net.params, grads)
    elif cfg.policy == "unbiased":
        trace_sink = []

    qidx, y, local = play_episodes(
        model, cfg.policy, policy_net, data, cfg.n_questions, adapt_cfg,
        select_rng, model_rng, greedy=False, trace_sink=trace_sink,
        pre_select=pre_select)

    loss, acc, _ = model.meta_loss(local, data.meta, eval_mode=True)
    losses.append(float(loss.mean()))
    accs.append(float(acc.mean()))

    if cfg.policy == "unbiased":
        rewards = estimators.reward_from_meta(model, local, data.meta,
                                              cfg.reward_kind)
        baselines = estimators.random_rollout_baseline(
            model, data.avail0, resp_filled, cfg.n_questions, data.meta,
            adapt_cfg, base_rng, cfg.reward_kind)
        traces = []
        for i in range(batch):
            traces.append(EpisodeTrace(
                states=np.stack([s[0][i] for s in trace_sink]),
                avail=np.stack([s[1][i] for s in trace_sink]),
                actions=np.array([s[2][i] for s in trace_sink]),
                probs_old=np.array([s[3][i] for s in trace_sink]),
                reward=float(rewards[i]), baseline=float(baselines[i])))
        hist = estimators.ppo_update(policy_net, critic_net, traces,
                                     ppo_cfg, policy_opt)
        ppo_log = hist[-1]

    question_grads, dlocal = model.meta_grads(local, data.meta,
                                              eval_mode=False, rng=model_rng)
    outer_update_gamma(model, question_grads, dlocal, question_opt,
                       student_opt)
    return ppo_log
