"""Multi-label dialog policy, value function, GAE and the PPO objectives.

A system action is a subset of the act vocabulary; the policy emits one
logit per act and the subset distribution factorizes into independent
Bernoullis, so log pi(a|s) = sum_i a_i * z_i - softplus(z_i).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .nn import Adam, Mlp


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return np.exp(-softplus(-z))


def bernoulli_log_prob(logits, actions):
    """Row-wise log-probability of multi-hot ``actions``; finite for any finite logits."""
    return np.sum(actions * logits - softplus(logits), axis=-1)


class ActionSample(NamedTuple):
    action: np.ndarray     # executed multi-hot (fallback applied)
    log_prob: np.ndarray   # log-prob of the sampled set, before fallback
    sampled: np.ndarray    # multi-hot as drawn


class PolicyNet:
    def __init__(self, state_dim, n_acts, hidden=(100, 100), rng=None, fallback_index=0):
        self.net = Mlp((state_dim, *hidden, n_acts), rng=rng)
        self.old_params = self.net.params.copy()
        self.fallback_index = fallback_index

    @property
    def n_acts(self):
        return self.net.sizes[-1]

    def logits(self, states):
        return self.net.forward(states)

    def snapshot(self):
        """Freeze the current parameters as the ratio denominator."""
        self.old_params = self.net.params.copy()

    def log_prob(self, states, actions):
        return bernoulli_log_prob(self.logits(states), actions)

    def sample(self, states, rng) -> ActionSample:
        z = np.atleast_2d(self.logits(states))
        u = rng.random(z.shape)
        sampled = (u < sigmoid(z)).astype(np.float64)
        logp = bernoulli_log_prob(z, sampled)
        action = sampled.copy()
        empty = action.sum(axis=1) == 0
        action[empty, self.fallback_index] = 1.0
        return ActionSample(action, logp, sampled)

    def greedy(self, states):
        z = np.atleast_2d(self.logits(states))
        action = (z > 0).astype(np.float64)
        action[action.sum(axis=1) == 0, self.fallback_index] = 1.0
        return action


def sample_action(policy: PolicyNet, state, rng) -> tuple[np.ndarray, float]:
    s = policy.sample(np.atleast_2d(state), rng)
    return s.action[0], float(s.log_prob[0])


class ValueNet:
    def __init__(self, state_dim, hidden=(100, 100), rng=None):
        self.net = Mlp((state_dim, *hidden, 1), rng=rng)

    def __call__(self, states):
        return self.net.forward(np.atleast_2d(states))[:, 0]


def gae(rewards, values, gamma, lam, terminals):
    """Advantages and discounted reward-to-go targets.

    ``values`` has one more entry than ``rewards``: V(s_{T+1}) for
    bootstrapping.  A terminal flag at t cuts both recursions, so the
    successor value is treated as zero and several episodes may be
    concatenated.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    T = len(rewards)
    if values.shape != (T + 1,) or terminals.shape != (T,):
        raise ValueError(f"length mismatch: {T} rewards, {values.shape} values, {terminals.shape} flags")
    adv = np.zeros(T)
    ret = np.zeros(T)
    next_adv = 0.0
    next_ret = 0.0
    for t in range(T - 1, -1, -1):
        live = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        next_adv = delta + gamma * lam * next_adv * live
        next_ret = rewards[t] + gamma * next_ret * live
        adv[t] = next_adv
        ret[t] = next_ret
    return adv, ret


def clipped_objective(ratio, adv, eps):
    """Per-sample min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) and its d/d(ratio)."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    obj = np.minimum(unclipped, clipped)
    dratio = np.where(unclipped <= clipped, adv, 0.0)
    return obj, dratio


def ppo_policy_loss(policy: PolicyNet, states, actions, old_log_prob, adv, eps):
    """Returns (-J, gradient of -J w.r.t. policy parameters)."""
    z = policy.logits(states)
    cache = policy.net.last_cache
    logp = bernoulli_log_prob(z, actions)
    ratio = np.exp(logp - old_log_prob)
    obj, dratio = clipped_objective(ratio, adv, eps)
    n = len(adv)
    # d(-J)/dz = -(1/n) * dratio * ratio * (a - sigmoid(z))
    dlogp = -(dratio * ratio) / n
    dz = dlogp[:, None] * (actions - sigmoid(z))
    return -obj.mean(), policy.net.backward(dz, cache)


def value_loss(value: ValueNet, states, targets):
    """Mean squared error to the return targets, and its gradient."""
    v = value.net.forward(np.atleast_2d(states))[:, 0]
    cache = value.net.last_cache
    diff = v - np.asarray(targets, dtype=np.float64)
    n = len(diff)
    return float(np.mean(diff ** 2)), value.net.backward((2.0 * diff / n)[:, None], cache)


def imitation_loss(policy: PolicyNet, states, actions):
    """Negative mean log-likelihood (sum of per-act binary cross-entropies)."""
    z = policy.logits(states)
    cache = policy.net.last_cache
    loss = -np.mean(bernoulli_log_prob(z, actions))
    dz = -(actions - sigmoid(z)) / len(actions)
    return float(loss), policy.net.backward(dz, cache)


def act_f1(pred, target):
    tp = float(np.sum(pred * target))
    fp = float(np.sum(pred * (1 - target)))
    fn = float(np.sum((1 - pred) * target))
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0


def imitation_pretrain(policy: PolicyNet, states, actions, rng, epochs=5, batch_size=32, lr=1e-4,
                       clip=10.0, optimizer=None, log=None):
    """Per-act cross-entropy training on expert (state, action) pairs.

    Returns a report with the per-epoch losses, the final exact-match rate
    and act-level F1 of the greedy policy on the training pairs.
    """
    opt = optimizer or Adam(policy.net.n_params, lr=lr, clip=clip)
    n = len(states)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = imitation_loss(policy, states[idx], actions[idx])
            opt.step(policy.net.params, grad)
            total += loss * len(idx)
        losses.append(total / n)
        if log:
            log(f"imitation epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}")
    policy.snapshot()
    pred = policy.greedy(states)
    exact = float(np.mean(np.all(pred == actions, axis=1))) if n else 0.0
    return {"losses": losses, "exact_match": exact, "f1": act_f1(pred, actions)}
