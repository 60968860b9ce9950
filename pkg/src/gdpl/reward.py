"""Learned reward estimator with a shaping potential, plus the handcrafted baseline reward.

f(s, a, s') = g(s, a) + gamma * h(s') - h(s), with h(s') taken as zero at
episode end.  The per-turn reward handed to the policy is
r = f - log pi(a|s).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .nn import Adam, Mlp, NetworkUsageError
from .policy import PolicyNet, sigmoid, softplus

PAIRWISE, SESSION, DISCRIMINATOR = "pairwise", "session", "discriminator"


class Transitions(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.states)

    def take(self, idx) -> "Transitions":
        return Transitions(self.states[idx], self.actions[idx], self.next_states[idx], self.terminals[idx])


def concat_transitions(parts) -> Transitions:
    return Transitions(*(np.concatenate([getattr(p, f) for p in parts]) for f in Transitions._fields))


class RewardEstimator:
    def __init__(self, state_dim, n_acts, gamma=0.99, hidden=100, rng=None, mode=PAIRWISE):
        if mode not in (PAIRWISE, SESSION, DISCRIMINATOR):
            raise ValueError(f"unknown estimator mode {mode!r}")
        self.g = Mlp((state_dim + n_acts, hidden, 1), rng=rng)
        self.h = Mlp((state_dim, hidden, 1), rng=rng)
        self.gamma = gamma
        self.mode = mode

    @property
    def params(self):
        return np.concatenate([self.g.params, self.h.params])

    def set_params(self, flat):
        self.g.params[...] = flat[:self.g.n_params]
        self.h.params[...] = flat[self.g.n_params:]

    def parts(self, batch: Transitions):
        """(f, g, h(s), h(s')) with h(s') already zeroed at terminals."""
        gv = self.g.forward(np.hstack([batch.states, batch.actions]))[:, 0]
        hs = self.h.forward(batch.states)[:, 0]
        hn = self.h.forward(batch.next_states)[:, 0] * (1.0 - batch.terminals)
        return gv + self.gamma * hn - hs, gv, hs, hn

    def f(self, batch: Transitions):
        return self.parts(batch)[0]

    def backward_f(self, batch: Transitions, df):
        """Gradient of sum(df * f(batch)) w.r.t. the flat (g, h) parameters."""
        df = np.asarray(df, dtype=np.float64)
        self.g.forward(np.hstack([batch.states, batch.actions]))
        gg = self.g.backward(df[:, None])
        self.h.forward(batch.next_states)
        gh = self.h.backward((self.gamma * df * (1.0 - batch.terminals))[:, None])
        self.h.forward(batch.states)
        gh -= self.h.backward(df[:, None])
        return np.concatenate([gg, gh])


def f_value(est: RewardEstimator, s, a, s_next, terminal) -> float:
    batch = Transitions(np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s_next), np.array([float(terminal)]))
    return float(est.f(batch)[0])


def estimator_loss(est: RewardEstimator, human: Transitions, generated: Transitions):
    """J_f = E_human[f] - E_policy[f]; returns (J_f, gradient of -J_f)."""
    if len(human) == 0 or len(generated) == 0:
        raise NetworkUsageError("estimator_loss needs nonempty human and policy batches")
    both = concat_transitions([human, generated])
    fv = est.f(both)
    nh, ng = len(human), len(generated)
    j = fv[:nh].mean() - fv[nh:].mean()
    df = np.concatenate([np.full(nh, -1.0 / nh), np.full(ng, 1.0 / ng)])
    return float(j), est.backward_f(both, df)


def discriminator_mode_loss(est: RewardEstimator, policy: PolicyNet, human: Transitions, generated: Transitions):
    """Binary cross-entropy with D = sigmoid(f - log pi); human pairs labelled 1.

    Returns (mean per-pair loss, gradient w.r.t. estimator parameters).
    """
    if len(human) == 0 or len(generated) == 0:
        raise NetworkUsageError("discriminator loss needs nonempty human and policy batches")
    both = concat_transitions([human, generated])
    logp = policy.log_prob(both.states, both.actions)
    return discriminator_loss_from_logits(est, both, logp, len(human))


def discriminator_loss_from_logits(est, both: Transitions, logp, n_human):
    x = est.f(both) - logp
    y = np.zeros(len(x))
    y[:n_human] = 1.0
    loss = np.mean(y * softplus(-x) + (1 - y) * softplus(x))
    df = (sigmoid(x) - y) / len(x)
    return float(loss), est.backward_f(both, df)


def estimated_reward(est: RewardEstimator, policy: PolicyNet, batch: Transitions):
    """Per-pair r = f - log pi(a|s) under the current policy."""
    return est.f(batch) - policy.log_prob(batch.states, batch.actions)


def session_mode_reward(pairwise_rewards):
    """All reward mass moved to the last turn of the session."""
    r = np.asarray(pairwise_rewards, dtype=np.float64)
    out = np.zeros_like(r)
    if len(r):
        out[-1] = r.sum()
    return out


def handcrafted_reward(terminal: bool, success: bool, max_turns: int = 40) -> float:
    if not terminal:
        return -1.0
    return 2.0 * max_turns if success else -float(max_turns)


class EstimatorTrainer:
    """Adam over the joint (g, h) parameter vector with L2 decay."""

    def __init__(self, est: RewardEstimator, lr=1e-4, clip=10.0, weight_decay=1e-5):
        self.est = est
        self.opt = Adam(len(est.params), lr=lr, clip=clip, weight_decay=weight_decay)

    def step(self, grad):
        flat = self.est.params
        self.opt.step(flat, grad)
        self.est.set_params(flat)

