"""Local deep Q-learning agent that picks an MTD technique per device state.

Learning is online one-step TD: every transition triggers one Adam update of
the selected action's Q-value towards ``r`` (terminal) or
``r + gamma * max_a Q(s', a)``. Episodes end on the first positive reward or
after ``max_steps_per_episode`` selections.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import textio
from .anomaly import AdModel, Verdict, detect, reward_of
from .environment import (
    ACTIONS,
    MALWARE,
    BehaviorClass,
    Environment,
    Fingerprint,
    MtdAction,
    effective_mask,
    effective_set,
    spawn_attack,
)
from .errors import ConfigurationError, NumericError
from .numkit import (
    Activation,
    AdamState,
    MlpModel,
    adam_step,
    dense_stack,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_predict,
    RMSE_EPS,
)

N_ACTIONS = len(ACTIONS)


@dataclass
class AgentHyper:
    q_dims: tuple = (128, 64)
    activation: Activation = Activation.SELU
    dropout: float = 0.0
    gamma: float = 0.5
    learning_rate: float = 1e-4
    l2: float = 1e-2
    epsilon_start: float = 1.0
    episodes_per_client: int = 3000
    epsilon_dec: Optional[float] = None  # None -> 0.8 / episodes_per_client
    epsilon_end: float = 0.01
    max_steps_per_episode: int = 5
    # ablation switches, off by default
    replay_capacity: int = 0
    replay_batch: int = 1
    target_sync_every: int = 0

    def __post_init__(self):
        self.q_dims = tuple(int(d) for d in self.q_dims)
        self.activation = Activation(self.activation)
        if self.epsilon_dec is None:
            self.epsilon_dec = 0.8 / self.episodes_per_client
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.epsilon_end > self.epsilon_start:
            raise ConfigurationError("epsilon_end must not exceed epsilon_start")
        if self.epsilon_dec < 0:
            raise ConfigurationError("epsilon_dec must be >= 0")
        if not 0.0 <= self.epsilon_end <= 1.0 or not 0.0 <= self.epsilon_start <= 1.0:
            raise ConfigurationError("epsilon bounds must lie in [0, 1]")
        if self.dropout != 0.0:
            raise ConfigurationError("dropout is not supported (only 0 is implemented)")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigurationError("learning_rate must be > 0 and l2 >= 0")
        if self.max_steps_per_episode < 1:
            raise ConfigurationError("max_steps_per_episode must be >= 1")
        if self.episodes_per_client < 1:
            raise ConfigurationError("episodes_per_client must be >= 1")

    def layer_specs(self, feature_dim: int):
        return dense_stack([feature_dim, *self.q_dims, N_ACTIONS], self.activation)


@dataclass
class Transition:
    state: Fingerprint
    action: MtdAction
    reward: int
    next_state: Fingerprint
    terminal: bool


@dataclass
class EpisodeOutcome:
    malware: BehaviorClass
    steps: int
    mitigated: bool
    total_return: float
    first_action_effective: bool
    rewards: list = field(default_factory=list)
    losses: list = field(default_factory=list)


class Agent:
    def __init__(self, q_net: MlpModel, hyper: AgentHyper, optimizer: AdamState | None = None):
        if q_net.output_dim != N_ACTIONS:
            raise ConfigurationError(f"Q-network must have {N_ACTIONS} outputs")
        self.q_net = q_net
        self.hyper = hyper
        self.optimizer = optimizer or AdamState.for_model(
            q_net, learning_rate=hyper.learning_rate, l2_coefficient=hyper.l2
        )
        self.episodes_done = 0
        self.replay: deque | None = deque(maxlen=hyper.replay_capacity) if hyper.replay_capacity else None
        self.target_net: MlpModel | None = q_net.copy() if hyper.target_sync_every else None
        self.updates = 0

    @classmethod
    def create(cls, feature_dim: int, hyper: AgentHyper, seed: int) -> "Agent":
        return cls(mlp_init(hyper.layer_specs(feature_dim), seed), hyper)

    def q_values(self, states: np.ndarray) -> np.ndarray:
        return mlp_predict(self.q_net, states)

    def greedy(self, states: np.ndarray) -> np.ndarray:
        """Greedy action indices; ``argmax`` keeps the lowest index on ties."""
        return np.argmax(self.q_values(states), axis=-1)

    def load_weights(self, flat: np.ndarray) -> None:
        self.q_net.set_params(flat)
        if self.target_net is not None:
            self.target_net.set_params(flat)

    def save(self, path) -> None:
        net = self.q_net
        opt = self.optimizer
        textio.write_records(path, "agent", {
            "dims": [net.specs[0].input_dim] + [s.output_dim for s in net.specs],
            "activation": self.hyper.activation.value,
            "gamma": float(self.hyper.gamma),
            "episodes_done": self.episodes_done,
            "adam_step": opt.step_count,
            "params": net.params,
            "adam_m": opt.first_moment,
            "adam_v": opt.second_moment,
        })

    @classmethod
    def load(cls, path, hyper: AgentHyper | None = None) -> "Agent":
        r = textio.read_records(path, "agent")
        dims = textio.ints(r, "dims")
        if hyper is None:
            hyper = AgentHyper(q_dims=tuple(dims[1:-1]), activation=textio.scalar(r, "activation", str),
                               gamma=textio.scalar(r, "gamma"))
        net = MlpModel(hyper.layer_specs(dims[0]), textio.floats(r, "params"))
        agent = cls(net, hyper)
        agent.optimizer.step_count = textio.scalar(r, "adam_step", int)
        agent.optimizer.first_moment = textio.floats(r, "adam_m")
        agent.optimizer.second_moment = textio.floats(r, "adam_v")
        agent.episodes_done = textio.scalar(r, "episodes_done", int)
        return agent


def epsilon_at(hyper: AgentHyper, episodes_done: int) -> float:
    return max(hyper.epsilon_end, hyper.epsilon_start - hyper.epsilon_dec * episodes_done)


def select_action(agent: Agent, state, epsilon: float, rng: np.random.Generator) -> MtdAction:
    values = state.values if isinstance(state, Fingerprint) else state
    if rng.random() < epsilon:
        return MtdAction(int(rng.integers(N_ACTIONS)))
    return MtdAction(int(np.argmax(agent.q_values(values))))


def td_target(agent: Agent, t: Transition) -> float:
    if t.terminal:
        return float(t.reward)
    net = agent.target_net if agent.target_net is not None else agent.q_net
    q_next = mlp_predict(net, t.next_state.values)
    if not np.all(np.isfinite(q_next)):
        raise NumericError("non-finite Q-values for the next state")
    return float(t.reward) + agent.hyper.gamma * float(q_next.max())


def td_update(agent: Agent, t: Transition, hyper: AgentHyper | None = None) -> float:
    """One RMSE-loss Adam step on the selected action's Q-value; returns the loss."""
    y = td_target(agent, t)
    loss = _fit_single(agent, t.state.values, int(t.action), y)
    if agent.replay is not None:
        agent.replay.append(t)
    return loss


def _fit_single(agent: Agent, x: np.ndarray, action: int, target: float) -> float:
    q, cache = mlp_forward(agent.q_net, x)
    if not np.isfinite(q[action]):
        raise NumericError("non-finite Q-value")
    diff = q[action] - target
    loss = math.sqrt(diff * diff + RMSE_EPS)
    grad_out = np.zeros(N_ACTIONS)
    grad_out[action] = diff / loss
    adam_step(agent.optimizer, agent.q_net, mlp_backward(agent.q_net, cache, grad_out))
    agent.updates += 1
    if agent.target_net is not None and agent.updates % agent.hyper.target_sync_every == 0:
        agent.target_net.set_params(agent.q_net.params)
    return loss


def _replay(agent: Agent, rng: np.random.Generator) -> None:
    buf = agent.replay
    if buf is None or len(buf) < agent.hyper.replay_batch:
        return
    for i in rng.choice(len(buf), size=agent.hyper.replay_batch, replace=False):
        t = buf[int(i)]
        _fit_single(agent, t.state.values, int(t.action), td_target(agent, t))


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    total, scale = 0.0, 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


@dataclass
class ClientHooks:
    """Adversary interception points on a client's training path."""

    sample: Optional[Callable[[Fingerprint], Fingerprint]] = None
    verdict: Optional[Callable[[Verdict], Verdict]] = None


def run_episode(agent: Agent, env: Environment, ad: AdModel, allowed_malware, rng: np.random.Generator,
                hooks: ClientHooks | None = None) -> EpisodeOutcome | None:
    """Spawn one attack and let the agent respond until mitigation or the step cap.

    Returns None when the detector misses the initial infection (no trigger).
    """
    hyper = agent.hyper
    hooks = hooks or ClientHooks()
    poison = hooks.sample or (lambda f: f)
    judge = hooks.verdict or (lambda v: v)

    malware = spawn_attack(allowed_malware, rng)
    state = poison(env.sample(malware, rng))
    if detect(ad, state).is_normal:
        return None
    epsilon = epsilon_at(hyper, agent.episodes_done)
    current = malware
    rewards, losses = [], []
    first_effective = False
    for step in range(hyper.max_steps_per_episode):
        action = select_action(agent, state, epsilon, rng)
        if step == 0:
            first_effective = action in effective_set(malware)
        # a clean device stays clean whatever MTD is deployed
        nxt_class = env.afterstate(current, action, rng) if current.is_malware else BehaviorClass.NORMAL
        nxt = poison(env.sample(nxt_class, rng))
        r = reward_of(judge(detect(ad, nxt)))
        terminal = r == 1 or step == hyper.max_steps_per_episode - 1
        losses.append(td_update(agent, Transition(state, action, r, nxt, terminal)))
        _replay(agent, rng)
        rewards.append(r)
        state, current = nxt, nxt_class
        if terminal:
            break
    agent.episodes_done += 1
    return EpisodeOutcome(
        malware=malware,
        steps=len(rewards),
        mitigated=rewards[-1] == 1,
        total_return=discounted_return(rewards, hyper.gamma),
        first_action_effective=first_effective,
        rewards=rewards,
        losses=losses,
    )


def accuracy_on(q_net: MlpModel, eval_states: dict) -> dict:
    """Fraction of states per malware whose greedy action is effective."""
    out = {}
    for m, states in eval_states.items():
        actions = np.argmax(mlp_predict(q_net, states), axis=-1)
        out[m] = float(np.mean(effective_mask(m)[actions]))
    return out


def greedy_accuracy(agent: Agent, env: Environment, malware_set, n_per_class: int,
                    rng: np.random.Generator) -> dict:
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be >= 1")
    states = {BehaviorClass(m): env.sample_many(m, n_per_class, rng) for m in malware_set}
    return accuracy_on(agent.q_net, states)


def mean_accuracy(acc: dict) -> float:
    return float(np.mean([acc[m] for m in MALWARE if m in acc]))
