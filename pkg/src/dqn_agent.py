"""Deep Q-network attacker written directly in numpy.

Network: 272 -> 128 (ReLU) -> 64 (ReLU) -> 12, one Q-value per action. Each
layer computes ``a @ W + b`` with ``W`` shaped (fan_in, fan_out). Training is
plain SGD on the mean squared Bellman error against a periodically synced
target network, with uniform replay.

Checkpoint layout ("OBFQ1", little-endian)::

    magic      5 bytes  b"OBFQ1"
    version    u8       1
    n_layers   u32
    dims       (n_layers + 1) * u32
    per layer  W as fan_in * fan_out f64 (row-major), then b as fan_out f64
"""

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.argument_parser import logger
from src.attack_env import AttackEnv, Sample
from src.errors import BadMagic, BufferTooSmall, CheckpointError, DegenerateCorpus, SampleNotDetected, VersionMismatch
from src.features import FEATURE_DIM
from src.mutation_actions import ACTION_COUNT

CHECKPOINT_MAGIC = b"OBFQ1"
CHECKPOINT_VERSION = 1

DEFAULT_HIDDEN = (128, 64)


@dataclass(eq=False)
class QNetwork:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_network(
    rng: np.random.Generator,
    dims: Sequence[int] = (FEATURE_DIM,) + DEFAULT_HIDDEN + (ACTION_COUNT,),
) -> QNetwork:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return QNetwork(weights, biases)


def _forward(net: QNetwork, states: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Pre-activations and activations of every layer (activations[0] is the input)."""
    activations = [states]
    pre: List[np.ndarray] = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = activations[-1] @ w + b
        pre.append(z)
        activations.append(z if i == last else np.maximum(z, 0.0))
    return pre, activations


def q_forward(net: QNetwork, state: np.ndarray) -> np.ndarray:
    """Q-values for one state (shape (12,)) or a batch (shape (n, 12))."""
    return _forward(net, np.asarray(state, dtype=np.float64))[1][-1]


def _masked(q: np.ndarray, allowed: Optional[Sequence[int]]) -> np.ndarray:
    if allowed is None:
        return q
    out = np.full_like(q, -np.inf)
    index = np.asarray(allowed, dtype=int)
    out[..., index] = q[..., index]
    return out


def select_action(
    net: QNetwork,
    state: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    allowed: Optional[Sequence[int]] = None,
) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        if allowed is None:
            return int(rng.integers(ACTION_COUNT))
        return int(allowed[int(rng.integers(len(allowed)))])
    return int(np.argmax(_masked(q_forward(net, state), allowed)))


class Transition(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer; once full, each insertion evicts the oldest transition."""

    def __init__(self, capacity: int = 10_000, state_dim: int = FEATURE_DIM) -> None:
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.insertions = 0

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def add(self, transition: Transition) -> None:
        if not 0 <= transition.action < ACTION_COUNT:
            raise ValueError(f"action index {transition.action} out of range")
        slot = self.insertions % self.capacity
        self.states[slot] = transition.state
        self.actions[slot] = transition.action
        self.rewards[slot] = transition.reward
        self.next_states[slot] = transition.next_state
        self.terminals[slot] = transition.terminal
        self.insertions += 1

    def latest(self) -> Transition:
        slot = (self.insertions - 1) % self.capacity
        return Transition(
            self.states[slot], int(self.actions[slot]), float(self.rewards[slot]),
            self.next_states[slot], bool(self.terminals[slot]),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        index = rng.integers(0, len(self), size=batch_size)
        return Batch(
            self.states[index], self.actions[index], self.rewards[index],
            self.next_states[index], self.terminals[index],
        )


@dataclass(frozen=True)
class TrainConfig:
    """DQN hyperparameters.

    ``allowed_actions`` restricts acting and bootstrapping to a subset of action
    indices; the network stays 12 wide. ``warmup`` defaults to ``batch_size``.
    """

    gamma: float = 0.95
    learning_rate: float = 1e-3
    batch_size: int = 64
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 2000
    target_sync_interval: int = 250
    buffer_capacity: int = 10_000
    episodes: int = 2000
    seed: int = 0
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    double_dqn: bool = False
    allowed_actions: Optional[Tuple[int, ...]] = None
    warmup: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"epsilon must lie in [0, 1], got {eps}")

    @property
    def warmup_size(self) -> int:
        return self.batch_size if self.warmup is None else max(self.warmup, self.batch_size)


def epsilon_at(episode: int, config: TrainConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end`` over ``epsilon_decay_episodes``."""
    if config.epsilon_decay_episodes <= 0:
        return config.epsilon_end
    fraction = min(1.0, episode / config.epsilon_decay_episodes)
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * fraction


def bellman_targets(net: QNetwork, target_net: QNetwork, batch: Batch, config: TrainConfig) -> np.ndarray:
    """y = r + gamma * Q_target(s', a*) on non-terminal transitions, y = r on terminal ones.

    a* is the target net's argmax, or the online net's argmax with ``double_dqn``.
    """
    q_next = _masked(q_forward(target_net, batch.next_states), config.allowed_actions)
    if config.double_dqn:
        chosen = np.argmax(_masked(q_forward(net, batch.next_states), config.allowed_actions), axis=1)
        bootstrap = q_next[np.arange(len(chosen)), chosen]
    else:
        bootstrap = q_next.max(axis=1)
    return batch.rewards + config.gamma * np.where(batch.terminals, 0.0, bootstrap)


class Gradients(NamedTuple):
    weights: List[np.ndarray]
    biases: List[np.ndarray]


def loss_and_gradients(
    net: QNetwork, target_net: QNetwork, batch: Batch, config: TrainConfig
) -> Tuple[float, Gradients]:
    """Mean squared Bellman error over ``batch`` and its analytic gradient w.r.t. ``net``."""
    targets = bellman_targets(net, target_net, batch, config)
    pre, activations = _forward(net, batch.states)
    rows = np.arange(len(batch.actions))
    diff = activations[-1][rows, batch.actions] - targets
    n = len(diff)
    loss = float(np.mean(diff ** 2))

    delta = np.zeros_like(activations[-1])
    delta[rows, batch.actions] = 2.0 * diff / n
    grad_w: List[np.ndarray] = [np.zeros(0)] * len(net.weights)
    grad_b: List[np.ndarray] = [np.zeros(0)] * len(net.biases)
    for layer in range(len(net.weights) - 1, -1, -1):
        grad_w[layer] = activations[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ net.weights[layer].T) * (pre[layer - 1] > 0.0)
    return loss, Gradients(grad_w, grad_b)


def train_step(
    net: QNetwork,
    target_net: QNetwork,
    buffer: ReplayBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One SGD update of ``net`` on a uniform replay batch; returns the pre-update loss.

    Raises:
        BufferTooSmall: fewer stored transitions than ``config.batch_size``
    """
    if len(buffer) < config.batch_size:
        raise BufferTooSmall(f"replay holds {len(buffer)} transitions, batch needs {config.batch_size}")
    loss, grads = loss_and_gradients(net, target_net, buffer.sample(config.batch_size, rng), config)
    for w, gw in zip(net.weights, grads.weights):
        w -= config.learning_rate * gw
    for b, gb in zip(net.biases, grads.biases):
        b -= config.learning_rate * gb
    return loss


def sync_target(net: QNetwork, target_net: QNetwork) -> QNetwork:
    for dst, src in zip(target_net.parameters(), net.parameters()):
        np.copyto(dst, src)
    return target_net


class TrainingResult(NamedTuple):
    net: QNetwork
    log: pd.DataFrame


TRAINING_LOG_COLUMNS = ["episode", "evaded", "steps", "epsilon", "mean_loss"]


def attackable_samples(env: AttackEnv, corpus: Sequence[Sample], seed: int) -> List[Sample]:
    """Samples the environment's detector flags at reset."""
    kept = []
    for index, sample in enumerate(corpus):
        try:
            env.reset(sample.data, seed=seed ^ index, sample_id=sample.sample_id, category=sample.category)
        except SampleNotDetected:
            logger.debug(f"Skipping {sample.sample_id}: not detected")
            continue
        kept.append(sample)
    return kept


def train_agent(
    env_factory: Callable[[], AttackEnv],
    corpus: Sequence[Sample],
    config: TrainConfig = TrainConfig(),
    net: Optional[QNetwork] = None,
) -> TrainingResult:
    """Train a DQN on ``corpus`` with one environment from ``env_factory``.

    Episodes visit the attackable samples round-robin. One train step runs per
    environment step once the replay holds ``warmup_size`` transitions.

    Raises:
        DegenerateCorpus: the corpus is empty or no sample is flagged at reset
    """
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = init_network(rng, (FEATURE_DIM,) + tuple(config.hidden) + (ACTION_COUNT,))
    if config.episodes == 0:
        return TrainingResult(net, pd.DataFrame(columns=TRAINING_LOG_COLUMNS))
    if not corpus:
        raise DegenerateCorpus("training corpus is empty")

    env = env_factory()
    samples = attackable_samples(env, corpus, config.seed)
    if not samples:
        raise DegenerateCorpus("no training sample is detected by the environment's detector")
    logger.info(f"Training DQN for {config.episodes} episodes on {len(samples)} attackable samples")

    target_net = net.copy()
    buffer = ReplayBuffer(config.buffer_capacity)
    allowed = config.allowed_actions
    train_steps = 0
    rows = []
    for episode in range(config.episodes):
        sample = samples[episode % len(samples)]
        epsilon = epsilon_at(episode, config)
        state = env.reset(sample.data, seed=config.seed ^ episode, sample_id=sample.sample_id, category=sample.category)
        losses = []
        while not env.done:
            action = select_action(net, state.observation, epsilon, rng, allowed)
            result = env.step(action)
            buffer.add(Transition(state.observation, action, result.reward, result.state.observation, result.done))
            state = result.state
            if len(buffer) >= config.warmup_size:
                losses.append(train_step(net, target_net, buffer, config, rng))
                train_steps += 1
                if train_steps % config.target_sync_interval == 0:
                    sync_target(net, target_net)
        trace = env.episode_trace()
        rows.append({
            "episode": episode,
            "evaded": trace.evaded,
            "steps": len(trace.actions),
            "epsilon": epsilon,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
        })
        if (episode + 1) % 100 == 0:
            recent = rows[-100:]
            logger.info(
                f"episode {episode + 1}/{config.episodes}: evasion {np.mean([r['evaded'] for r in recent]):.2f}, "
                f"epsilon {epsilon:.3f}"
            )
    return TrainingResult(net, pd.DataFrame(rows, columns=TRAINING_LOG_COLUMNS))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def network_to_bytes(net: QNetwork) -> bytes:
    buf = io.BytesIO()
    dims = net.dims
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(net.weights)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def network_from_bytes(data: bytes) -> QNetwork:
    """Inverse of ``network_to_bytes``.

    Raises:
        BadMagic: not an OBFQ1 checkpoint
        VersionMismatch: unsupported version
        CheckpointError: truncated or inconsistent payload
    """
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagic("not a Q-network checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 5:
        raise VersionMismatch("Q-network checkpoint truncated before its header")
    version, n_layers = struct.unpack_from("<BI", data, offset)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"Q-network checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset += 5
    if n_layers == 0 or n_layers > 64 or len(data) < offset + 4 * (n_layers + 1):
        raise CheckpointError("Q-network checkpoint has a corrupt layer table")
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, offset)
    offset += 4 * (n_layers + 1)

    expected = offset + 8 * sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    if len(data) != expected:
        raise CheckpointError(f"Q-network checkpoint is {len(data)} bytes, expected {expected}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return QNetwork(weights, biases)


def save_checkpoint(net: QNetwork, path: Union[str, Path]) -> None:
    Path(path).write_bytes(network_to_bytes(net))
    logger.info(f"Saved Q-network {net.dims} to {path}")


def load_checkpoint(path: Union[str, Path]) -> QNetwork:
    return network_from_bytes(Path(path).read_bytes())
