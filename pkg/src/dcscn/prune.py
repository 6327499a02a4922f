"""Adaptive kernel pruning driven by a DDPG agent.

An episode walks the network layer by layer, the continuous action being the
pruning ratio for that layer.  Kernels are ranked by their batch-averaged
feature-independence score and the lowest-ranked fraction is removed; the
readout is re-solved on the training set (kernels are never re-generated).
The terminal reward couples validation accuracy, the IoU trustworthiness
index and the parameter count in MB.

The actor/critic networks are small two-affine-layer perceptrons trained
with manual backprop and plain gradient steps; targets track slowly via
soft updates.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .interpret import independence_coefficients, iou_dataset, layer_feature_stack
from .network import (LayerSpec, LayoutEntry, NetworkModel, _layer_maps,
                      _ReadoutSolver, accuracy, param_count, validate_model)
from .numerics import sigmoid

A_MIN = 0.001  # actions are clamped to [A_MIN, a_max]


@dataclass
class DdpgConfig:
    gamma: float = 0.9
    replay_capacity: int = 2000
    step_size: float = 0.005
    tau: float = 0.01
    batch_size: int = 32
    episodes: int = 400
    noise_start: float = 0.3
    noise_end: float = 0.05
    beta: float = 0.01      # parameter-count weight in the reward
    a_max: float = 0.8      # ceiling on the pruning ratio
    hidden: int = 300

    def validate(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must be in [0,1), got {self.gamma}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must be in (0,1), got {self.tau}")
        if self.replay_capacity < self.batch_size:
            raise ConfigError("replay capacity must be >= batch size")
        if not 0 < self.a_max < 1:
            raise ConfigError(f"a_max must be in (0,1), got {self.a_max}")
        if self.episodes < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("episodes, batch_size and hidden must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.noise_start < 0 or self.noise_end < 0:
            raise ConfigError("noise levels must be >= 0")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray       # normalised 6-vector
    action: float
    reward: float
    next_state: np.ndarray  # zeros on terminal transitions
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer, oldest transitions evicted first."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._items = []
        self._next = 0

    def add(self, transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, n, rng):
        idx = rng.integers(n, len(self._items))
        return [self._items[i] for i in idx]

    def __len__(self):
        return len(self._items)


class Mlp:
    """Two affine layers with tanh between; scalar output head.

    The actor squashes the raw output to the action range outside this
    class; the critic uses it as a linear value head over state (+) action.
    """

    def __init__(self, in_dim, hidden, rng):
        self.w1 = rng.normals(in_dim * hidden).reshape(in_dim, hidden) / math.sqrt(in_dim)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normals(hidden).reshape(hidden, 1) / math.sqrt(hidden)
        self.b2 = np.zeros(1)

    def forward(self, x):
        """x: (B, in_dim) -> (out (B,), cache for backward)."""
        x = np.asarray(x, dtype=np.float64)
        z1 = x @ self.w1 + self.b1
        h = np.tanh(z1)
        out = (h @ self.w2 + self.b2)[:, 0]
        return out, (x, h)

    def backward(self, cache, dout):
        """Gradients of sum(dout * out) w.r.t. parameters and input."""
        x, h = cache
        dout = np.asarray(dout, dtype=np.float64)[:, None]
        grads = {
            "w2": h.T @ dout,
            "b2": dout.sum(axis=0),
        }
        dh = dout @ self.w2.T
        dz1 = dh * (1.0 - h * h)
        grads["w1"] = x.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        dx = dz1 @ self.w1.T
        return grads, dx

    def step(self, grads, lr):
        """One gradient step; negative lr descends, positive ascends."""
        self.w1 += lr * grads["w1"]
        self.b1 += lr * grads["b1"]
        self.w2 += lr * grads["w2"]
        self.b2 += lr * grads["b2"]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self):
        dup = object.__new__(Mlp)
        dup.w1 = self.w1.copy()
        dup.b1 = self.b1.copy()
        dup.w2 = self.w2.copy()
        dup.b2 = self.b2.copy()
        return dup


def _squash(raw, a_max):
    return sigmoid(raw) * a_max


def actor_act(actor, state_vec, sigma, rng, a_max):
    """Deterministic policy action plus exploration noise, clamped to the
    valid ratio range."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    raw, _ = actor.forward(np.asarray(state_vec, dtype=np.float64)[None])
    a = _squash(raw[0], a_max)
    if sigma > 0:
        a = a + sigma * rng.normals(1)[0]
    return float(min(max(a, A_MIN), a_max))


def _batch_arrays(batch):
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    terminal = np.array([t.terminal for t in batch], dtype=np.float64)
    return states, actions, rewards, next_states, terminal


def critic_update(critic, target_actor, target_critic, batch, gamma,
                  step_size, a_max):
    """One descent step on the mean squared TD error; returns the loss.

    Targets: y = R + gamma * Q'(s', mu'(s')), truncated to y = R on
    terminal transitions.
    """
    states, actions, rewards, next_states, terminal = _batch_arrays(batch)
    raw_next, _ = target_actor.forward(next_states)
    next_actions = _squash(raw_next, a_max)
    q_next, _ = target_critic.forward(
        np.concatenate([next_states, next_actions[:, None]], axis=1))
    y = rewards + gamma * q_next * (1.0 - terminal)
    q, cache = critic.forward(
        np.concatenate([states, actions[:, None]], axis=1))
    diff = q - y
    loss = float((diff * diff).mean())
    grads, _ = critic.backward(cache, 2.0 * diff / len(batch))
    critic.step(grads, -step_size)
    return loss


def actor_update(actor, critic, batch, step_size, a_max):
    """One ascent step on mean_t Q(s_t, mu(s_t)); returns the objective."""
    states = np.stack([t.state for t in batch])
    raw, actor_cache = actor.forward(states)
    sig = sigmoid(raw)
    actions = sig * a_max
    q, critic_cache = critic.forward(
        np.concatenate([states, actions[:, None]], axis=1))
    objective = float(q.mean())
    _, dinput = critic.backward(critic_cache, np.full(len(q), 1.0 / len(q)))
    dact = dinput[:, -1]                      # dQ/da per sample
    draw = dact * a_max * sig * (1.0 - sig)   # chain through the squash
    grads, _ = actor.backward(actor_cache, draw)
    actor.step(grads, step_size)
    return objective


def soft_update(target, online, tau):
    """theta' <- tau * theta + (1 - tau) * theta' on every parameter."""
    if not 0 < tau <= 1:
        raise ConfigError(f"tau must be in (0,1], got {tau}")
    for pt, po in zip(target.params(), online.params()):
        pt[...] = tau * po + (1.0 - tau) * pt


def rank_kernels(model, eval_batch, layer):
    """Kernel indices of a layer (1-based) ordered by batch-averaged
    independence score, lowest first; ties break by kernel index."""
    fc_sum = None
    for s in eval_batch.samples:
        stack = layer_feature_stack(model, s.image, layer)
        values = independence_coefficients(stack).values
        fc_sum = values if fc_sum is None else fc_sum + values
    fc_mean = fc_sum / len(eval_batch.samples)
    return list(np.lexsort((np.arange(len(fc_mean)), fc_mean)))


def _prune_counts(model, ratios):
    counts = []
    for layer, ratio in zip(model.layers, ratios):
        c = len(layer.kernels)
        counts.append(min(int(math.floor(ratio * c)), c - 1))
    return tuple(counts)


def _apply_prune_counts(model, counts, train, orders):
    """Rebuild the model with `counts[l]` lowest-ranked kernels removed per
    layer and the readout re-solved on the training set."""
    new_layers = []
    for layer, count, order in zip(model.layers, counts, orders):
        drop = set(order[:count])
        kept = [k for j, k in enumerate(layer.kernels) if j not in drop]
        new_layers.append(LayerSpec(kernels=kept, pool_after=layer.pool_after))
    images = train.image_stack()
    n = images.shape[0]
    solver = _ReadoutSolver(train.one_hot(), model.ridge)
    layout, offset = [], 0
    cur = images
    for li, layer in enumerate(new_layers):
        cur = _layer_maps(cur, layer)
        for j in range(cur.shape[3]):
            block = cur[:, :, :, j].reshape(n, -1)
            solver.append(block)
            layout.append(LayoutEntry(layer=li, kernel=j, offset=offset,
                                      length=block.shape[1]))
            offset += block.shape[1]
    solver.solve()
    pruned = NetworkModel(
        layers=new_layers, readout=solver.readout(), layout=layout,
        input_shape=model.input_shape, class_names=model.class_names,
        ridge=model.ridge)
    validate_model(pruned)
    return pruned


def apply_pruning(model, ratios, train, eval_batch=None):
    """Prune floor(ratio * C_l) lowest-independence kernels per layer
    (always keeping at least one) and re-solve the readout.

    Rankings are computed on `eval_batch` (the training set by default) of
    the unpruned model.
    """
    ratios = list(ratios)
    if len(ratios) != len(model.layers):
        raise ConfigError(
            f"expected {len(model.layers)} ratios, got {len(ratios)}")
    for ratio in ratios:
        if not 0 <= ratio < 1:
            raise ConfigError(f"pruning ratio {ratio} outside [0, 1)")
    batch = eval_batch if eval_batch is not None else train
    orders = [rank_kernels(model, batch, l + 1) for l in range(len(model.layers))]
    return _apply_prune_counts(model, _prune_counts(model, ratios), train, orders)


def reward_components(model_pruned, val, beta, theta=0.5):
    """(reward, acc, iou, pa_mb) with reward = ACC + IoU - beta * PA_MB.

    IoU is evaluated with the final layer's CAM, so the validation set must
    be fully annotated.
    """
    acc = accuracy(model_pruned, val)
    iou_val = iou_dataset(model_pruned, val, layer=None, theta=theta)
    _, pa_mb = param_count(model_pruned)
    return acc + iou_val - beta * pa_mb, acc, iou_val, pa_mb


def reward(model_pruned, val, beta, theta=0.5):
    """Joint reward of a pruned model on an annotated validation set."""
    return reward_components(model_pruned, val, beta, theta)[0]


class _StateBounds:
    """Per-field normalisation bounds frozen from the unpruned model."""

    def __init__(self, model):
        self.n_layers = len(model.layers)
        counts = [len(layer.kernels) for layer in model.layers]
        self.c_bound = max(counts + [model.input_shape[2]])
        h, w = model.input_shape[:2]
        self.dims = []  # input spatial dims of each layer
        for layer in model.layers:
            self.dims.append((h, w))
            k = layer.kernels[0].k
            h, w = h - k + 1, w - k + 1
            if layer.pool_after:
                h, w = h // 2, w // 2
        self.h0, self.w0 = self.dims[0]

    def vector(self, model, layer_no, a_prev):
        """Normalised state for layer `layer_no` (1-based)."""
        layer = model.layers[layer_no - 1]
        c_prev = (model.input_shape[2] if layer_no == 1
                  else len(model.layers[layer_no - 2].kernels))
        h, w = self.dims[layer_no - 1]
        return np.array([
            layer_no / self.n_layers,
            len(layer.kernels) / self.c_bound,
            c_prev / self.c_bound,
            h / self.h0,
            w / self.w0,
            a_prev,
        ])


def train_pruner(model, train, val, cfg, rng, theta=0.5, eval_batch=None):
    """Run DDPG episodes over per-layer pruning ratios.

    Returns (best pruned model, curve) where curve rows are
    (episode, reward, acc, iou, pa_mb).  The best model is tracked by
    reward, ties broken toward the smaller parameter count.  Identical
    prune-count vectors reuse their evaluated reward (the environment is
    deterministic given the fixed rankings).
    """
    cfg.validate()
    n_layers = len(model.layers)
    if n_layers == 0:
        raise ConfigError("cannot prune a model with no layers")
    batch_ds = eval_batch if eval_batch is not None else train
    orders = [rank_kernels(model, batch_ds, l + 1) for l in range(n_layers)]
    bounds = _StateBounds(model)

    state_dim = 6
    actor = Mlp(state_dim, cfg.hidden, rng)
    critic = Mlp(state_dim + 1, cfg.hidden, rng)
    target_actor = actor.copy()
    target_critic = critic.copy()
    replay = ReplayBuffer(cfg.replay_capacity)

    memo = {}
    best = None  # (reward, -pa_mb, model)
    curve = []
    for ep in range(cfg.episodes):
        frac = ep / (cfg.episodes - 1) if cfg.episodes > 1 else 0.0
        sigma = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac
        states, actions = [], []
        a_prev = 0.0
        for layer_no in range(1, n_layers + 1):
            s = bounds.vector(model, layer_no, a_prev)
            a = actor_act(actor, s, sigma, rng, cfg.a_max)
            states.append(s)
            actions.append(a)
            a_prev = a
        counts = _prune_counts(model, actions)
        if counts in memo:
            r, acc, iou_val, pa_mb = memo[counts]
            pruned = None
        else:
            pruned = _apply_prune_counts(model, counts, train, orders)
            r, acc, iou_val, pa_mb = reward_components(
                pruned, val, cfg.beta, theta)
            memo[counts] = (r, acc, iou_val, pa_mb)
        if pruned is not None and (
                best is None or (r, -pa_mb) > (best[0], best[1])):
            best = (r, -pa_mb, pruned)
        for i in range(n_layers):
            terminal = i == n_layers - 1
            replay.add(Transition(
                state=states[i], action=actions[i],
                reward=r if terminal else 0.0,
                next_state=np.zeros(state_dim) if terminal else states[i + 1],
                terminal=terminal))
            if len(replay) >= cfg.batch_size:
                batch = replay.sample(cfg.batch_size, rng)
                critic_update(critic, target_actor, target_critic, batch,
                              cfg.gamma, cfg.step_size, cfg.a_max)
                actor_update(actor, critic, batch, cfg.step_size, cfg.a_max)
                soft_update(target_actor, actor, cfg.tau)
                soft_update(target_critic, critic, cfg.tau)
        curve.append((ep, r, acc, iou_val, pa_mb))
    return best[2], curve
