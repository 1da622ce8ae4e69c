"""Soft actor-critic over per-frame latents.

The encoder maps each observation frame to a latent vector; the actor and
critics see the concatenation of the last ``frame_stack`` latents.  The
encoder is trained by the critic loss (and optionally the CMID adversarial
loss), never by the actor loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import IMAGE_SIZE
from .errors import ConfigurationError, NonFiniteError, check_finite

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))


@dataclass
class AgentConfig:
    latent_dim: int = 56
    hidden_dim: int = 1024
    encoder_hidden: int = 256
    frame_stack: int = 3
    batch_size: int = 128
    discount: float = 0.99
    lr: float = 1e-3
    alpha_lr: float = 1e-4
    init_temperature: float = 0.1
    critic_tau: float = 0.01
    encoder_tau: float = 0.05
    actor_update_freq: int = 2
    target_update_freq: int = 2
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    svea_alpha: float = 0.5
    svea_beta: float = 0.5
    augment: bool = True
    image_pad: int = 4
    init_steps: int = 1000
    buffer_capacity: int = 100_000

    def validate(self):
        if self.frame_stack < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigurationError("frame_stack, batch_size and latent_dim must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigurationError(f"discount must lie in [0, 1], got {self.discount}")
        if self.log_std_min >= self.log_std_max:
            raise ConfigurationError("log_std_min must be below log_std_max")
        if self.init_temperature <= 0:
            raise ConfigurationError("init_temperature must be positive")


# ---------------------------------------------------------------- replay


@dataclass
class Batch:
    """Arrays for a sampled minibatch.

    ``obs_stack[:, -1]`` is o_t and earlier entries are the preceding frames
    (the episode's first frame repeated at episode start).  ``prev_obs[:, j]``
    and ``prev_action[:, j]`` hold o_{t-1-j}, a_{t-1-j}; rows whose episode is
    too short for the requested history have ``history_valid`` False.
    """

    obs_stack: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    not_done: np.ndarray
    prev_obs: np.ndarray
    prev_action: np.ndarray
    history_valid: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    prev_episode: np.ndarray
    indices: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.reward)

    def subset(self, mask):
        return Batch(**{k: (v[mask] if isinstance(v, np.ndarray) else v)
                        for k, v in self.__dict__.items()})


class ReplayBuffer:
    """Ring buffer of single-step transitions kept in insertion order.

    Consecutive entries of one episode sit at consecutive ring indices, so
    previous frames and actions are recovered by stepping backwards and
    checking the episode id and step index.
    """

    def __init__(self, obs_dim, action_dim, capacity=100_000):
        if capacity < 1:
            raise ConfigurationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.step = np.zeros(capacity, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, terminal, episode, step):
        i = self.ptr
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = terminal
        self.episode[i] = episode
        self.step[i] = step
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _back(self, idx, d):
        """Ring index ``d`` entries before ``idx`` and whether it is the same episode."""
        j = (idx - d) % self.capacity
        ok = (self.episode[j] == self.episode[idx]) & (self.step[j] == self.step[idx] - d)
        if self.size < self.capacity:
            ok &= idx - d >= 0
        return j, ok

    def _valid(self, idx, stack):
        ok = np.ones(len(idx), dtype=bool)
        for d in range(1, stack):
            need = np.minimum(self.step[idx], d)
            j, same = self._back(idx, need)
            ok &= same | (need == 0)
        return ok

    def sample(self, batch_size, rng, stack=3, history=1):
        if self.size == 0:
            raise ConfigurationError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        bad = ~self._valid(idx, stack)
        while bad.any():
            idx[bad] = rng.integers(0, self.size, size=int(bad.sum()))
            bad = ~self._valid(idx, stack)

        frames = []
        for d in range(stack - 1, 0, -1):
            j, _ = self._back(idx, np.minimum(self.step[idx], d))
            frames.append(self.obs[j])
        frames.append(self.obs[idx])
        obs_stack = np.stack(frames, axis=1)

        b = len(idx)
        prev_obs = np.zeros((b, history, self.obs.shape[1]))
        prev_action = np.zeros((b, history, self.action.shape[1]))
        prev_episode = np.full((b, history), -1, dtype=np.int64)
        valid = self.step[idx] >= history
        for d in range(1, history + 1):
            j, same = self._back(idx, d)
            same &= valid
            prev_obs[same, d - 1] = self.obs[j[same]]
            prev_action[same, d - 1] = self.action[j[same]]
            prev_episode[same, d - 1] = self.episode[j[same]]
            valid &= same
        return Batch(
            obs_stack=obs_stack,
            action=self.action[idx].copy(),
            reward=self.reward[idx].copy(),
            next_obs=self.next_obs[idx].copy(),
            not_done=(~self.terminal[idx]).astype(float),
            prev_obs=prev_obs,
            prev_action=prev_action,
            history_valid=valid,
            episode=self.episode[idx].copy(),
            step=self.step[idx].copy(),
            prev_episode=prev_episode,
            indices=idx,
        )


# ---------------------------------------------------------- augmentation


def shift_image(flat, dx, dy, pad=4):
    """Replicate-pad a flattened 16x16x3 image by ``pad`` and crop it back
    displaced by (dx, dy) pixels, each in [-pad, pad]."""
    img = flat.reshape(IMAGE_SIZE, IMAGE_SIZE, 3)
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    y0, x0 = pad + dy, pad + dx
    return padded[y0:y0 + IMAGE_SIZE, x0:x0 + IMAGE_SIZE].reshape(-1)


def random_shift_augment(obs, rng, pad=4, mode="image16"):
    """Random-shift augmentation.

    ``obs`` is ``(B, D)`` or ``(B, S, D)``; one offset is drawn per row and
    shared across that row's stacked frames.  Factor-vector observations are
    returned unchanged.
    """
    if mode != "image16":
        return obs
    obs = np.asarray(obs)
    lead = obs.shape[0]
    offsets = rng.integers(-pad, pad + 1, size=(lead, 2))
    out = np.empty_like(obs)
    for i in range(lead):
        dx, dy = offsets[i]
        if obs.ndim == 2:
            out[i] = shift_image(obs[i], dx, dy, pad)
        else:
            for s in range(obs.shape[1]):
                out[i, s] = shift_image(obs[i, s], dx, dy, pad)
    return out


# ----------------------------------------------------------------- policy


def bounded_log_std(raw, lo, hi):
    """Map an unbounded head output into [lo, hi] through a tanh."""
    return nn.tanh(raw) * (0.5 * (hi - lo)) + (lo + 0.5 * (hi - lo))


def log_tanh_jacobian(u):
    """log(1 - tanh(u)^2), computed stably."""
    return (nn.softplus(u * -2.0) * -1.0 - u + LOG_2) * 2.0


def squashed_gaussian(mu, log_std, noise):
    """Reparameterised tanh-Gaussian sample.

    Returns ``(action, log_prob)`` with ``log_prob`` summed over action dims.
    """
    std = nn.exp(log_std)
    u = mu + std * noise
    action = nn.tanh(u)
    gauss = (nn.Tensor(-0.5 * noise ** 2 - 0.5 * LOG_2PI) - log_std).sum(axis=-1)
    logp = gauss - log_tanh_jacobian(u).sum(axis=-1)
    return action, logp


def temperature_loss(log_alpha, logp, target_entropy):
    """mean(alpha * (-logp - target_entropy)), logp treated as a constant."""
    logp = np.asarray(logp.data if isinstance(logp, nn.Tensor) else logp)
    return (nn.exp(log_alpha) * nn.Tensor(-logp - target_entropy)).mean()


def critic_targets(reward, not_done, q1_next, q2_next, logp_next, temperature, discount):
    """r + discount * not_done * (min(Q1', Q2') - temperature * logp')."""
    v_next = np.minimum(q1_next, q2_next) - temperature * logp_next
    return reward + discount * not_done * v_next


class SacAgent:
    """Encoder, actor, twin critics and their target copies."""

    def __init__(self, obs_dim, action_dim, config=None, rng=None, obs_mode="factor"):
        self.config = config or AgentConfig()
        self.config.validate()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.obs_mode = obs_mode
        n, h = cfg.latent_dim, cfg.hidden_dim
        stack_dim = cfg.frame_stack * n

        self.encoder = nn.Mlp([obs_dim, cfg.encoder_hidden, n], ["relu", "linear"],
                              output_norm=True, rng=rng, name="encoder")
        self.actor = nn.Mlp([stack_dim, h, h, 2 * action_dim], rng=rng,
                            final_scale=0.01, name="actor")
        self.critic1 = nn.Mlp([stack_dim + action_dim, h, h, 1], rng=rng,
                              final_scale=0.01, name="critic1")
        self.critic2 = nn.Mlp([stack_dim + action_dim, h, h, 1], rng=rng,
                              final_scale=0.01, name="critic2")
        self.target_encoder = self.encoder.copy("target_encoder")
        self.target_critic1 = self.critic1.copy("target_critic1")
        self.target_critic2 = self.critic2.copy("target_critic2")
        self.momentum_encoder = self.encoder.copy("momentum_encoder")
        self.log_alpha = nn.Tensor(np.log(cfg.init_temperature), requires_grad=True,
                                   name="log_alpha")
        self.target_entropy = -float(action_dim)

        self.critic_opt = nn.Adam(self.encoder.parameters() + self.critic1.parameters()
                                  + self.critic2.parameters(), lr=cfg.lr)
        self.actor_opt = nn.Adam(self.actor.parameters(), lr=cfg.lr)
        self.alpha_opt = nn.Adam([self.log_alpha], lr=cfg.alpha_lr)
        self.updates = 0

    # -- helpers

    @property
    def temperature(self):
        return float(np.exp(self.log_alpha.data))

    def networks(self):
        return {
            "encoder": self.encoder, "actor": self.actor,
            "critic1": self.critic1, "critic2": self.critic2,
            "target_encoder": self.target_encoder,
            "target_critic1": self.target_critic1,
            "target_critic2": self.target_critic2,
            "momentum_encoder": self.momentum_encoder,
        }

    def state_dict(self):
        out = {}
        for key, net in self.networks().items():
            for pname, arr in net.state().items():
                out[f"{key}/{pname}"] = arr
        out["log_alpha"] = np.array(self.log_alpha.data)
        return out

    def load_state_dict(self, state):
        for key, net in self.networks().items():
            prefix = key + "/"
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            net.load_state(sub)
        self.log_alpha.data = np.array(state["log_alpha"], dtype=float)

    def encode_frames(self, frames, encoder=None):
        """Encode ``(B, S, D)`` frames to ``(B, S*N)`` stacked latents (a Tensor)."""
        encoder = encoder or self.encoder
        b, s, d = frames.shape
        z = nn.forward(encoder, nn.Tensor(frames.reshape(b * s, d)))
        return _restack(z, b, s)

    def policy(self, stacked):
        out = nn.forward(self.actor, stacked)
        a = self.action_dim
        mu = out[:, :a]
        log_std = bounded_log_std(out[:, a:], self.config.log_std_min, self.config.log_std_max)
        return mu, log_std

    def q_values(self, stacked, action, target=False, frozen=False):
        x = nn.concat([stacked, nn.as_tensor(action)], axis=1)
        if target:
            nets = (self.target_critic1, self.target_critic2)
        else:
            nets = (self.critic1, self.critic2)
        return nn.forward(nets[0], x, frozen), nn.forward(nets[1], x, frozen)

    # -- acting

    def act(self, frames, rng=None, deterministic=False):
        """Action for one time step given the last ``frame_stack`` observations."""
        frames = np.asarray(frames)[None]
        with nn.no_grad():
            stacked = self.encode_frames(frames)
            mu, log_std = self.policy(stacked)
            if deterministic:
                return np.tanh(mu.data[0])
            noise = rng.standard_normal(mu.shape)
            u = mu.data + np.exp(log_std.data) * noise
            return np.tanh(u[0])

    # -- losses

    def critic_loss(self, batch, rng):
        """SVEA-style critic loss; returns the loss Tensor (graph attached)."""
        cfg = self.config
        b, s, d = batch.obs_stack.shape
        with nn.no_grad():
            next_frames = np.concatenate([batch.obs_stack[:, 1:], batch.next_obs[:, None]], axis=1)
            next_online = self.encode_frames(next_frames)
            mu, log_std = self.policy(next_online)
            noise = rng.standard_normal(mu.shape)
            a_next, logp_next = squashed_gaussian(mu, log_std, noise)
            next_target = self.encode_frames(next_frames, self.target_encoder)
            tq1, tq2 = self.q_values(next_target, a_next, target=True)
            y = critic_targets(batch.reward, batch.not_done, tq1.data[:, 0], tq2.data[:, 0],
                               logp_next.data, self.temperature, cfg.discount)
        y = nn.Tensor(y[:, None])

        use_aug = cfg.augment and self.obs_mode == "image16"
        if use_aug:
            aug = random_shift_augment(batch.obs_stack, rng, cfg.image_pad, self.obs_mode)
            frames = np.concatenate([batch.obs_stack, aug], axis=0)
            action = np.concatenate([batch.action, batch.action], axis=0)
            yy = nn.Tensor(np.concatenate([y.data, y.data], axis=0))
        else:
            frames, action, yy = batch.obs_stack, batch.action, y
        stacked = self.encode_frames(frames)
        q1, q2 = self.q_values(stacked, action)
        err = nn.square(q1 - yy) + nn.square(q2 - yy)
        if use_aug:
            loss = err[:b].mean() * cfg.svea_alpha + err[b:].mean() * cfg.svea_beta
        else:
            loss = err.mean()
        return loss

    def actor_loss(self, batch, rng):
        """Returns (loss, logp array).  Critics are frozen, encoder detached."""
        with nn.no_grad():
            stacked = self.encode_frames(batch.obs_stack)
        mu, log_std = self.policy(stacked)
        noise = rng.standard_normal(mu.shape)
        action, logp = squashed_gaussian(mu, log_std, noise)
        q1, q2 = self.q_values(stacked, action, frozen=True)
        q = nn.minimum(q1, q2)[:, 0]
        loss = (logp * self.temperature - q).mean()
        return loss, logp.data

    # -- updates

    def critic_update(self, batch, rng):
        loss = self.critic_loss(batch, rng)
        check_finite("critic loss", loss.data)
        self.critic_opt.zero_grad()
        loss.backward()
        self.critic_opt.step()
        return loss.item()

    def actor_update(self, batch, rng):
        loss, logp = self.actor_loss(batch, rng)
        check_finite("actor loss", loss.data)
        if not np.all(np.isfinite(logp)):
            raise NonFiniteError("actor log-probability")
        self.actor_opt.zero_grad()
        loss.backward()
        self.actor_opt.step()
        return loss.item(), logp

    def temperature_update(self, logp):
        loss = temperature_loss(self.log_alpha, logp, self.target_entropy)
        self.alpha_opt.zero_grad()
        loss.backward()
        self.alpha_opt.step()
        return loss.item()

    def soft_update_targets(self):
        cfg = self.config
        nn.soft_update(self.target_critic1, self.critic1, cfg.critic_tau)
        nn.soft_update(self.target_critic2, self.critic2, cfg.critic_tau)
        nn.soft_update(self.target_encoder, self.encoder, cfg.encoder_tau)

    def update(self, batch, rng):
        """One base-algorithm update.  Returns a metrics dict."""
        cfg = self.config
        self.updates += 1
        metrics = {"critic_loss": self.critic_update(batch, rng)}
        if self.updates % cfg.actor_update_freq == 0:
            metrics["actor_loss"], logp = self.actor_update(batch, rng)
            self.temperature_update(logp)
        if self.updates % cfg.target_update_freq == 0:
            self.soft_update_targets()
        metrics["temperature"] = self.temperature
        return metrics


def _restack(z, b, s):
    """(B*S, N) latents, rows ordered sample-major -> (B, S*N)."""
    return nn.reshape(z, (b, s * z.shape[1]))


def encode_stack(encoder, observations, stack=3):
    """Stacked latent for the policy from the most recent observations.

    Fewer than ``stack`` observations (episode start) are padded by repeating
    the first one.
    """
    obs = [np.asarray(o, dtype=float) for o in observations][-stack:]
    if not obs:
        raise ConfigurationError("need at least one observation")
    obs = [obs[0]] * (stack - len(obs)) + obs
    with nn.no_grad():
        z = nn.forward(encoder, nn.Tensor(np.stack(obs)))
    return z.data.reshape(-1)
