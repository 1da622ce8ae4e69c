"""Small agents, batches and a plain-numpy network oracle shared by tests."""

import numpy as np

from cmidrl import envs
from cmidrl.cmid import CmidConfig
from cmidrl.rl import AgentConfig, ReplayBuffer, SacAgent

TINY = dict(latent_dim=4, hidden_dim=8, encoder_hidden=6, frame_stack=2, batch_size=12,
            init_steps=0)


def tiny_agent(seed=0, mode="factor", **overrides):
    cfg = AgentConfig(**{**TINY, **overrides})
    return SacAgent(envs.OBS_DIMS[mode], 1, cfg, np.random.default_rng(seed), obs_mode=mode)


def tiny_cmid_config(**overrides):
    base = dict(enabled=True, alpha=0.5, k=3, history=1, disc_hidden=8)
    return CmidConfig(**{**base, **overrides})


def filled_buffer(episodes=4, horizon=15, mode="factor", seed=0, rho=0.5):
    """Buffer holding random-action episodes of a short-horizon env."""
    rng = np.random.default_rng(seed)
    env = envs.PointMassEnv(envs.CorrelationSpec(rho), mode=mode, horizon=horizon, rng=rng)
    buf = ReplayBuffer(env.obs_dim, 1, capacity=episodes * horizon)
    for ep in range(episodes):
        obs = env.reset()
        for t in range(horizon):
            a = rng.uniform(-1, 1, size=1)
            nxt, r, done, _ = env.step(a)
            buf.add(obs, a, r, nxt, False, ep, t)
            obs = nxt
    return buf


def np_mlp(net, x):
    """Straight-line numpy forward pass of an ``nn.Mlp``."""
    h = np.asarray(x, dtype=float)
    for w, b, tag in zip(net.weights, net.biases, net.activations):
        h = h @ w.data + b.data
        if tag == "relu":
            h = np.maximum(h, 0.0)
        elif tag == "tanh":
            h = np.tanh(h)
        elif tag == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
    if net.output_norm:
        mu = h.mean(axis=-1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
        h = np.tanh((h - mu) / np.sqrt(var + 1e-8) * net.ln_gain.data + net.ln_bias.data)
    return h


def param_hash(net):
    return b"".join(p.data.tobytes() for p in net.parameters())
