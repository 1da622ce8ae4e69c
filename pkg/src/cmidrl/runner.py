"""Training and sweep protocols that write a run directory.

A run directory holds ``config.txt`` (effective configuration),
``metrics.csv`` (one row per finished training episode), ``eval.csv``
(periodic deterministic evaluations), ``checkpoints/``, ``summary.json`` and
optional figures.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import envs, nn
from .cmid import Cmid, cmid_update_step
from .errors import ConfigurationError, NonFiniteError
from .evaluation import CELLS, AgentPolicy, run_episode, shift_eval, write_shift_report
from .rl import SacAgent, ReplayBuffer

log = logging.getLogger(__name__)

METRIC_FIELDS = ("env_step", "episode_return", "critic_loss", "actor_loss", "temperature",
                 "disc_loss", "adv_loss", "phase", "variant", "colour")
EVAL_FIELDS = ("env_step", "phase", "expected_return") + tuple(f"{v}_{c}" for v, c in CELLS)
MANIFEST = ("config.txt", "metrics.csv", "checkpoints/final.ckpt", "summary.json")

STREAMS = ("env", "agent-init", "cmid-init", "batch", "explore", "update", "permutation", "eval")


def rng_streams(seed):
    """Independent named generators derived from one master seed.

    Each stream depends only on (seed, name), so enabling CMID (which draws
    from ``cmid-init`` and ``permutation``) leaves the others untouched.
    """
    return {name: np.random.default_rng([int(seed), zlib.crc32(name.encode())])
            for name in STREAMS}


def build_agent(config, obs_dim, streams):
    agent = SacAgent(obs_dim, 1, config.agent, streams["agent-init"], obs_mode=config.env.mode)
    cmid = Cmid(agent, config.cmid, streams["cmid-init"]) if config.cmid.enabled else None
    return agent, cmid


def checkpoint_arrays(agent, cmid=None):
    arrays = agent.state_dict()
    if cmid is not None:
        for k, v in cmid.discriminator.state().items():
            arrays[f"discriminator/{k}"] = v
    return arrays


def save_agent(path, agent, cmid=None):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    nn.save_checkpoint(path, checkpoint_arrays(agent, cmid))


def load_agent(config, path):
    """Rebuild the agent described by ``config`` and load ``path`` into it."""
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    streams = rng_streams(0)
    agent, cmid = build_agent(config, envs.OBS_DIMS[config.env.mode], streams)
    state = nn.load_checkpoint(path)
    try:
        agent.load_state_dict(state)
        if cmid is not None:
            sub = {k.split("/", 1)[1]: v for k, v in state.items()
                   if k.startswith("discriminator/")}
            if sub:
                cmid.discriminator.load_state(sub)
    except (KeyError, ConfigurationError) as exc:
        raise ConfigurationError(f"checkpoint {path} does not match the config: {exc}") from None
    return agent, cmid


def evaluate_cells(agent, config):
    """Deterministic return on each (variant, colour) cell."""
    env = envs.PointMassEnv(envs.CorrelationSpec(config.env.rho, "train", config.env.greyscale),
                            mode=config.env.mode, horizon=config.env.horizon)
    policy = AgentPolicy(agent, deterministic=True)
    return {cell: run_episode(env, policy, cell) for cell in CELLS}


def expected_return(cell_returns, spec):
    table = spec.joint_table()
    return float(sum(table[envs.VARIANTS.index(v), ("blue", "green").index(c)] * r
                     for (v, c), r in cell_returns.items()))


@dataclass
class RunResult:
    out_dir: str
    seed: int
    zero_shot: dict = field(default_factory=dict)
    final_eval: dict = field(default_factory=dict)
    aborted: bool = False
    message: str = ""
    stopped_at: int | None = None


def _fmt(x):
    return "" if x is None else repr(float(x))


def run_train(config, seed=None, out_dir=None, progress=None):
    """Train one agent through the train phase and (optionally) a shifted
    phase, writing all artefacts to ``out_dir``.

    The zero-shot evaluation is taken at ``shift_step`` before any update
    on shifted data.  A non-finite loss stops the run with ``aborted=True``;
    the most recent periodic checkpoint is kept as ``checkpoints/last_good.ckpt``.
    """
    config.validate()
    seed = config.protocol.seeds[0] if seed is None else seed
    out_dir = out_dir or config.io.out_dir
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    config.save(os.path.join(out_dir, "config.txt"))

    proto, acfg = config.protocol, config.agent
    streams = rng_streams(seed)
    train_spec = envs.CorrelationSpec(config.env.rho, "train", config.env.greyscale)
    env = envs.PointMassEnv(train_spec, mode=config.env.mode, horizon=config.env.horizon,
                            rng=streams["env"])
    agent, cmid = build_agent(config, env.obs_dim, streams)
    buffer = ReplayBuffer(env.obs_dim, 1, acfg.buffer_capacity)
    history = config.cmid.effective_history if config.cmid.enabled else 0
    result = RunResult(out_dir, seed)

    metrics_f = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
    eval_f = open(os.path.join(out_dir, "eval.csv"), "w", newline="")
    metrics_w, eval_w = csv.writer(metrics_f), csv.writer(eval_f)
    metrics_w.writerow(METRIC_FIELDS)
    eval_w.writerow(EVAL_FIELDS)

    def log_eval(step, phase):
        cells = evaluate_cells(agent, config)
        exp_ret = expected_return(cells, env.spec)
        eval_w.writerow([step, phase, _fmt(exp_ret)] + [_fmt(cells[c]) for c in CELLS])
        return cells, exp_ret

    phase = "train"
    shifted = proto.shift != "none" and proto.shift_step < proto.total_steps
    obs = env.reset()
    frames, ep_return, ep_step, episode = [obs], 0.0, 0, 0
    ep_factors = (env.state.variant, env.state.colour_name)
    losses = {k: [] for k in ("critic_loss", "actor_loss", "disc_loss", "adv_loss")}
    explore_policy = AgentPolicy(agent, deterministic=False, rng=streams["explore"])

    try:
        for step in range(proto.total_steps):
            if shifted and step == proto.shift_step:
                report = shift_eval(AgentPolicy(agent), train_spec, proto.shift,
                                    proto.eval_episodes, proto.eval_seeds, config.env.mode,
                                    config.env.horizon, phases=("train", proto.shift))
                write_shift_report(report, out_dir, "zero_shot")
                result.zero_shot = report.summary()
                save_agent(os.path.join(out_dir, "checkpoints", "pre_shift.ckpt"), agent, cmid)
                phase = proto.shift
                env.spec = train_spec.with_phase(phase)

            if step < acfg.init_steps:
                action = streams["explore"].uniform(-1.0, 1.0, size=1)
            else:
                action = np.atleast_1d(explore_policy(frames))
            next_obs, reward, done, _ = env.step(action)
            buffer.add(obs, action, reward, next_obs, False, episode, ep_step)
            ep_return += reward
            ep_step += 1
            obs = next_obs
            frames.append(obs)

            if step >= acfg.init_steps:
                batch = buffer.sample(acfg.batch_size, streams["batch"], acfg.frame_stack,
                                      max(history, 1))
                m = cmid_update_step(batch, agent, cmid, streams["update"],
                                     streams["permutation"])
                for k in losses:
                    if k in m:
                        losses[k].append(m[k])

            if done:
                row = [step + 1, _fmt(ep_return)]
                for k in ("critic_loss", "actor_loss"):
                    row.append(_fmt(np.mean(losses[k])) if losses[k] else "")
                row.append(_fmt(agent.temperature))
                for k in ("disc_loss", "adv_loss"):
                    row.append(_fmt(np.mean(losses[k])) if losses[k] else "")
                row += [phase, *ep_factors]
                metrics_w.writerow(row)
                for k in losses:
                    losses[k].clear()
                episode += 1
                obs = env.reset()
                frames, ep_return, ep_step = [obs], 0.0, 0
                ep_factors = (env.state.variant, env.state.colour_name)

            if (step + 1) % proto.eval_every == 0:
                cells, exp_ret = log_eval(step + 1, phase)
                if progress:
                    progress(step + 1, phase, exp_ret)
                if exp_ret >= proto.stop_return:
                    result.stopped_at = step + 1
                    break
            if (step + 1) % config.io.checkpoint_every == 0:
                save_agent(os.path.join(out_dir, "checkpoints", "last_good.ckpt"), agent, cmid)
    except NonFiniteError as exc:
        result.aborted = True
        result.message = str(exc)
        log.error("run aborted at step %d: %s", step, exc)
    finally:
        metrics_f.close()
        eval_f.close()

    if not result.aborted:
        save_agent(os.path.join(out_dir, "checkpoints", "final.ckpt"), agent, cmid)
        cells = evaluate_cells(agent, config)
        result.final_eval = {f"{v}/{c}": r for (v, c), r in cells.items()}
        result.final_eval["expected_return"] = expected_return(cells, env.spec)
    summary = {
        "seed": seed,
        "aborted": result.aborted,
        "message": result.message,
        "zero_shot": result.zero_shot,
        "final_eval": result.final_eval,
        "cmid_enabled": config.cmid.enabled,
        "episodes": episode,
        "stopped_at": result.stopped_at,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    if config.io.figures and not result.aborted:
        from . import plotting

        plotting.run_figures(out_dir, shift_step=proto.shift_step if shifted else None)
    return result


def missing_artifacts(out_dir):
    """Entries of the run-directory manifest that are absent."""
    return [p for p in MANIFEST if not os.path.exists(os.path.join(out_dir, p))]


SWEEP_KEYS = {"alpha": "cmid.alpha", "rho": "env.rho", "history": "cmid.history", "k": "cmid.k"}


def sweep_plan(config, axis=None, values=None):
    """``[(value, seed, config)]`` for every sweep point and seed."""
    axis = axis or config.protocol.sweep_axis
    values = list(values if values is not None else config.protocol.sweep_values)
    if axis not in SWEEP_KEYS:
        raise ConfigurationError(f"protocol.sweep_axis: expected one of {tuple(SWEEP_KEYS)}")
    if not values:
        raise ConfigurationError("protocol.sweep_values: no values to sweep")
    plan = []
    for value in values:
        cfg = config.copy()
        cfg.set(SWEEP_KEYS[axis], str(value))
        cfg.validate()
        for seed in cfg.protocol.seeds:
            plan.append((value, seed, cfg))
    return plan


def run_sweep(config, axis=None, values=None, out_dir=None, progress=None):
    """One independent run per (value, seed); writes ``sweep_summary.csv``."""
    axis = axis or config.protocol.sweep_axis
    out_dir = out_dir or config.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value, seed, cfg in sweep_plan(config, axis, values):
        run_dir = os.path.join(out_dir, f"{axis}={value}", f"seed{seed}")
        res = run_train(cfg, seed, run_dir, progress)
        rows.append({
            "axis": axis, "value": value, "seed": seed, "run_dir": run_dir,
            "zero_shot_return": res.zero_shot.get("zero_shot_return", ""),
            "final_expected_return": res.final_eval.get("expected_return", ""),
            "aborted": res.aborted,
        })
    with open(os.path.join(out_dir, "sweep_summary.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    if config.io.figures:
        from . import plotting

        plotting.sweep_figure(out_dir, rows, axis)
    return rows
