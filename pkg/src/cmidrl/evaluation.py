"""Diagnostics: classifier CMI estimation, correlation-shift evaluation,
colour robustness, latent/factor association probes and integrated
gradients."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import envs, nn
from .cmid import knn_permute
from .errors import ConfigurationError

CELLS = (("A", "blue"), ("A", "green"), ("B", "blue"), ("B", "green"))


# ------------------------------------------------------------- CMI


@dataclass
class CmiEstimate:
    estimate: float
    accuracy: float
    n_samples: int
    k: int
    degenerate: bool = False


@dataclass
class ClassifierConfig:
    hidden: int = 64
    epochs: int = 200
    batch_size: int = 256
    lr: float = 3e-3
    holdout: float = 0.3
    patience: int = 20
    prob_clip: float = 1e-3


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _standardise(a):
    sd = a.std(axis=0)
    return (a - a.mean(axis=0)) / np.where(sd > 0, sd, 1.0), sd


def _bce(logits, labels):
    # labels in {0,1}; stable form log(1+exp(-|x|)) + max(x,0) - x*y
    return (nn.softplus(logits) - logits * nn.Tensor(labels)).mean()


def train_classifier(inputs, labels, config, rng, val_inputs=None, val_labels=None):
    """Train an MLP to predict ``labels`` (0/1); early-stops on validation loss."""
    net = nn.Mlp([inputs.shape[1], config.hidden, config.hidden, 1], rng=rng, name="classifier")
    opt = nn.Adam(net.parameters(), lr=config.lr)
    n = len(inputs)
    best, best_state, bad = np.inf, net.state(), 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            rows = order[s:s + config.batch_size]
            loss = _bce(nn.forward(net, nn.Tensor(inputs[rows])), labels[rows, None])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if val_inputs is None:
            continue
        with nn.no_grad():
            vloss = _bce(nn.forward(net, nn.Tensor(val_inputs)), val_labels[:, None]).item()
        if vloss < best - 1e-5:
            best, best_state, bad = vloss, net.state(), 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    if val_inputs is not None:
        net.load_state(best_state)
    return net


def estimate_cmi(x, y, z, k=5, config=None, rng=None):
    """Estimate I(X; Y | Z) in nats.

    A classifier learns to separate joint samples ``(x, y, z)`` from
    kNN-permuted samples ``(x, y', z)``, where ``y'`` comes from a sample
    whose ``z`` is among the k nearest.  The estimate is the mean predicted
    log-likelihood ratio on held-out joint samples.
    """
    config = config or ClassifierConfig()
    rng = rng if rng is not None else np.random.default_rng()
    x, y, z = _as_2d(x), _as_2d(y), _as_2d(z)
    n = len(x)
    if not len(y) == len(z) == n:
        raise ConfigurationError("x, y, z need the same number of samples")
    for arr in (x, y):
        if np.any(arr.std(axis=0) == 0):
            return CmiEstimate(0.0, 0.5, n, k, degenerate=True)
    x, _ = _standardise(x)
    y, _ = _standardise(y)
    z, zsd = _standardise(z)
    z = z[:, zsd > 0]

    order = rng.permutation(n)
    n_test = int(round(n * config.holdout))
    test, train = order[:n_test], order[n_test:]
    n_val = len(train) // 5
    val, fit = train[:n_val], train[n_val:]

    def make_pairs(idx):
        xs, ys, zs = x[idx], y[idx], z[idx]
        latent = np.concatenate([xs, ys], axis=1)
        perm = knn_permute(latent, zs, 0, k, rng)
        # keep x (column block), swap y from the donor
        y_perm = ys[perm.donors]
        joint = np.concatenate([xs, ys, zs], axis=1)
        prod = np.concatenate([xs, y_perm, zs], axis=1)
        inputs = np.concatenate([joint, prod])
        labels = np.concatenate([np.ones(len(idx)), np.zeros(len(idx))])
        return inputs, labels

    fit_in, fit_lab = make_pairs(fit)
    val_in, val_lab = make_pairs(val)
    test_in, test_lab = make_pairs(test)
    net = train_classifier(fit_in, fit_lab, config, rng, val_in, val_lab)
    with nn.no_grad():
        logits = nn.forward(net, nn.Tensor(test_in)).data[:, 0]
    p = 1.0 / (1.0 + np.exp(-logits))
    p = np.clip(p, config.prob_clip, 1.0 - config.prob_clip)
    joint = test_lab == 1
    estimate = float(np.mean(np.log(p[joint] / (1.0 - p[joint]))))
    accuracy = float(np.mean((p > 0.5) == joint))
    return CmiEstimate(estimate, accuracy, n, k)


def gaussian_partial_correlation_samples(n, partial_corr, rng):
    """(x, y, z) scalars with z standard normal and corr(x, y | z) = partial_corr."""
    z = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    e2 = partial_corr * e1 + np.sqrt(1.0 - partial_corr ** 2) * rng.standard_normal(n)
    return z + e1, z + e2, z


def gaussian_cmi(partial_corr):
    """Analytic I(X; Y | Z) for jointly Gaussian variables."""
    return -0.5 * np.log(1.0 - partial_corr ** 2)


# ------------------------------------------------------------ policies


class AgentPolicy:
    """Wraps a SAC agent as ``policy(frames) -> action``."""

    def __init__(self, agent, deterministic=True, rng=None):
        self.agent = agent
        self.deterministic = deterministic
        self.rng = rng

    def __call__(self, frames):
        stack = self.agent.config.frame_stack
        window = [frames[0]] * max(0, stack - len(frames)) + list(frames[-stack:])
        return self.agent.act(window, rng=self.rng, deterministic=self.deterministic)


def _velocity(frames):
    if len(frames) < 2:
        return 0.0
    return (frames[-1][0] - frames[-2][0]) / envs.DT


def colour_blind_policy(frames):
    """Reads the variant from the width cue (factor-vector observations)."""
    o = frames[-1]
    variant = "A" if o[1] < 0.3 else "B"
    state = envs.FactorState(variant, envs.BLUE, position=o[0], velocity=_velocity(frames))
    return envs.oracle_action(state)


def make_colour_only_policy(colour_to_variant=None):
    """Guesses the variant from colour alone (blue -> A, green -> B by default)."""
    mapping = colour_to_variant or {"blue": "A", "green": "B"}

    def policy(frames):
        o = frames[-1]
        colour = "blue" if o[4] >= o[3] else "green"
        state = envs.FactorState(mapping[colour], envs.BLUE, position=o[0],
                                 velocity=_velocity(frames))
        return envs.oracle_action(state)

    return policy


def run_episode(env, policy, factors=None):
    obs = env.reset(factors=factors)
    frames = [obs]
    total, done = 0.0, False
    while not done:
        obs, r, done, _ = env.step(policy(frames))
        frames.append(obs)
        total += r
    return total


# --------------------------------------------------------- shift eval


@dataclass
class EpisodeRecord:
    phase: str
    seed: int
    episode: int
    episode_return: float
    variant: str
    colour: str


@dataclass
class ShiftReport:
    scenario: str
    phase_mean: dict = field(default_factory=dict)
    phase_se: dict = field(default_factory=dict)
    zero_shot_return: float = float("nan")
    cell_returns: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def summary(self):
        return {
            "scenario": self.scenario,
            "phase_mean": self.phase_mean,
            "phase_se": self.phase_se,
            "zero_shot_return": self.zero_shot_return,
            "cell_returns": {f"{v}/{c}": r for (v, c), r in self.cell_returns.items()},
            "n_records": len(self.records),
        }


def mean_and_se(seed_means):
    a = np.asarray(seed_means, dtype=float)
    se = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else float("nan")
    return float(a.mean()), se


def shift_eval(policy, spec, scenario="reversed", episodes=10, seeds=(0, 1, 2, 3, 4),
               mode="factor", horizon=envs.HORIZON, phases=None):
    """Zero-shot evaluation of a fixed policy under a correlation shift.

    For every phase and seed, ``episodes`` episodes are run with factors drawn
    from that phase's joint table.  Phase statistics are the mean and
    standard error of the per-seed means.  ``cell_returns`` holds the return
    on each (variant, colour) cell.
    """
    if scenario not in ("reversed", "uncorrelated", "train"):
        raise ConfigurationError(f"unknown shift scenario {scenario!r}")
    phases = tuple(phases or (scenario,))
    report = ShiftReport(scenario=scenario)
    for phase in phases:
        seed_means = []
        for seed in seeds:
            env = envs.PointMassEnv(spec.with_phase(phase), mode=mode, horizon=horizon,
                                    rng=np.random.default_rng(seed))
            rets = []
            for ep in range(episodes):
                factors = envs.sample_episode_factors(env.spec, env.rng)
                ret = run_episode(env, policy, factors)
                rets.append(ret)
                report.records.append(EpisodeRecord(phase, int(seed), ep, ret, *factors))
            seed_means.append(np.mean(rets))
        report.phase_mean[phase], report.phase_se[phase] = mean_and_se(seed_means)
    report.zero_shot_return = report.phase_mean[phases[-1]]
    env = envs.PointMassEnv(spec, mode=mode, horizon=horizon)
    for cell in CELLS:
        report.cell_returns[cell] = run_episode(env, policy, cell)
    return report


RECORD_FIELDS = ("phase", "seed", "episode", "return", "variant", "colour")


def write_episode_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.phase, r.seed, r.episode, repr(float(r.episode_return)),
                        r.variant, r.colour])


def write_shift_report(report, out_dir, stem="shift"):
    """``<stem>_episodes.csv`` plus ``<stem>_summary.json``."""
    os.makedirs(out_dir, exist_ok=True)
    write_episode_csv(os.path.join(out_dir, f"{stem}_episodes.csv"), report.records)
    with open(os.path.join(out_dir, f"{stem}_summary.json"), "w") as f:
        json.dump(report.summary(), f, indent=2, sort_keys=True)


# ---------------------------------------------------- colour robustness


@dataclass
class ColourReport:
    colours: list
    returns: list

    @property
    def worst(self):
        return float(np.min(self.returns))

    @property
    def best(self):
        return float(np.max(self.returns))

    @property
    def average(self):
        return float(np.mean(self.returns))


def colour_robustness(policy, levels=6, variants=envs.VARIANTS, mode="factor",
                      horizon=envs.HORIZON, greyscale=False):
    """Mean return per RGB colour on an equally spaced ``levels**3`` grid,
    averaged over the given variants."""
    env = envs.PointMassEnv(envs.CorrelationSpec(greyscale=greyscale), mode=mode,
                            horizon=horizon)
    colours = envs.colour_grid(levels)
    returns = []
    for rgb in colours:
        returns.append(float(np.mean([run_episode(env, policy, (v, rgb)) for v in variants])))
    return ColourReport(colours, returns)


def write_colour_csv(path, report):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["r", "g", "b", "mean_return"])
        for (r, g, b), ret in zip(report.colours, report.returns):
            w.writerow([r, g, b, repr(ret)])


# ------------------------------------------------------------- probes


@dataclass
class ProbeResult:
    association: np.ndarray     # (n_latents, n_factors)
    factor_names: list
    modularity: float
    constant_dims: list


def _discretise(values, bins=8):
    """Equal-mass bin labels."""
    ranks = np.argsort(np.argsort(values, kind="stable"), kind="stable")
    return (ranks * bins) // len(values)


def _mutual_information(a, b):
    a = np.unique(a, return_inverse=True)[1]
    b = np.unique(b, return_inverse=True)[1]
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())


def _entropy(labels):
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def latent_factor_probe(latents, factors, categorical=(), bins=8):
    """Association between latent dimensions and ground-truth factors.

    ``factors`` maps factor name -> per-sample values.  Continuous factors
    use the absolute Pearson correlation; factors named in ``categorical``
    use the mutual information with the latent discretised into ``bins``
    equal-mass bins, divided by the factor's entropy.  Modularity is the
    mean over factors of the top latent's share of that factor's total
    association.
    """
    latents = np.asarray(latents, dtype=float)
    names = list(factors)
    n_lat = latents.shape[1]
    assoc = np.zeros((n_lat, len(names)))
    sd = latents.std(axis=0)
    constant = [int(i) for i in np.flatnonzero(sd < 1e-12)]
    for j, name in enumerate(names):
        f = np.asarray(factors[name])
        if name in categorical:
            h = _entropy(f)
            for i in range(n_lat):
                if i in constant or h == 0:
                    continue
                assoc[i, j] = _mutual_information(_discretise(latents[:, i], bins), f) / h
        else:
            f = f.astype(float)
            if f.std() == 0:
                continue
            fz = (f - f.mean()) / f.std()
            for i in range(n_lat):
                if i in constant:
                    continue
                lz = (latents[:, i] - latents[:, i].mean()) / sd[i]
                assoc[i, j] = abs(float(np.mean(lz * fz)))
    totals = assoc.sum(axis=0)
    shares = np.where(totals > 0, assoc.max(axis=0) / np.where(totals > 0, totals, 1.0), 0.0)
    return ProbeResult(assoc, names, float(shares.mean()), constant)


def labelled_observations(n, rng, mode="factor", random_colours=True):
    """Random states with their factor labels, for probing."""
    obs, labels = [], {"position": [], "variant": [], "red": [], "green": [], "blue": []}
    for _ in range(n):
        variant = envs.VARIANTS[rng.integers(2)]
        rgb = tuple(rng.random(3)) if random_colours else \
            (envs.BLUE if rng.random() < 0.5 else envs.GREEN)
        state = envs.FactorState(variant, rgb, position=rng.uniform(-1, 1),
                                 velocity=rng.uniform(-1, 1))
        obs.append(envs.render(state, mode))
        labels["position"].append(state.position)
        labels["variant"].append(variant)
        labels["red"].append(rgb[0])
        labels["green"].append(rgb[1])
        labels["blue"].append(rgb[2])
    return np.array(obs), {k: np.array(v) for k, v in labels.items()}


def probe_encoder(encoder, observations, factors, categorical=("variant",)):
    with nn.no_grad():
        z = nn.forward(encoder, nn.Tensor(observations)).data
    return latent_factor_probe(z, factors, categorical)


# ------------------------------------------------- integrated gradients


@dataclass
class AttributionMap:
    feature: int
    attributions: np.ndarray
    baseline: np.ndarray
    steps: int
    residual: float


def integrated_gradients(fn_or_net, feature, x, baseline=None, steps=64):
    """Right-Riemann integrated gradients of output ``feature`` w.r.t. ``x``.

    ``fn_or_net`` is an :class:`~cmidrl.nn.Mlp` or a callable mapping a
    ``(B, D)`` Tensor to a ``(B, N)`` Tensor.  The baseline defaults to all
    zeros (a black image).
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    x = np.asarray(x, dtype=float).ravel()
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float).ravel()
    if baseline.shape != x.shape:
        raise ConfigurationError("baseline and input shapes differ")
    if isinstance(fn_or_net, nn.Mlp):
        net = fn_or_net
        fn = lambda t: nn.forward(net, t, frozen=True)  # noqa: E731
    else:
        fn = fn_or_net
    alphas = np.arange(1, steps + 1, dtype=float)[:, None] / steps
    path = nn.Tensor(baseline[None, :] + alphas * (x - baseline)[None, :], requires_grad=True)
    out = fn(path)
    out[:, feature].sum().backward()
    attr = (x - baseline) * path.grad.mean(axis=0)
    with nn.no_grad():
        ends = fn(nn.Tensor(np.stack([x, baseline]))).data[:, feature]
    residual = float(abs(attr.sum() - (ends[0] - ends[1])))
    return AttributionMap(feature, attr, baseline, steps, residual)


def write_attribution(path_stem, amap, mode="image16"):
    """``<stem>.csv`` (long format) and, for images, ``<stem>.pgm`` of the
    channel-summed absolute attributions."""
    attr = amap.attributions
    with open(path_stem + ".csv", "w", newline="") as f:
        w = csv.writer(f)
        if mode == "image16":
            w.writerow(["row", "col", "channel", "attribution"])
            grid = attr.reshape(envs.IMAGE_SIZE, envs.IMAGE_SIZE, 3)
            for r in range(envs.IMAGE_SIZE):
                for c in range(envs.IMAGE_SIZE):
                    for ch in range(3):
                        w.writerow([r, c, ch, repr(float(grid[r, c, ch]))])
        else:
            w.writerow(["input", "attribution"])
            for i, a in enumerate(attr):
                w.writerow([i, repr(float(a))])
    if mode == "image16":
        mag = np.abs(attr.reshape(envs.IMAGE_SIZE, envs.IMAGE_SIZE, 3)).sum(axis=2)
        peak = mag.max()
        pix = np.zeros_like(mag, dtype=np.uint8) if peak == 0 else \
            np.round(255 * mag / peak).astype(np.uint8)
        with open(path_stem + ".pgm", "wb") as f:
            f.write(f"P5 {envs.IMAGE_SIZE} {envs.IMAGE_SIZE} 255\n".encode())
            f.write(pix.tobytes())


def report_dict(obj):
    return asdict(obj)
