"""Two-variant point-mass tasks with a colour factor correlated to the variant.

The controlled object comes in two variants.  Variant A accelerates in the
direction of the action, variant B in the opposite direction, so a policy
that is optimal for one is close to worst-case for the other.  The variant
is visible through the object's width; its colour is a nuisance factor
whose joint distribution with the variant is set by a
:class:`CorrelationSpec`.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError

VARIANTS = ("A", "B")
BLUE = (0.0, 0.0, 1.0)
GREEN = (0.0, 1.0, 0.0)
COLOURS = {"blue": BLUE, "green": GREEN}
PHASES = ("train", "reversed", "uncorrelated")

GAIN = {"A": 1.0, "B": -1.0}
WIDTH = {"A": 0.2, "B": 0.4}
DT = 0.05
GOAL = 0.8
POS_BOUNDS = (-1.0, 1.0)
VEL_BOUNDS = (-2.0, 2.0)
HORIZON = 100

IMAGE_SIZE = 16
OBS_DIMS = {"factor": 5, "image16": IMAGE_SIZE * IMAGE_SIZE * 3}
# rows of the image occupied by the object
_BAND = slice(6, 10)
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CorrelationSpec:
    rho: float = 0.95
    phase: str = "train"
    greyscale: bool = False

    def __post_init__(self):
        if not 0.5 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0.5, 1], got {self.rho}")
        if self.phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def joint_table(self):
        """2x2 probabilities, rows (A, B), columns (blue, green)."""
        if self.phase == "uncorrelated":
            return np.full((2, 2), 0.25)
        on, off = self.rho / 2.0, (1.0 - self.rho) / 2.0
        if self.phase == "reversed":
            on, off = off, on
        return np.array([[on, off], [off, on]])

    def with_phase(self, phase):
        return dataclasses.replace(self, phase=phase)


@dataclass(frozen=True)
class FactorState:
    variant: str
    colour: tuple
    position: float = 0.0
    velocity: float = 0.0
    step: int = 0
    horizon: int = HORIZON

    @property
    def done(self):
        return self.step >= self.horizon

    @property
    def colour_name(self):
        for name, rgb in COLOURS.items():
            if tuple(self.colour) == rgb:
                return name
        return "rgb({:.2f},{:.2f},{:.2f})".format(*self.colour)


def sample_episode_factors(spec, rng):
    """Draw (variant, colour name) from the spec's joint table."""
    table = spec.joint_table().ravel()
    cell = int(np.searchsorted(np.cumsum(table), rng.random(), side="right"))
    cell = min(cell, 3)
    return VARIANTS[cell // 2], ("blue", "green")[cell % 2]


def initial_state(variant, colour, horizon=HORIZON):
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    rgb = COLOURS[colour] if isinstance(colour, str) else tuple(float(c) for c in colour)
    return FactorState(variant=variant, colour=rgb, horizon=horizon)


def step(state, action):
    """Advance one step.  Returns ``(next_state, reward, done)``."""
    if state.done:
        raise UsageError("step() called on a finished episode")
    a = float(np.clip(np.asarray(action, dtype=float).ravel()[0], -1.0, 1.0))
    vel = state.velocity + GAIN[state.variant] * a * DT
    vel = min(max(vel, VEL_BOUNDS[0]), VEL_BOUNDS[1])
    pos = state.position + vel * DT
    if pos <= POS_BOUNDS[0] or pos >= POS_BOUNDS[1]:
        pos = min(max(pos, POS_BOUNDS[0]), POS_BOUNDS[1])
        vel = 0.0
    nxt = dataclasses.replace(state, position=pos, velocity=vel, step=state.step + 1)
    reward = -abs(pos - GOAL)
    return nxt, reward, nxt.done


def _colour_channels(colour, greyscale):
    rgb = np.asarray(colour, dtype=float)
    if greyscale:
        return np.full(3, float(_LUMA @ rgb))
    return rgb


def render(state, mode="factor", greyscale=False):
    """Observation vector for ``state``.

    ``factor``: ``[position, width, r, g, b]``.  ``image16``: a 16x16x3 image
    (flattened, values in [0, 1]) with the object drawn as a bar of half-width
    ``width`` centred at the position; each column is shaded by the fraction
    of it the bar covers.  Velocity is never part of a single observation.
    """
    rgb = _colour_channels(state.colour, greyscale)
    width = WIDTH[state.variant]
    if mode == "factor":
        return np.concatenate([[state.position, width], rgb])
    if mode != "image16":
        raise ConfigurationError(f"unknown observation mode {mode!r}")
    edges = np.linspace(POS_BOUNDS[0], POS_BOUNDS[1], IMAGE_SIZE + 1)
    lo, hi = state.position - width, state.position + width
    overlap = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
    coverage = overlap / (edges[1] - edges[0])
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    img[_BAND, :, :] = coverage[None, :, None] * rgb[None, None, :]
    return img.ravel()


class PointMassEnv:
    """Gym-style wrapper: ``reset() -> obs``, ``step(a) -> (obs, r, done, info)``.

    Each episode draws its variant and colour from ``spec``; ``spec`` can be
    swapped between episodes (e.g. at a correlation shift).  A fixed
    ``(variant, colour)`` can be forced through ``reset(factors=...)``.
    """

    def __init__(self, spec=None, mode="factor", horizon=HORIZON, rng=None):
        if mode not in OBS_DIMS:
            raise ConfigurationError(f"unknown observation mode {mode!r}")
        self.spec = spec or CorrelationSpec()
        self.mode = mode
        self.horizon = int(horizon)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.state = None

    @property
    def obs_dim(self):
        return OBS_DIMS[self.mode]

    @property
    def action_dim(self):
        return 1

    def observe(self):
        return render(self.state, self.mode, self.spec.greyscale)

    def reset(self, factors=None):
        if factors is None:
            factors = sample_episode_factors(self.spec, self.rng)
        self.state = initial_state(*factors, horizon=self.horizon)
        return self.observe()

    def step(self, action):
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        self.state, reward, done = step(self.state, action)
        return self.observe(), reward, done, {"state": self.state}


# PD gains found by grid search over kp in [0.5, 20] and kd in [0, 10]; the
# resulting return matches an open-loop optimisation of all 100 actions.
ORACLE_GAINS = (20.0, 9.25)
ORACLE_RETURN = -13.55717193230894
# mean return of uniform random actions (200k Monte Carlo episodes, SE 0.06)
RANDOM_RETURN = -81.08


def oracle_action(state, kp=ORACLE_GAINS[0], kd=ORACLE_GAINS[1]):
    """Saturating PD controller that knows the variant (reference policy)."""
    u = kp * (GOAL - state.position) - kd * state.velocity
    return float(np.clip(GAIN[state.variant] * u, -1.0, 1.0))


def rollout(policy, factors, horizon=HORIZON):
    """Run ``policy(state) -> action`` from a fresh state; return (return, trace)."""
    state = initial_state(*factors, horizon=horizon)
    total = 0.0
    trace = []
    while not state.done:
        a = policy(state)
        nxt, r, _ = step(state, a)
        trace.append((state, a, r))
        total += r
        state = nxt
    return total, trace


def write_trace_csv(path, trace, episode=0):
    """Episode trace as CSV: step, variant, colour, position, velocity, action, reward."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "step", "variant", "colour", "position", "velocity",
                    "action", "reward"])
        for state, a, r in trace:
            w.writerow([episode, state.step, state.variant, state.colour_name,
                        repr(state.position), repr(state.velocity), repr(float(a)), repr(r)])


def colour_grid(levels=6):
    """Equally spaced RGB triples, ``levels**3`` of them."""
    vals = np.linspace(0.0, 1.0, levels)
    return [(float(r), float(g), float(b)) for r in vals for g in vals for b in vals]
