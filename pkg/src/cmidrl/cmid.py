"""Conditional mutual information minimisation between latent features.

For every latent feature n a conditional discriminator learns to tell true
latents ``z_t`` from permuted ones, where the permuted sample keeps ``z_t^n``
and takes the remaining features from a batch neighbour whose conditioning
vector ``c_t^n = (z_{t-1}^n, a_{t-1})`` is among the k nearest.  The encoder
is then updated to fool the discriminator on true samples.

Sign convention: permuted is the positive class.  The discriminator is
trained to maximise the log-likelihood
``log(1 - sigmoid(D(true))) + log sigmoid(D(perm))``, which pushes
sigmoid(D) towards 0 on true samples and towards 1 on permuted ones, and the
encoder minimises ``alpha * log(1 - sigmoid(D(true)))`` so that true samples
look permuted.  Feature indices are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, check_finite
from .rl import random_shift_augment

SIGMA_CLAMP = 1e-6
VARIANTS = ("cmid", "mi")


@dataclass
class CmidConfig:
    enabled: bool = False
    alpha: float = 0.5
    k: int = 5
    history: int = 1
    variant: str = "cmid"
    momentum_new_weight: float = 0.01
    disc_lr: float = 1e-2
    disc_hidden: int = 1024
    update_freq: int = 1

    def validate(self, batch_size=None):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"cmid.variant must be one of {VARIANTS}")
        if self.k < 1:
            raise ConfigurationError("cmid.k must be >= 1")
        if batch_size is not None and self.k >= batch_size:
            raise ConfigurationError("cmid.k must be smaller than the batch size")
        if self.history < 0:
            raise ConfigurationError("cmid.history must be >= 0")
        if self.history == 0 and self.variant != "mi":
            raise ConfigurationError("cmid.history = 0 requires cmid.variant = mi")
        if self.alpha < 0:
            raise ConfigurationError("cmid.alpha must be >= 0")
        if not 0.0 <= self.momentum_new_weight <= 1.0:
            raise ConfigurationError("cmid.momentum_new_weight must lie in [0, 1]")
        if self.update_freq < 1:
            raise ConfigurationError("cmid.update_freq must be >= 1")

    @property
    def effective_history(self):
        return 0 if self.variant == "mi" else self.history


@dataclass
class PermutedBatch:
    latents: np.ndarray      # (B, N) permuted samples for one feature
    donors: np.ndarray       # (B,) index of the sample supplying z^{-n}
    neighbours: np.ndarray   # (B, k) candidate donors, nearest first
    feature: int


# ---------------------------------------------------------- conditioning


def build_conditioning(prev_latents, prev_actions, n, h):
    """Conditioning vectors for feature ``n``.

    ``prev_latents`` is ``(B, H, N)`` with ``[:, j]`` the latent of frame
    t-1-j; ``prev_actions`` is ``(B, H, A)``.  The result is ``(B, h*N + h*A)``:
    ``h`` slotted latent vectors (feature n's value at slot n, zeros elsewhere)
    followed by the ``h`` previous actions.  ``h = 0`` gives an empty set.
    """
    prev_latents = np.asarray(prev_latents, dtype=float)
    prev_actions = np.asarray(prev_actions, dtype=float)
    if prev_latents.ndim == 2:
        prev_latents = prev_latents[:, None]
    if prev_actions.ndim == 2:
        prev_actions = prev_actions[:, None]
    b, stored, nfeat = prev_latents.shape
    if h == 0:
        return np.zeros((b, 0))
    if h > stored or h > prev_actions.shape[1]:
        raise ConfigurationError(f"history {h} exceeds the {stored} stored previous frames")
    if not 0 <= n < nfeat:
        raise ConfigurationError(f"feature index {n} out of range for {nfeat} features")
    slots = np.zeros((b, h, nfeat))
    slots[:, :, n] = prev_latents[:, :h, n]
    return np.concatenate([slots.reshape(b, h * nfeat),
                           prev_actions[:, :h].reshape(b, -1)], axis=1)


def build_conditioning_all(prev_latents, prev_actions, h):
    """``build_conditioning`` for every feature, stacked to ``(N, B, C)``."""
    prev_latents = np.asarray(prev_latents, dtype=float)
    b, _, nfeat = prev_latents.shape
    if h == 0:
        return np.zeros((nfeat, b, 0))
    return np.stack([build_conditioning(prev_latents, prev_actions, n, h)
                     for n in range(nfeat)])


# --------------------------------------------------------- permutations


def nearest_neighbours(cond, k):
    """Indices of the k nearest other rows of ``cond`` (Euclidean), nearest
    first, ties broken by lower index.  An empty conditioning set makes
    every other row equally near; see :func:`knn_permute`."""
    cond = np.asarray(cond, dtype=float)
    b = cond.shape[0]
    if b <= k:
        raise ConfigurationError(f"batch of {b} is too small for k={k}")
    diff = cond[:, None, :] - cond[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    return _exact_neighbours(d2, k)


def _exact_neighbours(d2, k):
    """k smallest entries along the last axis ordered by (distance, index)."""
    if k >= d2.shape[-1] - 1:
        return np.argsort(d2, axis=-1, kind="stable")[..., :k]
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    vals = np.take_along_axis(d2, part, axis=-1)
    kth = vals.max(axis=-1, keepdims=True)
    order = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, order, axis=-1)
    # argpartition picks arbitrarily among ties at the k-th distance
    ties = (d2 <= kth).sum(axis=-1) > k
    if ties.any():
        out[ties] = np.argsort(d2[ties], axis=-1, kind="stable")[..., :k]
    return out


def _swap_in(latents, donors, n):
    perm = latents[donors].copy()
    perm[:, n] = latents[:, n]
    return perm


def knn_permute(latents, cond, n, k, rng):
    """Permuted samples for feature ``n``.

    For every row i a donor j != i is drawn uniformly from the k rows whose
    conditioning vectors are nearest to row i's; the output row is
    ``(z_i^n, z_j^{-n})``.  With an empty conditioning set the donor is
    uniform over all other rows.
    """
    latents = np.asarray(latents, dtype=float)
    cond = np.asarray(cond, dtype=float)
    b = latents.shape[0]
    if b <= k:
        raise ConfigurationError(f"batch of {b} is too small for k={k}")
    if cond.shape[1] == 0:
        offsets = rng.integers(1, b, size=b)
        donors = (np.arange(b) + offsets) % b
        neighbours = donors[:, None]
    else:
        neighbours = nearest_neighbours(cond, k)
        donors = neighbours[np.arange(b), rng.integers(0, k, size=b)]
    return PermutedBatch(_swap_in(latents, donors, n), donors, neighbours, n)


def knn_donors_all(prev_latents, prev_actions, h, k, rng):
    """Donor indices ``(N, B)`` for every feature at once.

    Equivalent to running :func:`knn_permute` on
    ``build_conditioning(..., n, h)`` for each n, but uses the fact that the
    slotted conditioning vectors of one feature differ only in slot n.
    """
    prev_latents = np.asarray(prev_latents, dtype=float)
    prev_actions = np.asarray(prev_actions, dtype=float)
    b, _, nfeat = prev_latents.shape
    if b <= k:
        raise ConfigurationError(f"batch of {b} is too small for k={k}")
    if h == 0:
        offsets = rng.integers(1, b, size=(nfeat, b))
        return (np.arange(b)[None, :] + offsets) % b
    acts = prev_actions[:, :h].reshape(b, -1)
    da = ((acts[:, None, :] - acts[None, :, :]) ** 2).sum(axis=-1)
    zl = prev_latents[:, :h, :]                                   # (B, h, N)
    dz = ((zl[:, None] - zl[None, :]) ** 2).sum(axis=2)           # (B, B, N)
    d2 = np.moveaxis(dz, 2, 0) + da[None]                         # (N, B, B)
    idx = np.arange(b)
    d2[:, idx, idx] = np.inf
    neighbours = _exact_neighbours(d2, k)                         # (N, B, k)
    picks = rng.integers(0, k, size=(nfeat, b))
    return np.take_along_axis(neighbours, picks[..., None], axis=2)[..., 0]


def permuted_latents_all(latents, donors):
    """``(N*B, N)`` permuted rows, feature-major: row ``n*B + i`` keeps
    ``latents[i, n]`` and takes the rest from ``latents[donors[n, i]]``."""
    nfeat, b = donors.shape
    perm = latents[donors]                                        # (N, B, N)
    feat = np.arange(nfeat)
    perm[feat, :, feat] = latents[:, feat].T
    return perm.reshape(nfeat * b, -1)


# --------------------------------------------------------------- losses


def _log_sigmoid_clamped(logits):
    return nn.log(nn.clip(nn.sigmoid(logits), SIGMA_CLAMP, 1.0 - SIGMA_CLAMP))


def _log_one_minus_sigmoid_clamped(logits):
    return nn.log(nn.clip(nn.sigmoid(logits * -1.0), SIGMA_CLAMP, 1.0 - SIGMA_CLAMP))


def disc_inputs(latents, cond_rows):
    """Rows ``[latent, conditioning]`` for the discriminator."""
    latents = nn.as_tensor(latents)
    if cond_rows.shape[1] == 0:
        return latents
    return nn.concat([latents, nn.Tensor(cond_rows)], axis=1)


def discriminator_loss(disc, true_rows, perm_rows, cond_rows, frozen=False):
    """Mean over features and samples of
    ``log(1 - sigma(D(z, c))) + log sigma(D(z_perm, c))``.

    This is the discriminator's log-likelihood with permuted as the positive
    class; the discriminator step minimises its negative.  A zero-output
    discriminator gives ``2 ln 0.5``.  Rows are feature-major ``(N*B, .)``;
    averaging over all rows equals the per-feature batch mean summed over
    features and divided by N.
    """
    d_true = nn.forward(disc, disc_inputs(true_rows, cond_rows), frozen)
    d_perm = nn.forward(disc, disc_inputs(perm_rows, cond_rows), frozen)
    return (_log_one_minus_sigmoid_clamped(d_true) + _log_sigmoid_clamped(d_perm)).mean()


def adversarial_loss(disc, true_rows, cond_rows, alpha):
    """``alpha`` times the mean of ``log(1 - sigma(D(z, c)))`` over features
    and samples.  The discriminator is used frozen and ``cond_rows`` is a
    constant, so gradients reach only ``true_rows``."""
    d_true = nn.forward(disc, disc_inputs(true_rows, cond_rows), frozen=True)
    return _log_one_minus_sigmoid_clamped(d_true).mean() * alpha


def make_discriminator(latent_dim, action_dim, config, rng):
    h = config.effective_history
    in_dim = latent_dim + h * (latent_dim + action_dim)
    hid = config.disc_hidden
    return nn.Mlp([in_dim, hid, hid, 1], rng=rng, name="discriminator")


# ----------------------------------------------------------------- module


class Cmid:
    """Discriminator, its optimiser and the encoder's adversarial optimiser.

    Operates on a :class:`~cmidrl.rl.SacAgent`'s ``encoder`` and
    ``momentum_encoder``.
    """

    def __init__(self, agent, config=None, rng=None):
        self.config = config or CmidConfig(enabled=True)
        self.config.validate(agent.config.batch_size)
        self.agent = agent
        rng = rng if rng is not None else np.random.default_rng()
        self.discriminator = make_discriminator(agent.config.latent_dim, agent.action_dim,
                                                self.config, rng)
        self.disc_opt = nn.Adam(self.discriminator.parameters(), lr=self.config.disc_lr)
        # scaled by the critic optimiser's second moments so that alpha sets
        # the adversarial step relative to the RL gradient; a separate Adam
        # would normalise alpha away
        self.encoder_opt = nn.ScaledMomentum(agent.encoder.parameters(), agent.critic_opt,
                                             lr=agent.config.lr)
        self.steps = 0

    def prepare(self, batch, rng):
        """Latents and conditioning for the rows of ``batch`` that have the
        required history.  Returns ``None`` if too few rows remain."""
        cfg, agent = self.config, self.agent
        h = cfg.effective_history
        rows = batch.history_valid if h > 0 else np.ones(len(batch), dtype=bool)
        if rows.sum() <= cfg.k:
            return None
        batch = batch.subset(rows)
        obs = batch.obs_stack[:, -1]
        if agent.config.augment and agent.obs_mode == "image16":
            obs = random_shift_augment(obs, rng, agent.config.image_pad, agent.obs_mode)
        b = len(batch)
        with nn.no_grad():
            if h > 0:
                prev = batch.prev_obs[:, :h].reshape(b * h, -1)
                prev_z = nn.forward(agent.momentum_encoder, nn.Tensor(prev)).data
                prev_z = prev_z.reshape(b, h, -1)
            else:
                prev_z = np.zeros((b, 0, agent.config.latent_dim))
        return batch, obs, prev_z

    def update(self, batch, rng):
        """Discriminator step, then encoder adversarial step, then momentum update.

        Returns a dict with ``disc_loss``, ``adv_loss`` and the ``donors``
        used (``(N, B)``), or ``None`` when the batch had too few usable rows.
        """
        cfg, agent = self.config, self.agent
        self.steps += 1
        prepared = self.prepare(batch, rng)
        if prepared is None:
            return None
        batch, obs, prev_z = prepared
        h = cfg.effective_history
        b = len(batch)

        z = nn.forward(agent.encoder, nn.Tensor(obs))
        nfeat = z.shape[1]
        z_true = z.data
        cond = build_conditioning_all(prev_z, batch.prev_action, h).reshape(nfeat * b, -1)

        donors = knn_donors_all(prev_z, batch.prev_action, h, cfg.k, rng)
        perm_rows = permuted_latents_all(z_true, donors)
        true_rows = np.tile(z_true, (nfeat, 1))
        disc_loss = discriminator_loss(self.discriminator, true_rows, perm_rows, cond)
        check_finite("discriminator loss", disc_loss.data)
        self.disc_opt.zero_grad()
        (disc_loss * -1.0).backward()
        self.disc_opt.step()

        adv_loss = adversarial_loss(self.discriminator, nn.tile_rows(z, nfeat), cond, cfg.alpha)
        check_finite("adversarial loss", adv_loss.data)
        if cfg.alpha > 0:
            self.encoder_opt.zero_grad()
            adv_loss.backward()
            self.encoder_opt.step()

        nn.soft_update(agent.momentum_encoder, agent.encoder, cfg.momentum_new_weight)
        return {"disc_loss": disc_loss.item(), "adv_loss": adv_loss.item(), "donors": donors}


def cmid_update_step(batch, agent, cmid, rng_agent, rng_cmid):
    """One step of the combined update: the base RL update first, then the
    CMID discriminator and encoder updates."""
    metrics = agent.update(batch, rng_agent)
    if cmid is not None and cmid.config.enabled and agent.updates % cmid.config.update_freq == 0:
        out = cmid.update(batch, rng_cmid)
        if out is not None:
            metrics["disc_loss"] = out["disc_loss"]
            metrics["adv_loss"] = out["adv_loss"]
    return metrics
