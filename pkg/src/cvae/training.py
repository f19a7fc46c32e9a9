"""Training loops for the contrastive VAE and the VAE baseline."""

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import (
    RECON_MODELS,
    LossBreakdown,
    cvae_gradients,
    discriminator_gradients,
    vae_gradients,
)
from .nn import AdamState, NonFiniteError, adam_step
from .rng import stream

log = logging.getLogger(__name__)

INIT_SCHEME = "he-normal std=sqrt(2/in_dim), zero bias; discriminator zeros"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    tc_weight: float = 1.0
    seed: int = 0
    zero_bias: bool = False
    s_dim: int = 2
    z_dim: int = 2
    recon_model: str = "bernoulli"
    hidden_dim: int = 128

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so the latent shuffle is nontrivial")
        if min(self.s_dim, self.z_dim, self.hidden_dim) < 1:
            raise ValueError("latent and hidden dimensions must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.tc_weight < 0:
            raise ValueError("tc_weight must be >= 0")
        if self.recon_model not in RECON_MODELS:
            raise ValueError(f"recon_model must be one of {RECON_MODELS}")

    def as_dict(self):
        return asdict(self)


class Optimizers:
    """One AdamState per trainable array, created lazily."""

    def __init__(self, config):
        self.config = config
        self.states = {}

    def step(self, params, grads, group=""):
        for name in sorted(grads):
            key = f"{group}{name}"
            if key not in self.states:
                self.states[key] = AdamState.for_param(
                    params[name],
                    self.config.learning_rate,
                    self.config.beta1,
                    self.config.beta2,
                    self.config.epsilon,
                )
            adam_step(params[name], grads[name], self.states[key])


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def _draw_noise(rng, rows, width):
    return rng.standard_normal((rows, width))


def train_step(model, x_batch, b_batch, optimizers, rng, config):
    """One joint update of encoders + decoder, then one discriminator update.

    Draw order from ``rng``: eps_s, eps_z (target), eps_z (background), the
    latent permutation.
    """
    n, m = len(x_batch), len(b_batch)
    eps_s = _draw_noise(rng, n, model.s_dim)
    eps_z = _draw_noise(rng, n, model.z_dim)
    eps_zb = _draw_noise(rng, m, model.z_dim)
    perm = rng.permutation(n)

    losses, grads, graph = cvae_gradients(model, x_batch, b_batch, eps_s, eps_z, eps_zb, config.tc_weight)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")

    s = graph.s.value
    z = graph.z.value
    v_joint = np.concatenate([s, z], axis=1)
    v_shuffled = np.concatenate([s, z[perm]], axis=1)

    optimizers.step(model.generator_parameters(), grads, "gen:")
    d_loss, d_grads = discriminator_gradients(model, v_joint, v_shuffled)
    optimizers.step(model.discriminator_parameters(), d_grads, "disc:")

    losses.discriminator_loss = d_loss
    return losses


def epoch_batches(n_target, n_background, batch_size, seed, epoch):
    """Index pairs for one epoch.

    Target rows are shuffled and all consumed (last batch may be short);
    background rows are shuffled independently and cycled when shorter.
    """
    if n_target == 0 or n_background == 0:
        raise ValueError("datasets must be nonempty")
    t_order = stream(seed, "order", "target", epoch).permutation(n_target)
    b_rng = stream(seed, "order", "background", epoch)
    chunks = []
    have = 0
    while have < n_target:
        chunks.append(b_rng.permutation(n_background))
        have += n_background
    b_order = np.concatenate(chunks)[:n_target]
    pairs = []
    for start in range(0, n_target, batch_size):
        stop = min(start + batch_size, n_target)
        pairs.append((t_order[start:stop], b_order[start:stop]))
    return pairs


def _samples(ds):
    return ds.samples if hasattr(ds, "samples") else np.asarray(ds, dtype=np.float64)


def _param_digest(model):
    h = hashlib.sha256()
    for name, arr in sorted(model.tensors().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def train(model, target, background, config, on_epoch=None):
    """Train a :class:`CvaeModel` in place on unpaired target/background data."""
    x_all = _samples(target)
    b_all = _samples(background)
    if len(x_all) == 0 or len(b_all) == 0:
        raise ValueError("target and background datasets must be nonempty")
    for name, arr in (("target", x_all), ("background", b_all)):
        if arr.ndim != 2 or arr.shape[1] != model.input_dim:
            raise ValueError(f"{name} width {arr.shape[1:]} does not match model input_dim {model.input_dim}")

    optimizers = Optimizers(config)
    history = []
    step_count = 0
    last_good = None
    for epoch in range(config.epochs):
        per_step = []
        for step, (ti, bi) in enumerate(epoch_batches(len(x_all), len(b_all), config.batch_size, config.seed, epoch)):
            rng = stream(config.seed, "step", epoch, step)
            try:
                losses = train_step(model, x_all[ti], b_all[bi], optimizers, rng, config)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch} step {step}: {exc}; last good losses: {last_good}"
                ) from exc
            per_step.append(losses)
            last_good = losses
            step_count += 1
        summary = LossBreakdown.average(per_step)
        history.append(summary)
        log.info("epoch %d total=%.4f tc=%.4f disc=%.4f", epoch, summary.total, summary.tc_estimate, summary.discriminator_loss)
        if on_epoch is not None:
            on_epoch(epoch, summary)

    manifest = {
        "model": model.architecture(),
        "config": config.as_dict(),
        "seed": config.seed,
        "init_scheme": INIT_SCHEME,
        "n_target": int(len(x_all)),
        "n_background": int(len(b_all)),
        "steps": step_count,
        "final_losses": history[-1].as_dict() if history else None,
        "parameter_sha256": _param_digest(model),
    }
    return TrainResult(model, history, manifest)


def vae_train(model, target, config, on_epoch=None):
    """Train a :class:`VaeModel` in place with the single-encoder ELBO."""
    x_all = _samples(target)
    if len(x_all) == 0:
        raise ValueError("target dataset must be nonempty")
    if x_all.ndim != 2 or x_all.shape[1] != model.input_dim:
        raise ValueError(f"target width {x_all.shape[1:]} does not match model input_dim {model.input_dim}")

    optimizers = Optimizers(config)
    history = []
    for epoch in range(config.epochs):
        order = stream(config.seed, "order", "target", epoch).permutation(len(x_all))
        per_step = []
        for step, start in enumerate(range(0, len(x_all), config.batch_size)):
            idx = order[start : start + config.batch_size]
            rng = stream(config.seed, "step", epoch, step)
            eps = rng.standard_normal((len(idx), model.latent_dim))
            try:
                losses, grads = vae_gradients(model, x_all[idx], eps)
            except NonFiniteError as exc:
                raise TrainingError(f"VAE training diverged at epoch {epoch} step {step}: {exc}") from exc
            optimizers.step(model.parameters(), grads)
            per_step.append(losses)
        summary = LossBreakdown.average(per_step)
        history.append(summary)
        log.info("vae epoch %d total=%.4f", epoch, summary.total)
        if on_epoch is not None:
            on_epoch(epoch, summary)

    manifest = {
        "model": model.architecture(),
        "config": config.as_dict(),
        "seed": config.seed,
        "init_scheme": INIT_SCHEME,
        "n_target": int(len(x_all)),
        "final_losses": history[-1].as_dict() if history else None,
        "parameter_sha256": _param_digest(model),
    }
    return TrainResult(model, history, manifest)

