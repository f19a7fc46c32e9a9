"""Contrastive VAE and standard VAE: architectures, loss graphs, downstream tasks."""

import copy
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .nn import DenseLayer, DimensionError, GaussianParams, NonFiniteError, Tape
from .rng import stream

RECON_MODELS = ("bernoulli", "gaussian")
HIDDEN_DIM = 128


class ZeroBiasRequired(ValueError):
    """Raised when denoising is requested from a model that has bias terms."""


# --------------------------------------------------------------------------
# shared parameter plumbing


class _Network:
    layers: dict

    def parameters(self):
        """Trainable arrays by dotted name, biases omitted where ``use_bias`` is off."""
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.weights"] = layer.weights
            if layer.use_bias:
                out[f"{name}.bias"] = layer.bias
        return out

    def tensors(self):
        """Every stored array (zero biases included), for checkpoints."""
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.weights"] = layer.weights
            out[f"{name}.bias"] = layer.bias
        return out

    def parameter_count(self):
        return sum(a.size for a in self.parameters().values())

    def copy(self):
        return copy.deepcopy(self)

    def _leaves(self, tape, names=None):
        """Tape leaves for all layers; ``names`` restricts which ones require grad."""
        nodes = {}
        for key, arr in self.parameters().items():
            trainable = names is None or key.split(".")[0] in names
            nodes[key] = tape.leaf(arr, requires_grad=trainable)
        return nodes

    def _dense(self, tape, nodes, name, x):
        layer = self.layers[name]
        bias = nodes.get(f"{name}.bias") if layer.use_bias else None
        return tape.dense(x, nodes[f"{name}.weights"], bias)

    def _encoder(self, tape, nodes, prefix, x):
        h = tape.relu(self._dense(tape, nodes, f"{prefix}.hidden", x))
        mu = self._dense(tape, nodes, f"{prefix}.mu", h)
        log_var = tape.clip(
            self._dense(tape, nodes, f"{prefix}.log_var", h), nn.LOG_VAR_MIN, nn.LOG_VAR_MAX
        )
        return mu, log_var

    def _decoder(self, tape, nodes, v):
        h = tape.relu(self._dense(tape, nodes, "dec.hidden", v))
        return self._dense(tape, nodes, "dec.out", h)

    def _nll(self, tape, out, target):
        if self.recon_model == "bernoulli":
            return tape.bernoulli_nll(out, target)
        return tape.gaussian_nll(out, target)

    def _check_width(self, x, width, what):
        x = nn.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != width:
            raise DimensionError(f"{what}: expected shape (batch, {width}), got {x.shape}")
        return x

    def _apply_encoder(self, prefix, x):
        h = nn.relu(nn.dense_forward(x, self.layers[f"{prefix}.hidden"]))
        mu = nn.dense_forward(h, self.layers[f"{prefix}.mu"])
        log_var = nn.dense_forward(h, self.layers[f"{prefix}.log_var"])
        return GaussianParams(mu, log_var)

    def _apply_decoder(self, v, logits):
        h = nn.relu(nn.dense_forward(v, self.layers["dec.hidden"]))
        out = nn.dense_forward(h, self.layers["dec.out"])
        if self.recon_model == "bernoulli" and not logits:
            return nn.sigmoid(out)
        return out


def _make_layers(spec, seed, zero_bias):
    layers = {}
    for name, (n_in, n_out) in spec.items():
        layers[name] = DenseLayer.he_init(n_in, n_out, stream(seed, "init", name), use_bias=not zero_bias)
    return layers


def _check_recon(recon_model):
    if recon_model not in RECON_MODELS:
        raise ValueError(f"recon_model must be one of {RECON_MODELS}, got {recon_model!r}")


# --------------------------------------------------------------------------
# contrastive VAE


class CvaeModel(_Network):
    """Two encoders (salient ``s``, irrelevant ``z``), a shared decoder and a
    logistic-regression discriminator on ``[s, z]``."""

    ENCODER_LAYERS = ("enc_s", "enc_z", "dec")

    def __init__(self, layers, input_dim, s_dim, z_dim, zero_bias=False, recon_model="bernoulli", hidden_dim=HIDDEN_DIM):
        _check_recon(recon_model)
        self.layers = layers
        self.input_dim = int(input_dim)
        self.s_dim = int(s_dim)
        self.z_dim = int(z_dim)
        self.hidden_dim = int(hidden_dim)
        self.zero_bias = bool(zero_bias)
        self.recon_model = recon_model
        self._validate()

    def _validate(self):
        if self.layers["dec.hidden"].in_dim != self.s_dim + self.z_dim:
            raise DimensionError("decoder input width must equal s_dim + z_dim")
        if self.layers["disc"].out_dim != 1 or self.layers["disc"].in_dim != self.s_dim + self.z_dim:
            raise DimensionError("discriminator must map s_dim + z_dim features to one logit")
        if self.zero_bias:
            for name, layer in self.layers.items():
                if name != "disc" and layer.use_bias:
                    raise ValueError(f"zero_bias model has a bias in layer {name}")

    @classmethod
    def initialize(cls, input_dim, s_dim=2, z_dim=2, seed=0, zero_bias=False, recon_model="bernoulli", hidden_dim=HIDDEN_DIM):
        if min(input_dim, s_dim, z_dim, hidden_dim) < 1:
            raise ValueError("all dimensions must be >= 1")
        spec = {
            "enc_s.hidden": (input_dim, hidden_dim),
            "enc_s.mu": (hidden_dim, s_dim),
            "enc_s.log_var": (hidden_dim, s_dim),
            "enc_z.hidden": (input_dim, hidden_dim),
            "enc_z.mu": (hidden_dim, z_dim),
            "enc_z.log_var": (hidden_dim, z_dim),
            "dec.hidden": (s_dim + z_dim, hidden_dim),
            "dec.out": (hidden_dim, input_dim),
        }
        layers = _make_layers(spec, seed, zero_bias)
        # logistic regression starts uninformative: D = 0.5 everywhere
        layers["disc"] = DenseLayer.zeros(s_dim + z_dim, 1, use_bias=True)
        return cls(layers, input_dim, s_dim, z_dim, zero_bias, recon_model, hidden_dim)

    @classmethod
    def from_config(cls, input_dim, config):
        return cls.initialize(
            input_dim,
            config.s_dim,
            config.z_dim,
            seed=config.seed,
            zero_bias=config.zero_bias,
            recon_model=config.recon_model,
            hidden_dim=config.hidden_dim,
        )

    def generator_parameters(self):
        return {k: v for k, v in self.parameters().items() if not k.startswith("disc.")}

    def discriminator_parameters(self):
        return {k: v for k, v in self.parameters().items() if k.startswith("disc.")}

    def architecture(self):
        return {
            "kind": "cvae",
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "s_dim": self.s_dim,
            "z_dim": self.z_dim,
            "zero_bias": self.zero_bias,
            "recon_model": self.recon_model,
        }


def encode(model, x, which):
    """Posterior parameters of the salient (``"salient"``) or irrelevant encoder."""
    prefix = {"salient": "enc_s", "irrelevant": "enc_z"}.get(which)
    if prefix is None:
        raise ValueError(f"which must be 'salient' or 'irrelevant', got {which!r}")
    x = model._check_width(x, model.input_dim, "encode")
    return model._apply_encoder(prefix, x)


def decode(model, s, z, logits=False):
    """Decoder applied to ``[s, z]``.

    Bernoulli models return ``sigmoid`` probabilities unless ``logits`` is
    set; Gaussian models always return the raw linear output.
    """
    s = model._check_width(s, model.s_dim, "decode salient input")
    z = model._check_width(z, model.z_dim, "decode irrelevant input")
    if s.shape[0] != z.shape[0]:
        raise DimensionError(f"decode: batch sizes {s.shape[0]} and {z.shape[0]} differ")
    return model._apply_decoder(np.concatenate([s, z], axis=1), logits)


def discriminator_forward(model, v):
    v = model._check_width(v, model.s_dim + model.z_dim, "discriminator input")
    p = nn.sigmoid(nn.dense_forward(v, model.layers["disc"])[:, 0])
    return np.clip(p, nn.PROB_EPS, 1.0 - nn.PROB_EPS)


def tc_estimate(probs):
    """Batch-mean log-odds of the discriminator: the density-ratio TC estimate."""
    p = np.clip(np.asarray(probs, dtype=np.float64), nn.PROB_EPS, 1.0 - nn.PROB_EPS)
    return float(np.mean(np.log(p) - np.log1p(-p)))


def discriminator_loss(probs_joint, probs_shuffled):
    """Mean BCE; joint draws labelled 1, shuffled (product-of-marginals) draws 0."""
    pj = np.clip(np.asarray(probs_joint, dtype=np.float64), nn.PROB_EPS, 1.0 - nn.PROB_EPS)
    ps = np.clip(np.asarray(probs_shuffled, dtype=np.float64), nn.PROB_EPS, 1.0 - nn.PROB_EPS)
    if pj.size == 0 or ps.size == 0:
        raise ValueError("discriminator_loss needs nonempty batches")
    losses = np.concatenate([-np.log(pj), -np.log1p(-ps)])
    return float(losses.mean())


def shuffle_latents(s_batch, z_batch, rng):
    """Pair each ``s`` row with a uniformly permuted ``z`` row."""
    s_batch = np.asarray(s_batch)
    z_batch = np.asarray(z_batch)
    if s_batch.shape[0] != z_batch.shape[0]:
        raise DimensionError(f"shuffle_latents: batch sizes {s_batch.shape[0]} and {z_batch.shape[0]} differ")
    perm = rng.permutation(z_batch.shape[0])
    return s_batch, z_batch[perm]


# --------------------------------------------------------------------------
# loss graphs


@dataclass
class LossBreakdown:
    recon_target: float = 0.0
    kl_s: float = 0.0
    kl_z_target: float = 0.0
    recon_background: float = 0.0
    kl_z_background: float = 0.0
    tc_estimate: float = 0.0
    discriminator_loss: float = 0.0
    total: float = 0.0

    def weighted_total(self, tc_weight):
        return (
            self.recon_target
            + self.kl_s
            + self.kl_z_target
            + self.recon_background
            + self.kl_z_background
            + tc_weight * self.tc_estimate
        )

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def average(cls, items):
        items = list(items)
        if not items:
            return cls()
        return cls(**{f.name: float(np.mean([getattr(i, f.name) for i in items])) for f in fields(cls)})


@dataclass
class CvaeGraph:
    """Tape and the nodes of one forward pass of the generator objective."""

    tape: Tape
    leaves: dict
    total: object
    terms: dict
    s: object = None
    z: object = None


def _require_finite(terms):
    for name, node in terms.items():
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteError(f"non-finite value in loss term {name!r}")


def _target_nodes(model, tape, leaves, x, eps_s, eps_z):
    x_node = tape.constant(x)
    mu_s, lv_s = model._encoder(tape, leaves, "enc_s", x_node)
    mu_z, lv_z = model._encoder(tape, leaves, "enc_z", x_node)
    s = tape.reparameterize(mu_s, lv_s, eps_s)
    z = tape.reparameterize(mu_z, lv_z, eps_z)
    out = model._decoder(tape, leaves, tape.concat(s, z))
    terms = {
        "recon_target": tape.mean(model._nll(tape, out, x)),
        "kl_s": tape.mean(tape.kl(mu_s, lv_s)),
        "kl_z_target": tape.mean(tape.kl(mu_z, lv_z)),
    }
    return terms, s, z


def _background_nodes(model, tape, leaves, b, eps_z):
    b_node = tape.constant(b)
    mu_z, lv_z = model._encoder(tape, leaves, "enc_z", b_node)
    z = tape.reparameterize(mu_z, lv_z, eps_z)
    zeros = tape.constant(np.zeros((b.shape[0], model.s_dim)))
    out = model._decoder(tape, leaves, tape.concat(zeros, z))
    return {
        "recon_background": tape.mean(model._nll(tape, out, b)),
        "kl_z_background": tape.mean(tape.kl(mu_z, lv_z)),
    }


def _check_eps(eps, rows, width, what):
    eps = nn.as_tensor(eps)
    if eps.shape != (rows, width):
        raise DimensionError(f"{what}: expected shape {(rows, width)}, got {eps.shape}")
    return eps


def build_cvae_graph(model, x, b, eps_s, eps_z, eps_zb, tc_weight=1.0, trainable=None):
    """Generator objective on the tape: both bounds plus ``tc_weight`` * TC.

    ``b`` may be ``None`` (target bound only); ``tc_weight`` of ``None`` drops
    the TC node from the graph altogether.
    """
    x = model._check_width(x, model.input_dim, "target batch")
    n = x.shape[0]
    eps_s = _check_eps(eps_s, n, model.s_dim, "eps_s")
    eps_z = _check_eps(eps_z, n, model.z_dim, "eps_z")
    tape = Tape()
    leaves = model._leaves(tape, trainable)
    terms, s, z = _target_nodes(model, tape, leaves, x, eps_s, eps_z)
    if b is not None:
        b = model._check_width(b, model.input_dim, "background batch")
        eps_zb = _check_eps(eps_zb, b.shape[0], model.z_dim, "eps_zb")
        terms.update(_background_nodes(model, tape, leaves, b, eps_zb))
    weighted = [(1.0, t) for t in terms.values()]
    if tc_weight is not None:
        logits = model._dense(tape, leaves, "disc", tape.concat(s, z))
        terms["tc_estimate"] = tape.mean(tape.clamped_log_odds(logits))
        weighted.append((float(tc_weight), terms["tc_estimate"]))
    total = tape.weighted_sum(weighted)
    _require_finite(terms)
    return CvaeGraph(tape, leaves, total, terms, s, z)


def _breakdown(terms, total):
    return LossBreakdown(total=float(total.value), **{k: float(v.value) for k, v in terms.items()})


def target_loss(model, x_batch, eps_s, eps_z):
    """Negated target bound: reconstruction + KL(q_s || p) + KL(q_z || p), batch means."""
    g = build_cvae_graph(model, x_batch, None, eps_s, eps_z, None, tc_weight=None)
    return _breakdown(g.terms, g.total)


def background_loss(model, b_batch, eps_z):
    """Negated background bound; the salient slot of the decoder input is zero."""
    b = model._check_width(b_batch, model.input_dim, "background batch")
    eps_z = _check_eps(eps_z, b.shape[0], model.z_dim, "eps_z")
    tape = Tape()
    leaves = model._leaves(tape)
    terms = _background_nodes(model, tape, leaves, b, eps_z)
    _require_finite(terms)
    total = tape.weighted_sum([(1.0, t) for t in terms.values()])
    return _breakdown(terms, total)


def background_loss_gradients(model, b_batch, eps_z):
    """Gradients of the background bound for every generator parameter (zeros where unused)."""
    b = model._check_width(b_batch, model.input_dim, "background batch")
    tape = Tape()
    leaves = model._leaves(tape)
    terms = _background_nodes(model, tape, leaves, b, _check_eps(eps_z, b.shape[0], model.z_dim, "eps_z"))
    total = tape.weighted_sum([(1.0, t) for t in terms.values()])
    tape.backward(total)
    return {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in leaves.items()}


def cvae_gradients(model, x, b, eps_s, eps_z, eps_zb, tc_weight=1.0):
    """``(LossBreakdown, grads)`` for the generator objective; grads cover encoders and decoder."""
    g = build_cvae_graph(model, x, b, eps_s, eps_z, eps_zb, tc_weight, trainable=CvaeModel.ENCODER_LAYERS)
    g.tape.backward(g.total)
    grads = {
        k: (n.grad if n.grad is not None else np.zeros_like(n.value))
        for k, n in g.leaves.items()
        if n.requires_grad
    }
    return _breakdown(g.terms, g.total), grads, g


def discriminator_gradients(model, v_joint, v_shuffled):
    """``(loss, grads)`` of the discriminator BCE; latents are constants here."""
    tape = Tape()
    leaves = model._leaves(tape, names=("disc",))
    v = tape.constant(np.concatenate([v_joint, v_shuffled], axis=0))
    labels = np.concatenate([np.ones(len(v_joint)), np.zeros(len(v_shuffled))])
    logits = model._dense(tape, leaves, "disc", v)
    loss = tape.mean(tape.binary_cross_entropy(logits, labels))
    tape.backward(loss)
    grads = {k: n.grad for k, n in leaves.items() if k.startswith("disc.")}
    return float(loss.value), grads


# --------------------------------------------------------------------------
# downstream tasks


def infer_salient(model, x, eps=None):
    """Posterior mean of the salient encoder, or a reparameterized sample when ``eps`` is given."""
    params = encode(model, x, "salient")
    if eps is None:
        return params.mu
    return nn.reparameterize(params, eps)


def infer_irrelevant(model, x):
    return encode(model, x, "irrelevant").mu


def generate_salient_sweep(model, grid, logits=False):
    """Decode each salient grid point with the irrelevant slot set to zero, in grid order."""
    grid = model._check_width(np.atleast_2d(np.asarray(grid, dtype=np.float64)), model.s_dim, "salient grid")
    return decode(model, grid, np.zeros((grid.shape[0], model.z_dim)), logits=logits)


def denoise(model, x, logits=False, eps=None):
    """Decode ``[s(x), 0]``: remove the irrelevant variation from ``x``.

    Only meaningful with bias-free networks, where a zero irrelevant code
    contributes nothing; other models are refused.
    """
    if not model.zero_bias:
        raise ZeroBiasRequired(
            "denoise requires a model trained with zero_bias=True: with bias terms a zero "
            "irrelevant code can still shift the decoder output, so setting z = 0 does not "
            "remove the irrelevant features"
        )
    s = infer_salient(model, x, eps)
    return decode(model, s, np.zeros((s.shape[0], model.z_dim)), logits=logits)


def lattice_grid(s_dim=2, points_per_axis=7, lo=-3.0, hi=3.0):
    """Row-major lattice over ``[lo, hi]^s_dim``, last coordinate fastest."""
    axis = np.linspace(lo, hi, points_per_axis)
    mesh = np.meshgrid(*([axis] * s_dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


# --------------------------------------------------------------------------
# standard VAE baseline


class VaeModel(_Network):
    ENCODER_LAYERS = ("enc", "dec")

    def __init__(self, layers, input_dim, latent_dim, zero_bias=False, recon_model="bernoulli", hidden_dim=HIDDEN_DIM):
        _check_recon(recon_model)
        self.layers = layers
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.hidden_dim = int(hidden_dim)
        self.zero_bias = bool(zero_bias)
        self.recon_model = recon_model
        if layers["dec.hidden"].in_dim != self.latent_dim:
            raise DimensionError("decoder input width must equal latent_dim")

    @classmethod
    def initialize(cls, input_dim, latent_dim=2, seed=0, zero_bias=False, recon_model="bernoulli", hidden_dim=HIDDEN_DIM):
        if min(input_dim, latent_dim, hidden_dim) < 1:
            raise ValueError("all dimensions must be >= 1")
        spec = {
            "enc.hidden": (input_dim, hidden_dim),
            "enc.mu": (hidden_dim, latent_dim),
            "enc.log_var": (hidden_dim, latent_dim),
            "dec.hidden": (latent_dim, hidden_dim),
            "dec.out": (hidden_dim, input_dim),
        }
        return cls(_make_layers(spec, seed, zero_bias), input_dim, latent_dim, zero_bias, recon_model, hidden_dim)

    def architecture(self):
        return {
            "kind": "vae",
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "latent_dim": self.latent_dim,
            "zero_bias": self.zero_bias,
            "recon_model": self.recon_model,
        }


def vae_gradients(model, x, eps):
    """``(LossBreakdown, grads)`` of the single-encoder ELBO (reported in the target fields)."""
    x = model._check_width(x, model.input_dim, "VAE batch")
    eps = _check_eps(eps, x.shape[0], model.latent_dim, "eps")
    tape = Tape()
    leaves = model._leaves(tape)
    mu, lv = model._encoder(tape, leaves, "enc", tape.constant(x))
    z = tape.reparameterize(mu, lv, eps)
    out = model._decoder(tape, leaves, z)
    terms = {
        "recon_target": tape.mean(model._nll(tape, out, x)),
        "kl_z_target": tape.mean(tape.kl(mu, lv)),
    }
    _require_finite(terms)
    total = tape.weighted_sum([(1.0, t) for t in terms.values()])
    tape.backward(total)
    grads = {k: n.grad for k, n in leaves.items()}
    return _breakdown(terms, total), grads


def vae_embed(model, x):
    """Posterior means of the VAE encoder."""
    x = model._check_width(x, model.input_dim, "vae_embed")
    return model._apply_encoder("enc", x).mu


def vae_decode(model, z, logits=False):
    z = model._check_width(z, model.latent_dim, "vae_decode")
    return model._apply_decoder(z, logits)
