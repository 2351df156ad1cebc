"""
VAPNEV: a VAE whose reconstruction likelihood is computed exactly through z-conditional coupling layers.

    q(z|x) = N(mu_z, var_z)                    (Encoder)
    y, logdet = f_z(x)                         (FlowStack, conditioned on a reparametrized z)
    p(y|z) = N(mu_y, var_y)                    (Decoder heads, on the flow's output shape)
    log p(x|z) = log p(y|z) + logdet
    ELBO = log p(x|z) - KL(q(z|x) || N(0, I))

Plus the unconditional 2D density model used by the toy2d preset and the closed-form Gaussian
baseline it is compared against. Nothing in here prints; the trainer and the CLI do.
"""
import dataclasses
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

import vn_checkpoint
from vn_autodiff import Tensor, default_dtype
from vn_config import model_config_from_dict
from vn_data import (ImageBatch, DISCRETE, UNIT, LOGIT, POINTS, dequantize, logit_transform,
                     inverse_logit_transform)
from vn_distributions import (diag_gaussian_log_prob, standard_normal_log_prob,
                              kl_to_standard_normal, reparam_sample, sample)
from vn_errors import ConfigError, ContractError, DomainError, FormatError, NumericsError
from vn_flows import FlowStack
from vn_networks import Module, Encoder, Decoder


LN2 = math.log(2.0)


# ============================================================
# ELBO
# ============================================================
@dataclass
class ElboBreakdown:
    """
    Per-sample terms in nats, plus the differentiable training loss when built under a tape.

    elbo is derived from the other three terms, so elbo == recon_ll + flow_logdet - kl holds exactly.
    correction (the logit-transform log-Jacobian) only enters at reporting time.
    """
    recon_ll: np.ndarray
    flow_logdet: np.ndarray
    kl: np.ndarray
    correction: np.ndarray
    kl_weight: float = 1.0
    loss: Tensor = None

    @property
    def elbo(self):
        return self.recon_ll + self.flow_logdet - self.kl

    def __len__(self):
        return self.recon_ll.shape[0]

    def means(self):
        """Batch-mean view: {'elbo', 'recon_ll', 'flow_logdet', 'kl', 'correction'} as floats."""
        return {
            'elbo': float(np.mean(self.elbo)),
            'recon_ll': float(np.mean(self.recon_ll)),
            'flow_logdet': float(np.mean(self.flow_logdet)),
            'kl': float(np.mean(self.kl)),
            'correction': float(np.mean(self.correction)),
        }

    @classmethod
    def concat(cls, parts):
        return cls(
            recon_ll=np.concatenate([p.recon_ll for p in parts]),
            flow_logdet=np.concatenate([p.flow_logdet for p in parts]),
            kl=np.concatenate([p.kl for p in parts]),
            correction=np.concatenate([p.correction for p in parts]),
            kl_weight=parts[0].kl_weight if parts else 1.0,
        )


def _finite(term, value):
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        raise NumericsError("non-finite value in the ELBO computation", term=term)


def _finite_gaussian(term, p):
    _finite(f"{term}.mu", p.mu)
    _finite(f"{term}.log_var", p.log_var)


@contextmanager
def _term(name):
    """Op-level DomainError (exp overflow, log of zero) inside an ELBO stage becomes a NumericsError for that term."""
    try:
        yield
    except DomainError as e:
        raise NumericsError(f"{e} in the ELBO computation", term=name) from e


def kl_anneal_weight(step, warmup):
    """Linear warmup: min(1, step / warmup); warmup = 0 means the full KL from step 0."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    if warmup == 0:
        return 1.0
    return min(1.0, step / warmup)


def bits_per_dim(breakdown, num_dims, n_bins=None):
    """
    -(elbo + correction) / (D ln 2), averaged over the batch.

    With n_bins the unit-interval density is rescaled to the discrete pixel range, adding
    log2(n_bins) per dimension (a uniform density on [0, 1]^D then reads 8.0 for 256 bins).
    """
    if num_dims < 1:
        raise ContractError(f"D must be >= 1, got {num_dims}")
    nats = float(np.mean(np.asarray(breakdown.elbo) + np.asarray(breakdown.correction)))
    bpd = -nats / (num_dims * LN2)
    if n_bins:
        bpd += math.log2(n_bins)
    return bpd


def _n_bins(domain):
    return 256 if domain == DISCRETE else None


def gaussian_mle_nll(train_points, test_points=None):
    """
    Fit a full-covariance Gaussian by maximum likelihood and return its mean NLL (nats) on
    `test_points` (default: the training points themselves).
    """
    x = np.asarray(train_points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("gaussian_mle_nll needs an [N, D] array with N >= 2")
    mu = x.mean(axis=0)
    centred = x - mu
    cov = centred.T @ centred / x.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericsError("degenerate covariance in the Gaussian fit", term='covariance')
    pts = x if test_points is None else np.asarray(test_points, dtype=np.float64)
    diff = pts - mu
    quad = np.einsum('nd,nd->n', diff, np.linalg.solve(cov, diff.T).T)
    d = x.shape[1]
    return float(np.mean(0.5 * (d * math.log(2.0 * math.pi) + logdet + quad)))


# ============================================================
# VAPNEV
# ============================================================
class VapnevModel(Module):

    def __init__(self, cfg, seed=0):
        super().__init__()
        if cfg.kind != 'vae':
            raise ConfigError(f"VapnevModel needs model kind 'vae', got '{cfg.kind}'")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        data_shape = tuple(int(d) for d in cfg.data_shape)
        z_dim = cfg.latent.z_dim
        self.data_shape = data_shape
        self.z_dim = z_dim
        self.encoder = self.add_child('encoder', Encoder(cfg.encoder, data_shape, z_dim, rng, cfg.logvar_clamp))
        self.flow = self.add_child('flow', FlowStack(data_shape, z_dim, cfg.flow, rng))
        self.decoder = self.add_child('decoder', Decoder(cfg.decoder, data_shape, z_dim, self.flow.output_shape,
                                                         self.flow.n_squeeze, rng, cfg.logvar_clamp))

    @property
    def num_dims(self):
        return self.cfg.num_dims

    def _input(self, x):
        if isinstance(x, ImageBatch):
            if x.domain != LOGIT:
                raise DomainError(f"elbo expects a logit-space batch, got {x.domain}")
            x = x.pixels
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=default_dtype())

    def decode(self, z):
        _, p = self.decoder(z)
        return p

    def elbo(self, x, correction, rng, kl_weight=1.0):
        """
        Single-sample Monte Carlo ELBO per example.

        loss = -mean(recon_ll + flow_logdet - kl_weight * kl). The first non-finite quantity is
        reported by name through NumericsError.
        """
        if not 0.0 <= kl_weight <= 1.0:
            raise ContractError(f"kl_weight must lie in [0, 1], got {kl_weight}")
        xt = self._input(x)
        _finite('input', xt)
        with _term('encoder'):
            q = self.encoder(xt)
        _finite_gaussian('encoder', q)
        with _term('z'):
            z = reparam_sample(q, rng)
        _finite('z', z)
        with _term('flow'):
            y, logdet = self.flow(xt, z)
        _finite('flow', y)
        _finite('flow_logdet', logdet)
        with _term('decoder'):
            p = self.decode(z)
        _finite_gaussian('decoder', p)
        with _term('recon_ll'):
            recon = diag_gaussian_log_prob(y, p)
        _finite('recon_ll', recon)
        with _term('kl'):
            kl = kl_to_standard_normal(q)
        _finite('kl', kl)
        loss = -(recon + logdet - kl * kl_weight).mean()
        _finite('loss', loss)
        corr = np.zeros(xt.shape[0]) if correction is None else np.asarray(correction, dtype=np.float64)
        return ElboBreakdown(
            recon_ll=recon.data.astype(np.float64),
            flow_logdet=logdet.data.astype(np.float64),
            kl=kl.data.astype(np.float64),
            correction=corr,
            kl_weight=float(kl_weight),
            loss=loss,
        )

    def _to_images(self, y, z):
        x = self.flow.inverse(Tensor(y, dtype=default_dtype()), z)
        return inverse_logit_transform(ImageBatch(x.data.astype(np.float64), LOGIT), self.cfg.logit_alpha)

    def generate(self, n, rng, deterministic_y=False):
        """z ~ N(0, I) -> decoder heads -> y (sampled, or mu_y) -> inverse flow -> inverse logit."""
        if n < 1:
            raise ContractError(f"number of samples must be >= 1, got {n}")
        z = Tensor(rng.standard_normal((n, self.z_dim)), dtype=default_dtype())
        p = self.decode(z)
        y = p.mu.data if deterministic_y else sample(p, rng)
        return self._to_images(y, z)

    def reconstruct(self, batch, rng, deterministic_y=False):
        """Encode, draw z from q(z|x), then decode exactly as generate() does."""
        if batch.domain == DISCRETE:
            batch = dequantize(batch, rng)
        elif batch.domain != UNIT:
            raise DomainError(f"reconstruct expects discrete-u8 or unit-interval images, got {batch.domain}")
        logits, _ = logit_transform(batch, self.cfg.logit_alpha)
        q = self.encoder(Tensor(logits.pixels, dtype=default_dtype()))
        z = Tensor(sample(q, rng), dtype=default_dtype())
        p = self.decode(z)
        y = p.mu.data if deterministic_y else sample(p, rng)
        return self._to_images(y, z)

    def prepare(self, batch, rng=None):
        """Raw batch -> (logit-space batch, per-sample correction)."""
        if batch.domain == DISCRETE:
            batch = dequantize(batch, rng)
        return logit_transform(batch, self.cfg.logit_alpha)


# ============================================================
# UNCONDITIONAL 2D FLOW
# ============================================================
class FlowDensityModel(Module):
    """Coupling flow with a standard-normal base: log p(x) = log N(f(x); 0, I) + log|det df/dx|."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        if cfg.kind != 'flow':
            raise ConfigError(f"FlowDensityModel needs model kind 'flow', got '{cfg.kind}'")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.data_shape = tuple(int(d) for d in cfg.data_shape)
        flow_cfg = dataclasses.replace(cfg.flow, conditional=False)
        self.flow = self.add_child('flow', FlowStack(self.data_shape, cfg.latent.z_dim, flow_cfg, rng))

    @property
    def num_dims(self):
        return self.cfg.num_dims

    def log_prob(self, x):
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=default_dtype())
        y, logdet = self.flow(xt)
        return standard_normal_log_prob(y) + logdet, y, logdet

    def density(self, points):
        lp, _, _ = self.log_prob(points)
        return np.exp(lp.data.astype(np.float64))

    def sample(self, n, rng):
        y = Tensor(rng.standard_normal((n,) + self.data_shape), dtype=default_dtype())
        return self.flow.inverse(y).data

    def elbo(self, x, correction, rng, kl_weight=1.0):
        """Exact log-likelihood in ElboBreakdown form (kl = 0) so the trainer treats both models alike."""
        if isinstance(x, ImageBatch):
            x = x.pixels
        with _term('flow'):
            lp, y, logdet = self.log_prob(x)
        _finite('flow', y)
        _finite('flow_logdet', logdet)
        _finite('log_prob', lp)
        n = lp.shape[0]
        loss = -lp.mean()
        return ElboBreakdown(
            recon_ll=(lp - logdet).data.astype(np.float64),
            flow_logdet=logdet.data.astype(np.float64),
            kl=np.zeros(n),
            correction=np.zeros(n) if correction is None else np.asarray(correction, dtype=np.float64),
            kl_weight=float(kl_weight),
            loss=loss,
        )

    def prepare(self, batch, rng=None):
        if batch.domain != POINTS:
            raise DomainError(f"the 2D flow model expects real-points data, got {batch.domain}")
        return batch, np.zeros(len(batch))


# ============================================================
# CONSTRUCTION, EVALUATION, CHECKPOINTS
# ============================================================
def build_model(cfg, seed=0):
    if isinstance(cfg, dict):
        cfg = model_config_from_dict(cfg)
    return VapnevModel(cfg, seed) if cfg.kind == 'vae' else FlowDensityModel(cfg, seed)


def evaluate(model, dataset, rng, batch_size=256):
    """
    Held-out bits/dim: kl_weight = 1, fresh dequantization noise, no augmentation, averaged over
    the whole split. Returns the summary dict plus the concatenated ElboBreakdown.
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    parts = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.subset(slice(start, start + batch_size))
        x, correction = model.prepare(chunk, rng)
        parts.append(model.elbo(x, correction, rng, kl_weight=1.0))
    breakdown = ElboBreakdown.concat(parts)
    summary = breakdown.means()
    summary['bits_per_dim'] = bits_per_dim(breakdown, model.num_dims, _n_bins(dataset.domain))
    summary['n'] = len(breakdown)
    return summary, breakdown


def model_shapes(config):
    """{parameter name: shape} implied by a stored model config (used to validate checkpoints)."""
    try:
        model = build_model(model_config_from_dict(config))
    except ConfigError as e:
        raise FormatError(f"checkpoint config is invalid: {e}") from e
    return {name: p.shape for name, p in model.named_parameters()}


def make_checkpoint(model, optimizer=None, state=None):
    tensors = {name: p.data for name, p in model.named_parameters()}
    state = dict(state or {})
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        state['adam_t'] = optimizer.state.t
    return vn_checkpoint.ModelCheckpoint(config=model.cfg.to_dict(), tensors=tensors, state=state)


def restore_model(checkpoint, precision_dtype=None):
    """Rebuild the model from a checkpoint's config and copy its parameters in."""
    cfg = model_config_from_dict(checkpoint.config)
    model = build_model(cfg)
    params = checkpoint.parameters()
    for name, p in model.named_parameters():
        p.data = np.array(params[name], dtype=precision_dtype or params[name].dtype)
    return model


def load_model_checkpoint(path):
    return vn_checkpoint.load(path, expected_shapes=model_shapes)


def elbo(model, x, correction, rng, kl_weight=1.0):
    return model.elbo(x, correction, rng, kl_weight)


def generate(model, n, rng, deterministic_y=False):
    return model.generate(n, rng, deterministic_y)


def reconstruct(model, batch, rng, deterministic_y=False):
    return model.reconstruct(batch, rng, deterministic_y)
