"""
Numerical oracles and the double-precision verification suite behind `main_vapnev.py verify`.

The helpers at the top (central-difference gradients, dense finite-difference Jacobians) are
shared with the pytest suite. VerificationSuite runs each named property, collects a results
dict and prints a pass/fail table.
"""
import math
import time

import numpy as np
import pandas as pd
from tqdm import tqdm

from vn_autodiff import (Tensor, parameter, precision, value_and_grad, conv2d, deconv2d, matmul)
from vn_config import FlowConfig, load_preset
from vn_distributions import GaussianParams, kl_to_standard_normal, LOG_2PI
from vn_errors import ConfigError
from vn_flows import FlowStack
from vn_model import VapnevModel, FlowDensityModel


PROPERTIES = ('op-gradients', 'adjoint', 'invertibility', 'logdet-oracle', 'normalization',
              'gradient-oracle', 'kl-closed-form')

KL_POOLED_Z = 3.0    # standard errors, pooled over all draws
KL_DRAW_Z = 4.5

MULTIPLIER_NAMES = ('alpha', 'beta1', 'beta2', 'bias', 'gate', 'scale')


# ============================================================
# ORACLES
# ============================================================
def relative_error(a, b):
    """||a - b|| / (||a|| + ||b||), 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def relative_gap(value, reference, floor=1e-12):
    """|value - reference| / |reference| for scalars; the denominator never drops below `floor`."""
    return abs(float(value) - float(reference)) / max(abs(float(reference)), floor)


def numerical_gradient(f, array, h=1e-5, indices=None):
    """
    Central differences of the scalar f() w.r.t. entries of `array`, perturbed in place.

    Returns a flat array of derivatives at `indices` (all entries by default).
    """
    flat = array.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        saved = flat[i]
        flat[i] = saved + h
        up = f()
        flat[i] = saved - h
        down = f()
        flat[i] = saved
        out.append((up - down) / (2.0 * h))
    return np.asarray(out)


def gradient_check(loss_fn, params, h=1e-5, max_entries=None, rng=None):
    """
    Compare backward() against central differences for every named parameter group.

    loss_fn() must rebuild the loss deterministically on each call. With max_entries, at most
    that many randomly chosen entries of each group are probed. Returns {name: relative error}.
    """
    _, grads = value_and_grad(loss_fn, params)
    errors = {}
    for name, p in params.items():
        size = p.size
        if max_entries is not None and size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        numeric = numerical_gradient(lambda: float(loss_fn().item()), p.data, h, idx)
        errors[name] = relative_error(grads[name].reshape(-1)[idx], numeric)
    return errors


def dense_jacobian(fn, x, h=1e-5):
    """[D, D] Jacobian of fn: R^D -> R^D assembled column by column from central differences."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h))
    return np.stack(cols, axis=1)


def randomize_multipliers(module, rng, spread=0.5):
    """Move interaction multipliers, gates and residual scales off their identity-at-init values."""
    for name, p in module.named_parameters():
        if name.rsplit('.', 1)[-1] in MULTIPLIER_NAMES:
            p.data += rng.normal(0.0, spread, size=p.shape).astype(p.dtype)


def vector_flow(d, z_dim, rng, conditional=True, width=8):
    cfg = FlowConfig(n_scales=1, checkerboard_per_scale=2, channelwise_per_scale=2, res_filters=width,
                     res_blocks=1, z_channels=2, conditional=conditional)
    return FlowStack((d,), z_dim, cfg, rng)


def logdet_oracle_case(d, rng, break_logdet=False, z_dim=3):
    """(reported total log-det, log|det J| of the finite-difference Jacobian) for a random conditional stack."""
    flow = vector_flow(d, z_dim, rng)
    flow.randomize(rng, scale=0.3)
    if break_logdet:
        flow.logdet_offset = 0.5
    x = rng.normal(size=(1, d))
    z = Tensor(rng.normal(size=(1, z_dim)))
    _, logdet = flow(Tensor(x), z)
    jac = dense_jacobian(lambda v: flow(Tensor(v[None, :]), z)[0].data[0], x[0])
    _, oracle = np.linalg.slogdet(jac)
    return float(logdet.data[0]), float(oracle)


# ============================================================
# OP GRADIENT CASES
# ============================================================
def _away_from(values, points, margin=0.05):
    for pt in points:
        close = np.abs(values - pt) < margin
        values[close] = pt + margin * np.where(values[close] >= pt, 1.0, -1.0) * 2
    return values


def op_cases(rng):
    """(name, inputs, fn) triples; fn maps input Tensors to an output Tensor."""
    a = rng.normal(size=(2, 3, 4))
    return [
        ('add', [a, rng.normal(size=(4,))], lambda x, y: x + y),
        ('sub', [a, rng.normal(size=(3, 4))], lambda x, y: x - y),
        ('mul', [a, rng.normal(size=(4,))], lambda x, y: x * y),
        ('div', [a, rng.uniform(0.5, 2.0, size=(4,)) * rng.choice([-1, 1], size=(4,))], lambda x, y: x / y),
        ('neg', [a], lambda x: -x),
        ('exp', [0.5 * a], lambda x: x.exp()),
        ('log', [rng.uniform(0.5, 2.0, size=(2, 3))], lambda x: x.log()),
        ('sigmoid', [a], lambda x: x.sigmoid()),
        ('tanh', [a], lambda x: x.tanh()),
        ('square', [a], lambda x: x.square()),
        ('leaky_relu', [_away_from(a.copy(), [0.0])], lambda x: x.leaky_relu(0.01)),
        ('clip', [_away_from(a.copy(), [-0.5, 0.5])], lambda x: x.clip(-0.5, 0.5)),
        ('sum', [a], lambda x: x.sum(axis=1)),
        ('mean', [a], lambda x: x.mean(axis=(0, 2), keepdims=True)),
        ('reshape', [a], lambda x: x.reshape(6, 4)),
        ('transpose', [a], lambda x: x.transpose(2, 0, 1)),
        ('crop', [a], lambda x: x[:, :2, 1:3]),
        ('matmul', [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], matmul),
        ('conv2d', [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3))], lambda x, k: conv2d(x, k, 1, 'same')),
        ('conv2d-stride2', [rng.normal(size=(1, 6, 6, 2)), rng.normal(size=(3, 3, 2, 2))], lambda x, k: conv2d(x, k, 2, 'same')),
        ('conv2d-valid', [rng.normal(size=(1, 5, 4, 1)), rng.normal(size=(2, 3, 1, 2))], lambda x, k: conv2d(x, k, 1, 'valid')),
        ('deconv2d', [rng.normal(size=(1, 3, 3, 2)), rng.normal(size=(3, 3, 3, 2))], lambda y, k: deconv2d(y, k, 2, 'same')),
    ]


# ============================================================
# SUITE
# ============================================================
class VerificationSuite:
    """
    Runs the named oracle checks in double precision.

    Args:
        seed: base seed for every random draw.
        quick: reduced case counts (the full suite takes minutes).
        break_logdet: negative control; perturbs the reported flow log-det so 'logdet-oracle' fails.
    """

    def __init__(self, seed=0, quick=False, break_logdet=False, verbose=True):
        self.seed = seed
        self.quick = quick
        self.break_logdet = break_logdet
        self.verbose = verbose
        self.results = {}

    def _rng(self, salt):
        return np.random.default_rng([self.seed, salt])

    def _record(self, name, passed, metric, threshold, detail, started):
        self.results[name] = {
            'passed': bool(passed),
            'metric': float(metric),
            'threshold': float(threshold),
            'detail': detail,
            'seconds': round(time.time() - started, 2),
        }

    def run_all(self, properties=PROPERTIES):
        unknown = [p for p in properties if p not in PROPERTIES]
        if unknown:
            raise ConfigError(f"unknown properties {unknown} (choose from {', '.join(PROPERTIES)})")
        if self.verbose:
            print("=" * 70)
            print(f"🔍 Verification suite (seed={self.seed}, {'quick' if self.quick else 'full'} mode)")
            print("=" * 70)
        checks = {
            'op-gradients': self.check_op_gradients,
            'adjoint': self.check_adjoint,
            'invertibility': self.check_invertibility,
            'logdet-oracle': self.check_logdet_oracle,
            'normalization': self.check_normalization,
            'gradient-oracle': self.check_gradient_oracle,
            'kl-closed-form': self.check_kl_closed_form,
        }
        for name in tqdm(properties, desc='verify', disable=not self.verbose):
            with precision('double'):
                checks[name]()
        if self.verbose:
            self.print_table()
        return self.results

    @property
    def passed(self):
        return bool(self.results) and all(r['passed'] for r in self.results.values())

    def failures(self):
        return [name for name, r in self.results.items() if not r['passed']]

    def print_table(self):
        rows = [{'property': name, 'status': '✅ pass' if r['passed'] else '❌ FAIL',
                 'metric': f"{r['metric']:.3e}", 'threshold': f"{r['threshold']:.1e}",
                 'seconds': r['seconds'], 'detail': r['detail']}
                for name, r in self.results.items()]
        print(pd.DataFrame(rows).to_string(index=False))
        print("=" * 70)

    # --- properties -------------------------------------------------------
    def check_op_gradients(self):
        started = time.time()
        rng = self._rng(1)
        instances = 3 if self.quick else 20
        worst, worst_op = 0.0, ''
        for _ in range(instances):
            for name, inputs, fn in op_cases(rng):
                params = {f"in{i}": parameter(np.array(v, dtype=np.float64)) for i, v in enumerate(inputs)}
                out_shape = fn(*params.values()).shape
                weights = Tensor(rng.normal(size=out_shape))
                errors = gradient_check(lambda: (fn(*params.values()) * weights).sum(), params)
                err = max(errors.values())
                if err > worst:
                    worst, worst_op = err, name
        self._record('op-gradients', worst < 1e-4, worst, 1e-4, f"worst op: {worst_op or '-'}", started)

    def check_adjoint(self):
        started = time.time()
        rng = self._rng(2)
        worst = 0.0
        for _ in range(3 if self.quick else 20):
            stride = int(rng.integers(1, 3))
            k = int(rng.integers(1, 4))
            h, w = int(rng.integers(k, 7)) * stride, int(rng.integers(k, 7)) * stride
            c, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x = Tensor(rng.normal(size=(2, h, w, c)))
            kernel = Tensor(rng.normal(size=(k, k, c, f)))
            y = conv2d(x, kernel, stride, 'same')
            v = Tensor(rng.normal(size=y.shape))
            lhs = float(np.sum(y.data * v.data))
            rhs = float(np.sum(x.data * deconv2d(v, kernel, stride, 'same', output_hw=(h, w)).data))
            worst = max(worst, relative_gap(rhs, lhs))
        self._record('adjoint', worst < 1e-10, worst, 1e-10, "<conv(x), y> vs <x, deconv(y)>", started)

    def check_invertibility(self):
        started = time.time()
        preset = load_preset('desk')
        cfg = preset.model
        data_shape = tuple(cfg.data_shape)
        cases = 10 if self.quick else 100
        worst = {'single': 0.0, 'double': 0.0}
        for kind in ('single', 'double'):
            with precision(kind):
                for case in range(cases):
                    rng = self._rng(1000 + case)
                    flow = FlowStack(data_shape, cfg.latent.z_dim, cfg.flow, rng)
                    randomize_multipliers(flow, rng)
                    x = Tensor(rng.normal(0.0, 1.5, size=(2,) + data_shape))
                    z = Tensor(rng.normal(size=(2, cfg.latent.z_dim)))
                    y, _ = flow(x, z)
                    back = flow.inverse(y, z)
                    err = float(np.max(np.abs(back.data.astype(np.float64) - x.data.astype(np.float64))))
                    worst[kind] = max(worst[kind], err)
        passed = worst['single'] < 1e-4 and worst['double'] < 1e-9
        self._record('invertibility', passed, worst['double'], 1e-9,
                     f"single-precision max err {worst['single']:.2e} (< 1e-4)", started)

    def check_logdet_oracle(self):
        started = time.time()
        cases = 3 if self.quick else 20
        worst, where = 0.0, ''
        for d in (2, 4, 8, 16):
            for case in range(cases):
                rng = self._rng(2000 + 100 * d + case)
                reported, oracle = logdet_oracle_case(d, rng, self.break_logdet)
                err = relative_gap(reported, oracle)
                if err > worst:
                    worst, where = err, f"D={d}"
        self._record('logdet-oracle', worst < 1e-5, worst, 1e-5, f"worst at {where or '-'}", started)

    def check_normalization(self):
        started = time.time()
        preset = load_preset('toy2d')
        rng = self._rng(3)
        model = FlowDensityModel(preset.model, seed=self.seed)
        randomize_multipliers(model, rng, spread=0.2)
        n = 201 if self.quick else 401
        axis = np.linspace(-8.0, 8.0, n)
        gx, gy = np.meshgrid(axis, axis, indexing='ij')
        points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        dens = np.concatenate([model.density(points[i:i + 4096]) for i in range(0, len(points), 4096)]).reshape(n, n)
        mass = float(np.trapz(np.trapz(dens, axis, axis=1), axis))
        self._record('normalization', abs(mass - 1.0) < 0.02, abs(mass - 1.0), 0.02,
                     f"integral over [-8, 8]^2 = {mass:.4f}", started)

    def check_gradient_oracle(self):
        started = time.time()
        preset = load_preset('toy')
        rng = self._rng(4)
        model = VapnevModel(preset.model, seed=self.seed)
        randomize_multipliers(model, rng, spread=0.3)
        x = rng.normal(size=(3,) + tuple(preset.model.data_shape))
        params = model.parameters()

        def loss():
            return model.elbo(x, None, np.random.default_rng(self.seed), kl_weight=1.0).loss

        errors = gradient_check(loss, params, max_entries=2 if self.quick else 6, rng=rng)
        name = max(errors, key=errors.get)
        self._record('gradient-oracle', errors[name] < 1e-3, errors[name], 1e-3,
                     f"{len(errors)} parameter groups, worst '{name}'", started)

    def check_kl_closed_form(self):
        """
        Per draw, z = (Monte Carlo mean - closed form) / standard error. The check passes when
        the pooled z over all draws lies within 3 and no single draw exceeds 4.5 standard errors.
        """
        started = time.time()
        rng = self._rng(5)
        draws = 50
        samples = 500 if self.quick else 4000
        scores = []
        for _ in range(draws):
            dim = 4
            mu = rng.normal(size=(1, dim))
            log_var = rng.uniform(-2.0, 2.0, size=(1, dim))
            closed = float(kl_to_standard_normal(GaussianParams(Tensor(mu), Tensor(log_var))).data[0])
            eps = rng.standard_normal((samples, dim))
            z = mu + np.exp(0.5 * log_var) * eps
            log_q = -0.5 * np.sum(log_var + eps ** 2 + LOG_2PI, axis=1)
            log_p = -0.5 * np.sum(z ** 2 + LOG_2PI, axis=1)
            terms = log_q - log_p
            se = terms.std(ddof=1) / math.sqrt(samples)
            scores.append((terms.mean() - closed) / se)
        scores = np.asarray(scores)
        passed, pooled = kl_scores_pass(scores)
        self._record('kl-closed-form', passed, pooled, KL_POOLED_Z,
                     f"max per-draw |z| = {np.max(np.abs(scores)):.2f} over {draws} draws", started)


def kl_scores_pass(scores):
    """
    Verdict on per-draw Monte Carlo z-scores: (passed, pooled |z|).

    The pooled z (sum / sqrt(draws)) must lie within KL_POOLED_Z and every single draw within KL_DRAW_Z.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return False, float('nan')
    pooled = abs(scores.sum()) / math.sqrt(scores.size)
    return bool(pooled < KL_POOLED_Z and np.max(np.abs(scores)) < KL_DRAW_Z), float(pooled)


def run_verification(seed=0, quick=False, break_logdet=False, verbose=True, properties=PROPERTIES):
    suite = VerificationSuite(seed=seed, quick=quick, break_logdet=break_logdet, verbose=verbose)
    suite.run_all(properties)
    return suite
