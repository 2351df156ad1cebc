"""
Training loop: ELBO -> backward -> ADAM, one minibatch per step.

Writes `metrics.csv` (one line per step: step,elbo,recon_ll,flow_logdet,kl,bits_per_dim) and a
rolling `checkpoint.vpnv` into the output directory. Every step draws its batch, dequantization
noise and reparametrization noise from a generator derived from (seed, step), so a run resumed
from a checkpoint continues the exact loss trace of an uninterrupted one.
"""
import os
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

import vn_checkpoint
from vn_autodiff import Adam, Tape, backward, precision, default_dtype
from vn_data import (BatchSampler, ImageBatch, DISCRETE, POINTS, downscale_area, load_dataset, split_holdout,
                     step_rng, two_mode_dataset)
from vn_errors import ConfigError, FormatError, NumericsError
from vn_helpers import atomic_write_text
from vn_model import (VapnevModel, build_model, bits_per_dim, kl_anneal_weight, make_checkpoint,
                      restore_model, load_model_checkpoint)


METRICS_NAME = 'metrics.csv'
CHECKPOINT_NAME = 'checkpoint.vpnv'
METRICS_COLUMNS = ('step', 'elbo', 'recon_ll', 'flow_logdet', 'kl', 'bits_per_dim')


@dataclass
class TrainResult:
    model: object
    optimizer: Adam
    checkpoint_path: str
    metrics_path: str
    history: list = field(default_factory=list)
    last_step: int = 0


# ============================================================
# METRICS LOG
# ============================================================
def format_metrics_row(step, means, bpd):
    values = [means['elbo'], means['recon_ll'], means['flow_logdet'], means['kl'], bpd]
    return ','.join([str(int(step))] + [f"{v:.17g}" for v in values])


class MetricsLog:
    """Append-only CSV. On resume, rows at or past the resume step (written after the last checkpoint) are dropped."""

    def __init__(self, path, start_step=0):
        self.path = path
        header = ','.join(METRICS_COLUMNS)
        kept = []
        if start_step > 0 and os.path.exists(path):
            with open(path, 'r', encoding='utf-8') as f:
                for line in f.read().splitlines()[1:]:
                    if line and int(line.split(',', 1)[0]) < start_step:
                        kept.append(line)
        atomic_write_text(path, '\n'.join([header] + kept) + '\n')

    def append(self, step, means, bpd):
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(format_metrics_row(step, means, bpd) + '\n')


def read_metrics(path):
    """Rows of the metrics log as dicts (step as int, the rest as float)."""
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(',')
        row = {'step': int(parts[0])}
        row.update({k: float(v) for k, v in zip(METRICS_COLUMNS[1:], parts[1:])})
        rows.append(row)
    return rows


# ============================================================
# TRAINER
# ============================================================
def _train_state(preset, seed, step):
    return {
        'preset': preset.name,
        'rng': step_rng(seed, step).bit_generator.state,
        'seed': int(seed),
        'step': int(step),
        'train': preset.train.to_dict(),
    }


def _check_rng_state(checkpoint):
    expected = step_rng(checkpoint.seed, checkpoint.step).bit_generator.state
    stored = checkpoint.state.get('rng')
    if stored is not None and stored != expected:
        raise FormatError("checkpoint RNG state does not match its seed and step")


def train(preset, dataset, output_dir, resume=None, prefetch=0, verbose=True):
    """
    Run the preset's step budget on `dataset` (ImageBatch; real-points for toy2d).

    Args:
        preset: vn_config.Preset; model and train sections are used.
        dataset: training split.
        output_dir: receives metrics.csv and checkpoint.vpnv.
        resume: a ModelCheckpoint or a checkpoint path to continue from.
        prefetch: queue depth of the background batch producer (0 = draw inline).

    A NumericsError aborts the run; the checkpoint file then still holds the last good state.
    """
    tc = preset.train
    os.makedirs(output_dir, exist_ok=True)
    checkpoint_path = os.path.join(output_dir, CHECKPOINT_NAME)
    metrics_path = os.path.join(output_dir, METRICS_NAME)

    with precision(tc.precision):
        if resume is not None:
            checkpoint = resume if isinstance(resume, vn_checkpoint.ModelCheckpoint) else load_model_checkpoint(resume)
            _check_rng_state(checkpoint)
            model = restore_model(checkpoint, default_dtype())
            seed, start = checkpoint.seed, checkpoint.step
        else:
            checkpoint = None
            model = build_model(preset.model, seed=tc.seed)
            seed, start = tc.seed, 0

        params = model.parameters()
        optimizer = Adam(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
        if checkpoint is not None:
            optimizer.load_state(checkpoint.optimizer_tensors(), checkpoint.state.get('adam_t', 0))

        sampler = BatchSampler(dataset, tc.batch_size, seed, hflip=tc.hflip, prefetch=prefetch)
        metrics = MetricsLog(metrics_path, start)
        n_bins = 256 if dataset.domain == DISCRETE else None
        annealed = isinstance(model, VapnevModel)

        def save(step):
            vn_checkpoint.save(make_checkpoint(model, optimizer, _train_state(preset, seed, step)), checkpoint_path)

        if start == 0:
            save(0)
        if verbose:
            print(f"🔍 Training '{preset.name}' from step {start} to {tc.steps} (seed={seed}, "
                  f"{model.num_parameters()} parameters, {tc.precision} precision)")

        history = []
        last_saved = start
        with tqdm(total=tc.steps, initial=start, disable=not verbose, desc='train', unit='step') as bar:
            for step, images, rng in sampler.iterate(start, tc.steps):
                weight = kl_anneal_weight(step, tc.kl_warmup) if annealed else 1.0
                x, correction = model.prepare(images, rng)
                try:
                    with Tape() as tape:
                        breakdown = model.elbo(x, correction, rng, weight)
                    grads = backward(breakdown.loss, tape)
                    optimizer.step({name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()})
                except NumericsError as e:
                    if verbose:
                        tqdm.write(f"❌ step {step}: {e}. Last good checkpoint (step {last_saved}) kept at {checkpoint_path}")
                    raise
                means = breakdown.means()
                bpd = bits_per_dim(breakdown, model.num_dims, n_bins)
                metrics.append(step, means, bpd)
                history.append({'step': step, **means, 'bits_per_dim': bpd, 'loss': float(breakdown.loss.item())})
                if (step + 1) % tc.checkpoint_every == 0:
                    save(step + 1)
                    last_saved = step + 1
                if verbose and (step % tc.log_every == 0 or step + 1 == tc.steps):
                    bar.set_postfix(bpd=f"{bpd:.3f}", kl=f"{means['kl']:.3f}")
                bar.update(1)
            end = max(start, tc.steps)
            if last_saved != end:
                save(end)

    if verbose:
        print(f"✅ Training finished at step {end}; metrics in {metrics_path}, checkpoint in {checkpoint_path}")
    return TrainResult(model, optimizer, checkpoint_path, metrics_path, history, end)


# ============================================================
# DATA FOR A PRESET
# ============================================================
def load_preset_images(preset, path):
    """
    Every image in `path`, brought to the preset's data shape; no max_images cap and no split.

    Full-resolution images are area-downscaled by the preset's factor when that lands on the
    model's data shape.
    """
    if not path:
        raise ConfigError(f"preset '{preset.name}' needs --dataset")
    batch = load_dataset(path)
    target = tuple(preset.model.data_shape)
    if batch.image_shape != target and preset.data.downscale > 1 and batch.domain == DISCRETE:
        h, w, c = batch.image_shape
        if (h // preset.data.downscale, w // preset.data.downscale, c) == target:
            batch = downscale_area(batch, preset.data.downscale)
    if batch.image_shape != target:
        raise ConfigError(f"dataset images are {batch.image_shape}, preset '{preset.name}' expects {target}")
    return batch


def load_preset_data(preset, path=None, seed=0):
    """
    (train split, held-out split) for a preset.

    Image presets read `path` (CIFAR-10 binary or VFT1) through load_preset_images and keep the
    first max_images before splitting. toy2d draws its two-mode point set from `seed`.
    """
    data = preset.data
    if not data.needs_dataset:
        n = data.max_images or 4000
        points = two_mode_dataset(n, np.random.default_rng([seed, 2]))
        return split_holdout(ImageBatch(points, POINTS), data.holdout_fraction, seed)
    batch = load_preset_images(preset, path)
    if data.max_images:
        batch = batch.subset(slice(0, data.max_images))
    return split_holdout(batch, data.holdout_fraction, seed)
