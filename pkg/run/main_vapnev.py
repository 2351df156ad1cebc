"""
Command-line entry point:

    python main_vapnev.py train --preset desk --dataset data_batch_1.bin --seed 7
    python main_vapnev.py eval --checkpoint vapnev_out/checkpoint.vpnv --dataset test_batch.bin
    python main_vapnev.py sample --checkpoint vapnev_out/checkpoint.vpnv --n 16 --cols 4
    python main_vapnev.py reconstruct --checkpoint vapnev_out/checkpoint.vpnv --dataset test_batch.bin
    python main_vapnev.py verify --quick
    python main_vapnev.py report --metrics vapnev_out/metrics.csv

Exit codes: 0 success, 1 runtime or verification failure, 2 usage/configuration error.
Every file a command writes lands inside --output-dir.
"""
import os
import sys

from dotenv import load_dotenv

# Thread caps must be exported before numpy loads its BLAS.
load_dotenv()
_threads = '1' if '--single-thread' in sys.argv else os.environ.get('VAPNEV_THREADS')
if _threads:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS', 'NUMEXPR_NUM_THREADS'):
        os.environ[_var] = _threads

import argparse

import numpy as np

from vn_config import PRESET_NAMES, load_preset, preset_descriptions
from vn_data import load_dataset, write_ppm_grid
from vn_errors import ConfigError, VapnevError
from vn_helpers import atomic_write_text, inside_dir
from vn_model import evaluate, load_model_checkpoint, restore_model
from vn_train import load_preset_data, load_preset_images, train
from vn_verify import PROPERTIES, run_verification
from training_report import TrainingReport


EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DEFAULT_OUTPUT_DIR = 'vapnev_out'


class UsageError(ConfigError):
    pass


def _output_path(args, name):
    path = os.path.join(args.output_dir, name)
    if not inside_dir(path, args.output_dir):
        raise UsageError(f"'{name}' would be written outside --output-dir")
    os.makedirs(args.output_dir, exist_ok=True)
    return path


def _banner(title, args):
    print("=" * 70)
    print(f"{title} (seed={args.seed})")
    print("=" * 70)


def _prefetch(args):
    return 0 if args.single_thread else args.prefetch


def _checkpoint_preset(checkpoint):
    name = checkpoint.state.get('preset')
    if name not in PRESET_NAMES:
        raise UsageError(f"checkpoint does not name a known preset (got {name!r})")
    return load_preset(name)


# ============================================================
# SUBCOMMANDS
# ============================================================
def cmd_train(args):
    overrides = {'train': {'seed': args.seed, 'steps': args.steps, 'batch_size': args.batch,
                           'kl_warmup': args.warmup, 'precision': args.precision}}
    preset = load_preset(args.preset, overrides)
    _banner(f"🔍 train: preset '{preset.name}'", args)
    train_set, test_set = load_preset_data(preset, args.dataset, args.seed)
    print(f"📂 {len(train_set)} training / {len(test_set)} held-out examples ({train_set.domain})")
    result = train(preset, train_set, args.output_dir, resume=args.checkpoint, prefetch=_prefetch(args))
    if len(test_set):
        summary, _ = evaluate(result.model, test_set, np.random.default_rng([args.seed, 1]))
        print(f"✅ Final held-out bits/dim: {summary['bits_per_dim']:.4f} (ELBO {summary['elbo']:.3f} nats, KL {summary['kl']:.4f})")
    return EXIT_OK


def cmd_eval(args):
    checkpoint = load_model_checkpoint(args.checkpoint)
    preset = _checkpoint_preset(checkpoint)
    _banner(f"🔍 eval: {args.checkpoint} (step {checkpoint.step})", args)
    if args.dataset:
        # an explicit dataset is scored in full, not through the preset's split
        if preset.data.needs_dataset:
            test_set = load_preset_images(preset, args.dataset)
        else:
            test_set = load_dataset(args.dataset)
    else:
        _, test_set = load_preset_data(preset, None, checkpoint.seed)
    if len(test_set) == 0:
        raise UsageError("nothing to evaluate; pass --dataset")
    model = restore_model(checkpoint)
    summary, _ = evaluate(model, test_set, np.random.default_rng(args.seed))
    scope = 'Dataset' if args.dataset else 'Held-out'
    print(f"✅ {scope} bits/dim: {summary['bits_per_dim']:.4f} over {summary['n']} examples")
    for key in ('elbo', 'recon_ll', 'flow_logdet', 'kl', 'correction'):
        print(f"   {key:>12}: {summary[key]:.4f} nats")
    return EXIT_OK


def cmd_sample(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.cols < 1:
        raise UsageError("--cols must be >= 1")
    checkpoint = load_model_checkpoint(args.checkpoint)
    model = restore_model(checkpoint)
    _banner(f"🔍 sample: {args.n} from {args.checkpoint}", args)
    rng = np.random.default_rng(args.seed)
    if checkpoint.config.get('kind') == 'flow':
        points = model.sample(args.n, rng)
        path = _output_path(args, args.out or 'samples.csv')
        atomic_write_text(path, '\n'.join(','.join(f"{v:.17g}" for v in row) for row in points) + '\n')
    else:
        images = model.generate(args.n, rng, deterministic_y=args.deterministic_y)
        path = write_ppm_grid(images, args.cols, _output_path(args, args.out or 'samples.ppm'))
    print(f"✅ Samples written to {path}")
    return EXIT_OK


def cmd_reconstruct(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.cols < 2 or args.cols % 2:
        raise UsageError("--cols must be an even number >= 2 (original/reconstruction pairs)")
    if not args.dataset:
        raise UsageError("reconstruct needs --dataset")
    checkpoint = load_model_checkpoint(args.checkpoint)
    if checkpoint.config.get('kind') != 'vae':
        raise UsageError("reconstruct needs an image (vae) checkpoint")
    preset = _checkpoint_preset(checkpoint)
    _banner(f"🔍 reconstruct: {args.n} images with {args.checkpoint}", args)
    train_set, test_set = load_preset_data(preset, args.dataset, checkpoint.seed)
    source = test_set if len(test_set) else train_set
    batch = source.subset(slice(0, args.n))
    model = restore_model(checkpoint)
    rng = np.random.default_rng(args.seed)
    recon = model.reconstruct(batch, rng, deterministic_y=args.deterministic_y)
    originals = batch.pixels.astype(np.float64) / 255.0 if batch.pixels.dtype == np.uint8 else batch.pixels
    pairs = np.empty((2 * len(batch),) + batch.image_shape)
    pairs[0::2] = originals
    pairs[1::2] = recon.pixels
    path = write_ppm_grid(pairs, args.cols, _output_path(args, args.out or 'reconstructions.ppm'))
    print(f"✅ Original/reconstruction pairs written to {path}")
    return EXIT_OK


def cmd_verify(args):
    suite = run_verification(seed=args.seed, quick=args.quick, break_logdet=args.break_logdet,
                             properties=args.only or PROPERTIES)
    if suite.passed:
        print("✅ All properties pass.")
        return EXIT_OK
    print(f"❌ Failing properties: {', '.join(suite.failures())}")
    return EXIT_FAILURE


def cmd_report(args):
    metrics = args.metrics or os.path.join(args.output_dir, 'metrics.csv')
    _banner(f"🔍 report: {metrics}", args)
    report = TrainingReport(metrics, control_path=args.control)
    report.evaluate()
    out = report.generate_report(_output_path(args, args.out or 'training_report.html'))
    return EXIT_OK if out else EXIT_FAILURE


# ============================================================
# ARGUMENTS
# ============================================================
def build_parser():
    parser = argparse.ArgumentParser(prog='main_vapnev.py', description='VAPNEV: VAE with exact flow-based reconstruction likelihood.')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help='seed for every random draw (default 0)')
    common.add_argument('--output-dir', default=DEFAULT_OUTPUT_DIR, help='directory receiving every file written')
    common.add_argument('--single-thread', action='store_true', help='one BLAS thread, no prefetch thread')

    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', parents=[common], help='train a model')
    descriptions = preset_descriptions()
    p.add_argument('--preset', choices=PRESET_NAMES, default='desk',
                   help='; '.join(f"{name}: {descriptions.get(name, '')}" for name in PRESET_NAMES))
    p.add_argument('--dataset', help='CIFAR-10 binary batch or VFT1 fixture (image presets)')
    p.add_argument('--steps', type=int)
    p.add_argument('--batch', type=int)
    p.add_argument('--warmup', type=int, help='KL warmup steps (0 = full KL from step 0)')
    p.add_argument('--precision', choices=('single', 'double'))
    p.add_argument('--checkpoint', help='resume from this checkpoint')
    p.add_argument('--prefetch', type=int, default=2, help='batches prepared ahead by the prefetch thread')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='held-out bits/dim of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', help="score every example in this file instead of the preset's held-out split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sample', parents=[common], help='write a grid of generated samples')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--n', type=int, default=16)
    p.add_argument('--cols', type=int, default=4)
    p.add_argument('--deterministic-y', action='store_true', help='decode y = mu_y instead of sampling it')
    p.add_argument('--out', help='file name inside --output-dir')
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser('reconstruct', parents=[common], help='write original/reconstruction pairs')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset')
    p.add_argument('--n', type=int, default=8)
    p.add_argument('--cols', type=int, default=8)
    p.add_argument('--deterministic-y', action='store_true')
    p.add_argument('--out')
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser('verify', parents=[common], help='run the double-precision oracle suite')
    p.add_argument('--quick', action='store_true', help='reduced case counts')
    p.add_argument('--only', nargs='+', choices=PROPERTIES, help='run only these properties')
    p.add_argument('--break-logdet', action='store_true', help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser('report', parents=[common], help='HTML report from a metrics log')
    p.add_argument('--metrics', help='metrics log (default: <output-dir>/metrics.csv)')
    p.add_argument('--control', help='metrics log of a control run (e.g. no KL warmup)')
    p.add_argument('--out')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except VapnevError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
