"""
Typed configuration objects and preset loading.

Presets live in `presets/<name>.json`; `presets/preset_manifest.json` lists them. Every dataclass
here round-trips through plain dicts so the model config can be stored canonically in checkpoints.
"""
import dataclasses
from dataclasses import dataclass, field

from vn_errors import ConfigError
from vn_helpers import require_json, canonical_json, load_json_from_file


PRESET_NAMES = ('paper', 'desk', 'toy', 'toy2d')


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    cfg = cls(**kwargs)
    cfg.validate()
    return cfg


@dataclass
class EncoderConfig:
    """
    Convolutional encoder. Layer i (0-based) has base_filters * 2**(i // 2) filters and
    stride 2 on every second layer, so 8 layers from 32 filters give
    [32, 32, 64, 64, 128, 128, 256, 256] and four halvings (32x32 -> 2x2).
    """
    n_layers: int = 8
    base_filters: int = 32
    kernel_size: int = 3
    activation_slope: float = 0.01

    def validate(self):
        if self.n_layers < 1 or self.base_filters < 1 or self.kernel_size < 1:
            raise ConfigError("encoder/decoder layer count, filters and kernel size must be >= 1")

    def filters(self):
        return [self.base_filters * 2 ** (i // 2) for i in range(self.n_layers)]

    def strides(self):
        return [2 if i % 2 == 1 else 1 for i in range(self.n_layers)]

    def downsampling(self):
        return 2 ** sum(1 for s in self.strides() if s == 2)


@dataclass
class DecoderConfig(EncoderConfig):
    """Mirror of the encoder: same schedule read backwards, stride-2 deconvolutions."""


@dataclass
class LatentConfig:
    z_dim: int = 256

    def validate(self):
        if self.z_dim < 1:
            raise ConfigError("z_dim must be >= 1")


@dataclass
class FlowConfig:
    """
    Multi-scale coupling stack. Each scale runs `checkerboard_per_scale` checkerboard couplings,
    a squeeze, then `channelwise_per_scale` channelwise couplings (vector inputs skip the squeeze).
    """
    n_scales: int = 2
    checkerboard_per_scale: int = 3
    channelwise_per_scale: int = 3
    res_filters: int = 64
    res_blocks: int = 2
    z_channels: int = 16
    conditional: bool = True
    unconditioned_layers: list = field(default_factory=list)

    def validate(self):
        if self.n_scales < 1:
            raise ConfigError("n_scales must be >= 1")
        if self.checkerboard_per_scale < 0 or self.channelwise_per_scale < 0:
            raise ConfigError("coupling counts must be >= 0")
        if self.res_filters < 1 or self.res_blocks < 0 or self.z_channels < 1:
            raise ConfigError("res_filters and z_channels must be >= 1, res_blocks >= 0")

    def layer_conditional(self, index):
        return self.conditional and index not in self.unconditioned_layers


@dataclass
class ModelConfig:
    kind: str = 'vae'                 # 'vae' (VAPNEV) or 'flow' (unconditional density, toy2d)
    data_shape: list = field(default_factory=lambda: [32, 32, 3])
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    logit_alpha: float = 0.05
    logvar_clamp: float = 15.0

    def validate(self):
        if self.kind not in ('vae', 'flow'):
            raise ConfigError(f"model kind must be 'vae' or 'flow', got '{self.kind}'")
        if len(self.data_shape) not in (1, 3) or any(int(n) < 1 for n in self.data_shape):
            raise ConfigError(f"data_shape must be [D] or [H, W, C], got {self.data_shape}")
        if not 0.0 <= self.logit_alpha < 1.0:
            raise ConfigError(f"logit_alpha must lie in [0, 1), got {self.logit_alpha}")
        if self.kind == 'vae' and len(self.data_shape) != 3:
            raise ConfigError("the VAE model needs an image data_shape [H, W, C]")

    @property
    def num_dims(self):
        n = 1
        for d in self.data_shape:
            n *= int(d)
        return n

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical(self):
        return canonical_json(self.to_dict())


@dataclass
class TrainConfig:
    preset: str = 'desk'
    seed: int = 0
    steps: int = 20000
    batch_size: int = 64
    kl_warmup: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hflip: bool = True
    precision: str = 'single'
    checkpoint_every: int = 1000
    log_every: int = 1

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.kl_warmup < 0:
            raise ConfigError("kl_warmup must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.precision not in ('single', 'double'):
            raise ConfigError("precision must be 'single' or 'double'")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class DataConfig:
    downscale: int = 1
    max_images: int = 0                # 0 = all
    holdout_fraction: float = 0.1
    needs_dataset: bool = True

    def validate(self):
        if self.downscale < 1:
            raise ConfigError("downscale must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


_NESTED = {
    ('ModelConfig', 'encoder'): EncoderConfig,
    ('ModelConfig', 'decoder'): DecoderConfig,
    ('ModelConfig', 'latent'): LatentConfig,
    ('ModelConfig', 'flow'): FlowConfig,
}


def model_config_from_dict(data):
    return _build(ModelConfig, data, 'model')


def train_config_from_dict(data):
    return _build(TrainConfig, data, 'train')


@dataclass
class Preset:
    name: str
    description: str
    model: ModelConfig
    train: TrainConfig
    data: DataConfig


def load_preset(name, overrides=None):
    """
    Load `presets/<name>.json` and apply `overrides` ({'train': {...}, 'model': {...}}).

    Raises ConfigError for unknown presets or keys.
    """
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESET_NAMES)})")
    raw = require_json(f"{name}.json")
    overrides = overrides or {}
    for section in ('model', 'train', 'data'):
        patch = overrides.get(section)
        if patch:
            raw.setdefault(section, {}).update({k: v for k, v in patch.items() if v is not None})
    raw.setdefault('train', {})['preset'] = name
    return Preset(
        name=name,
        description=raw.get('description', ''),
        model=_build(ModelConfig, raw.get('model'), f"{name}.model"),
        train=_build(TrainConfig, raw.get('train'), f"{name}.train"),
        data=_build(DataConfig, raw.get('data'), f"{name}.data"),
    )


def preset_descriptions():
    """{name: description} from presets/preset_manifest.json (empty when the manifest is unreadable)."""
    manifest = load_json_from_file('preset_manifest.json') or {}
    return {name: entry.get('description', '') for name, entry in manifest.get('preset_manifest', {}).items()}
