"""
Run configuration files.

One ``key = value`` per line, ``#`` starts a comment. Unknown keys,
duplicates and out-of-range values are rejected with the field name.
"""
import logging
from dataclasses import dataclass, fields
from pathlib import Path

from .cast_loss import SUPERVISION_MODES, LossConfig
from .crop_sampler import CropConstraint
from .encoder import EncoderConfig
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

# config-file spelling of fields whose Python name differs
FILE_KEYS = {'lam': 'lambda'}
FIELD_NAMES = {v: k for k, v in FILE_KEYS.items()}

EFFECTIVE_CONFIG_NAME = 'effective.cfg'


@dataclass(frozen=True)
class RunConfig:
    phi: float = 0.2
    lam: float = 3.0
    tau: float = 0.07
    momentum: float = 0.99
    queue_size: int = 512
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    steps: int = 0
    seed: int = 0
    supervision_mode: str = 'full'
    first_order: bool = False
    input_size: int = 64
    channels: tuple = (16, 32, 64)
    embedding_dim: int = 64
    scale_min: float = 0.2
    scale_max: float = 1.0
    aspect_min: float = 0.75
    aspect_max: float = 4 / 3
    max_attempts: int = 50
    jitter: float = 0.4
    eps: float = 1e-8
    checkpoint_every: int = 100
    data_dir: str = ''
    output_dir: str = ''

    def validate(self):
        checks = (
            ('phi', 0.0 <= self.phi < 1.0, "must lie in [0, 1)"),
            ('lambda', self.lam >= 0, "must be >= 0"),
            ('tau', self.tau > 0, "must be > 0"),
            ('momentum', 0.0 <= self.momentum <= 1.0, "must lie in [0, 1]"),
            ('queue_size', self.queue_size >= 1, "must be >= 1"),
            ('lr', self.lr > 0, "must be > 0"),
            ('sgd_momentum', 0.0 <= self.sgd_momentum < 1.0, "must lie in [0, 1)"),
            ('weight_decay', self.weight_decay >= 0, "must be >= 0"),
            ('batch_size', self.batch_size >= 1, "must be >= 1"),
            ('epochs', self.epochs >= 1, "must be >= 1"),
            ('steps', self.steps >= 0, "must be >= 0 (0 derives it from epochs)"),
            ('seed', self.seed >= 0, "must be >= 0"),
            ('supervision_mode', self.supervision_mode in SUPERVISION_MODES, f"must be one of {SUPERVISION_MODES}"),
            ('scale_min', 0 < self.scale_min <= self.scale_max <= 1, "need 0 < scale_min <= scale_max <= 1"),
            ('aspect_min', 0 < self.aspect_min <= self.aspect_max, "need 0 < aspect_min <= aspect_max"),
            ('max_attempts', self.max_attempts >= 1, "must be >= 1"),
            ('jitter', 0 <= self.jitter < 1, "must lie in [0, 1)"),
            ('eps', self.eps > 0, "must be > 0"),
            ('checkpoint_every', self.checkpoint_every >= 1, "must be >= 1"),
        )
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(name, f"{message}, got {getattr(self, FIELD_NAMES.get(name, name))!r}")
        self.encoder_config()
        return self

    def encoder_config(self):
        return EncoderConfig(input_size=self.input_size, channels=tuple(self.channels),
                             embedding_dim=self.embedding_dim).validate()

    def crop_constraint(self):
        return CropConstraint(phi=self.phi, scale_range=(self.scale_min, self.scale_max),
                              aspect_range=(self.aspect_min, self.aspect_max), max_attempts=self.max_attempts)

    def loss_config(self):
        return LossConfig(lam=self.lam, tau=self.tau, supervision_mode=self.supervision_mode, eps=self.eps,
                          first_order=self.first_order)


def _parse_value(name, kind, raw):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ('true', 'false'):
                raise ValueError(raw)
            return lowered == 'true'
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(part) for part in raw.split(',') if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(FILE_KEYS.get(name, name), f"cannot parse {raw!r} as {kind.__name__}") from exc


def _field_types():
    resolved = {'float': float, 'int': int, 'bool': bool, 'str': str, 'tuple': tuple}
    return {f.name: resolved.get(f.type, f.type) if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def parse_run_config(text, source='<config>'):
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'line {lineno}', f"{source}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split('=', 1))
        name = FIELD_NAMES.get(key, key)
        if name not in types or key in FILE_KEYS:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        if name in values:
            raise ConfigError(key, f"{source}:{lineno}: duplicate key")
        values[name] = _parse_value(name, types[name], raw)
    return RunConfig(**values).validate()


def load_run_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError('config', f"cannot read {path}: {exc}") from exc
    return parse_run_config(text, source=str(path))


def format_run_config(config):
    lines = ['# effective configuration (defaults filled in)']
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            text = 'true' if value else 'false'
        elif isinstance(value, tuple):
            text = ','.join(str(v) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f'{FILE_KEYS.get(f.name, f.name)} = {text}')
    return '\n'.join(lines) + '\n'


def dump_run_config(config, path):
    Path(path).write_text(format_run_config(config))
