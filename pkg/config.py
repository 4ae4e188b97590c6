import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

BOOL_TRUE = ('true', '1', 'yes', 'on')
BOOL_FALSE = ('false', '0', 'no', 'off')


class Config:
    """Base configuration class"""
    SEED = 0
    DATA_DIR = os.environ.get('DTN_DATA_DIR') or 'data'
    RUNS_DIR = os.environ.get('DTN_RUNS_DIR') or 'runs'
    LOG_LEVEL = os.environ.get('DTN_LOG_LEVEL') or 'INFO'

    # Dataset settings
    TRAIN_SIZE = 2000
    VAL_SIZE = 200
    TEST_SIZE = 200
    GRID_H = 7
    GRID_W = 7
    FEATURE_CHANNELS = 32
    NOISE_SIGMA = 0.1

    # Encoder settings
    D_MODEL = 64
    HEADS = 4
    LAYERS = 2
    SPATIAL_CELLS = 'GMC,LMC,AMC'
    CHANNEL_CELLS = 'CPC,CAC'
    ARRANGEMENT = 'S_THEN_C'
    GROUPING = 'GROUPED'
    CUSTOM_GROUPS = ''
    ROUTER_VARIANT = 'SCJR'
    ROUTING_TYPE = 'soft'
    TEMPERATURE = 1.0
    FFN_RATIO = 4
    CAC_REDUCTION = 16
    ROUTER_CHANNEL_REDUCTION = 16
    ROUTER_SPATIAL_REDUCTION = 7
    GMC_RESIDUAL = True

    # Decoder settings
    DECODER_LAYERS = 2
    MAX_LEN = 10
    BEAM_SIZE = 3
    EVAL_DECODE = 'beam'

    # Training settings
    BATCH_SIZE = 32
    CE_STEPS = 3000
    SCST_STEPS = 300
    EPOCH_STEPS = 200
    WARMUP_EPOCHS = 4
    PEAK_LR = 1e-4
    LR_SCALE = 10.0
    CLIP_NORM = 5.0
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    SCST_K = 5
    SCST_BATCH_SIZE = 16
    SCST_BASELINE = 'mean'
    SCST_SOURCE = 'beam'
    LOG_EVERY = 50
    CHECKPOINT_EVERY = 1000

    # Path analysis
    THRESHOLD = 0.3


class DeskConfig(Config):
    """Desk-scale configuration (laptop CPU)"""


class PaperConfig(Config):
    """Full-scale settings; selectable but far beyond a laptop"""
    D_MODEL = 512
    HEADS = 8
    LAYERS = 3
    DECODER_LAYERS = 3
    BEAM_SIZE = 5
    BATCH_SIZE = 50
    SCST_BATCH_SIZE = 100
    LR_SCALE = 1.0
    FEATURE_CHANNELS = 2048


class TestingConfig(Config):
    """Testing configuration"""
    TRAIN_SIZE = 16
    VAL_SIZE = 8
    TEST_SIZE = 8
    GRID_H = 4
    GRID_W = 4
    FEATURE_CHANNELS = 16
    D_MODEL = 16
    HEADS = 2
    LAYERS = 1
    DECODER_LAYERS = 1
    BEAM_SIZE = 2
    BATCH_SIZE = 8
    CE_STEPS = 4
    SCST_STEPS = 2
    EPOCH_STEPS = 2
    SCST_K = 2
    SCST_BATCH_SIZE = 4
    LOG_EVERY = 1
    CHECKPOINT_EVERY = 2


config = {
    'desk': DeskConfig,
    'paper': PaperConfig,
    'testing': TestingConfig,
    'default': DeskConfig
}

CHOICES = {
    'arrangement': ('S_THEN_C', 'C_THEN_S', 'PARALLEL'),
    'grouping': ('GROUPED', 'UNGROUPED'),
    'router_variant': ('SCJR', 'SPATIAL_ONLY', 'CHANNEL_ONLY', 'STATIC_SUM'),
    'routing_type': ('soft', 'hard'),
    'eval_decode': ('greedy', 'beam'),
    'scst_baseline': ('mean', 'leave_one_out'),
    'scst_source': ('beam', 'sample'),
    'log_level': ('DEBUG', 'INFO', 'WARNING', 'ERROR'),
}


def profile_defaults(profile: Optional[str] = None) -> Dict[str, Any]:
    """Lower-case key -> default value of a configuration profile"""
    name = profile or os.environ.get('DTN_PROFILE') or 'default'
    if name not in config:
        raise ConfigError(f'unknown profile {name!r}; expected one of {", ".join(config)}')
    cls = config[name]
    return {key.lower(): getattr(cls, key) for key in dir(cls) if key.isupper()}


def _parse_value(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in BOOL_TRUE:
            return True
        if text.lower() in BOOL_FALSE:
            return False
        raise ValueError(f'{key} expects true/false, got {text!r}')
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _cell_list(text: str) -> Tuple[str, ...]:
    return tuple(part.strip().upper() for part in text.split(',') if part.strip())


class RunConfig:
    """
    Flat key-value run configuration.

    Every key has a profile default; values given as strings are parsed to
    the default's type. Unknown keys and bad values are collected and
    reported together.
    """

    def __init__(self, overrides: Optional[Dict[str, Any]] = None, profile: Optional[str] = None):
        self.profile = profile or os.environ.get('DTN_PROFILE') or 'default'
        self.defaults = profile_defaults(self.profile)
        self.values = dict(self.defaults)
        problems = []
        for key, raw in (overrides or {}).items():
            key = key.strip().replace('-', '_')
            if key not in self.defaults:
                problems.append(f'unknown key {key!r}')
                continue
            try:
                self.values[key] = _parse_value(key, raw, self.defaults[key])
            except ValueError:
                problems.append(f'bad value for {key}: {raw!r}')
        problems += self._check()
        if problems:
            raise ConfigError(problems)

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get('values')
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def merged(self, overrides: Dict[str, Any]) -> 'RunConfig':
        values = self.as_dict()
        values.update(overrides)
        return RunConfig(values, profile=self.profile)

    def _check(self) -> List[str]:
        v = self.values
        problems = []
        for key, allowed in CHOICES.items():
            if v[key] not in allowed:
                problems.append(f'{key} must be one of {", ".join(allowed)}, got {v[key]!r}')
        for key in ('d_model', 'heads', 'decoder_layers', 'max_len', 'batch_size', 'epoch_steps',
                    'warmup_epochs', 'beam_size', 'scst_batch_size', 'log_every', 'checkpoint_every',
                    'ffn_ratio', 'cac_reduction', 'router_channel_reduction', 'router_spatial_reduction'):
            if v[key] < 1:
                problems.append(f'{key} must be >= 1, got {v[key]}')
        for key in ('layers', 'ce_steps', 'scst_steps'):
            if v[key] < 0:
                problems.append(f'{key} must be >= 0, got {v[key]}')
        if v['heads'] >= 1 and v['d_model'] % v['heads']:
            problems.append(f'd_model {v["d_model"]} is not divisible by heads {v["heads"]}')
        if v['grid_h'] < 3 or v['grid_w'] < 3:
            problems.append(f'grid must be at least 3x3, got {v["grid_h"]}x{v["grid_w"]}')
        if v['feature_channels'] < 16:
            problems.append(f'feature_channels must be >= 16, got {v["feature_channels"]}')
        for key in ('train_size', 'val_size', 'test_size'):
            if v[key] < 0 or v[key] % 2:
                problems.append(f'{key} must be a non-negative even number, got {v[key]}')
        if v['noise_sigma'] < 0:
            problems.append(f'noise_sigma must be >= 0, got {v["noise_sigma"]}')
        if not v['temperature'] > 0:
            problems.append(f'temperature must be positive, got {v["temperature"]}')
        if not 0 < v['threshold'] < 1:
            problems.append(f'threshold must lie in (0, 1), got {v["threshold"]}')
        if v['scst_k'] < 2:
            problems.append(f'scst_k must be >= 2, got {v["scst_k"]}')
        if not v['peak_lr'] > 0 or not v['lr_scale'] > 0:
            problems.append('peak_lr and lr_scale must be positive')
        if not v['clip_norm'] > 0:
            problems.append(f'clip_norm must be positive, got {v["clip_norm"]}')
        problems += self._check_cells()
        return problems

    def _check_cells(self) -> List[str]:
        problems = []
        spatial = _cell_list(self.values['spatial_cells'])
        channel = _cell_list(self.values['channel_cells'])
        for cell in spatial:
            if cell not in ('GMC', 'LMC', 'AMC'):
                problems.append(f'spatial_cells: {cell!r} is not a spatial cell')
        for cell in channel:
            if cell not in ('CPC', 'CAC'):
                problems.append(f'channel_cells: {cell!r} is not a channel cell')
        groups = self.custom_groups_tuple()
        if groups is not None:
            flat = [cell for group in groups for cell in group]
            if len(groups) != 2 or not all(groups):
                problems.append('custom_groups must look like "GMC,CPC|LMC,AMC,CAC"')
            for cell in flat:
                if cell not in ('GMC', 'LMC', 'AMC', 'CPC', 'CAC'):
                    problems.append(f'custom_groups: unknown cell {cell!r}')
        elif not spatial and not channel:
            problems.append('at least one cell must be selected')
        return problems

    def custom_groups_tuple(self) -> Optional[Tuple[Tuple[str, ...], ...]]:
        text = self.values['custom_groups'].strip()
        if not text:
            return None
        return tuple(_cell_list(group) for group in text.split('|'))

    @property
    def grid(self) -> Tuple[int, int]:
        return self.values['grid_h'], self.values['grid_w']

    @property
    def split_sizes(self) -> Dict[str, int]:
        return {'train': self.train_size, 'val': self.val_size, 'test': self.test_size}

    def encoder_config(self):
        from models.encoder import EncoderConfig
        from models.router import RoutingType
        v = self.values
        return EncoderConfig(
            layers=v['layers'], d_model=v['d_model'], heads=v['heads'], grid=self.grid,
            spatial_cells=_cell_list(v['spatial_cells']), channel_cells=_cell_list(v['channel_cells']),
            arrangement=v['arrangement'], grouping=v['grouping'], router_variant=v['router_variant'],
            routing=RoutingType(v['routing_type'], v['temperature']),
            custom_groups=self.custom_groups_tuple(), ffn_ratio=v['ffn_ratio'],
            cac_reduction=v['cac_reduction'], router_channel_reduction=v['router_channel_reduction'],
            router_spatial_reduction=v['router_spatial_reduction'], gmc_residual=v['gmc_residual'],
        ).validate()

    def to_text(self) -> str:
        lines = [f'{key} = {self._format(value)}' for key, value in sorted(self.values.items())]
        return '\n'.join(lines) + '\n'

    @staticmethod
    def _format(value: Any) -> str:
        if isinstance(value, bool):
            return 'true' if value else 'false'
        return repr(value) if isinstance(value, float) else str(value)

    def write(self, path: Union[str, Path]):
        Path(path).write_text(self.to_text(), encoding='utf-8')

    @staticmethod
    def parse_text(text: str) -> Dict[str, str]:
        values, problems = {}, []
        for number, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            key, sep, value = stripped.partition('=')
            if not sep or not key.strip():
                problems.append(f'line {number}: expected "key = value", got {stripped!r}')
                continue
            values[key.strip()] = value.strip()
        if problems:
            raise ConfigError(problems)
        return values

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None,
                  profile: Optional[str] = None) -> 'RunConfig':
        """File values merged under ``overrides``"""
        values = cls.parse_text(Path(path).read_text(encoding='utf-8'))
        values.update(overrides or {})
        return cls(values, profile=profile)
