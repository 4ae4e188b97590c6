#!/usr/bin/env python3
"""
Command-line entry point: gen-data, train, eval, route-inspect, diverse-sample.

Every command accepts ``--config path`` plus ``--key value`` overrides for any
configuration key; outputs go to a fresh run directory
``{runs_dir}/{YYYYmmdd-HHMMSS}-seed{seed}``.
"""
import functools
import logging
import sys
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import click

from config import RunConfig
from errors import ConfigError, DatasetFormatError, DTNError

logger = logging.getLogger(__name__)

EXTRA_ARGS = dict(ignore_unknown_options=True, allow_extra_args=True)
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def parse_extra_args(args: List[str]) -> Dict[str, str]:
    """``--key value`` and ``--key=value`` pairs; every malformed token is reported"""
    values, problems = {}, []
    i = 0
    while i < len(args):
        token = args[i]
        if not token.startswith('--') or len(token) == 2:
            problems.append(f'unexpected argument {token!r}')
            i += 1
            continue
        key, sep, value = token[2:].partition('=')
        if not sep:
            if i + 1 >= len(args) or args[i + 1].startswith('--'):
                problems.append(f'missing value for --{key}')
                i += 1
                continue
            value = args[i + 1]
            i += 1
        values[key.replace('-', '_')] = value
        i += 1
    if problems:
        raise ConfigError(problems)
    return values


def load_run_config(config_path: Optional[str], extra: List[str], fallback: Optional[Path] = None) -> RunConfig:
    """Config file (or ``fallback`` when it exists) merged under command-line overrides"""
    overrides = parse_extra_args(extra)
    if config_path:
        return RunConfig.from_file(config_path, overrides)
    if fallback is not None and fallback.exists():
        logger.debug(f"Using configuration from {fallback}")
        return RunConfig.from_file(fallback, overrides)
    return RunConfig(overrides)


def create_run_dir(run_config: RunConfig) -> Path:
    """``{timestamp}-seed{seed}``, or ``{timestamp}-{n}-seed{seed}`` when that name is taken"""
    runs_dir = Path(run_config.runs_dir)
    stamp = f"{datetime.now():%Y%m%d-%H%M%S}"
    run_dir, suffix = runs_dir / f'{stamp}-seed{run_config.seed}', 1
    while run_dir.exists():
        run_dir = runs_dir / f'{stamp}-{suffix}-seed{run_config.seed}'
        suffix += 1
    run_dir.mkdir(parents=True)
    run_config.write(run_dir / 'config.txt')
    return run_dir


@contextmanager
def run_logging(run_dir: Path):
    """Mirror the diagnostic log into ``run.log`` for the duration of a command"""
    handler = logging.FileHandler(run_dir / 'run.log', encoding='utf-8')
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def exit_on_error(func):
    """Map failures to exit codes: 2 config or invalid input, 3 I/O, 4 numerical"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            for problem in e.problems:
                click.echo(f'config error: {problem}', err=True)
            sys.exit(e.exit_code)
        except DTNError as e:
            logger.error(f"{type(e).__name__}: {str(e)}")
            click.echo(f'error: {e}', err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            logger.error(f"I/O error: {str(e)}")
            click.echo(f'I/O error: {e}', err=True)
            sys.exit(DatasetFormatError.exit_code)
        except ValueError as e:
            # ShapeError shares this code
            logger.error(f"Invalid input: {str(e)}")
            click.echo(f'invalid input: {e}', err=True)
            sys.exit(ConfigError.exit_code)

    return wrapper


# commands as plain functions

def cmd_gen_data(run_config: RunConfig, run_dir: Optional[Path] = None) -> Dict[str, object]:
    """Write the dataset to ``data_dir``; ``run_dir/dataset.txt`` records what was written"""
    from services.dataset_service import DatasetService
    grid = (run_config.grid_h, run_config.grid_w, run_config.feature_channels)
    result = DatasetService(run_config.data_dir).generate(run_config.seed, run_config.split_sizes, grid,
                                                          run_config.noise_sigma)
    if run_dir is not None:
        lines = [f'{split}\t{count}' for split, count in result['counts'].items()]
        lines += [f'file\t{path}' for path in result['files']]
        (run_dir / 'dataset.txt').write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return result


def cmd_train(run_config: RunConfig, run_dir: Path, phase: str = 'both', steps: Optional[int] = None,
              checkpoint: Optional[str] = None) -> Dict[str, object]:
    from services.checkpoint_service import load_checkpoint
    from services.dataset_service import DatasetService
    from services.training_service import TrainingService, build_model
    model = None
    if checkpoint:
        vocab = DatasetService(run_config.data_dir).load_vocabulary()
        model = load_checkpoint(checkpoint, build_model(run_config, len(vocab)))
    return TrainingService(run_config, run_dir, model=model).train(phase, steps)


def cmd_eval(run_config: RunConfig, checkpoint: str, run_dir: Path, split: str = 'test') -> Dict[str, object]:
    from services.dataset_service import DatasetService
    from services.evaluation_service import EvaluationService, load_model
    datasets = DatasetService(run_config.data_dir)
    vocab = datasets.load_vocabulary()
    model = load_model(run_config, vocab, checkpoint)
    return EvaluationService(model, vocab).evaluate(datasets.load_split(split), run_dir,
                                                    mode=run_config.eval_decode, k=run_config.beam_size,
                                                    label=Path(checkpoint).parent.name or 'run')


def cmd_route_inspect(run_config: RunConfig, checkpoint: str, run_dir: Path, threshold: float,
                      split: str = 'test') -> Dict[str, object]:
    from services.dataset_service import DatasetService
    from services.evaluation_service import load_model
    from services.route_analyzer import RouteAnalyzer
    datasets = DatasetService(run_config.data_dir)
    vocab = datasets.load_vocabulary()
    model = load_model(run_config, vocab, checkpoint)
    return RouteAnalyzer(model, threshold).inspect(datasets.load_split(split), run_dir)


def cmd_diverse_sample(run_config: RunConfig, checkpoint: str, sample_id: int, k: int,
                       run_dir: Optional[Path] = None, split: str = 'test') -> Dict[str, object]:
    from services.dataset_service import DatasetService, write_captions
    from services.evaluation_service import EvaluationService, load_model
    datasets = DatasetService(run_config.data_dir)
    vocab = datasets.load_vocabulary()
    dataset = datasets.load_split(split)
    try:
        index = dataset.index_of(sample_id)
    except KeyError as e:
        raise ConfigError(str(e).strip("'"))
    model = load_model(run_config, vocab, checkpoint)
    captions = EvaluationService(model, vocab).diverse_sample(dataset.features[index], k, run_config.seed)
    if run_dir is not None:
        write_captions(run_dir / f'diverse-{sample_id}.txt', range(len(captions)), captions)
    return {'success': True, 'message': f'{len(set(captions))} distinct captions', 'captions': captions}


# click surface

def _config_fallback(checkpoint: Optional[str]) -> Optional[Path]:
    return Path(checkpoint).parent / 'config.txt' if checkpoint else None


@click.group()
def cli():
    """Dynamic routed captioning: data generation, training and analysis"""


def _setup_logging(run_config: RunConfig):
    logging.basicConfig(level=getattr(logging, run_config.log_level), format=LOG_FORMAT, force=True)


@cli.command('gen-data', context_settings=EXTRA_ARGS)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='Config file')
@click.pass_context
@exit_on_error
def gen_data(ctx, config_path):
    """Generate the synthetic train/val/test splits and vocabulary"""
    run_config = load_run_config(config_path, ctx.args)
    _setup_logging(run_config)
    run_dir = create_run_dir(run_config)
    with run_logging(run_dir):
        result = cmd_gen_data(run_config, run_dir)
    click.echo(f"✅ {result['message']} in {run_config.data_dir}")


@cli.command('train', context_settings=EXTRA_ARGS)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='Config file')
@click.option('--phase', type=click.Choice(['ce', 'scst', 'both']), default='both', show_default=True)
@click.option('--steps', type=int, default=None, help='Steps per phase (overrides ce_steps/scst_steps)')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Initialise from this checkpoint')
@click.pass_context
@exit_on_error
def train(ctx, config_path, phase, steps, checkpoint):
    """Train with cross-entropy, self-critical fine-tuning, or both"""
    run_config = load_run_config(config_path, ctx.args)
    _setup_logging(run_config)
    run_dir = create_run_dir(run_config)
    with run_logging(run_dir):
        result = cmd_train(run_config, run_dir, phase, steps, checkpoint)
    click.echo(f"✅ {result['message']}; checkpoint {result['checkpoint']}")


@cli.command('eval', context_settings=EXTRA_ARGS)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='Config file')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--split', default='test', show_default=True)
@click.pass_context
@exit_on_error
def evaluate(ctx, config_path, checkpoint, split):
    """Caption a split and report BLEU-1, BLEU-4 and CIDEr-D"""
    run_config = load_run_config(config_path, ctx.args, _config_fallback(checkpoint))
    _setup_logging(run_config)
    run_dir = create_run_dir(run_config)
    with run_logging(run_dir):
        result = cmd_eval(run_config, checkpoint, run_dir, split)
    if not result['success']:
        click.echo(f"❌ {result['message']}", err=True)
        sys.exit(1)
    click.echo(result['report'])


@cli.command('route-inspect', context_settings=EXTRA_ARGS)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='Config file')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--threshold', type=float, default=None, help='Discretisation threshold (default: config)')
@click.option('--split', default='test', show_default=True)
@click.pass_context
@exit_on_error
def route_inspect(ctx, config_path, checkpoint, threshold, split):
    """Dump per-sample path weights and the active-cell histogram"""
    run_config = load_run_config(config_path, ctx.args, _config_fallback(checkpoint))
    if threshold is not None:
        run_config = run_config.merged({'threshold': threshold})
    _setup_logging(run_config)
    run_dir = create_run_dir(run_config)
    with run_logging(run_dir):
        result = cmd_route_inspect(run_config, checkpoint, run_dir, run_config.threshold, split)
    if not result['success']:
        click.echo(f"❌ {result['message']}", err=True)
        sys.exit(1)
    click.echo('active_cells\tsamples')
    for count, samples in result['histogram'].items():
        click.echo(f'{count}\t{samples}')
    if result['family_distance']:
        distance = result['family_distance']
        click.echo(f"family L1 distance: between={distance['between']:.6f} within={distance['within']:.6f}")
    click.echo(f'📊 outputs in {run_dir}')


@cli.command('diverse-sample', context_settings=EXTRA_ARGS)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), help='Config file')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--sample-id', type=int, required=True)
@click.option('--k', type=int, default=4, show_default=True)
@click.option('--split', default='test', show_default=True)
@click.pass_context
@exit_on_error
def diverse_sample(ctx, config_path, checkpoint, sample_id, k, split):
    """Caption one sample under k randomly sampled hard routing paths"""
    run_config = load_run_config(config_path, ctx.args, _config_fallback(checkpoint))
    _setup_logging(run_config)
    if k < 1:
        raise ConfigError(f'--k must be >= 1, got {k}')
    run_dir = create_run_dir(run_config)
    with run_logging(run_dir):
        result = cmd_diverse_sample(run_config, checkpoint, sample_id, k, run_dir, split)
    for i, caption in enumerate(result['captions']):
        click.echo(f'{i}\t{caption}')


if __name__ == '__main__':
    cli()
