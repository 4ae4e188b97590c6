#!/usr/bin/env python3
"""
Quick start script: generate data, train, evaluate and inspect routes.

    python run.py            # quick start pipeline through app.py
    python run.py ablate     # full router vs static sum vs single cells, 3 seeds
"""
import os
import subprocess
import sys
from pathlib import Path
from typing import Dict, List

ABLATIONS = {
    'dynamic': {},
    'static_sum': {'router_variant': 'STATIC_SUM'},
    'gmc_cpc': {'spatial_cells': 'GMC', 'channel_cells': 'CPC'},
}


def python_executable() -> str:
    if os.name == 'nt':  # Windows
        candidate = Path('venv\\Scripts\\python.exe')
    else:
        candidate = Path('./venv/bin/python')
    return str(candidate) if candidate.exists() else sys.executable


def run_command(args: List[str]) -> bool:
    print(f"▶️  app.py {' '.join(args)}")
    try:
        subprocess.run([python_executable(), 'app.py', *args], check=True)
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ app.py {args[0]} failed with exit code {e.returncode}")
        return False


def latest_checkpoint(runs_dir: Path) -> Path:
    checkpoints = sorted(runs_dir.glob('*/model.zip'), key=lambda p: p.stat().st_mtime)
    if not checkpoints:
        raise FileNotFoundError(f'no model.zip under {runs_dir}')
    return checkpoints[-1]


def quick_start(extra: List[str]):
    """gen-data, train, eval and route-inspect with the default profile"""
    from config import RunConfig
    print("🎯 Dynamic routed captioning - Quick Start")
    print("=" * 40)

    if sys.version_info < (3, 9):
        print("❌ Python 3.9 or higher is required")
        return
    run_config = RunConfig()
    if not (Path(run_config.data_dir) / 'vocab.txt').exists():
        print("📦 Dataset not found. Generating...")
        if not run_command(['gen-data', *extra]):
            return
    else:
        print("✅ Dataset found")

    if not run_command(['train', '--phase', 'both', *extra]):
        return
    checkpoint = str(latest_checkpoint(Path(run_config.runs_dir)))
    print(f"✅ Trained model: {checkpoint}")
    for command in (['eval', '--checkpoint', checkpoint], ['route-inspect', '--checkpoint', checkpoint]):
        if not run_command(command):
            return
    print("\n✅ Quick start finished")


def ablation_verdict(table: 'pd.DataFrame', margin: float = 0.5) -> Dict[str, object]:
    """
    Compare mean test CIDEr-D of the dynamic router against the static sum.
    The dynamic router passes when it is no worse than ``margin`` below it.
    """
    dynamic = float(table.loc['dynamic', ('CIDEr-D', 'mean')])
    static = float(table.loc['static_sum', ('CIDEr-D', 'mean')])
    return {'dynamic': dynamic, 'static_sum': static, 'margin': margin,
            'non_inferior': dynamic >= static - margin}


def ablate(seeds: int = 3, phase: str = 'ce', steps: int = None, base=None) -> 'pd.DataFrame':
    """
    Train each ablation on the same dataset for ``seeds`` seeds and report
    mean test CIDEr-D per configuration.
    """
    import pandas as pd

    from config import RunConfig
    from services.dataset_service import DatasetService
    from services.evaluation_service import EvaluationService
    from services.training_service import TrainingService

    base = base or RunConfig()
    datasets = DatasetService(base.data_dir)
    if not (Path(base.data_dir) / 'vocab.txt').exists():
        print("📦 Generating dataset...")
        datasets.generate(base.seed, base.split_sizes, base.grid + (base.feature_channels,), base.noise_sigma)
    vocab = datasets.load_vocabulary()
    test_set = datasets.load_split('test')

    records: List[Dict[str, object]] = []
    out_dir = Path(base.runs_dir) / 'ablation'
    for name, overrides in ABLATIONS.items():
        for seed in range(seeds):
            run_config = base.merged({**overrides, 'seed': seed})
            run_dir = out_dir / f'{name}-seed{seed}'
            print(f"🔧 Training {name} (seed {seed})...")
            trainer = TrainingService(run_config, run_dir)
            trainer.train(phase, steps)
            result = EvaluationService(trainer.model.eval(), vocab).evaluate(
                test_set, run_dir, mode=run_config.eval_decode, k=run_config.beam_size, label=name)
            records.append({'config': name, 'seed': seed, **result['metrics']})

    frame = pd.DataFrame.from_records(records)
    table = frame.groupby('config', sort=False)[['BLEU-1', 'BLEU-4', 'CIDEr-D']].agg(['mean', 'std'])
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / 'ablation_runs.csv', index=False)
    table.to_csv(out_dir / 'ablation.csv')
    print("\n📊 Test CIDEr-D by configuration")
    print(table.to_string(float_format=lambda v: f'{v:.4f}'))
    verdict = ablation_verdict(table)
    mark = '✅' if verdict['non_inferior'] else '❌'
    print(f"\n{mark} dynamic {verdict['dynamic']:.4f} vs static_sum {verdict['static_sum']:.4f} "
          f"(allowed margin {verdict['margin']})")
    return table


def main():
    """Dispatch: no argument runs the quick start, ``ablate`` runs the ablation table"""
    if len(sys.argv) > 1 and sys.argv[1] == 'ablate':
        seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 3
        try:
            table = ablate(seeds)
        except Exception as e:
            print(f"❌ Ablation failed: {e}")
            sys.exit(1)
        if not ablation_verdict(table)['non_inferior']:
            sys.exit(1)
        return
    try:
        quick_start(sys.argv[1:])
    except KeyboardInterrupt:
        print("\n\n⏹️  Stopped by user")


if __name__ == '__main__':
    main()
