"""
Caption evaluation and path-sampled diverse captioning
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from models.captioner import CaptionModel, Vocabulary
from models.tensor import RngState
from services.caption_metrics import CaptionScorer
from services.checkpoint_service import load_checkpoint
from services.dataset_service import CaptionDataset, write_captions
from services.training_service import build_model

logger = logging.getLogger(__name__)

PATH_SAMPLER_STREAM = 5
METRICS = ('BLEU-1', 'BLEU-4', 'CIDEr-D')


def load_model(run_config, vocab: Vocabulary, checkpoint: Union[str, Path]) -> CaptionModel:
    model = build_model(run_config, len(vocab))
    load_checkpoint(checkpoint, model)
    return model.eval()


def format_report(metrics: Dict[str, float], label: str = 'run') -> str:
    """Text table of the headline metrics followed by a key=value block"""
    width = max(len(label), 3)
    header = f"{'run':<{width}}  " + '  '.join(f'{name:>8}' for name in METRICS)
    row = f'{label:<{width}}  ' + '  '.join(f'{metrics[name]:>8.4f}' for name in METRICS)
    block = '\n'.join(f'{key}={value:.6f}' for key, value in metrics.items())
    return f'{header}\n{row}\n\n{block}\n'


class EvaluationService:
    """Generates captions for a dataset split and scores them"""

    def __init__(self, model: CaptionModel, vocab: Vocabulary):
        self.model = model
        self.vocab = vocab

    def generate_captions(self, dataset: CaptionDataset, mode: str = 'beam', k: int = 3,
                          batch_size: int = 64) -> List[str]:
        self.model.eval()
        captions = []
        for indices in dataset.batches(batch_size):
            result = self.model.caption(dataset.features[indices], mode=mode, k=k)
            captions += [self.vocab.detokenize(hyp.tokens) for hyp in result.best()]
        return captions

    def evaluate(self, dataset: CaptionDataset, out_dir: Optional[Union[str, Path]] = None, mode: str = 'beam',
                 k: int = 3, label: str = 'run') -> Dict[str, object]:
        """
        Score generated captions against the dataset captions.

        Returns:
            Dictionary with success flag, metrics and the report text
        """
        if len(dataset) == 0:
            return {'success': False, 'message': 'evaluation split is empty'}
        captions = self.generate_captions(dataset, mode=mode, k=k)
        metrics = CaptionScorer(dataset.references()).report(captions)
        report = format_report(metrics, label)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_captions(out_dir / 'captions.txt', dataset.ids, captions)
            (out_dir / 'report.txt').write_text(report, encoding='utf-8')
        logger.info(f"Evaluated {len(dataset)} samples: CIDEr-D {metrics['CIDEr-D']:.4f}")
        return {'success': True, 'message': f'Evaluated {len(dataset)} samples', 'metrics': metrics,
                'report': report, 'captions': captions}

    def diverse_sample(self, features: np.ndarray, k: int, seed: int) -> List[str]:
        """
        k greedy captions of one sample, each under an independently drawn
        hard routing path (Gumbel one-hot draw from every router's logits).
        """
        if k < 1:
            raise ValueError(f'k must be >= 1, got {k}')
        self.model.eval()
        sampler = RngState(seed, PATH_SAMPLER_STREAM)
        features = np.asarray(features)[None]
        captions = []
        for _ in range(k):
            result = self.model.caption(features, mode='greedy', path_sampler=sampler)
            captions.append(self.vocab.detokenize(result.best()[0].tokens))
        return captions
