"""
Path analysis over a dataset: per-sample routing weights, active-cell
counts after thresholding, and how far apart the two sample families route.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from models.captioner import CaptionModel
from models.router import DEFAULT_THRESHOLD, count_submodels, discretize_paths
from models.encoder import trace_blocks
from models.tensor import no_grad
from services.dataset_service import CaptionDataset

logger = logging.getLogger(__name__)


def format_active(cells) -> str:
    return '{' + ','.join(cells) + '}'


class RouteAnalyzer:
    """Collects and summarises the path weights a model assigns to a dataset"""

    def __init__(self, model: CaptionModel, threshold: float = DEFAULT_THRESHOLD):
        self.model = model
        self.threshold = threshold
        self._submodel_blocks: List[List[List[np.ndarray]]] = []

    def collect(self, dataset: CaptionDataset, batch_size: int = 64) -> pd.DataFrame:
        """
        One row per (sample, layer, routing space) with the weights, the
        active cells and their count.
        """
        records = []
        self.model.eval()
        self._submodel_blocks = []
        for indices in dataset.batches(batch_size):
            with no_grad():
                _, traces = self.model.encode(dataset.features[indices])
            blocks = trace_blocks(traces)
            self._submodel_blocks.append(blocks)
            for trace in traces:
                for space, weights in trace.weights.items():
                    values = weights.values
                    cell_names = [cell.value for cell in weights.cells]
                    for row, active in enumerate(discretize_paths(values, self.threshold)):
                        sample = int(indices[row])
                        records.append({
                            'sample_id': int(dataset.ids[sample]),
                            'family': dataset.families[sample].value,
                            'layer': trace.layer,
                            'space': space,
                            'weights': [float(w) for w in values[row]],
                            'active': [cell_names[k] for k in active],
                            'n_active': len(active),
                        })
        return pd.DataFrame.from_records(
            records, columns=['sample_id', 'family', 'layer', 'space', 'weights', 'active', 'n_active'])

    def submodel_count(self) -> Dict[str, object]:
        """Distinct path combinations over the batches of the last ``collect``"""
        batches = self._submodel_blocks
        if not batches:
            return count_submodels([], self.threshold)
        layers = [[np.concatenate([blocks[layer][space] for blocks in batches], axis=0)
                   for space in range(len(batches[0][layer]))]
                  for layer in range(len(batches[0]))]
        return count_submodels(layers, self.threshold)

    @staticmethod
    def active_histogram(frame: pd.DataFrame) -> pd.Series:
        """Number of samples per total active-cell count (summed over layers and spaces)"""
        totals = frame.groupby('sample_id')['n_active'].sum()
        return totals.value_counts().sort_index().rename('samples')

    @staticmethod
    def sample_vectors(frame: pd.DataFrame) -> pd.DataFrame:
        """All path weights of a sample concatenated in (layer, space) order, one row per sample"""
        ordered = frame.sort_values(['sample_id', 'layer'], kind='stable')
        ids, families, vectors = [], [], []
        for sample_id, group in ordered.groupby('sample_id', sort=True):
            ids.append(sample_id)
            families.append(group['family'].iloc[0])
            vectors.append(np.concatenate([np.asarray(w) for w in group['weights']]))
        return pd.DataFrame({'family': families, 'vector': vectors}, index=pd.Index(ids, name='sample_id'))

    @classmethod
    def family_means(cls, frame: pd.DataFrame) -> Dict[str, np.ndarray]:
        vectors = cls.sample_vectors(frame)
        return {family: np.mean(np.stack(group['vector'].to_list()), axis=0)
                for family, group in vectors.groupby('family')}

    @classmethod
    def family_distance(cls, frame: pd.DataFrame) -> Dict[str, float]:
        """
        between: L1 distance of the two family mean vectors.
        within: mean L1 distance of each sample to its own family's mean
        vector, averaged over the two families.
        """
        vectors = cls.sample_vectors(frame)
        families = sorted(vectors['family'].unique())
        if len(families) != 2:
            raise ValueError(f'family distance needs exactly two families, found {len(families)}')
        means, within = {}, []
        for family in families:
            stacked = np.stack(vectors[vectors['family'] == family]['vector'].to_list())
            means[family] = stacked.mean(axis=0)
            within.append(float(np.abs(stacked - means[family]).sum(axis=1).mean()))
        between = float(np.abs(means[families[0]] - means[families[1]]).sum())
        return {'between': between, 'within': float(np.mean(within))}

    @staticmethod
    def write_dump(frame: pd.DataFrame, path: Union[str, Path]):
        """sample_id, layer, space, weights..., active set; tab separated"""
        with open(path, 'w', encoding='utf-8', newline='\n') as fh:
            for row in frame.itertuples(index=False):
                weights = '\t'.join(f'{w:.6f}' for w in row.weights)
                fh.write(f'{row.sample_id}\t{row.layer}\t{row.space}\t{weights}\t{format_active(row.active)}\n')

    @classmethod
    def write_figure(cls, frame: pd.DataFrame, path: Union[str, Path]):
        histogram = cls.active_histogram(frame)
        fig = make_subplots(rows=1, cols=2, subplot_titles=('Active cells per sample', 'Mean path weights'))
        fig.add_trace(go.Bar(x=histogram.index.tolist(), y=histogram.values.tolist(), name='samples'), row=1, col=1)
        labels = [f'L{row.layer}.{row.space}.{i}'
                  for row in frame.drop_duplicates(['layer', 'space']).itertuples(index=False)
                  for i in range(len(row.weights))]
        for family, mean in cls.family_means(frame).items():
            fig.add_trace(go.Bar(x=labels, y=mean.tolist(), name=family), row=1, col=2)
        fig.update_layout(barmode='group', template='plotly_white')
        fig.write_html(str(path), include_plotlyjs='cdn')

    def inspect(self, dataset: CaptionDataset, out_dir: Union[str, Path], figure: bool = True,
                batch_size: int = 64) -> Dict[str, object]:
        """
        Write ``routes.tsv``, ``active_histogram.csv`` and optionally
        ``routes.html`` into ``out_dir``.

        Returns:
            Dictionary with success flag, histogram and family distances
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame = self.collect(dataset, batch_size)
        if frame.empty:
            return {'success': False, 'message': 'no routing weights collected (empty dataset or zero layers)'}
        self.write_dump(frame, out_dir / 'routes.tsv')
        histogram = self.active_histogram(frame)
        histogram.to_frame().to_csv(out_dir / 'active_histogram.csv', index_label='active_cells')
        try:
            distance: Optional[Dict[str, float]] = self.family_distance(frame)
        except ValueError as e:
            logger.warning(f"Skipping family distance: {str(e)}")
            distance = None
        if figure:
            self.write_figure(frame, out_dir / 'routes.html')
        return {
            'success': True,
            'message': f'Inspected {frame["sample_id"].nunique()} samples',
            'histogram': {int(k): int(v) for k, v in histogram.items()},
            'family_distance': distance,
            'submodels': self.submodel_count(),
        }
