"""
Services package initialization
"""
from .caption_metrics import CaptionScorer
from .dataset_service import CaptionDataset, DatasetService
from .evaluation_service import EvaluationService
from .route_analyzer import RouteAnalyzer
from .training_service import TrainingService

__all__ = ['CaptionScorer', 'CaptionDataset', 'DatasetService', 'EvaluationService',
           'RouteAnalyzer', 'TrainingService']
