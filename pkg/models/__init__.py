"""
Models package initialization
"""
from .captioner import CaptionBatch, CaptionModel, Vocabulary
from .cells import CellKind
from .encoder import Arrangement, DynamicEncoder, EncoderConfig, Grouping
from .router import RouterVariant, RoutingType
from .tensor import RngState, Tensor

__all__ = [
    'CaptionBatch', 'CaptionModel', 'Vocabulary', 'CellKind',
    'Arrangement', 'DynamicEncoder', 'EncoderConfig', 'Grouping',
    'RouterVariant', 'RoutingType', 'RngState', 'Tensor'
]
