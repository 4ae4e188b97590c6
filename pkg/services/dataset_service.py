"""
Synthetic grid-captioning data and its file formats.

Two sample families share one vocabulary. A LOCAL sample plants a 2x2
colored motif whose color and position make up the caption; a GLOBAL sample
raises one color channel across the grid and scatters marker spots whose
count parity ends the caption.

Files per split: ``{split}.features.dtnf``, ``{split}.captions.txt``, plus
one ``vocab.txt`` per dataset directory.
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DatasetFormatError
from models.captioner import CaptionBatch, Vocabulary, tokenize
from models.tensor import RngState

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b'DTNF'
HEADER = struct.Struct('<4sIIII')
SAMPLE_ID = struct.Struct('<Q')

COLORS = ('red', 'green', 'blue', 'yellow')
VERTICAL = ('top', 'middle', 'bottom')
HORIZONTAL = ('left', 'center', 'right')
GLOBAL_LEVEL = 0.6
BACKGROUND_HIGH = 0.3
MARKER_CHANNEL = 8
MAX_SPOTS = 6
SPLITS = ('train', 'val', 'test')
DATA_STREAM = 1


class SampleFamily(str, Enum):
    LOCAL_PATTERN = 'LOCAL_PATTERN'
    GLOBAL_PATTERN = 'GLOBAL_PATTERN'

    @classmethod
    def from_caption(cls, caption: str) -> 'SampleFamily':
        words = tokenize(caption)
        if words and words[0] == 'a':
            return cls.LOCAL_PATTERN
        if words and words[0] == 'mostly':
            return cls.GLOBAL_PATTERN
        raise ValueError(f'caption does not belong to a known family: {caption!r}')


def position_word(index: int, size: int, words: Sequence[str]) -> str:
    """Maps a motif anchor 0..size-2 onto three position words"""
    return words[min(2, (3 * index) // (size - 1))]


def all_captions() -> List[str]:
    """Every caption the generator can emit"""
    captions = [f'a {color} block at the {v} {h}' for color in COLORS for v in VERTICAL for h in HORIZONTAL]
    captions += [f'mostly {color} scene with {parity} spots' for color in COLORS for parity in ('even', 'odd')]
    return captions


def build_vocabulary() -> Vocabulary:
    return Vocabulary.from_captions(all_captions())


@dataclass
class FeatureSet:
    """Feature grids [n, H, W, C] float32 with their u64 sample ids"""

    ids: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(self.features.shape[1:])


@dataclass
class CaptionDataset:
    ids: np.ndarray
    features: np.ndarray
    captions: List[str]
    families: List[SampleFamily] = field(default_factory=list)

    def __post_init__(self):
        if not self.families:
            self.families = [SampleFamily.from_caption(c) for c in self.captions]

    def __len__(self) -> int:
        return len(self.ids)

    def references(self, indices: Optional[Sequence[int]] = None) -> List[List[List[str]]]:
        indices = range(len(self)) if indices is None else indices
        return [[tokenize(self.captions[i])] for i in indices]

    def subset(self, indices: Sequence[int]) -> 'CaptionDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return CaptionDataset(self.ids[indices], self.features[indices],
                              [self.captions[i] for i in indices], [self.families[i] for i in indices])

    def index_of(self, sample_id: int) -> int:
        matches = np.flatnonzero(self.ids == sample_id)
        if not len(matches):
            raise KeyError(f'sample id {sample_id} not in dataset')
        return int(matches[0])

    def batch(self, indices: Sequence[int], vocab: Vocabulary) -> Tuple[np.ndarray, CaptionBatch]:
        indices = list(indices)
        captions = [self.captions[i] for i in indices]
        return self.features[indices], CaptionBatch.from_captions(vocab, captions, self.references(indices))

    def batches(self, batch_size: int, rng: Optional[RngState] = None) -> Iterator[np.ndarray]:
        """Index batches over one epoch, shuffled when an RngState is given"""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]


# generation

def _plant_local(grid: np.ndarray, rng: RngState) -> str:
    height, width, _ = grid.shape
    color = int(rng.integers(0, len(COLORS)))
    row = int(rng.integers(0, height - 1))
    col = int(rng.integers(0, width - 1))
    grid[row:row + 2, col:col + 2, color] = 1.0
    return f'a {COLORS[color]} block at the {position_word(row, height, VERTICAL)} {position_word(col, width, HORIZONTAL)}'


def _plant_global(grid: np.ndarray, rng: RngState) -> str:
    height, width, _ = grid.shape
    color = int(rng.integers(0, len(COLORS)))
    grid[:, :, 4:8] = rng.uniform((height, width, 4), 0.0, BACKGROUND_HIGH)
    grid[:, :, 4 + color] = GLOBAL_LEVEL
    spots = int(rng.integers(1, MAX_SPOTS + 1))
    for cell in rng.permutation(height * width)[:spots]:
        grid[cell // width, cell % width, MARKER_CHANNEL] = 1.0
    parity = 'even' if spots % 2 == 0 else 'odd'
    return f'mostly {COLORS[color]} scene with {parity} spots'


def gen_dataset(rng: RngState, n_per_family: int, grid: Tuple[int, int, int], noise_sigma: float = 0.0,
                first_id: int = 0) -> CaptionDataset:
    """
    Balanced LOCAL/GLOBAL samples in shuffled order, with additive Gaussian noise.

    Args:
        grid: (H, W, C) with H, W >= 3 and C >= 16
    """
    height, width, channels = grid
    problems = []
    if height < 3 or width < 3:
        problems.append(f'grid height and width must be >= 3, got {height}x{width}')
    if channels < 16:
        problems.append(f'feature channels must be >= 16, got {channels}')
    if n_per_family < 0:
        problems.append(f'n_per_family must be >= 0, got {n_per_family}')
    if noise_sigma < 0:
        problems.append(f'noise_sigma must be >= 0, got {noise_sigma}')
    if problems:
        raise ConfigError(problems)
    families = [SampleFamily.LOCAL_PATTERN] * n_per_family + [SampleFamily.GLOBAL_PATTERN] * n_per_family
    families = [families[i] for i in rng.permutation(len(families))]
    features = np.zeros((len(families), height, width, channels), dtype=np.float64)
    captions = []
    for i, family in enumerate(families):
        plant = _plant_local if family == SampleFamily.LOCAL_PATTERN else _plant_global
        captions.append(plant(features[i], rng))
    if noise_sigma > 0:
        features += rng.normal(features.shape, noise_sigma)
    ids = np.arange(first_id, first_id + len(families), dtype=np.uint64)
    return CaptionDataset(ids, features.astype(np.float32), captions, families)


# file formats

def write_features(path: Union[str, Path], feature_set: FeatureSet):
    features = np.ascontiguousarray(feature_set.features, dtype='<f4')
    if features.ndim != 4:
        raise ValueError(f'features must be [n, H, W, C], got {features.shape}')
    count, height, width, channels = features.shape
    with open(path, 'wb') as fh:
        fh.write(HEADER.pack(FEATURE_MAGIC, count, height, width, channels))
        for sample_id, grid in zip(feature_set.ids, features):
            fh.write(SAMPLE_ID.pack(int(sample_id)))
            fh.write(grid.tobytes())


def parse_features(buffer: bytes, path: Optional[str] = None) -> FeatureSet:
    if len(buffer) < 4 or buffer[:4] != FEATURE_MAGIC:
        raise DatasetFormatError('bad feature file magic', offset=0, path=path)
    if len(buffer) < HEADER.size:
        raise DatasetFormatError('truncated feature file header', offset=4, path=path)
    _, count, height, width, channels = HEADER.unpack_from(buffer, 0)
    floats = height * width * channels
    record = SAMPLE_ID.size + 4 * floats
    ids = np.zeros(count, dtype=np.uint64)
    features = np.zeros((count, height, width, channels), dtype=np.float32)
    offset = HEADER.size
    for i in range(count):
        if len(buffer) < offset + record:
            raise DatasetFormatError(f'truncated sample {i} of {count}', offset=offset, path=path)
        (ids[i],) = SAMPLE_ID.unpack_from(buffer, offset)
        features[i] = np.frombuffer(buffer, dtype='<f4', count=floats,
                                    offset=offset + SAMPLE_ID.size).reshape(height, width, channels)
        offset += record
    if offset != len(buffer):
        raise DatasetFormatError(f'{len(buffer) - offset} trailing bytes after {count} samples',
                                 offset=offset, path=path)
    return FeatureSet(ids, features)


def read_features(path: Union[str, Path]) -> FeatureSet:
    with open(path, 'rb') as fh:
        return parse_features(fh.read(), path=str(path))


def write_captions(path: Union[str, Path], ids: Sequence[int], captions: Sequence[str]):
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        for sample_id, caption in zip(ids, captions):
            fh.write(f'{int(sample_id)}\t{caption}\n')


def read_captions(path: Union[str, Path]) -> Dict[int, str]:
    data = Path(path).read_bytes()
    captions: Dict[int, str] = {}
    offset = 0
    for raw in data.split(b'\n'):
        line_offset = offset
        offset += len(raw) + 1
        if not raw:
            continue
        try:
            sample_id, caption = raw.decode('utf-8').split('\t', 1)
            captions[int(sample_id)] = caption
        except (UnicodeDecodeError, ValueError):
            raise DatasetFormatError('malformed caption line', offset=line_offset, path=str(path))
    return captions


def split_paths(data_dir: Union[str, Path], split: str) -> Tuple[Path, Path]:
    data_dir = Path(data_dir)
    return data_dir / f'{split}.features.dtnf', data_dir / f'{split}.captions.txt'


class DatasetService:
    """Generates, writes and loads synthetic caption datasets"""

    def __init__(self, data_dir: Union[str, Path]):
        self.data_dir = Path(data_dir)

    def generate(self, seed: int, sizes: Dict[str, int], grid: Tuple[int, int, int],
                 noise_sigma: float) -> Dict[str, object]:
        """
        Write every split plus the vocabulary.

        Args:
            sizes: total samples per split (split evenly between families)

        Returns:
            Dictionary with the written files and per-split counts
        """
        problems = [f'{split} size {size} is not an even number' for split, size in sizes.items() if size % 2]
        if problems:
            raise ConfigError(problems)
        rng = RngState(seed, stream=DATA_STREAM)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        vocab = build_vocabulary()
        files, counts, next_id = [], {}, 0
        for split, size in sizes.items():
            dataset = gen_dataset(rng, size // 2, grid, noise_sigma, first_id=next_id)
            next_id += len(dataset)
            features_path, captions_path = split_paths(self.data_dir, split)
            write_features(features_path, FeatureSet(dataset.ids, dataset.features))
            write_captions(captions_path, dataset.ids, dataset.captions)
            files += [str(features_path), str(captions_path)]
            counts[split] = len(dataset)
            logger.info(f"Wrote {len(dataset)} {split} samples to {features_path}")
        vocab_path = self.data_dir / 'vocab.txt'
        vocab.save(vocab_path)
        files.append(str(vocab_path))
        return {'success': True, 'message': f'Generated {sum(counts.values())} samples', 'files': files,
                'counts': counts}

    def load_vocabulary(self) -> Vocabulary:
        return Vocabulary.load(self.data_dir / 'vocab.txt')

    def load_split(self, split: str) -> CaptionDataset:
        features_path, captions_path = split_paths(self.data_dir, split)
        feature_set = read_features(features_path)
        captions = read_captions(captions_path)
        missing = [int(i) for i in feature_set.ids if int(i) not in captions]
        if missing:
            raise DatasetFormatError(f'{len(missing)} samples without captions, first id {missing[0]}',
                                     path=str(captions_path))
        return CaptionDataset(feature_set.ids, feature_set.features,
                              [captions[int(i)] for i in feature_set.ids])
