"""
Captioning model: input projection, dynamic encoder and caption decoder,
plus the vocabulary and padded caption batches they exchange.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DatasetFormatError, ShapeError
from models.decoder import CaptionDecoder
from models.encoder import DynamicEncoder, EncoderConfig, LayerTrace
from models.module import Module
from models.search import DecodeResult, decode
from models.tensor import RngState, Tensor, log_softmax, no_grad

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ('<pad>', '<bos>', '<eos>', '<unk>')


def tokenize(caption: str) -> List[str]:
    """Whitespace tokens, lower-cased"""
    return caption.lower().split()


class Vocabulary:
    """Token <-> id bijection; ids 0-3 are <pad>, <bos>, <eos>, <unk>"""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DatasetFormatError(f'vocabulary must start with {", ".join(SPECIAL_TOKENS)}')
        if len(set(tokens)) != len(tokens):
            raise DatasetFormatError('vocabulary tokens are not unique')
        for token in tokens:
            if not token or any(ch.isspace() for ch in token):
                raise DatasetFormatError(f'invalid vocabulary token {token!r}')
        self.tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def from_captions(cls, captions: Iterable[str]) -> 'Vocabulary':
        words = {word for caption in captions for word in tokenize(caption)}
        words -= set(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocabulary':
        text = Path(path).read_text(encoding='utf-8')
        lines = text.split('\n')
        if lines and lines[-1] == '':
            lines.pop()
        try:
            return cls(lines)
        except DatasetFormatError as e:
            raise DatasetFormatError(str(e), path=str(path))

    def save(self, path: Union[str, Path]):
        Path(path).write_text(''.join(f'{token}\n' for token in self.tokens), encoding='utf-8')

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def id_to_token(self, index: int) -> str:
        return self.tokens[index]

    def encode(self, caption: Union[str, Sequence[str]]) -> List[int]:
        words = tokenize(caption) if isinstance(caption, str) else list(caption)
        return [self.token_to_id(word) for word in words]

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Tokens up to the first EOS, specials dropped"""
        words = []
        for index in ids:
            index = int(index)
            if index == EOS:
                break
            if index in (PAD, BOS):
                continue
            words.append(self.tokens[index])
        return words

    def detokenize(self, ids: Iterable[int]) -> str:
        return ' '.join(self.decode(ids))


@dataclass
class CaptionBatch:
    """
    Padded caption ids [B, T]: BOS, caption, EOS, then PAD.

    ``lengths`` counts BOS and EOS.
    """

    tokens: np.ndarray
    lengths: np.ndarray
    references: Optional[List[List[List[str]]]] = None

    @classmethod
    def from_captions(cls, vocab: Vocabulary, captions: Sequence[str],
                      references: Optional[List[List[List[str]]]] = None) -> 'CaptionBatch':
        encoded = [[BOS] + vocab.encode(caption) + [EOS] for caption in captions]
        width = max((len(ids) for ids in encoded), default=2)
        tokens = np.full((len(encoded), width), PAD, dtype=np.int64)
        for i, ids in enumerate(encoded):
            tokens[i, :len(ids)] = ids
        lengths = np.array([len(ids) for ids in encoded], dtype=np.int64)
        return cls(tokens, lengths, references)

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    def __len__(self) -> int:
        return self.tokens.shape[0]


class CaptionModel(Module):
    """
    features [B, H, W, C_feat] -> linear projection to d_model -> dynamic
    encoder -> flattened memory [B, H*W, d_model] -> decoder logits.
    """

    def __init__(self, encoder_config: EncoderConfig, vocab_size: int, feature_channels: int,
                 decoder_layers: int = 2, max_len: int = 10, seed: int = 0):
        super().__init__()
        encoder_config.validate()
        self.encoder_config = encoder_config
        self.feature_channels = feature_channels
        self.max_len = max_len
        rng = RngState(seed, stream=0)
        d_model = encoder_config.d_model
        self.W_in = self.add_weight('W_in', (feature_channels, d_model), rng)
        self.b_in = self.add_zeros('b_in', (d_model,))
        self.encoder = self.add_module('enc', DynamicEncoder(encoder_config, rng))
        self.decoder = self.add_module('dec', CaptionDecoder(vocab_size, d_model, encoder_config.heads,
                                                             decoder_layers, max_len,
                                                             encoder_config.n_positions, rng))
        self.assign_names()

    def encode(self, features, rng: Optional[RngState] = None, path_sampler: Optional[RngState] = None,
               forced: Optional[Sequence[Dict[str, np.ndarray]]] = None) -> Tuple[Tensor, List[LayerTrace]]:
        """Returns the flattened memory [B, N, d_model] and the per-layer path weights"""
        if not isinstance(features, Tensor):
            features = Tensor(features)
        height, width = self.encoder_config.grid
        if features.ndim != 4 or tuple(features.shape[1:]) != (height, width, self.feature_channels):
            raise ShapeError(f'features must be [B, {height}, {width}, {self.feature_channels}], got {features.shape}')
        grid = features @ self.W_in + self.b_in
        grid, traces = self.encoder.forward(grid, rng=rng, path_sampler=path_sampler, forced=forced)
        batch = grid.shape[0]
        return grid.reshape(batch, height * width, self.encoder_config.d_model), traces

    def forward(self, features, tokens_in: np.ndarray, rng: Optional[RngState] = None) -> Tuple[Tensor, List[LayerTrace]]:
        memory, traces = self.encode(features, rng=rng)
        return self.decoder.forward(memory, tokens_in), traces

    def step_fn(self, memory: Tensor):
        """Next-token log-probabilities for decoding against a fixed memory"""
        memory_data = memory.numpy()

        def step(rows: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
            with no_grad():
                rows_memory = Tensor(memory_data[rows], dtype=memory_data.dtype)
                logits = self.decoder.forward(rows_memory, prefixes)
                return log_softmax(logits[:, -1], axis=-1).numpy()

        return step

    def generate(self, memory: Tensor, mode: str = 'greedy', k: int = 1, max_len: Optional[int] = None,
                 rng: Optional[RngState] = None) -> DecodeResult:
        return decode(self.step_fn(memory), memory.shape[0], mode, max_len or self.max_len,
                      bos=BOS, eos=EOS, banned=(PAD, BOS), k=k, rng=rng)

    def caption(self, features, mode: str = 'greedy', k: int = 1, rng: Optional[RngState] = None,
                path_sampler: Optional[RngState] = None) -> DecodeResult:
        with no_grad():
            memory, _ = self.encode(features, path_sampler=path_sampler)
        return self.generate(memory, mode=mode, k=k, rng=rng)

    def sequence_log_prob(self, memory: Tensor, rows: np.ndarray, sequences: Sequence[Sequence[int]]) -> Tensor:
        """
        Teacher-forced log p(sequence) for generated sequences, with gradient.

        Args:
            memory: encoder memory [B, N, d_model] (graph attached)
            rows: sample index of each sequence
            sequences: generated ids after BOS (EOS included when emitted)

        Returns:
            [M] summed log-probabilities
        """
        count = len(sequences)
        if count == 0 or any(len(seq) == 0 for seq in sequences):
            raise ShapeError('sequence_log_prob needs non-empty sequences')
        width = max(len(seq) for seq in sequences)
        inputs = np.full((count, width), PAD, dtype=np.int64)
        inputs[:, 0] = BOS
        seq_idx, pos_idx, tok_idx = [], [], []
        for i, seq in enumerate(sequences):
            inputs[i, 1:len(seq)] = seq[:-1]
            for t, token in enumerate(seq):
                seq_idx.append(i)
                pos_idx.append(t)
                tok_idx.append(int(token))
        logits = self.decoder.forward(memory[np.asarray(rows, dtype=np.int64)], inputs)
        picked = log_softmax(logits, axis=-1)[np.array(seq_idx), np.array(pos_idx), np.array(tok_idx)]
        assign = np.zeros((count, len(seq_idx)), dtype=picked.dtype)
        assign[np.array(seq_idx), np.arange(len(seq_idx))] = 1.0
        return (Tensor(assign, dtype=picked.dtype) @ picked.reshape(len(seq_idx), 1)).reshape(count)
