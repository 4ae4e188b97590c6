"""
Tests for the synthetic dataset generator and its file formats.
"""
import numpy as np
import pytest

from errors import ConfigError, DatasetFormatError
from models.captioner import Vocabulary, tokenize
from models.tensor import RngState
from services.dataset_service import (COLORS, HEADER, SAMPLE_ID, CaptionDataset, DatasetService, FeatureSet,
                                      SampleFamily, all_captions, build_vocabulary, gen_dataset,
                                      parse_features, position_word, read_captions, read_features,
                                      split_paths, write_captions, write_features)

from helpers import rule_decode


def generate(data_dir, seed=0, sizes=None, grid=(4, 4, 16), noise=0.1):
    sizes = sizes or {'train': 8, 'val': 4, 'test': 4}
    return DatasetService(data_dir).generate(seed, sizes, grid, noise)


class TestGenerator:

    def test_same_seed_gives_identical_files(self, tmp_path):
        generate(tmp_path / 'a', seed=5)
        generate(tmp_path / 'b', seed=5)
        names = sorted(p.name for p in (tmp_path / 'a').iterdir())
        assert names == sorted(p.name for p in (tmp_path / 'b').iterdir())
        for name in names:
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        generate(tmp_path / 'a', seed=1)
        generate(tmp_path / 'b', seed=2)
        path_a, _ = split_paths(tmp_path / 'a', 'train')
        path_b, _ = split_paths(tmp_path / 'b', 'train')
        assert path_a.read_bytes() != path_b.read_bytes()

    def test_families_are_balanced(self):
        dataset = gen_dataset(RngState(0, 1), 20, (5, 5, 16))
        assert len(dataset) == 40
        assert dataset.families.count(SampleFamily.LOCAL_PATTERN) == 20
        assert all(SampleFamily.from_caption(c) == f for c, f in zip(dataset.captions, dataset.families))

    def test_noiseless_captions_follow_planted_structure(self):
        dataset = gen_dataset(RngState(3, 1), 100, (7, 7, 16))
        decoded = [rule_decode(grid) for grid in dataset.features]
        agreement = np.mean([d == c for d, c in zip(decoded, dataset.captions)])
        assert agreement >= 0.99

    def test_captions_stay_inside_vocabulary(self):
        vocab = build_vocabulary()
        assert len(vocab) <= 64
        dataset = gen_dataset(RngState(4, 1), 50, (6, 8, 16), noise_sigma=0.1)
        for caption in dataset.captions + all_captions():
            words = tokenize(caption)
            assert len(words) <= 8
            assert all(word in vocab for word in words)

    def test_sample_ids_are_unique_across_splits(self, tmp_path):
        generate(tmp_path)
        service = DatasetService(tmp_path)
        ids = np.concatenate([service.load_split(split).ids for split in ('train', 'val', 'test')])
        assert len(set(ids.tolist())) == len(ids) == 16

    def test_linear_readout_recovers_color(self):
        rng = RngState(6, 1)
        train = gen_dataset(rng, 200, (7, 7, 16), noise_sigma=0.1)
        test = gen_dataset(rng, 50, (7, 7, 16), noise_sigma=0.1)

        def design(dataset):
            pooled = dataset.features.astype(np.float64).mean(axis=(1, 2))
            return np.hstack([pooled, np.ones((len(dataset), 1))])

        def color(caption):
            return next(i for i, name in enumerate(COLORS) if name in tokenize(caption))

        labels = np.array([color(c) for c in train.captions])
        weights, *_ = np.linalg.lstsq(design(train), np.eye(len(COLORS))[labels], rcond=None)
        predicted = np.argmax(design(test) @ weights, axis=1)
        accuracy = np.mean(predicted == np.array([color(c) for c in test.captions]))
        assert accuracy >= 0.95

    def test_linear_readout_recovers_family(self):
        rng = RngState(8, 1)
        train = gen_dataset(rng, 100, (7, 7, 32), noise_sigma=0.1)
        test = gen_dataset(rng, 100, (7, 7, 32), noise_sigma=0.1)

        def design(dataset):
            pooled = dataset.features.astype(np.float64).mean(axis=(1, 2))
            return np.hstack([pooled, np.ones((len(dataset), 1))])

        def signs(dataset):
            return np.array([1.0 if f == SampleFamily.LOCAL_PATTERN else -1.0 for f in dataset.families])

        weights, *_ = np.linalg.lstsq(design(train), signs(train), rcond=None)
        accuracy = np.mean(np.sign(design(test) @ weights) == signs(test))
        assert accuracy >= 0.95

    def test_invalid_settings_reported_together(self):
        with pytest.raises(ConfigError) as info:
            gen_dataset(RngState(0), 1, (2, 7, 8))
        assert len(info.value.problems) == 2

    def test_odd_split_size_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match='even'):
            generate(tmp_path, sizes={'train': 3})

    def test_position_words(self):
        assert [position_word(i, 4, ('top', 'middle', 'bottom')) for i in range(3)] == ['top', 'middle', 'bottom']
        assert [position_word(i, 7, 'abc') for i in range(6)] == ['a', 'a', 'b', 'b', 'c', 'c']

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            SampleFamily.from_caption('the cat sat')


class TestCaptionDataset:

    @pytest.fixture
    def dataset(self):
        return gen_dataset(RngState(7, 1), 5, (4, 4, 16))

    def test_batches_cover_every_sample_once(self, dataset):
        seen = np.concatenate(list(dataset.batches(3, RngState(0, 2))))
        assert sorted(seen.tolist()) == list(range(10))
        assert [len(b) for b in dataset.batches(3)] == [3, 3, 3, 1]

    def test_batch(self, dataset):
        features, batch = dataset.batch([2, 0], build_vocabulary())
        assert features.shape == (2, 4, 4, 16)
        assert batch.references == [[tokenize(dataset.captions[2])], [tokenize(dataset.captions[0])]]

    def test_index_of_and_subset(self, dataset):
        assert dataset.index_of(int(dataset.ids[4])) == 4
        with pytest.raises(KeyError):
            dataset.index_of(999)
        subset = dataset.subset([1, 3])
        assert subset.captions == [dataset.captions[1], dataset.captions[3]]
        assert np.array_equal(subset.features[1], dataset.features[3])


# =============================================================================
# File formats
# =============================================================================

class TestFeatureFile:

    def test_round_trip(self, tmp_path):
        grids = np.random.default_rng(0).normal(size=(1, 7, 7, 16)).astype(np.float32)
        write_features(tmp_path / 'x.dtnf', FeatureSet(np.array([42], dtype=np.uint64), grids))
        loaded = read_features(tmp_path / 'x.dtnf')
        assert loaded.ids.tolist() == [42]
        assert np.array_equal(loaded.features, grids)
        assert loaded.grid == (7, 7, 16)

    def test_empty_set(self, tmp_path):
        write_features(tmp_path / 'x.dtnf', FeatureSet(np.zeros(0, dtype=np.uint64), np.zeros((0, 3, 3, 16))))
        assert (tmp_path / 'x.dtnf').stat().st_size == HEADER.size
        loaded = read_features(tmp_path / 'x.dtnf')
        assert len(loaded) == 0
        assert loaded.grid == (3, 3, 16)

    def test_layout_is_little_endian(self, tmp_path):
        grids = np.full((1, 3, 3, 16), 1.5, dtype=np.float32)
        write_features(tmp_path / 'x.dtnf', FeatureSet(np.array([7], dtype=np.uint64), grids))
        data = (tmp_path / 'x.dtnf').read_bytes()
        assert data[:4] == b'DTNF'
        assert data[4:8] == (1).to_bytes(4, 'little')
        assert data[HEADER.size:HEADER.size + 8] == (7).to_bytes(8, 'little')
        assert len(data) == HEADER.size + SAMPLE_ID.size + 4 * 3 * 3 * 16

    @pytest.fixture
    def payload(self, tmp_path):
        grids = np.ones((2, 3, 3, 16), dtype=np.float32)
        write_features(tmp_path / 'x.dtnf', FeatureSet(np.array([0, 1], dtype=np.uint64), grids))
        return (tmp_path / 'x.dtnf').read_bytes()

    def test_bad_magic(self, payload):
        with pytest.raises(DatasetFormatError, match='magic') as info:
            parse_features(b'XXXX' + payload[4:])
        assert info.value.offset == 0

    def test_truncated_header(self, payload):
        with pytest.raises(DatasetFormatError, match='header') as info:
            parse_features(payload[:10])
        assert info.value.offset == 4

    def test_truncated_sample(self, payload):
        record = SAMPLE_ID.size + 4 * 3 * 3 * 16
        with pytest.raises(DatasetFormatError, match='truncated sample 1') as info:
            parse_features(payload[:-10])
        assert info.value.offset == HEADER.size + record

    def test_trailing_bytes(self, payload):
        with pytest.raises(DatasetFormatError, match='trailing') as info:
            parse_features(payload + b'\x00')
        assert info.value.offset == len(payload)

    def test_error_names_path(self, tmp_path):
        (tmp_path / 'bad.dtnf').write_bytes(b'nope')
        with pytest.raises(DatasetFormatError, match='bad.dtnf'):
            read_features(tmp_path / 'bad.dtnf')


class TestCaptionFile:

    def test_round_trip(self, tmp_path):
        write_captions(tmp_path / 'c.txt', [3, 9], ['a red block at the top left', 'mostly red scene with odd spots'])
        assert (tmp_path / 'c.txt').read_text() == '3\ta red block at the top left\n9\tmostly red scene with odd spots\n'
        assert read_captions(tmp_path / 'c.txt') == {3: 'a red block at the top left',
                                                     9: 'mostly red scene with odd spots'}

    @pytest.mark.parametrize('content', [b'0\tok\nbad line\n', b'0\tok\nx\tnot a number\n'])
    def test_malformed_line_offset(self, tmp_path, content):
        (tmp_path / 'c.txt').write_bytes(content)
        with pytest.raises(DatasetFormatError, match='malformed') as info:
            read_captions(tmp_path / 'c.txt')
        assert info.value.offset == 5

    def test_missing_caption_detected_on_load(self, tmp_path):
        generate(tmp_path)
        _, captions_path = split_paths(tmp_path, 'val')
        lines = captions_path.read_text().splitlines()
        captions_path.write_text('\n'.join(lines[1:]) + '\n')
        with pytest.raises(DatasetFormatError, match='without captions'):
            DatasetService(tmp_path).load_split('val')


class TestDatasetService:

    def test_generate_reports_files(self, tmp_path):
        result = generate(tmp_path)
        assert result['success']
        assert result['counts'] == {'train': 8, 'val': 4, 'test': 4}
        assert len(result['files']) == 7

    def test_vocabulary_file(self, tmp_path):
        generate(tmp_path)
        assert DatasetService(tmp_path).load_vocabulary() == build_vocabulary()
        assert Vocabulary.load(tmp_path / 'vocab.txt').tokens[:4] == ['<pad>', '<bos>', '<eos>', '<unk>']

    def test_load_split(self, tmp_path):
        generate(tmp_path, grid=(5, 6, 16))
        dataset = DatasetService(tmp_path).load_split('train')
        assert isinstance(dataset, CaptionDataset)
        assert dataset.features.shape == (8, 5, 6, 16)
        assert dataset.features.dtype == np.float32
