"""
Tests for the checkpoint archive and training reproducibility.
"""
import zipfile

import numpy as np
import pytest

from errors import DatasetFormatError
from models.captioner import CaptionModel
from models.encoder import EncoderConfig
from services.checkpoint_service import MANIFEST, load_checkpoint, read_checkpoint, save_checkpoint
from services.training_service import TrainingService


def small_model(seed=0, layers=1) -> CaptionModel:
    config = EncoderConfig(layers=layers, d_model=8, heads=2, grid=(3, 3))
    return CaptionModel(config, vocab_size=12, feature_channels=16, decoder_layers=1, max_len=6, seed=seed)


class TestCheckpointArchive:

    def test_round_trip_restores_every_tensor(self, tmp_path):
        source = small_model(seed=1)
        source.forward(np.random.default_rng(0).normal(size=(4, 3, 3, 16)), np.array([[1, 4]] * 4))
        save_checkpoint(tmp_path / 'model.zip', source)
        target = load_checkpoint(tmp_path / 'model.zip', small_model(seed=2))
        expected, restored = source.state_dict(), target.state_dict()
        assert expected.keys() == restored.keys()
        for name in expected:
            assert np.array_equal(expected[name], restored[name]), name

    def test_running_statistics_are_saved(self, tmp_path):
        model = small_model(seed=3)
        model.forward(np.random.default_rng(1).normal(size=(2, 3, 3, 16)), np.array([[1], [1]]))
        save_checkpoint(tmp_path / 'model.zip', model)
        state = read_checkpoint(tmp_path / 'model.zip')
        assert 'enc.0.lmc.stage0.bn_identity.running_mean' in state
        assert not np.allclose(state['enc.0.lmc.stage0.bn_identity.running_mean'], 0.0)

    def test_restored_model_captions_identically(self, tmp_path):
        source = small_model(seed=4).eval()
        save_checkpoint(tmp_path / 'model.zip', source)
        target = load_checkpoint(tmp_path / 'model.zip', small_model(seed=5)).eval()
        features = np.random.default_rng(2).normal(size=(3, 3, 3, 16))
        assert source.caption(features, mode='beam', k=2) == target.caption(features, mode='beam', k=2)

    def test_saves_are_byte_identical(self, tmp_path):
        model = small_model(seed=6)
        save_checkpoint(tmp_path / 'a.zip', model)
        save_checkpoint(tmp_path / 'b.zip', model)
        assert (tmp_path / 'a.zip').read_bytes() == (tmp_path / 'b.zip').read_bytes()

    def test_manifest_lists_names_and_shapes(self, tmp_path):
        save_checkpoint(tmp_path / 'model.zip', small_model())
        with zipfile.ZipFile(tmp_path / 'model.zip') as archive:
            manifest = archive.read(MANIFEST).decode('utf-8').splitlines()
            assert 'W_in\t16x8' in manifest
            assert all(info.compress_type == zipfile.ZIP_STORED for info in archive.infolist())

    def test_architecture_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / 'model.zip', small_model(layers=1))
        with pytest.raises(DatasetFormatError, match='does not fit'):
            load_checkpoint(tmp_path / 'model.zip', small_model(layers=2))

    def test_not_an_archive(self, tmp_path):
        (tmp_path / 'model.zip').write_bytes(b'plain text')
        with pytest.raises(DatasetFormatError, match='not a checkpoint'):
            read_checkpoint(tmp_path / 'model.zip')

    def test_shape_disagreeing_with_manifest(self, tmp_path):
        save_checkpoint(tmp_path / 'model.zip', small_model())
        with zipfile.ZipFile(tmp_path / 'model.zip') as archive:
            entries = {info.filename: archive.read(info) for info in archive.infolist()}
        entries[MANIFEST] = entries[MANIFEST].replace(b'W_in\t16x8', b'W_in\t8x16')
        with zipfile.ZipFile(tmp_path / 'edited.zip', 'w') as archive:
            for name, payload in entries.items():
                archive.writestr(name, payload)
        with pytest.raises(DatasetFormatError, match='W_in'):
            read_checkpoint(tmp_path / 'edited.zip')


class TestReproducibility:

    def test_same_seed_trains_to_identical_checkpoint(self, run_config, dataset_dir, tmp_path):
        first = TrainingService(run_config, tmp_path / 'one').train('both', steps=2)
        second = TrainingService(run_config, tmp_path / 'two').train('both', steps=2)
        assert (tmp_path / 'one' / 'model.zip').read_bytes() == (tmp_path / 'two' / 'model.zip').read_bytes()
        assert (tmp_path / 'one' / 'train.log').read_text() == (tmp_path / 'two' / 'train.log').read_text()
        assert first['phases'] == second['phases']

    def test_different_seed_trains_differently(self, run_config, dataset_dir, tmp_path):
        TrainingService(run_config, tmp_path / 'one').train('ce', steps=1)
        TrainingService(run_config.merged({'seed': 1}), tmp_path / 'two').train('ce', steps=1)
        assert (tmp_path / 'one' / 'model.zip').read_bytes() != (tmp_path / 'two' / 'model.zip').read_bytes()
