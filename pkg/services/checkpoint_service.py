"""
Checkpoint container: one zip archive holding ``manifest.txt`` and one DTNT
record per parameter and batch-norm running statistic.

Entries are stored uncompressed with a fixed timestamp, so identical
weights give byte-identical files.
"""
import logging
import zipfile
from pathlib import Path
from typing import Dict, Union

import numpy as np

from errors import DatasetFormatError
from models.module import Module
from models.tensor import tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.txt'
FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


def _write_entry(archive: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=FIXED_TIMESTAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)


def save_checkpoint(path: Union[str, Path], model: Module):
    state = model.state_dict()
    manifest = ''.join(f"{name}\t{'x'.join(str(d) for d in array.shape)}\n" for name, array in state.items())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as archive:
        _write_entry(archive, MANIFEST, manifest.encode('utf-8'))
        for name, array in state.items():
            _write_entry(archive, f'{name}.dtnt', tensor_to_bytes(array))
    logger.info(f"Saved checkpoint with {len(state)} tensors to {path}")


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        archive = zipfile.ZipFile(path, 'r')
    except zipfile.BadZipFile:
        raise DatasetFormatError('not a checkpoint archive', path=str(path))
    state: Dict[str, np.ndarray] = {}
    with archive:
        try:
            manifest = archive.read(MANIFEST).decode('utf-8')
        except KeyError:
            raise DatasetFormatError('checkpoint has no manifest', path=str(path))
        for line in manifest.splitlines():
            name, _, shape_text = line.partition('\t')
            try:
                payload = archive.read(f'{name}.dtnt')
            except KeyError:
                raise DatasetFormatError(f'checkpoint entry {name} listed but missing', path=str(path))
            try:
                array, end = tensor_from_bytes(payload)
            except DatasetFormatError as e:
                raise DatasetFormatError(f'entry {name}: {e}', path=str(path))
            expected = tuple(int(d) for d in shape_text.split('x') if d)
            if array.shape != expected or end != len(payload):
                raise DatasetFormatError(f'entry {name} does not match manifest shape {expected}', path=str(path))
            state[name] = array
    return state


def load_checkpoint(path: Union[str, Path], model: Module) -> Module:
    state = read_checkpoint(path)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        logger.error(f"Checkpoint {path} does not fit the model: {str(e)}")
        raise DatasetFormatError(f'checkpoint does not fit the model: {e}', path=str(path))
    return model
