"""Named-array weight container shared by the codec and the denoiser."""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError

FORMAT_VERSION = 1
_VERSION_KEY = "__format_version__"


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    if _VERSION_KEY in arrays:
        raise ValueError(f"{_VERSION_KEY} is reserved")
    payload = {_VERSION_KEY: np.array(FORMAT_VERSION)}
    payload.update(arrays)
    np.savez(path, **payload)


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        if _VERSION_KEY not in data:
            raise DataFormatError(f"{path}: missing checkpoint version field")
        version = int(data[_VERSION_KEY])
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
        return {k: data[k] for k in data.files if k != _VERSION_KEY}
