"""Checkpoint files: a zip of ``.npy`` members plus ``meta.json``.

Member order, timestamps and compression are fixed, so identical contents
always produce identical bytes. ``numpy.load`` can open the files too.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
import hashlib
import io
import json
import logging
import os
from typing import Any
from typing import Dict
from typing import Optional
from typing import Tuple
import zipfile

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt.config import ModelConfig
from dtnmt.errors import CheckpointError
from dtnmt.model import ModelParams


logger = logging.getLogger(__name__)

META_MEMBER = "meta.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(archive: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)


def save_arrays(path: str, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    """Write ``arrays`` (sorted by name) and ``meta`` to ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        with zipfile.ZipFile(path, "w") as archive:
            _write_member(archive, META_MEMBER, json.dumps(meta, sort_keys=True, indent=2).encode("utf-8"))
            for name in sorted(arrays):
                buffer = io.BytesIO()
                np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                _write_member(archive, f"{name}.npy", buffer.getvalue())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_arrays(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read back what :func:`save_arrays` wrote."""
    try:
        with zipfile.ZipFile(path, "r") as archive:
            meta = json.loads(archive.read(META_MEMBER).decode("utf-8"))
            arrays = {}
            for member in archive.namelist():
                if member == META_MEMBER:
                    continue
                with archive.open(member) as handle:
                    arrays[member[: -len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(handle.read()), allow_pickle=False
                    )
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return arrays, meta


def save_checkpoint(path: str, params: ModelParams, meta: Optional[Dict[str, Any]] = None) -> str:
    """Write ``params`` with their model config; return the file's SHA-256."""
    record = dict(meta or {})
    record["model_config"] = vars(params.config).copy()
    record["param_order"] = list(params)
    save_arrays(path, {name: t.data for name, t in params.items()}, record)
    digest = file_hash(path)
    logger.info("saved checkpoint %s (%d tensors, sha256 %s)", path, len(params), digest[:12])
    return digest


def load_checkpoint(path: str) -> Tuple[ModelParams, Dict[str, Any]]:
    """Return the parameters and the metadata stored in ``path``."""
    arrays, meta = load_arrays(path)
    try:
        config = ModelConfig(**meta["model_config"])
        order = meta["param_order"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path} is not a dtnmt model checkpoint") from exc
    params = ModelParams(config)
    for name in order:
        if name not in arrays:
            raise CheckpointError(f"{path} is missing tensor {name!r}")
        params.add(name, arrays[name])
    return params, meta


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
