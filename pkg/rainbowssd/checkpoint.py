"""
Model checkpoints as deterministic tar archives.

An archive holds `manifest.json` (run config, layout, class count, shared
flag, tensor names) and one RT4 record per parameter or buffer under
`tensors/`. Member metadata is fixed and members are sorted, so equal models
serialize to equal bytes.
"""
import abc
import io
import json
import logging
import tarfile
from tarfile import TarFile, TarInfo
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from rainbowssd.config import run_config_from_dict
from rainbowssd.exceptions import DataError, ParseError
from rainbowssd.model import SSDModel
from rainbowssd.tensor import tensor_from_bytes, tensor_to_bytes

LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TENSOR_DIR = "tensors"
FORMAT_VERSION = 1


class CheckpointBackend(metaclass=abc.ABCMeta):
    """
    Interface used to store named blobs of a checkpoint.
    """

    @abc.abstractmethod
    def write_blob(self, name: str, data: bytes) -> None:
        """Store `data` under `name`"""

    @abc.abstractmethod
    def read_blob(self, name: str) -> bytes:
        """Return the blob stored under `name`"""


class CheckpointTarfile(CheckpointBackend):
    """
    Tarfile checkpoint backend. Names are '/' separated and placed under
    `archive_root`.
    """

    def __init__(self, tf: TarFile, *, archive_root: str = "checkpoint") -> None:
        self.tf = tf
        self.archive_root = archive_root

    def _arch_name(self, name: str) -> str:
        return f"{self.archive_root}/{name.lstrip('/')}"

    def _get_tar_info(self, name: str, size: int) -> TarInfo:
        ti = TarInfo(self._arch_name(name))
        ti.type = tarfile.REGTYPE
        ti.mode = 0o644
        ti.mtime = 0
        ti.uid = 0
        ti.gid = 0
        ti.uname = ""
        ti.gname = ""
        ti.size = size
        return ti

    def write_blob(self, name: str, data: bytes) -> None:
        self.tf.addfile(self._get_tar_info(name, len(data)), io.BytesIO(data))

    def read_blob(self, name: str) -> bytes:
        try:
            member = self.tf.getmember(self._arch_name(name))
        except KeyError as exc:
            raise DataError(f"checkpoint has no member {name!r}") from exc
        fobj = self.tf.extractfile(member)
        if fobj is None:
            raise DataError(f"checkpoint member {name!r} is not a regular file")
        with fobj:
            return fobj.read()


def write_state(
    backend: CheckpointBackend,
    manifest: Mapping[str, Any],
    state: Mapping[str, np.ndarray],
) -> None:
    """Write the manifest and then each tensor in sorted name order"""
    names = sorted(state)
    body = dict(manifest, tensors={name: list(state[name].shape) for name in names})
    blob = json.dumps(body, sort_keys=True, indent=2).encode("utf-8")
    backend.write_blob(MANIFEST_NAME, blob)
    for name in names:
        backend.write_blob(f"{TENSOR_DIR}/{name}.rt4", tensor_to_bytes(state[name]))


def read_state(backend: CheckpointBackend) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Inverse of `write_state`"""
    try:
        manifest = json.loads(backend.read_blob(MANIFEST_NAME).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {manifest.get('format')!r}")
    state = {}
    for name, shape in manifest["tensors"].items():
        blob = backend.read_blob(f"{TENSOR_DIR}/{name}.rt4")
        state[name] = tensor_from_bytes(blob, shape=tuple(shape))
    return manifest, state


def model_manifest(model: SSDModel, step: int = 0) -> Dict[str, Any]:
    config = model.config
    assert config.layout is not None
    return {
        "format": FORMAT_VERSION,
        "config": config.to_dict(),
        "boxes_per_position": list(config.layout.boxes_per_position),
        "num_classes": config.num_classes,
        "shared_classifier": config.layout.shared_classifier,
        "num_anchors": int(len(model.anchors)),
        "step": step,
    }


def save_checkpoint(path: str, model: SSDModel, *, step: int = 0) -> None:
    """Write `model` to a tar archive at `path`"""
    try:
        tf = tarfile.open(path, "w", format=tarfile.PAX_FORMAT)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path!r}: {exc}") from exc
    with tf:
        write_state(CheckpointTarfile(tf), model_manifest(model, step), model.state())
    LOGGER.info("wrote checkpoint %s at step %d", path, step)


def load_state_into(model: SSDModel, state: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into the model's parameters and buffers in place"""
    targets = model.state()
    missing = sorted(set(targets) - set(state))
    unexpected = sorted(set(state) - set(targets))
    if missing or unexpected:
        raise DataError(
            f"checkpoint does not fit the model: missing {missing[:3]}, "
            f"unexpected {unexpected[:3]}"
        )
    for name, target in targets.items():
        source = state[name]
        if source.shape != target.shape:
            raise DataError(
                f"checkpoint tensor {name} has shape {source.shape}, "
                f"model expects {target.shape}"
            )
        target[...] = source


def load_checkpoint(path: str, *, seed: Optional[int] = None) -> Tuple[SSDModel, Dict[str, Any]]:
    """Rebuild the model recorded in the archive at `path`"""
    try:
        tf = tarfile.open(path, "r")
    except (OSError, tarfile.TarError) as exc:
        raise DataError(f"cannot open checkpoint {path!r}: {exc}") from exc
    with tf:
        manifest, state = read_state(CheckpointTarfile(tf))
    config = run_config_from_dict(manifest["config"])
    model = SSDModel(config, seed=0 if seed is None else seed)
    load_state_into(model, state)
    LOGGER.info("loaded checkpoint %s (step %d)", path, manifest.get("step", 0))
    return model, manifest
