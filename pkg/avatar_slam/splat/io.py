"""Map checkpoints, 8-bit PNG frames and float depth grids."""
from __future__ import annotations

import io
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image

from ..container import read_container, write_container
from ..errors import DatasetError, TruncatedFile
from ..field import DeformationField
from .avatar import AvatarGaussians
from .gaussians import Gaussians3D

MAP_MAGIC = b"AMAP"
MAP_VERSION = 1
DEPTH_MAGIC = b"DPTH"
_DEPTH_HEADER = np.dtype([("magic", "S4"), ("height", "<u4"), ("width", "<u4")])


def save_png(path: Union[str, Path], image: torch.Tensor):
    """(H, W, 3) or (H, W) values in [0, 1] as an 8-bit PNG."""
    array = np.rint(image.detach().clamp(0.0, 1.0).cpu().numpy() * 255.0).astype(np.uint8)
    Image.fromarray(array).save(path, format="PNG")


def load_png(path: Union[str, Path]) -> torch.Tensor:
    with Image.open(path) as img:
        array = np.asarray(img, dtype=np.uint8)
    return torch.from_numpy(array.astype(np.float64) / 255.0)


def save_depth_grid(path: Union[str, Path], depth: torch.Tensor):
    """Magic ``DPTH``, uint32 height, uint32 width, then float32 little-endian values row-major."""
    values = depth.detach().cpu().numpy().astype("<f4")
    header = np.array([(DEPTH_MAGIC, values.shape[0], values.shape[1])], dtype=_DEPTH_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(values.tobytes())


def load_depth_grid(path: Union[str, Path]) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < _DEPTH_HEADER.itemsize:
        raise TruncatedFile(f"depth grid {path} is shorter than its header")
    header = np.frombuffer(data[: _DEPTH_HEADER.itemsize], dtype=_DEPTH_HEADER)[0]
    if header["magic"] != DEPTH_MAGIC:
        raise DatasetError(f"{path} is not a depth grid (magic {header['magic']!r})")
    height, width = int(header["height"]), int(header["width"])
    body = data[_DEPTH_HEADER.itemsize:]
    if len(body) != 4 * height * width:
        raise TruncatedFile(f"depth grid {path} holds {len(body)} bytes, expected {4 * height * width}")
    values = np.frombuffer(body, dtype="<f4").reshape(height, width)
    return torch.from_numpy(values.astype(np.float64))


def gaussian_arrays(scene: Gaussians3D, avatar: Optional[AvatarGaussians], prefix: str = "") -> Dict[str, np.ndarray]:
    """Row fields of both sets under ``<prefix>scene.`` and ``<prefix>avatar.``."""
    arrays = {}
    for name in scene.row_fields():
        arrays[prefix + "scene." + name] = getattr(scene, name).detach().cpu().numpy()
    for name in [] if avatar is None else avatar.row_fields():
        arrays[prefix + "avatar." + name] = getattr(avatar, name).detach().cpu().numpy()
    return arrays


def gaussians_from_arrays(arrays: Dict[str, np.ndarray], prefix: str = "") -> Tuple[Gaussians3D, Optional[AvatarGaussians]]:
    def rows(group):
        start = prefix + group
        return {k[len(start):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(start)}

    avatar = rows("avatar.")
    return Gaussians3D(**rows("scene.")), AvatarGaussians(**avatar) if avatar else None


def save_map(
    path: Union[str, Path],
    scene: Gaussians3D,
    avatar: Optional[AvatarGaussians],
    field: Optional[DeformationField] = None,
):
    arrays = gaussian_arrays(scene, avatar)
    if field is not None:
        buffer = io.BytesIO()
        field.save(buffer)
        arrays["field"] = np.frombuffer(buffer.getvalue(), dtype=np.uint8)
    meta = {"scene": len(scene), "avatar": 0 if avatar is None else len(avatar), "field": field is not None}
    write_container(path, MAP_MAGIC, MAP_VERSION, meta, arrays)


def load_map(
    path: Union[str, Path],
    field: Optional[DeformationField] = None,
) -> Tuple[Gaussians3D, Optional[AvatarGaussians], Optional[DeformationField]]:
    """Restore both Gaussian sets; the stored field state is loaded into ``field`` when given."""
    meta, arrays = read_container(path, MAP_MAGIC, MAP_VERSION, kind="map checkpoint")
    scene, avatar = gaussians_from_arrays(arrays)
    if field is not None and meta.get("field"):
        field.load(io.BytesIO(arrays["field"].tobytes()))
    return scene, avatar, field
