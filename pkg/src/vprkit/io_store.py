"""Bit-exact persistence: tensor containers, manifests, images.

One binary container format backs both weight files (magic ``VPRW``) and
descriptor index files (magic ``VPRI``): a version word, a tensor table of
(name, dtype code, rank, dims, offset, size), then raw little-endian payload
blobs. Every save/load pair here round-trips bit-exactly, and every writer is
atomic (write to a temp file in the target directory, then rename).
"""

from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from pathlib import Path
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .backbone import Backbone, ConvBnBranch, NetworkSpec, RepVggBlock, StageSpec
from .descriptor import GlobalDescriptor, PatchDescriptorSet, PcaModel, VladParams, make_patch_grid
from .errors import FormatError
from .matcher import AttentionLayer, MatcherParams
from .model import ModelParams
from .retrieval import DescriptorIndex, GeoTag, IndexEntry
from .tensor import BatchNormParams, ConvParams, Tensor4, as_tensor4, bilinear_resize

WEIGHTS_MAGIC = b"VPRW"
INDEX_MAGIC = b"VPRI"
FORMAT_VERSION = 1

# Conventional channel statistics applied to 8-bit images after scaling to [0, 1].
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("u1"),
}
_CODE_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("i", 4): 2, ("u", 1): 3}


def _atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# Generic tensor container
# ---------------------------------------------------------------------------


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise FormatError(f"dtype {arr.dtype} is not storable (float32/float64/int32/uint8 only)")
    return _CODE_FOR_KIND[key]


def pack_tensors(tensors: Mapping[str, np.ndarray], magic: bytes) -> bytes:
    """Serialize named arrays into one container blob, in mapping order."""
    if len(magic) != 4:
        raise FormatError(f"magic must be 4 bytes, got {magic!r}")
    table = bytearray()
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.ndim < 1 or arr.ndim > 8:
            raise FormatError(f"tensor {name!r} has unsupported rank {arr.ndim}")
        code = _dtype_code(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        encoded = name.encode("utf-8")
        table += struct.pack("<I", len(encoded)) + encoded
        table += struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(payload), len(blob))
        payload += blob
    head = magic + struct.pack("<II", FORMAT_VERSION, len(tensors))
    return bytes(head + table + payload)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated container: wanted {n} bytes at offset {self.pos}, have {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def unpack_tensors(data: bytes, expect_magic: bytes) -> dict[str, np.ndarray]:
    """Parse a container blob back into named arrays, validating the layout."""
    cur = _Cursor(data)
    magic = cur.take(4)
    if magic != expect_magic:
        raise FormatError(f"bad magic: found {magic!r}, expected {expect_magic!r}")
    version, count = cur.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version} (this build reads version {FORMAT_VERSION})")
    entries: list[tuple[str, int, tuple[int, ...], int, int]] = []
    for _ in range(count):
        (name_len,) = cur.unpack("<I")
        name = cur.take(name_len).decode("utf-8")
        code, rank = cur.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise FormatError(f"tensor {name!r} uses unknown dtype code {code}")
        if rank < 1 or rank > 8:
            raise FormatError(f"tensor {name!r} has unsupported rank {rank}")
        dims = cur.unpack(f"<{rank}I")
        offset, nbytes = cur.unpack("<QQ")
        expected = math.prod(dims) * _DTYPE_CODES[code].itemsize
        if expected != nbytes:
            raise FormatError(f"tensor {name!r} declares {nbytes} bytes but dims {dims} require {expected}")
        entries.append((name, code, dims, offset, nbytes))
    payload = data[cur.pos :]
    out: dict[str, np.ndarray] = {}
    for name, code, dims, offset, nbytes in entries:
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        if offset + nbytes > len(payload):
            raise FormatError(f"tensor {name!r} payload runs past end of file")
        arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code], count=math.prod(dims), offset=offset)
        out[name] = arr.reshape(dims).copy()
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], magic: bytes) -> None:
    _atomic_write(path, pack_tensors(tensors, magic))


def load_tensors(path: str | Path, expect_magic: bytes) -> dict[str, np.ndarray]:
    return unpack_tensors(Path(path).read_bytes(), expect_magic)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def _bn_tensors(prefix: str, bn: BatchNormParams, out: dict[str, np.ndarray]) -> None:
    out[prefix + "gamma"] = bn.gamma
    out[prefix + "beta"] = bn.beta
    out[prefix + "mean"] = bn.running_mean
    out[prefix + "var"] = bn.running_var
    out[prefix + "eps"] = np.array([bn.eps], dtype=np.float64)


def _bn_from(prefix: str, t: Mapping[str, np.ndarray]) -> BatchNormParams:
    return BatchNormParams(
        gamma=t[prefix + "gamma"],
        beta=t[prefix + "beta"],
        running_mean=t[prefix + "mean"],
        running_var=t[prefix + "var"],
        eps=float(t[prefix + "eps"][0]),
    )


def model_to_tensors(model: ModelParams) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {}
    spec = model.backbone.spec
    t["spec.stages"] = np.array(
        [[s.layer_count, s.out_channels, s.first_stride] for s in spec.stages], dtype=np.int32
    ).reshape(len(spec.stages), 3)
    t["spec.input_dims"] = np.array(spec.input_dims, dtype=np.int32)
    t["spec.in_channels"] = np.array([spec.in_channels], dtype=np.int32)
    t["form.multibranch"] = np.array([int(model.backbone.blocks is not None)], dtype=np.int32)
    t["form.fused"] = np.array([int(model.backbone.fused is not None)], dtype=np.int32)
    if model.backbone.blocks is not None:
        for i, block in enumerate(model.backbone.blocks):
            pre = f"block{i:02d}."
            t[pre + "conv3x3.weight"] = block.conv3x3.conv.weight
            t[pre + "conv3x3.bias"] = block.conv3x3.conv.bias
            _bn_tensors(pre + "conv3x3.bn.", block.conv3x3.bn, t)
            if block.conv1x1 is not None:
                t[pre + "conv1x1.weight"] = block.conv1x1.conv.weight
                t[pre + "conv1x1.bias"] = block.conv1x1.conv.bias
                _bn_tensors(pre + "conv1x1.bn.", block.conv1x1.bn, t)
            if block.identity_bn is not None:
                _bn_tensors(pre + "identity.bn.", block.identity_bn, t)
    if model.backbone.fused is not None:
        for i, conv in enumerate(model.backbone.fused):
            t[f"fused{i:02d}.weight"] = conv.weight
            t[f"fused{i:02d}.bias"] = conv.bias
    t["vlad.centers"] = model.vlad.centers
    t["vlad.assign_weight"] = model.vlad.assign_weight
    t["vlad.assign_bias"] = model.vlad.assign_bias
    if model.pca is not None:
        t["pca.projection"] = model.pca.projection
        t["pca.mean"] = model.pca.mean
        t["pca.whitened"] = np.array([int(model.pca.whitened)], dtype=np.int32)
        if model.pca.explained_variance is not None:
            t["pca.explained_variance"] = model.pca.explained_variance
    t["matcher.modes"] = np.array(
        [0 if layer.mode == "self" else 1 for layer in model.matcher.layers], dtype=np.int32
    )
    for i, layer in enumerate(model.matcher.layers):
        t[f"matcher.layer{i:02d}.w_f"] = layer.w_f
        t[f"matcher.layer{i:02d}.w_g"] = layer.w_g
        t[f"matcher.layer{i:02d}.w_h"] = layer.w_h
    t["matcher.dustbin"] = np.array([model.matcher.dustbin_score], dtype=np.float64)
    return t


def model_from_tensors(t: Mapping[str, np.ndarray]) -> ModelParams:
    try:
        stages = tuple(StageSpec(int(r[0]), int(r[1]), int(r[2])) for r in t["spec.stages"])
        spec = NetworkSpec(
            stages=stages,
            input_dims=(int(t["spec.input_dims"][0]), int(t["spec.input_dims"][1])),
            in_channels=int(t["spec.in_channels"][0]),
        )
        plan = spec.layer_plan()
        blocks = None
        if int(t["form.multibranch"][0]):
            built = []
            for i, (_, _, stride, _) in enumerate(plan):
                pre = f"block{i:02d}."
                conv3 = ConvParams(
                    weight=t[pre + "conv3x3.weight"], bias=t[pre + "conv3x3.bias"], stride=stride, padding=1
                )
                branch3 = ConvBnBranch(conv3, _bn_from(pre + "conv3x3.bn.", t))
                branch1 = None
                if pre + "conv1x1.weight" in t:
                    conv1 = ConvParams(
                        weight=t[pre + "conv1x1.weight"], bias=t[pre + "conv1x1.bias"], stride=stride, padding=0
                    )
                    branch1 = ConvBnBranch(conv1, _bn_from(pre + "conv1x1.bn.", t))
                identity = _bn_from(pre + "identity.bn.", t) if pre + "identity.bn.gamma" in t else None
                built.append(RepVggBlock(conv3x3=branch3, conv1x1=branch1, identity_bn=identity, stride=stride))
            blocks = tuple(built)
        fused = None
        if int(t["form.fused"][0]):
            fused = tuple(
                ConvParams(weight=t[f"fused{i:02d}.weight"], bias=t[f"fused{i:02d}.bias"], stride=stride, padding=1)
                for i, (_, _, stride, _) in enumerate(plan)
            )
        vlad = VladParams(
            centers=t["vlad.centers"], assign_weight=t["vlad.assign_weight"], assign_bias=t["vlad.assign_bias"]
        )
        pca = None
        if "pca.projection" in t:
            pca = PcaModel(
                projection=t["pca.projection"],
                mean=t["pca.mean"],
                whitened=bool(int(t["pca.whitened"][0])),
                explained_variance=t.get("pca.explained_variance"),
            )
        layers = tuple(
            AttentionLayer(
                w_f=t[f"matcher.layer{i:02d}.w_f"],
                w_g=t[f"matcher.layer{i:02d}.w_g"],
                w_h=t[f"matcher.layer{i:02d}.w_h"],
                mode="self" if int(mode) == 0 else "cross",
            )
            for i, mode in enumerate(t["matcher.modes"])
        )
        matcher = MatcherParams(layers=layers, dustbin_score=float(t["matcher.dustbin"][0]))
    except KeyError as missing:
        raise FormatError(f"weights file is missing tensor {missing}") from None
    return ModelParams(backbone=Backbone(spec=spec, blocks=blocks, fused=fused), vlad=vlad, pca=pca, matcher=matcher)


def save_weights(path: str | Path, model: ModelParams) -> None:
    """Write the full parameter bundle; load_weights(save_weights(m)) == m bit-exactly."""
    save_tensors(path, model_to_tensors(model), WEIGHTS_MAGIC)


def load_weights(path: str | Path) -> ModelParams:
    return model_from_tensors(load_tensors(path, WEIGHTS_MAGIC))


# ---------------------------------------------------------------------------
# Descriptor index
# ---------------------------------------------------------------------------


def index_to_tensors(index: DescriptorIndex, patch_store: Mapping[str, PatchDescriptorSet]) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {
        "meta.count": np.array([len(index)], dtype=np.int32),
        "meta.dimension": np.array([index.dimension if len(index) else 0], dtype=np.int32),
    }
    unknown = sorted(set(patch_store) - {e.image_id for e in index.entries})
    if unknown:
        raise FormatError(f"patch store carries ids missing from the index: {unknown}")
    for i, entry in enumerate(index.entries):
        pre = f"entry{i:05d}."
        t[pre + "id"] = np.frombuffer(entry.image_id.encode("utf-8"), dtype=np.uint8).copy()
        t[pre + "descriptor"] = entry.descriptor.values
        t[pre + "flags"] = np.array([int(entry.descriptor.pca_applied)], dtype=np.int32)
        t[pre + "geo.frame"] = np.frombuffer(entry.geotag.frame.encode("utf-8"), dtype=np.uint8).copy()
        t[pre + "geo.coords"] = np.array(entry.geotag.coords, dtype=np.float64)
        patches = patch_store.get(entry.image_id)
        if patches is not None:
            grid = patches.grid
            t[pre + "patches.descriptors"] = patches.descriptors
            t[pre + "patches.grid"] = np.array(
                [grid.d_x, grid.d_y, grid.stride, grid.height, grid.width], dtype=np.int32
            )
    return t


def index_from_tensors(t: Mapping[str, np.ndarray]) -> tuple[DescriptorIndex, dict[str, PatchDescriptorSet]]:
    try:
        count = int(t["meta.count"][0])
        dim = int(t["meta.dimension"][0])
        entries = []
        patch_store: dict[str, PatchDescriptorSet] = {}
        for i in range(count):
            pre = f"entry{i:05d}."
            image_id = bytes(t[pre + "id"]).decode("utf-8")
            values = t[pre + "descriptor"]
            if values.shape != (dim,):
                raise FormatError(
                    f"entry {image_id!r} has descriptor shape {values.shape} but the index declares dimension {dim}"
                )
            descriptor = GlobalDescriptor(values=values, pca_applied=bool(int(t[pre + "flags"][0])))
            frame = bytes(t[pre + "geo.frame"]).decode("utf-8")
            coords = t[pre + "geo.coords"]
            entries.append(
                IndexEntry(
                    image_id=image_id,
                    descriptor=descriptor,
                    geotag=GeoTag(frame=frame, coords=(float(coords[0]), float(coords[1]))),  # type: ignore[arg-type]
                )
            )
            if pre + "patches.descriptors" in t:
                g = t[pre + "patches.grid"]
                grid = make_patch_grid(
                    height=int(g[3]), width=int(g[4]), d_x=int(g[0]), d_y=int(g[1]), stride=int(g[2])
                )
                patch_store[image_id] = PatchDescriptorSet(descriptors=t[pre + "patches.descriptors"], grid=grid)
    except KeyError as missing:
        raise FormatError(f"index file is missing tensor {missing}") from None
    return DescriptorIndex(entries=tuple(entries)), patch_store


def save_index(path: str | Path, index: DescriptorIndex, patch_store: Mapping[str, PatchDescriptorSet]) -> None:
    save_tensors(path, index_to_tensors(index, patch_store), INDEX_MAGIC)


def load_index(path: str | Path) -> tuple[DescriptorIndex, dict[str, PatchDescriptorSet]]:
    return index_from_tensors(load_tensors(path, INDEX_MAGIC))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["image_id", "path", "easting", "northing", "split"]
_SPLITS = ("query", "database")


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    path: str
    easting: float
    northing: float
    split: str


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    """Parse the dataset manifest CSV, reporting the offending line on errors.

    Expected header: image_id,path,easting,northing,split with split one of
    query|database, coordinates finite decimals, image ids unique.
    """
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest (missing header)") from None
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: line 1: header {header!r} does not match {MANIFEST_HEADER!r}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}: line {line}: expected 5 fields, got {len(row)}")
            image_id, img_path, easting_s, northing_s, split = row
            if not image_id:
                raise FormatError(f"{path}: line {line}: empty image_id")
            if image_id in seen:
                raise FormatError(f"{path}: line {line}: duplicate image_id {image_id!r} (first at line {seen[image_id]})")
            try:
                easting = float(easting_s)
                northing = float(northing_s)
            except ValueError:
                raise FormatError(f"{path}: line {line}: non-numeric coordinate in {row[2:4]!r}") from None
            if not (math.isfinite(easting) and math.isfinite(northing)):
                raise FormatError(f"{path}: line {line}: coordinates must be finite")
            if split not in _SPLITS:
                raise FormatError(f"{path}: line {line}: split must be one of {_SPLITS}, got {split!r}")
            seen[image_id] = line
            records.append(ManifestRecord(image_id, img_path, easting, northing, split))
    return records


def save_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> None:
    """Write records back in the canonical format (repr floats, LF line ends)."""
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in records:
        writer.writerow([r.image_id, r.path, repr(r.easting), repr(r.northing), r.split])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def _ppm_token(data: bytes, pos: int, path: str | Path) -> tuple[bytes, int]:
    while pos < len(data):
        c = data[pos : pos + 1]
        if c in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        elif c == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\r", b"\n"):
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos : pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        pos += 1
    if start == pos:
        raise FormatError(f"{path}: truncated image header")
    return data[start:pos], pos


def parse_ppm(data: bytes, path: str | Path = "<bytes>") -> np.ndarray:
    """Binary 8-bit P6 -> (height, width, 3) uint8."""
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (magic {data[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _ppm_token(data, pos, path)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header token {token!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images supported (maxval 255), got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad image dims {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    pixels = data[pos : pos + need]
    if len(pixels) != need:
        raise FormatError(f"{path}: truncated pixel data ({len(pixels)} of {need} bytes)")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"write_ppm wants (H, W, 3) uint8, got {image.shape} {image.dtype}")
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, header + np.ascontiguousarray(image).tobytes())


def save_t4(path: str | Path, tensor: Tensor4) -> None:
    """Raw float32 tensor sidecar: four little-endian u32 dims, then the payload."""
    tensor = as_tensor4(tensor)
    _atomic_write(path, struct.pack("<4I", *tensor.shape) + tensor.astype("<f4").tobytes())


def load_t4(path: str | Path) -> Tensor4:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated tensor header")
    dims = struct.unpack("<4I", data[:16])
    need = math.prod(dims) * 4
    if len(data) - 16 != need:
        raise FormatError(f"{path}: payload is {len(data) - 16} bytes but dims {dims} require {need}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(dims).copy()


def load_image(
    path: str | Path,
    input_dims: Optional[tuple[int, int]] = None,
    mean: Sequence[float] = IMAGE_MEAN,
    std: Sequence[float] = IMAGE_STD,
) -> Tensor4:
    """Load one image as a (1, 3, H, W) tensor ready for the backbone.

    PPM files are scaled to [0, 1], normalized per channel with (x - mean)/std,
    then bilinearly resized to input_dims (height, width) when given. A .t4
    sidecar is treated as already preprocessed: loaded bit-exactly and only
    resized if its spatial dims disagree with input_dims.
    """
    p = Path(path)
    data = p.read_bytes()
    if data.startswith(b"P6"):
        rgb = parse_ppm(data, path)
        arr = rgb.astype(np.float64) / 255.0
        arr = (arr - np.asarray(mean, dtype=np.float64)) / np.asarray(std, dtype=np.float64)
        tensor = arr.transpose(2, 0, 1)[None, :, :, :].astype(np.float32)
    elif p.suffix == ".t4":
        tensor = load_t4(path)
    else:
        raise FormatError(f"{path}: unsupported image format (binary PPM or .t4 tensor expected)")
    if input_dims is not None and tensor.shape[2:] != tuple(input_dims):
        tensor = bilinear_resize(tensor, input_dims[0], input_dims[1])
    return tensor
