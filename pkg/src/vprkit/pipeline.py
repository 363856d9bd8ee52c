"""Glue between the model and datasets: per-image extraction, index building."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .backbone import backbone_forward
from .descriptor import (
    GlobalDescriptor,
    PatchDescriptorSet,
    extract_patch_descriptors,
    global_descriptor,
    make_patch_grid,
)
from .errors import FormatError, ShapeError
from .io_store import ManifestRecord, load_image
from .model import ModelParams
from .retrieval import DescriptorIndex, GeoTag, IndexEntry
from .tensor import Tensor4


@dataclass(frozen=True)
class ExtractionSettings:
    """The run-time knobs extraction needs beyond the weights themselves."""

    patch_size: int = 2
    patch_stride: int = 1
    input_dims: Optional[tuple[int, int]] = None
    fused: bool = False
    strict_dims: bool = False


def extract_from_tensor(
    image: Tensor4, model: ModelParams, settings: ExtractionSettings
) -> tuple[GlobalDescriptor, PatchDescriptorSet]:
    """Backbone forward, then global and patch descriptors off the same feature map."""
    fmap = backbone_forward(image, model.backbone, fused=settings.fused, strict_dims=settings.strict_dims)
    h, w = fmap.shape[2], fmap.shape[3]
    if settings.patch_size > min(h, w):
        raise ShapeError(
            f"patch size {settings.patch_size} does not fit the {h}x{w} feature map "
            f"(input {image.shape[2]}x{image.shape[3]})"
        )
    grid = make_patch_grid(h, w, settings.patch_size, settings.patch_size, settings.patch_stride)
    desc = global_descriptor(fmap, model.vlad, model.pca)
    patches = extract_patch_descriptors(fmap, grid, model.vlad, model.pca)
    return desc, patches


def extract_image(
    path: str, model: ModelParams, settings: ExtractionSettings
) -> tuple[GlobalDescriptor, PatchDescriptorSet]:
    image = load_image(path, input_dims=settings.input_dims)
    return extract_from_tensor(image, model, settings)


def extract_index(
    records: Sequence[ManifestRecord],
    model: ModelParams,
    settings: ExtractionSettings,
    threads: int = 1,
) -> tuple[DescriptorIndex, dict[str, PatchDescriptorSet]]:
    """Build a searchable index over database records.

    Entries are ordered by image_id no matter the manifest order or how the
    worker pool schedules, so the same inputs always produce the same bytes.
    """
    rows = sorted((r for r in records if r.split == "database"), key=lambda r: r.image_id)
    if not rows:
        raise FormatError("manifest contains no database records")

    def work(record: ManifestRecord) -> tuple[GlobalDescriptor, PatchDescriptorSet]:
        return extract_image(record.path, model, settings)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, rows))
    else:
        results = [work(r) for r in rows]

    entries = []
    patch_store: dict[str, PatchDescriptorSet] = {}
    for record, (desc, patches) in zip(rows, results):
        entries.append(
            IndexEntry(
                image_id=record.image_id,
                descriptor=desc,
                geotag=GeoTag.utm(record.easting, record.northing),
            )
        )
        patch_store[record.image_id] = patches
    return DescriptorIndex(entries=tuple(entries)), patch_store
