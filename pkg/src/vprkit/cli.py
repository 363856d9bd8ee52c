"""Operator surface: extract | eval | reparam | bench | selfcheck.

Settings resolve in four layers: built-in defaults, then the VPR_THREADS
environment variable, then a key=value config file, then command-line flags.
Reports come out twice: a human table on stdout and, when requested,
machine-readable JSON lines with a frozen, versioned schema. Every command is
deterministic for fixed (seed, weights, inputs) apart from wall-clock fields.
Exit codes: 0 success, 1 verification failure, 2 usage or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import backbone_forward, count_params_flops
from .errors import ConfigError, FormatError, VprError
from .io_store import (
    ManifestRecord,
    load_index,
    load_manifest,
    load_weights,
    model_to_tensors,
    pack_tensors,
    save_index,
    save_weights,
    WEIGHTS_MAGIC,
)
from .model import ModelParams, random_model
from .pipeline import ExtractionSettings, extract_from_tensor, extract_image, extract_index
from .retrieval import DescriptorIndex, GeoTag, IndexEntry, global_retrieve, recall_at_k, rerank
from .selfcheck import run_all
from .tensor import conv_output_size

REPORT_SCHEMA_VERSION = 1
RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides the dataset: weights source and knobs."""

    weights: Optional[str] = None
    clusters: int = 64
    patch_size: int = 2
    patch_stride: int = 1
    pca_dim: int = 512
    attention_rounds: int = 2
    attention_key_dim: int = 0  # 0 means "same as the descriptor dim"
    sinkhorn_reg: float = 1.0
    sinkhorn_tol: float = 1e-6
    sinkhorn_iters: int = 100
    candidates: int = 100
    radius_m: float = 25.0
    threads: int = 1
    seed: int = 0
    input_height: int = 480
    input_width: int = 640
    dustbin_score: float = 0.9
    attention_normalization: str = "per_destination"

    def validate(self) -> "RunConfig":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.clusters >= 1, f"clusters must be >= 1, got {self.clusters}")
        need(self.patch_size >= 1, f"patch_size must be >= 1, got {self.patch_size}")
        need(self.patch_stride >= 1, f"patch_stride must be >= 1, got {self.patch_stride}")
        need(self.pca_dim >= 1, f"pca_dim must be >= 1, got {self.pca_dim}")
        need(self.attention_rounds >= 0, f"attention_rounds must be >= 0, got {self.attention_rounds}")
        need(self.attention_key_dim >= 0, f"attention_key_dim must be >= 0, got {self.attention_key_dim}")
        need(self.sinkhorn_reg > 0, f"sinkhorn_reg must be > 0, got {self.sinkhorn_reg}")
        need(self.sinkhorn_tol >= 0, f"sinkhorn_tol must be >= 0, got {self.sinkhorn_tol}")
        need(self.sinkhorn_iters >= 1, f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")
        need(self.candidates >= 1, f"candidates must be >= 1, got {self.candidates}")
        need(self.radius_m >= 0, f"radius_m must be >= 0, got {self.radius_m}")
        need(self.threads >= 1, f"threads must be >= 1, got {self.threads}")
        need(self.input_height >= 16 and self.input_width >= 16, "input dims must be at least 16 per axis")
        need(
            self.attention_normalization in ("per_destination", "global"),
            f"attention_normalization must be per_destination or global, got {self.attention_normalization!r}",
        )
        fh, fw = self.feature_dims()
        need(
            self.patch_size <= min(fh, fw),
            f"patch_size {self.patch_size} does not fit the {fh}x{fw} feature map of a "
            f"{self.input_height}x{self.input_width} input",
        )
        return self

    def feature_dims(self) -> tuple[int, int]:
        h, w = self.input_height, self.input_width
        for _ in range(4):
            h = conv_output_size(h, 3, 2, 1)
            w = conv_output_size(w, 3, 2, 1)
        return h, w

    def input_dims(self) -> tuple[int, int]:
        return self.input_height, self.input_width


_INT_KEYS = {
    "clusters",
    "patch_size",
    "patch_stride",
    "pca_dim",
    "attention_rounds",
    "attention_key_dim",
    "sinkhorn_iters",
    "candidates",
    "threads",
    "seed",
    "input_height",
    "input_width",
}
_FLOAT_KEYS = {"sinkhorn_reg", "sinkhorn_tol", "radius_m", "dustbin_score"}
_STR_KEYS = {"weights", "attention_normalization"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def parse_config_file(path: str | Path) -> dict[str, object]:
    """key = value lines; # starts a comment; unknown keys are refused."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}: line {lineno}: unknown setting {key!r}")
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError:
            raise ConfigError(f"{path}: line {lineno}: bad value {value!r} for {key}") from None
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    layers: dict[str, object] = {}
    env_threads = os.environ.get("VPR_THREADS")
    if env_threads is not None:
        try:
            layers["threads"] = int(env_threads)
        except ValueError:
            raise ConfigError(f"VPR_THREADS must be an integer, got {env_threads!r}") from None
    if getattr(args, "config", None):
        layers.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            layers[f.name] = value
    return RunConfig(**layers).validate()  # type: ignore[arg-type]


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value settings file")
    parser.add_argument("--weights", metavar="FILE", help="weights container; omitted means seeded random weights")
    parser.add_argument("--clusters", type=int, help="codebook size K")
    parser.add_argument("--patch-size", type=int, dest="patch_size", help="square patch side on the feature map")
    parser.add_argument("--patch-stride", type=int, dest="patch_stride", help="patch grid stride")
    parser.add_argument("--pca-dim", type=int, dest="pca_dim", help="final descriptor dimension")
    parser.add_argument("--attention-rounds", type=int, dest="attention_rounds", help="self+cross rounds")
    parser.add_argument("--attention-key-dim", type=int, dest="attention_key_dim", help="key space dim (0 = descriptor dim)")
    parser.add_argument("--sinkhorn-reg", type=float, dest="sinkhorn_reg", help="transport regularization")
    parser.add_argument("--sinkhorn-tol", type=float, dest="sinkhorn_tol", help="marginal tolerance")
    parser.add_argument("--sinkhorn-iters", type=int, dest="sinkhorn_iters", help="max scaling iterations")
    parser.add_argument("--candidates", type=int, help="stage-one candidate depth")
    parser.add_argument("--radius-m", type=float, dest="radius_m", help="localization radius in meters")
    parser.add_argument("--threads", type=int, help="worker threads (also VPR_THREADS)")
    parser.add_argument("--seed", type=int, help="seed for random weights and probes")
    parser.add_argument("--input-height", type=int, dest="input_height", help="working image height")
    parser.add_argument("--input-width", type=int, dest="input_width", help="working image width")
    parser.add_argument("--dustbin-score", type=float, dest="dustbin_score", help="unmatched-patch score")
    parser.add_argument(
        "--attention-normalization",
        dest="attention_normalization",
        choices=("per_destination", "global"),
        help="attention weight normalization",
    )


def _resolve_model(cfg: RunConfig) -> ModelParams:
    if cfg.weights:
        return load_weights(cfg.weights)
    return random_model(
        seed=cfg.seed,
        clusters=cfg.clusters,
        pca_dim=cfg.pca_dim,
        attention_rounds=cfg.attention_rounds,
        attention_key_dim=cfg.attention_key_dim or None,
        dustbin_score=cfg.dustbin_score,
    )


def _settings(cfg: RunConfig, model: ModelParams) -> ExtractionSettings:
    return ExtractionSettings(
        patch_size=cfg.patch_size,
        patch_stride=cfg.patch_stride,
        input_dims=cfg.input_dims(),
        fused=model.backbone.blocks is None,
        strict_dims=False,
    )


class _Report:
    """Collects JSON-line records and optionally writes them to a file."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self.records: list[dict] = []

    def add(self, record_type: str, **payload: object) -> None:
        self.records.append({"type": record_type, "version": REPORT_SCHEMA_VERSION, **payload})

    def flush(self) -> None:
        if self.path is None:
            return
        text = "".join(json.dumps(r) + "\n" for r in self.records)
        Path(self.path).write_text(text, encoding="utf-8")


def _table(rows: list[Sequence[str]], out=None) -> None:
    out = out or sys.stdout
    if not rows:
        return
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    for row in rows:
        print("  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip(), file=out)


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    records = load_manifest(args.manifest)
    model = _resolve_model(cfg)
    settings = _settings(cfg, model)
    start = time.perf_counter()
    index, patch_store = extract_index(records, model, settings, threads=cfg.threads)
    elapsed = time.perf_counter() - start
    save_index(args.out, index, patch_store)
    if args.save_weights:
        save_weights(args.save_weights, model)
    per_sec = len(index) / elapsed if elapsed > 0 else float("inf")
    report = _Report(args.report)
    report.add(
        "extract",
        images=len(index),
        seconds=round(elapsed, 6),
        images_per_sec=round(per_sec, 3),
        index=str(args.out),
        descriptor_dim=index.dimension,
        seed=cfg.seed,
        weights=cfg.weights or "random",
    )
    report.flush()
    print(f"indexed {len(index)} images in {elapsed:.2f}s ({per_sec:.2f} images/sec) -> {args.out}")
    return 0


def _extract_queries(records, model, settings, threads):
    queries = [r for r in records if r.split == "query"]
    if not queries:
        raise FormatError("manifest contains no query records")

    def work(record: ManifestRecord):
        return extract_image(record.path, model, settings)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, queries))
    else:
        results = [work(r) for r in queries]
    return queries, results


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    records = load_manifest(args.manifest)
    model = _resolve_model(cfg)
    settings = _settings(cfg, model)
    index, patch_store = load_index(args.index)
    if len(index) == 0:
        raise FormatError(f"{args.index}: index is empty")
    queries, extracted = _extract_queries(records, model, settings, cfg.threads)
    query_geotags = {r.image_id: GeoTag.utm(r.easting, r.northing) for r in queries}
    db_geotags = index.geotags()

    report = _Report(args.report)
    initial_lists = []
    reranked_lists = []
    match_seconds = 0.0
    for record, (desc, patches) in zip(queries, extracted):
        initial = global_retrieve(desc, index, record.image_id, k=cfg.candidates)
        start = time.perf_counter()
        reranked = rerank(
            patches,
            initial,
            patch_store,
            model.matcher,
            reg=cfg.sinkhorn_reg,
            tol=cfg.sinkhorn_tol,
            max_iters=cfg.sinkhorn_iters,
            normalization=cfg.attention_normalization,  # type: ignore[arg-type]
        )
        match_seconds += time.perf_counter() - start
        initial_lists.append(initial)
        reranked_lists.append(reranked)
        report.add(
            "eval_query",
            query_id=record.image_id,
            initial=[[i, round(s, 6)] for i, s in initial.ranked[:10]],
            reranked=[[i, round(s, 6)] for i, s in reranked.ranked[:10]],
            missing_patches=list(reranked.missing_patches),
        )

    table_rows: list[Sequence[str]] = [("stage", *(f"R@{k}" for k in RECALL_KS))]
    for stage, lists in (("initial", initial_lists), ("reranked", reranked_lists)):
        values = {}
        for k in RECALL_KS:
            values[k] = recall_at_k(lists, query_geotags, db_geotags, k=k, radius_m=cfg.radius_m)
            report.add("recall", stage=stage, k=k, value=values[k])
        table_rows.append((stage, *(f"{values[k]:.4f}" for k in RECALL_KS)))
    report.add(
        "eval_summary",
        queries=len(queries),
        database=len(index),
        radius_m=cfg.radius_m,
        candidates=cfg.candidates,
        match_seconds=round(match_seconds, 6),
    )
    report.flush()
    _table(table_rows)
    print(f"{len(queries)} queries against {len(index)} database images, radius {cfg.radius_m} m")
    return 0


def cmd_reparam(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    model = load_weights(args.weights_in)
    report = _Report(args.report)
    if model.backbone.blocks is None:
        save_weights(args.out, model)
        report.add("reparam", status="noop", reason="input carries only fused weights")
        report.flush()
        print("input is already fused; copied unchanged")
        return 0
    fused_model = model.with_fused()
    rng = np.random.default_rng(cfg.seed)
    probe = rng.standard_normal((1, model.backbone.spec.in_channels, 64, 64)).astype(np.float32)
    multi = backbone_forward(probe, model.backbone, fused=False, strict_dims=False)
    fused = backbone_forward(probe, fused_model.backbone, fused=True, strict_dims=False)
    deviation = float(np.abs(multi.astype(np.float64) - fused.astype(np.float64)).max())
    scale = max(1.0, float(np.abs(multi).max()))
    params_multi, flops_multi = count_params_flops(model.backbone, fused=False)
    params_fused, flops_fused = count_params_flops(model.backbone, fused=True)
    save_weights(args.out, fused_model)
    report.add(
        "reparam",
        status="fused",
        max_abs_deviation=deviation,
        max_rel_deviation=deviation / scale,
        params_multibranch=params_multi,
        params_fused=params_fused,
        flops_multibranch=flops_multi,
        flops_fused=flops_fused,
    )
    report.flush()
    _table(
        [
            ("", "multibranch", "fused"),
            ("params", str(params_multi), str(params_fused)),
            ("mult-adds", str(flops_multi), str(flops_fused)),
        ]
    )
    print(f"max elementwise deviation on probe batch: {deviation:.3e} (relative {deviation / scale:.3e})")
    print(f"wrote both forms -> {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.images < 1:
        raise ConfigError(f"--images must be >= 1, got {args.images}")
    if not 1 <= args.queries <= args.images:
        raise ConfigError(f"--queries must be in [1, --images], got {args.queries}")
    model = _resolve_model(cfg)
    settings = _settings(cfg, model)
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.input_dims()
    images = [rng.standard_normal((1, 3, h, w)).astype(np.float32) for _ in range(args.images)]

    start = time.perf_counter()
    extracted = [extract_from_tensor(img, model, settings) for img in images]
    extract_ms = (time.perf_counter() - start) * 1000.0 / len(images)

    entries = tuple(
        IndexEntry(image_id=f"bench{i:03d}", descriptor=desc, geotag=GeoTag.utm(float(i), 0.0))
        for i, (desc, _) in enumerate(extracted)
    )
    index = DescriptorIndex(entries=entries)
    patch_store = {f"bench{i:03d}": patches for i, (_, patches) in enumerate(extracted)}
    queries = extracted[: args.queries]
    start = time.perf_counter()
    for desc, patches in queries:
        initial = global_retrieve(desc, index, "q", k=min(cfg.candidates, len(index)))
        rerank(
            patches,
            initial,
            patch_store,
            model.matcher,
            reg=cfg.sinkhorn_reg,
            tol=cfg.sinkhorn_tol,
            max_iters=cfg.sinkhorn_iters,
            normalization=cfg.attention_normalization,  # type: ignore[arg-type]
        )
    match_ms = (time.perf_counter() - start) * 1000.0 / len(queries)

    params_multi, flops_multi = count_params_flops(model.backbone, fused=False)
    params_fused, flops_fused = count_params_flops(model.backbone, fused=True)
    model_size = len(pack_tensors(model_to_tensors(model), WEIGHTS_MAGIC))

    report = _Report(args.report)
    report.add(
        "bench",
        speed1_extract_ms=round(extract_ms, 3),
        speed2_match_ms=round(match_ms, 3),
        params=params_fused if model.backbone.blocks is None else params_multi,
        params_fused=params_fused,
        theo_flops=flops_fused if model.backbone.blocks is None else flops_multi,
        theo_flops_fused=flops_fused,
        model_size_bytes=model_size,
        images=args.images,
        queries=args.queries,
        input_dims=[h, w],
    )
    report.flush()
    _table(
        [
            ("metric", "value"),
            ("extraction ms/image", f"{extract_ms:.1f}"),
            ("matching ms/query", f"{match_ms:.1f}"),
            ("backbone params", str(params_multi)),
            ("backbone params (fused)", str(params_fused)),
            ("theo mult-adds", str(flops_multi)),
            ("theo mult-adds (fused)", str(flops_fused)),
            ("model size (bytes)", str(model_size)),
        ]
    )
    return 0


def cmd_selfcheck(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    results = run_all(seed=cfg.seed, weights_path=args.weights)
    report = _Report(args.report)
    rows: list[Sequence[str]] = [("module", "check", "status", "detail")]
    for r in results:
        rows.append((r.module, r.name, "ok" if r.ok else "FAIL", r.detail))
        report.add("selfcheck", module=r.module, check=r.name, ok=bool(r.ok), detail=r.detail)
    failed = [r for r in results if not r.ok]
    report.add("selfcheck_summary", checks=len(results), failed=len(failed))
    report.flush()
    _table(rows)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vprkit",
        description="Two-stage visual place recognition: global retrieval plus patch re-ranking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="index the database split of a manifest")
    p.add_argument("manifest", help="dataset manifest CSV")
    p.add_argument("--out", default="index.vpri", help="index file to write")
    p.add_argument("--save-weights", dest="save_weights", metavar="FILE", help="persist the model used")
    p.add_argument("--report", metavar="FILE", help="write JSON-lines report here")
    add_config_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="retrieve+rerank the query split against an index")
    p.add_argument("manifest", help="dataset manifest CSV")
    p.add_argument("--index", required=True, help="index file from extract")
    p.add_argument("--report", metavar="FILE", help="write JSON-lines report here")
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reparam", help="fuse branches and verify on a probe batch")
    p.add_argument("weights_in", help="weights container to fuse")
    p.add_argument("--out", required=True, help="weights container to write (both forms)")
    p.add_argument("--report", metavar="FILE", help="write JSON-lines report here")
    add_config_flags(p)
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("bench", help="time extraction and matching on synthetic fixtures")
    p.add_argument("--images", type=int, default=3, help="synthetic database size")
    p.add_argument("--queries", type=int, default=2, help="synthetic query count")
    p.add_argument("--report", metavar="FILE", help="write JSON-lines report here")
    add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selfcheck", help="run built-in oracle suites")
    p.add_argument("--report", metavar="FILE", help="write JSON-lines report here")
    add_config_flags(p)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VprError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
