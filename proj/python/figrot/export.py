"""Export encoder embeddings into embedding store files.

An encoder maps a batch of items (image paths or text strings) to a float
array. Built-in encoders:

  hash:<dim>          deterministic content-hash vectors, for tests
  hf:<model>[@rev]    a transformers vision-language model (CLIP or BLIP)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from figrot.fige import EMPTY_TEXT_ID, save_store

Encoder = Callable[[Sequence[str], str], np.ndarray]


class ExportError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    encoder: str
    revision: str
    modality: str
    dim: int
    normalized: bool
    count: int
    sources: list[str] = field(default_factory=list)
    head: str = "projection"
    skipped: list[str] = field(default_factory=list)
    prompt: str | None = None


def hash_encoder(dim: int) -> Encoder:
    def encode(items: Sequence[str], modality: str) -> np.ndarray:
        rows = []
        for item in items:
            payload = Path(item).read_bytes() if modality == "image" else item.encode("utf-8")
            seed = int.from_bytes(hashlib.sha256(modality.encode() + b"\0" + payload).digest()[:8], "little")
            rows.append(np.random.default_rng(seed).standard_normal(dim))
        return np.asarray(rows, dtype=np.float64).reshape(len(items), dim)

    return encode


def hf_encoder(spec: str, head: str) -> Encoder:
    import torch
    from PIL import Image
    from transformers import AutoModel, AutoProcessor

    name, _, revision = spec.partition("@")
    model = AutoModel.from_pretrained(name, revision=revision or None).eval()
    processor = AutoProcessor.from_pretrained(name, revision=revision or None)

    @torch.no_grad()
    def encode(items: Sequence[str], modality: str) -> np.ndarray:
        if modality == "image":
            inputs = processor(images=[Image.open(p).convert("RGB") for p in items], return_tensors="pt")
            feats = model.get_image_features(**inputs) if head == "projection" else model.vision_model(**inputs).pooler_output
        else:
            inputs = processor(text=list(items), return_tensors="pt", padding=True)
            feats = model.get_text_features(**inputs) if head == "projection" else model.text_model(**inputs).pooler_output
        return feats.float().cpu().numpy()

    return encode


def resolve_encoder(spec: str, head: str = "projection") -> Encoder:
    if spec.startswith("hash:"):
        return hash_encoder(int(spec[5:]))
    if spec.startswith("hf:"):
        return hf_encoder(spec[3:], head)
    raise ExportError(f"unknown encoder '{spec}'")


def _normalize(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(rows)):
        raise ExportError("encoder produced non-finite values")
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ExportError("encoder produced a zero vector")
    return (rows / norms).astype(np.float32)


def _ids_for(items: Sequence[str], modality: str) -> list[str]:
    if modality == "image":
        return [Path(p).stem for p in items]
    return [f"text_{i:06d}" for i in range(len(items))]


def export_embeddings(
    items: Sequence[str],
    modality: str,
    encoder: Encoder,
    out: str | Path,
    *,
    encoder_name: str = "custom",
    revision: str = "",
    head: str = "projection",
    batch_size: int = 64,
    skip_unreadable: bool = False,
    ids: Sequence[str] | None = None,
) -> ExportManifest:
    if modality not in ("image", "text"):
        raise ExportError(f"modality must be image or text, got '{modality}'")
    all_ids = list(ids) if ids is not None else _ids_for(items, modality)
    kept_ids, rows, skipped = [], [], []
    dim = None
    for start in range(0, len(items), batch_size):
        batch = list(items[start : start + batch_size])
        batch_ids = all_ids[start : start + batch_size]
        if modality == "image":
            readable = [(i, p) for i, p in zip(batch_ids, batch) if Path(p).is_file()]
            missing = [p for p in batch if not Path(p).is_file()]
            if missing and not skip_unreadable:
                raise ExportError(f"unreadable item: {missing[0]}")
            skipped.extend(missing)
            batch_ids = [i for i, _ in readable]
            batch = [p for _, p in readable]
        if not batch:
            continue
        vectors = np.asarray(encoder(batch, modality))
        if vectors.ndim != 2 or vectors.shape[0] != len(batch):
            raise ExportError(f"encoder returned shape {vectors.shape} for {len(batch)} items")
        if dim is None:
            dim = vectors.shape[1]
        elif vectors.shape[1] != dim:
            raise ExportError(f"dimension drift: {vectors.shape[1]} after {dim}")
        kept_ids.extend(batch_ids)
        rows.append(_normalize(vectors))
    if dim is None:
        raise ExportError("nothing to export")
    values = np.concatenate(rows, axis=0)
    save_store(out, kept_ids, values, normalized=True)
    manifest = ExportManifest(encoder_name, revision, modality, int(dim), True, len(kept_ids),
                              [str(p) for p in items] if modality == "image" else [], head, skipped)
    _write_manifest(out, manifest)
    return manifest


def export_empty_text(encoder: Encoder, out: str | Path, *, encoder_name: str = "custom", revision: str = "",
                      head: str = "projection") -> ExportManifest:
    prompt = ""
    try:
        vectors = np.asarray(encoder([prompt], "text"))
        row = _normalize(vectors)
    except Exception:
        prompt = " "
        row = _normalize(np.asarray(encoder([prompt], "text")))
    save_store(out, [EMPTY_TEXT_ID], row, normalized=True)
    manifest = ExportManifest(encoder_name, revision, "text", int(row.shape[1]), True, 1, [], head, [], prompt)
    _write_manifest(out, manifest)
    return manifest


def check_consistent_dims(manifests: Sequence[ExportManifest]) -> int:
    dims = {m.dim for m in manifests}
    if len(dims) != 1:
        raise ExportError(f"dimension drift across stores: {sorted(dims)}")
    return dims.pop()


def _write_manifest(out: str | Path, manifest: ExportManifest) -> None:
    Path(str(out) + ".manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="figrot-export")
    parser.add_argument("--modality", choices=["image", "text"], required=True)
    parser.add_argument("--encoder", required=True, help="hash:<dim> or hf:<model>[@revision]")
    parser.add_argument("--input", help="file listing image paths or text lines")
    parser.add_argument("--out", required=True)
    parser.add_argument("--head", choices=["projection", "pooled"], default="projection")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--skip-unreadable", action="store_true")
    parser.add_argument("--empty-text", action="store_true", help="write the single-row empty-text store instead")
    args = parser.parse_args(argv)
    if not args.empty_text and not args.input:
        parser.error("--input is required unless --empty-text is given")
    try:
        encoder = resolve_encoder(args.encoder, args.head)
        name, _, revision = args.encoder.partition("@")
        if args.empty_text:
            manifest = export_empty_text(encoder, args.out, encoder_name=name, revision=revision, head=args.head)
        else:
            lines = [l.rstrip("\n") for l in Path(args.input).read_text(encoding="utf-8").splitlines()]
            items = [l for l in lines if l] if args.modality == "image" else lines
            manifest = export_embeddings(items, args.modality, encoder, args.out, encoder_name=name,
                                         revision=revision, head=args.head, batch_size=args.batch_size,
                                         skip_unreadable=args.skip_unreadable)
    except (ExportError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(asdict(manifest)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
