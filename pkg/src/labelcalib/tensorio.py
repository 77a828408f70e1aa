"""File formats: probability tensors, label grids, manifests, prototype tables.

Both binary formats are little-endian with fixed headers:

* probability map: magic ``PCPM``, u16 version=1, u16 C, u32 H, u32 W,
  u8 element width (4), then C*H*W IEEE-754 float32 values in class-major
  (C, then H, then W) order;
* label grid: magic ``PCLM``, u16 version=1, u32 H, u32 W, then H*W
  unsigned 8-bit class indices (the ignore index is a legal value).

A dataset manifest is UTF-8 JSON: ``{"label_space": {...}, "entries":
[{"id": ..., "prob": ..., "label": ...}]}``.  Relative paths are resolved
against the manifest's own directory.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .core import ProbMap, PrototypeSet
from .errors import DimensionError, FormatError, ValidationError
from .labelspace import LabelSpace

PROB_MAGIC = b"PCPM"
LABEL_MAGIC = b"PCLM"
FORMAT_VERSION = 1

_PROB_HEADER = struct.Struct("<4sHHIIB")
_LABEL_HEADER = struct.Struct("<4sHII")


def _open_for(dest, mode: str):
    if hasattr(dest, "write") or hasattr(dest, "read"):
        return dest, False
    return open(dest, mode), True


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def write_prob_map(prob_map: ProbMap, dest) -> int:
    """Serialize a probability map; returns the number of bytes written."""
    C, H, W = prob_map.data.shape
    if C > 0xFFFF:
        raise DimensionError(f"class count {C} exceeds the u16 header field")
    if H > 0xFFFFFFFF or W > 0xFFFFFFFF:
        raise DimensionError(f"dimensions {H}x{W} exceed the u32 header fields")
    header = _PROB_HEADER.pack(PROB_MAGIC, FORMAT_VERSION, C, H, W, 4)
    payload = np.ascontiguousarray(prob_map.data, dtype="<f4").tobytes()
    fh, owned = _open_for(dest, "wb")
    try:
        fh.write(header)
        fh.write(payload)
    finally:
        if owned:
            fh.close()
    return len(header) + len(payload)


def read_prob_map(src) -> ProbMap:
    """Parse a probability map file; applies the ingestion sum check."""
    fh, owned = _open_for(src, "rb")
    try:
        magic, version, C, H, W, elem_width = _PROB_HEADER.unpack(
            _read_exact(fh, _PROB_HEADER.size, "header")
        )
        if magic != PROB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {PROB_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        if elem_width != 4:
            raise FormatError(f"unsupported element width {elem_width}")
        if C < 1:
            raise FormatError("class count must be >= 1")
        count = C * H * W
        payload = _read_exact(fh, count * 4, "payload")
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    finally:
        if owned:
            fh.close()
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(C, H, W)
    return ProbMap.from_array(values)


def write_label_map(grid, dest, space: LabelSpace | None = None) -> int:
    """Serialize an (H, W) uint8 label grid; validates against ``space`` if given."""
    arr = np.ascontiguousarray(grid, dtype=np.uint8)
    if arr.ndim != 2:
        raise DimensionError(f"label grid must be (H, W), got {arr.shape}")
    if space is not None:
        _check_label_values(arr, space)
    H, W = arr.shape
    header = _LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, H, W)
    payload = arr.tobytes()
    fh, owned = _open_for(dest, "wb")
    try:
        fh.write(header)
        fh.write(payload)
    finally:
        if owned:
            fh.close()
    return len(header) + len(payload)


def read_label_map(src, space: LabelSpace) -> np.ndarray:
    """Parse a label grid file and validate every value against ``space``."""
    fh, owned = _open_for(src, "rb")
    try:
        magic, version, H, W = _LABEL_HEADER.unpack(
            _read_exact(fh, _LABEL_HEADER.size, "header")
        )
        if magic != LABEL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {LABEL_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        payload = _read_exact(fh, H * W, "payload")
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    finally:
        if owned:
            fh.close()
    grid = np.frombuffer(payload, dtype=np.uint8).reshape(H, W).copy()
    _check_label_values(grid, space)
    return grid


def _check_label_values(grid: np.ndarray, space: LabelSpace) -> None:
    valid = grid < space.num_classes
    if space.ignore_index <= 0xFF:
        valid |= grid == space.ignore_index
    if not valid.all():
        bad = int(grid[~valid].flat[0])
        raise ValidationError(
            f"label value {bad} is neither a class in [0, {space.num_classes}) "
            f"nor the ignore index {space.ignore_index}"
        )


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    prob_path: Path
    label_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    label_space: LabelSpace

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(f"duplicate manifest entry id {dup!r}")
        for e in self.entries:
            if not str(e.prob_path):
                raise ValidationError(f"entry {e.id!r} has an empty prob path")

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "label_space" not in doc or "entries" not in doc:
            raise FormatError(f"manifest {path} must carry 'label_space' and 'entries'")
        space = LabelSpace.from_json_dict(doc["label_space"])
        base = path.parent
        entries = []
        for raw in doc["entries"]:
            try:
                eid = str(raw["id"])
                prob = raw["prob"]
            except (KeyError, TypeError) as exc:
                raise FormatError(f"malformed manifest entry: {raw!r}") from exc
            label = raw.get("label")
            entries.append(
                ManifestEntry(
                    id=eid,
                    prob_path=base / prob,
                    label_path=base / label if label is not None else None,
                )
            )
        return cls(entries=tuple(entries), label_space=space)

    def save(self, path) -> None:
        path = Path(path)
        base = path.parent

        def rel(p: Path) -> str:
            try:
                return p.relative_to(base).as_posix()
            except ValueError:
                return str(p)

        doc = {
            "label_space": self.label_space.to_json_dict(),
            "entries": [
                {"id": e.id, "prob": rel(e.prob_path)}
                | ({"label": rel(e.label_path)} if e.label_path is not None else {})
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def stream_dataset(
    manifest: DatasetManifest,
    *,
    with_labels: bool = False,
    on_error: str = "raise",
    on_skip: Callable[[str, Exception], None] | None = None,
) -> Iterator[tuple[str, ProbMap, np.ndarray | None]]:
    """Yield (id, probability map, optional label grid) in manifest order.

    Each file is opened exactly once and only one entry is resident at a
    time.  ``on_error='raise'`` aborts on the first bad entry (fit policy);
    ``'skip'`` drops the entry after calling ``on_skip`` (eval policy).
    """
    if on_error not in ("raise", "skip"):
        raise ValueError(f"on_error must be 'raise' or 'skip', got {on_error!r}")
    for entry in manifest.entries:
        try:
            pmap = read_prob_map(entry.prob_path)
            if pmap.num_classes != manifest.label_space.num_classes:
                raise DimensionError(
                    f"map has {pmap.num_classes} classes, label space has "
                    f"{manifest.label_space.num_classes}"
                )
            labels = None
            if with_labels:
                if entry.label_path is None:
                    raise ValidationError("entry has no label path")
                labels = read_label_map(entry.label_path, manifest.label_space)
                if labels.shape != (pmap.height, pmap.width):
                    raise DimensionError(
                        f"label grid {labels.shape} does not match map "
                        f"{(pmap.height, pmap.width)}"
                    )
        except (OSError, ValidationError) as exc:
            if on_error == "skip":
                if on_skip is not None:
                    on_skip(entry.id, exc)
                continue
            if isinstance(exc, ValidationError):
                raise type(exc)(f"entry {entry.id!r}: {exc}") from exc
            raise FormatError(f"entry {entry.id!r}: {exc}") from exc
        yield entry.id, pmap, labels


def _format_float(x: float) -> str:
    # 17 significant digits round-trip any IEEE-754 double exactly.
    return format(float(x), ".17g")


def export_prototypes(
    protos: PrototypeSet,
    dest,
    fmt: str = "csv",
    space: LabelSpace | None = None,
) -> None:
    """Write the prototype matrix as CSV or JSON (keyed by class names)."""
    protos.validate()
    C = protos.num_classes
    if space is not None:
        if space.num_classes != C:
            raise DimensionError(
                f"label space has {space.num_classes} classes, prototypes have {C}"
            )
        names = list(space.class_names)
    else:
        names = [f"class_{i}" for i in range(C)]

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class"] + names + ["observed", "source_weight"])
        for c in range(C):
            writer.writerow(
                [names[c]]
                + [_format_float(v) for v in protos.prototypes[c]]
                + [str(bool(protos.observed[c])).lower(),
                   _format_float(protos.source_weight[c])]
            )
        text = buf.getvalue()
    elif fmt == "json":
        doc = {
            "schema_version": 1,
            "num_classes": C,
            "class_names": names,
            "classes": {
                names[c]: {
                    "prototype": [float(v) for v in protos.prototypes[c]],
                    "observed": bool(protos.observed[c]),
                    "source_weight": float(protos.source_weight[c]),
                }
                for c in range(C)
            },
        }
        text = json.dumps(doc, indent=2) + "\n"
    else:
        raise ValueError(f"unknown prototype format {fmt!r}")

    fh, owned = _open_for(dest, "w")
    try:
        fh.write(text)
    finally:
        if owned:
            fh.close()


def import_prototypes(src, fmt: str | None = None) -> PrototypeSet:
    """Read a prototype table back; re-validates every invariant."""
    if fmt is None:
        suffix = Path(src).suffix.lower() if not hasattr(src, "read") else ""
        fmt = "json" if suffix == ".json" else "csv"
    fh, owned = _open_for(src, "r")
    try:
        text = fh.read()
    finally:
        if owned:
            fh.close()

    if fmt == "json":
        try:
            doc = json.loads(text)
            names = doc["class_names"]
            C = int(doc["num_classes"])
            rows, observed, weights = [], [], []
            for name in names:
                cell = doc["classes"][name]
                rows.append([float(v) for v in cell["prototype"]])
                observed.append(bool(cell["observed"]))
                weights.append(float(cell["source_weight"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed prototype JSON: {exc}") from exc
        if len(rows) != C:
            raise DimensionError(f"expected {C} prototype rows, got {len(rows)}")
    elif fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty prototype CSV") from None
        if len(header) < 4 or header[0] != "class" or header[-2:] != ["observed", "source_weight"]:
            raise FormatError("prototype CSV header must be class,<names...>,observed,source_weight")
        C = len(header) - 3
        rows, observed, weights = [], [], []
        try:
            for rec in reader:
                if not rec:
                    continue
                if len(rec) != C + 3:
                    raise FormatError(f"prototype CSV row has {len(rec)} fields, expected {C + 3}")
                rows.append([float(v) for v in rec[1:1 + C]])
                if rec[-2] not in ("true", "false"):
                    raise FormatError(f"observed flag must be true/false, got {rec[-2]!r}")
                observed.append(rec[-2] == "true")
                weights.append(float(rec[-1]))
        except ValueError as exc:
            raise FormatError(f"malformed prototype CSV: {exc}") from exc
        if len(rows) != C:
            raise DimensionError(f"prototype CSV has {len(rows)} rows for {C} columns")
    else:
        raise ValueError(f"unknown prototype format {fmt!r}")

    protos = PrototypeSet(
        prototypes=np.asarray(rows, dtype=np.float64),
        observed=np.asarray(observed, dtype=bool),
        source_weight=np.asarray(weights, dtype=np.float64),
    )
    return protos.validate()
