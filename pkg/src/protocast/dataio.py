"""On-disk formats: CSV datasets with a JSON manifest, binary checkpoints.

Dataset: ``manifest.json`` listing entities, one CSV per entity with
header ``t,var_0,...``; values are decimal text at 17 significant digits
(lossless for float64), empty field = missing.

Checkpoint: magic ``FLCX``, u32 version, u64-length canonical config
text, then a named tensor table — per tensor a u16-length name, u8 rank,
u64 dims, u8 dtype code (0 = float32, 1 = float64) and the raw
little-endian payload.  Loads verify the header and every tensor name and
shape against the config-derived expectations before copying payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import Config, config_from_text, config_to_text
from .errors import ValidationError
from .preprocess import EntitySeries

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"FLCX"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else format(x, ".17g")


def save_dataset(entities: list, out_dir, generator_meta: list | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, entity in enumerate(entities):
        fname = f"{entity.entity_id}.csv"
        header = "t," + ",".join(f"var_{j}" for j in range(entity.variate_count))
        lines = [header]
        for t in range(entity.length):
            vals = ",".join(_fmt(entity.values[j, t])
                            for j in range(entity.variate_count))
            lines.append(f"{t},{vals}")
        (out / fname).write_text("\n".join(lines) + "\n", encoding="utf-8")
        records.append({
            "id": entity.entity_id,
            "path": fname,
            "variates": entity.variate_count,
            "length": entity.length,
            "frequency": entity.frequency_tag,
            "generator": generator_meta[i] if generator_meta else {},
        })
    manifest = {"format_version": FORMAT_VERSION, "entities": records}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_csv(path: Path, expect_variates: int, expect_length: int,
               entity_id: str, problems: list) -> np.ndarray | None:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        problems.append(f"{entity_id}: missing file {path.name} ({exc})")
        return None
    lines = [ln for ln in text.splitlines() if ln]
    header = lines[0].split(",")
    if len(header) - 1 != expect_variates:
        problems.append(
            f"{entity_id}: manifest declares {expect_variates} variates but "
            f"{path.name} has {len(header) - 1} columns"
        )
        return None
    rows = lines[1:]
    if len(rows) != expect_length:
        problems.append(
            f"{entity_id}: manifest declares length {expect_length} but "
            f"{path.name} has {len(rows)} rows"
        )
        return None
    values = np.full((expect_variates, expect_length), np.nan)
    for t, row in enumerate(rows):
        cells = row.split(",")
        if len(cells) != expect_variates + 1:
            problems.append(f"{entity_id}: row {t} has {len(cells) - 1} fields")
            return None
        for j, cell in enumerate(cells[1:]):
            if cell == "":
                continue
            try:
                values[j, t] = float(cell)
            except ValueError:
                problems.append(
                    f"{entity_id}: unparseable value {cell!r} at row {t}, var_{j}")
                return None
    return values


def load_dataset(path) -> list:
    """Load a manifest directory; any problem is itemized in one error."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported dataset format_version {manifest.get('format_version')!r}")
    entities, problems = [], []
    for rec in manifest.get("entities", []):
        values = _parse_csv(root / rec["path"], rec["variates"], rec["length"],
                            rec["id"], problems)
        if values is not None:
            entities.append(EntitySeries(entity_id=rec["id"], values=values,
                                         frequency_tag=rec.get("frequency", "")))
    if problems:
        raise ValidationError("dataset load failed:\n  " + "\n  ".join(problems))
    return entities


def dataset_generator_meta(path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    return {rec["id"]: rec.get("generator", {}) for rec in manifest["entities"]}


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model, path):
    from .model import Model  # local import to avoid a cycle

    assert isinstance(model, Model)
    blob = config_to_text(model.cfg).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for p in model.params:
        name = p.name.encode("utf-8")
        arr = p.value.data
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            parts.append(struct.pack("<Q", dim))
        parts.append(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValidationError(
                f"truncated checkpoint: needed {n} bytes at offset {self.off}, "
                f"only {len(self.buf) - self.off} remain"
            )
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect: Config | None = None):
    """Rebuild a model from a checkpoint; bit-identical to what was saved.

    If ``expect`` is given, its model-shaping fields must match the stored
    config; mismatches are rejected before any tensor payload is read.
    """
    from .model import Model

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<Q")
    cfg = config_from_text(r.take(blob_len).decode("utf-8"))
    if expect is not None:
        shaping = ("d_model", "patch_len", "time_layers", "latent_layers",
                   "heads", "prototypes", "quantiles", "use_ffn", "normalization")
        for f in shaping:
            if getattr(cfg, f) != getattr(expect, f):
                raise ValidationError(
                    f"{path}: checkpoint {f}={getattr(cfg, f)!r} does not match "
                    f"expected {getattr(expect, f)!r}"
                )
    model = Model(cfg)
    expected = model.expected_shapes()
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise ValidationError(
            f"{path}: checkpoint has {count} tensors, config implies {len(expected)}")
    # first pass: validate all headers/names/shapes before copying payloads
    entries = []
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = tuple(r.unpack("<Q")[0] for _ in range(rank))
        (code,) = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise ValidationError(f"{path}: unknown dtype code {code} at offset {r.off}")
        if name not in expected:
            raise ValidationError(f"{path}: unknown tensor name {name!r} at offset {r.off}")
        if name in seen:
            raise ValidationError(f"{path}: duplicate tensor name {name!r} at offset {r.off}")
        seen.add(name)
        if dims != expected[name]:
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {dims}, expected {expected[name]}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
        payload_off = r.off
        r.take(nbytes)
        entries.append((name, dims, dtype, payload_off, nbytes))
    if r.off != len(r.buf):
        raise ValidationError(
            f"{path}: {len(r.buf) - r.off} trailing bytes after tensor table")
    for name, dims, dtype, off, nbytes in entries:
        arr = np.frombuffer(r.buf, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=off).reshape(dims)
        p = model.params.get(name)
        p.value.data = arr.astype(np.float64, copy=True)
        p.zero_grad()
    return model
