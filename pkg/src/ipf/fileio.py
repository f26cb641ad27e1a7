"""File formats: IPTF tensor containers, proposal/trajectory/answer text files,
and the key-value run config.

IPTF container: one or more records back to back, each record being magic
``IPTF``, u8 rank, u32 little-endian extents, then little-endian float32
values row-major. All text formats are line-oriented, ``#`` starts a
comment, blank lines are skipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import PARAM_NAMES, AlignConfig, AlignParams
from .boxes import ScoredBox
from .errors import InputFormatError
from .scoring import QARecord, CATEGORIES
from .tensor import Tensor

MAGIC = b"IPTF"
_MAX_RANK = 8


def write_tensors(path: str | Path, tensors: list[Tensor]) -> None:
    """Write tensors as consecutive IPTF records (values stored as float32)."""
    with open(path, "wb") as fh:
        for t in tensors:
            data = t.data.astype(np.float32)
            fh.write(MAGIC)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes(order="C"))


def read_tensors(path: str | Path) -> list[Tensor]:
    """Read all IPTF records; validates magic and total length."""
    blob = Path(path).read_bytes()
    tensors: list[Tensor] = []
    offset = 0
    while offset < len(blob):
        if len(blob) - offset < 5:
            raise InputFormatError(f"{path}: truncated record header at byte {offset}")
        if blob[offset : offset + 4] != MAGIC:
            raise InputFormatError(f"{path}: bad magic at byte {offset}")
        rank = blob[offset + 4]
        if rank > _MAX_RANK:
            raise InputFormatError(f"{path}: implausible rank {rank} at byte {offset}")
        offset += 5
        if len(blob) - offset < 4 * rank:
            raise InputFormatError(f"{path}: truncated extents at byte {offset}")
        shape = struct.unpack(f"<{rank}I", blob[offset : offset + 4 * rank])
        offset += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if len(blob) - offset < nbytes:
            raise InputFormatError(f"{path}: truncated data, need {nbytes} bytes at {offset}")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += nbytes
        tensors.append(Tensor(values.reshape(shape), dtype=np.float32))
    return tensors


def save_params(path: str | Path, params: AlignParams) -> None:
    """Checkpoint into an IPTF container plus a ``.manifest`` sidecar naming
    each tensor and its shape, in container order."""
    path = Path(path)
    named = params.named()
    write_tensors(path, [named[n] for n in PARAM_NAMES])
    lines = [" ".join([n] + [str(e) for e in named[n].shape]) for n in PARAM_NAMES]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_params(path: str | Path, config: AlignConfig | None = None) -> AlignParams:
    path = Path(path)
    manifest = Path(str(path) + ".manifest")
    if not manifest.exists():
        raise InputFormatError(f"missing checkpoint manifest {manifest}")
    entries = []
    for lineno, line in _text_records(manifest):
        parts = line.split()
        try:
            entries.append((parts[0], tuple(int(p) for p in parts[1:])))
        except ValueError as exc:
            raise InputFormatError(f"{manifest}:{lineno}: bad manifest entry: {line!r}") from exc
    names = [name for name, _ in entries]
    if names != list(PARAM_NAMES):
        raise InputFormatError(f"{manifest}: expected tensors {PARAM_NAMES}, found {names}")
    tensors = read_tensors(path)
    if len(tensors) != len(entries):
        raise InputFormatError(
            f"{path}: container holds {len(tensors)} tensors, manifest lists {len(entries)}"
        )
    fields = {}
    for (name, shape), t in zip(entries, tensors):
        if t.shape != shape:
            raise InputFormatError(f"{path}: tensor {name} has shape {t.shape}, manifest says {shape}")
        fields[name] = t.astype(np.float64)
    params = AlignParams(**fields)
    if config is not None:
        params.validate(config)
    return params


def _text_records(path: Path):
    """Yield (lineno, stripped line) skipping blanks and # comments."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def read_boxes(path: str | Path) -> list[ScoredBox]:
    """Proposal records: ``frame_index x1 y1 x2 y2 score`` per line, decimal text.

    Frame indices are video-global; the pipeline maps them into slices.
    """
    records: list[ScoredBox] = []
    for lineno, line in _text_records(Path(path)):
        parts = line.replace(",", " ").split()
        if len(parts) != 6:
            raise InputFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            x1, y1, x2, y2, score = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise InputFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from exc
        if frame < 0:
            raise InputFormatError(f"{path}:{lineno}: negative frame index {frame}")
        try:
            records.append(ScoredBox(x1, y1, x2, y2, score, frame=frame))
        except ValueError as exc:
            raise InputFormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_boxes(path: str | Path, records: list[ScoredBox]) -> None:
    with open(path, "w") as fh:
        fh.write("# frame x1 y1 x2 y2 score\n")
        for b in records:
            fh.write(f"{b.frame} {b.x1:.6f} {b.y1:.6f} {b.x2:.6f} {b.y2:.6f} {b.score:.6f}\n")


def read_trajectory(path: str | Path) -> list[tuple[int, frozenset[int]]]:
    """Trajectory log: ``frame_index id id ...`` per line, frames strictly increasing."""
    log: list[tuple[int, frozenset[int]]] = []
    for lineno, line in _text_records(Path(path)):
        parts = line.split()
        try:
            frame = int(parts[0])
            ids = frozenset(int(p) for p in parts[1:])
        except ValueError as exc:
            raise InputFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
        if log and frame <= log[-1][0]:
            raise InputFormatError(
                f"{path}:{lineno}: frame {frame} not greater than previous {log[-1][0]}"
            )
        log.append((frame, ids))
    return log


def read_answers(path: str | Path) -> list[QARecord]:
    """Ground-truth records: ``question_id category option`` per line."""
    records = []
    for lineno, line in _text_records(Path(path)):
        parts = line.split()
        if len(parts) != 3:
            raise InputFormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        qid, category, option = parts
        if category not in CATEGORIES:
            raise InputFormatError(
                f"{path}:{lineno}: unknown category {category!r}, expected one of {sorted(CATEGORIES)}"
            )
        records.append(QARecord(question_id=qid, category=category, correct_option=_option(path, lineno, option)))
    return records


def read_predictions(path: str | Path) -> dict[str, str]:
    """Prediction records: ``question_id option`` per line."""
    preds: dict[str, str] = {}
    for lineno, line in _text_records(Path(path)):
        parts = line.split()
        if len(parts) != 2:
            raise InputFormatError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
        qid, option = parts
        if qid in preds:
            raise InputFormatError(f"{path}:{lineno}: duplicate prediction for {qid!r}")
        preds[qid] = _option(path, lineno, option)
    return preds


def _option(path, lineno, option: str) -> str:
    if option.upper() not in ("A", "B", "C", "D"):
        raise InputFormatError(f"{path}:{lineno}: option must be A-D, got {option!r}")
    return option.upper()


# ---------------------------------------------------------------------------
# Run configuration: ``key = value`` lines.
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "d_model": int,
    "d_out": int,
    "x_repeat": int,
    "v_max": int,
    "heads": int,
    "frames_per_slice": int,
    "patch_tokens": int,
    "nms_threshold": float,
    "top_m": int,
    "sim_threshold": float,
    "precision": str,
}


@dataclass(frozen=True)
class RunConfig:
    """Alignment dimensions plus the box/grouping knobs of one pipeline run."""

    align: AlignConfig
    nms_threshold: float = 0.5
    top_m: int = 9
    sim_threshold: float = 0.9
    precision: str = "f64"

    def __post_init__(self):
        if not 0.0 < self.nms_threshold <= 1.0:
            raise ValueError(f"nms_threshold must lie in (0, 1], got {self.nms_threshold}")
        if not 1 <= self.top_m <= 64:
            raise ValueError(f"top_m must lie in 1..64, got {self.top_m}")
        if not -1.0 <= self.sim_threshold <= 1.0:
            raise ValueError(f"sim_threshold must lie in [-1, 1], got {self.sim_threshold}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")


def parse_config(path: str | Path, d_model: int | None = None) -> RunConfig:
    """Parse the key-value config file; ``d_model`` supplies a default when
    the file does not pin it (e.g. when inferred from the feature file)."""
    values: dict[str, object] = {}
    for lineno, line in _text_records(Path(path)):
        if "=" not in line:
            raise InputFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _CONFIG_KEYS:
            raise InputFormatError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise InputFormatError(f"{path}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](raw)
        except ValueError as exc:
            raise InputFormatError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    return build_config(values, d_model=d_model)


def build_config(values: dict, d_model: int | None = None) -> RunConfig:
    values = dict(values)
    if "d_model" not in values:
        if d_model is None:
            raise InputFormatError("config does not set d_model and none can be inferred")
        values["d_model"] = d_model
    align_kwargs = {
        k: values.pop(k)
        for k in ("d_model", "d_out", "x_repeat", "v_max", "heads", "frames_per_slice", "patch_tokens")
        if k in values
    }
    try:
        return RunConfig(align=AlignConfig(**align_kwargs), **values)
    except ValueError as exc:
        raise InputFormatError(str(exc)) from exc
