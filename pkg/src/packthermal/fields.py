"""Grids, scalar fields, layouts, pack constants and their on-disk formats.

Field files use the little-endian ``TFLD`` container::

    b"TFLD" | u32 version (=1) | u32 rows | u32 cols | rows*cols f64, row-major

Layouts are JSON documents with lengths in millimetres; manifests are JSON
lists of case entries whose paths are resolved relative to the manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TFLD_MAGIC = b"TFLD"
TFLD_VERSION = 1
_TFLD_HEADER = struct.Struct("<4sIII")

# 3D source terms and cell height the 2D areal constants are derived from.
VOLUMETRIC_HEAT_RATE = 176405.0  # W/m^3, battery cells
COOLANT_VOLUMETRIC_COEFF = 42857.14  # W/(m^3 K), thermal grease sink
CELL_HEIGHT_M = 0.070

DEFAULT_PACK_MM = 84.0
SPLITS = ("pretrain", "labeled", "val", "test")


class FieldError(ValueError):
    """Invalid field contents (non-finite values, wrong shape)."""


class FieldFormatError(ValueError):
    """Base class for TFLD decoding problems."""


class BadMagicError(FieldFormatError):
    pass


class UnsupportedVersionError(FieldFormatError):
    pass


class DimensionMismatchError(FieldFormatError):
    pass


class TruncatedFileError(FieldFormatError):
    pass


class LayoutError(ValueError):
    """Malformed layout document."""


class LayoutConstraintError(LayoutError):
    """A layout violates a clearance constraint; ``constraint`` names it."""

    def __init__(self, constraint: str, message: str):
        super().__init__(f"{constraint}: {message}")
        self.constraint = constraint


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Uniform square-pixel grid over an ``a x b`` (metres) rectangle.

    ``rows`` run along y, ``cols`` along x, and pixel ``(i, j)`` is centred at
    ``((j + 0.5) h, (i + 0.5) h)``.
    """

    rows: int
    cols: int
    width: float
    height: float

    def __post_init__(self):
        if self.rows < 3 or self.cols < 3:
            raise ValueError(f"grid needs at least 3x3 nodes, got {self.rows}x{self.cols}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("grid extents must be positive")
        hx = self.width / self.cols
        hy = self.height / self.rows
        if abs(hx - hy) > 1e-12 * max(hx, hy):
            raise ValueError(f"non-square pixels: a/n={hx!r} vs b/m={hy!r}")

    @property
    def h(self) -> float:
        return self.width / self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @classmethod
    def square(cls, n: int, side: float = DEFAULT_PACK_MM * 1e-3) -> "GridSpec":
        return cls(n, n, side, side)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` coordinate arrays of shape ``(rows, cols)`` in metres."""
        h = self.h
        x = (np.arange(self.cols) + 0.5) * h
        y = (np.arange(self.rows) + 0.5) * h
        return np.meshgrid(x, y)


@dataclass(frozen=True, eq=False)
class ScalarField:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != self.spec.shape:
            raise FieldError(f"values shape {v.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise FieldError("field contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class PackConfig:
    """Areal source/sink and conductivity constants of the 2D pack model."""

    phi_b: float = 12348.35  # W/m^2
    k: float = 3000.0  # W/(m^2 K)
    lambda_b: float = 0.89724  # W/(m K)
    lambda_c: float = 3.0  # W/(m K)
    t0: float = 25.0  # degC

    def __post_init__(self):
        for name in ("phi_b", "k", "lambda_b", "lambda_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_b == self.lambda_c:
            raise ValueError("battery and coolant conductivities must differ")

    @classmethod
    def from_volumetric(cls, q_cell: float = VOLUMETRIC_HEAT_RATE,
                        q_coolant: float = COOLANT_VOLUMETRIC_COEFF,
                        height: float = CELL_HEIGHT_M, **kw) -> "PackConfig":
        """Collapse 3D volumetric rates onto the plane by multiplying by cell height."""
        return cls(phi_b=q_cell * height, k=q_coolant * height, **kw)


@dataclass(frozen=True)
class Layout:
    """Circular cell centres inside a rectangular pack (all lengths in mm)."""

    domain_mm: tuple[float, float] = (DEFAULT_PACK_MM, DEFAULT_PACK_MM)
    diameter_mm: float = 21.0
    gap_cell_mm: float = 2.0
    gap_wall_mm: float = 2.0
    centers_mm: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "domain_mm", tuple(float(v) for v in self.domain_mm))
        object.__setattr__(self, "centers_mm",
                           tuple((float(x), float(y)) for x, y in self.centers_mm))

    @property
    def n_cells(self) -> int:
        return len(self.centers_mm)

    def validate(self, tol: float = 1e-9) -> None:
        """Raise :class:`LayoutConstraintError` on the first violated clearance."""
        w, hgt = self.domain_mm
        r = self.diameter_mm / 2
        if self.diameter_mm <= 0 or w <= 0 or hgt <= 0:
            raise LayoutConstraintError("geometry", "diameter and domain must be positive")
        if self.gap_cell_mm < 0 or self.gap_wall_mm < 0:
            raise LayoutConstraintError("geometry", "gaps must be non-negative")
        wall = r + self.gap_wall_mm
        for idx, (x, y) in enumerate(self.centers_mm):
            if min(x, w - x, y, hgt - y) < wall - tol:
                raise LayoutConstraintError(
                    "cell-wall clearance",
                    f"cell {idx} at ({x:g}, {y:g}) is closer than {wall:g} mm to a wall")
        pitch = self.diameter_mm + self.gap_cell_mm
        c = np.asarray(self.centers_mm, dtype=float).reshape(-1, 2)
        for i in range(len(c)):
            d = np.hypot(*(c[i + 1:] - c[i]).T)
            bad = np.flatnonzero(d < pitch - tol)
            if bad.size:
                j = i + 1 + int(bad[0])
                raise LayoutConstraintError(
                    "cell-cell clearance",
                    f"cells {i} and {j} are {d[bad[0]]:.4g} mm apart, need >= {pitch:g} mm")

    def to_dict(self) -> dict:
        return {
            "domain_mm": list(self.domain_mm),
            "diameter_mm": self.diameter_mm,
            "gap_cell_mm": self.gap_cell_mm,
            "gap_wall_mm": self.gap_wall_mm,
            "centers_mm": [list(c) for c in self.centers_mm],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Layout":
        try:
            lay = cls(domain_mm=tuple(doc["domain_mm"]),
                      diameter_mm=float(doc["diameter_mm"]),
                      gap_cell_mm=float(doc["gap_cell_mm"]),
                      gap_wall_mm=float(doc["gap_wall_mm"]),
                      centers_mm=tuple(tuple(c) for c in doc["centers_mm"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"malformed layout document: {exc}") from exc
        if len(lay.domain_mm) != 2:
            raise LayoutError("domain_mm must have two entries")
        return lay


def write_field(field: ScalarField, path) -> None:
    if not isinstance(field, ScalarField):
        raise TypeError("write_field expects a ScalarField")
    values = np.ascontiguousarray(field.values, dtype="<f8")
    if not np.all(np.isfinite(values)):
        raise FieldError("refusing to write non-finite field")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(_TFLD_HEADER.pack(TFLD_MAGIC, TFLD_VERSION, rows, cols))
        fh.write(values.tobytes())


def read_field(path, grid: GridSpec | None = None) -> ScalarField:
    """Load a TFLD file.

    The container stores no physical extent; ``grid`` supplies it. Without a
    grid the pixel size defaults to the 84 mm pack width over ``cols``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _TFLD_HEADER.size:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header needs {_TFLD_HEADER.size}")
    magic, version, rows, cols = _TFLD_HEADER.unpack_from(raw)
    if magic != TFLD_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != TFLD_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    need = _TFLD_HEADER.size + 8 * rows * cols
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise DimensionMismatchError(
            f"{path}: payload of {len(raw) - _TFLD_HEADER.size} bytes does not match "
            f"header {rows}x{cols}")
    if grid is None:
        h = DEFAULT_PACK_MM * 1e-3 / cols
        grid = GridSpec(rows, cols, cols * h, rows * h)
    elif grid.shape != (rows, cols):
        raise DimensionMismatchError(f"{path}: file is {rows}x{cols}, grid is {grid.shape}")
    values = np.frombuffer(raw, dtype="<f8", offset=_TFLD_HEADER.size).reshape(rows, cols)
    return ScalarField(grid, values)


def write_layout(layout: Layout, path) -> None:
    Path(path).write_text(json.dumps(layout.to_dict()))


def read_layout(path) -> Layout:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LayoutError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise LayoutError(f"{path}: layout document must be an object")
    layout = Layout.from_dict(doc)
    layout.validate()
    return layout


def field_stats(field: ScalarField) -> dict:
    v = field.values
    return {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}


@dataclass
class CaseEntry:
    case_id: str
    layout: str
    conductivity: str
    split: str
    temperature: str | None = None
    solver: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"case {self.case_id}: unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    """Case list plus the directory relative paths are resolved against."""

    cases: list[CaseEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for c in self.cases:
            if c.case_id in seen:
                raise ManifestError(f"duplicate case id {c.case_id!r}")
            seen.add(c.case_id)

    def split(self, *tags: str) -> list[CaseEntry]:
        return [c for c in self.cases if c.split in tags]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def check_paths(self) -> None:
        for c in self.cases:
            for rel in (c.layout, c.conductivity, c.temperature):
                if rel is not None and not self.resolve(rel).is_file():
                    raise ManifestError(f"case {c.case_id}: missing file {rel}")

    def save(self, path) -> None:
        path = Path(path)
        rows = []
        for c in self.cases:
            row = {"case_id": c.case_id, "layout": c.layout,
                   "conductivity": c.conductivity, "split": c.split}
            if c.temperature is not None:
                row["temperature"] = c.temperature
                row["solver"] = c.solver
            rows.append(row)
        path.write_text(json.dumps(rows, indent=1) + "\n")


def load_manifest(path, check: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(rows, list):
        raise ManifestError(f"{path}: manifest must be a JSON list")
    try:
        cases = [CaseEntry(**row) for row in rows]
    except TypeError as exc:
        raise ManifestError(f"{path}: bad case entry: {exc}") from exc
    man = DatasetManifest(cases, path.parent)
    if check:
        man.check_paths()
    return man

