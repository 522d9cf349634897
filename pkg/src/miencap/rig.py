"""Character rigs: controller specs, blendshape banks, and mesh composition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

RIG_FILE_VERSION = 1
BANK_FILE_VERSION = 1


def _locked(a, dtype=np.float64) -> np.ndarray:
    """Copy to a read-only float array so dataclass instances stay immutable."""
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Mesh:
    """Flat vertex buffer: 3*V coordinates in model units."""

    vertices: np.ndarray

    def __post_init__(self):
        v = _locked(np.ravel(self.vertices))
        if v.size % 3 != 0:
            raise ValidationError(f"vertex buffer length {v.size} not divisible by 3")
        if not np.all(np.isfinite(v)):
            raise ValidationError("mesh contains non-finite coordinates")
        object.__setattr__(self, "vertices", v)

    @property
    def vertex_count(self) -> int:
        return self.vertices.size // 3


@dataclass(frozen=True)
class BlendshapeBank:
    """Neutral mesh plus named delta meshes (offsets from neutral)."""

    neutral: Mesh
    deltas: tuple  # ordered (name, Mesh) pairs

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple((str(n), m) for n, m in self.deltas))
        names = [n for n, _ in self.deltas]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate delta names in bank")
        for name, mesh in self.deltas:
            if mesh.vertex_count != self.neutral.vertex_count:
                raise DimensionError(
                    f"delta '{name}' has {mesh.vertex_count} vertices, "
                    f"neutral has {self.neutral.vertex_count}"
                )

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.deltas]


@dataclass(frozen=True)
class ControllerSpec:
    """One articulation control: name plus its value range and rest value."""

    name: str
    min: float = 0.0
    max: float = 1.0
    neutral: float = 0.0

    def __post_init__(self):
        if not (self.min <= self.neutral <= self.max):
            raise ValidationError(
                f"controller '{self.name}': need min <= neutral <= max, "
                f"got [{self.min}, {self.neutral}, {self.max}]"
            )


@dataclass(frozen=True)
class CharacterRig:
    """A target character: ordered controller specs and an optional shape bank."""

    id: str
    controllers: tuple
    bank: BlendshapeBank | None = None

    def __post_init__(self):
        object.__setattr__(self, "controllers", tuple(self.controllers))
        if len(self.controllers) < 1:
            raise ValidationError("rig needs at least one controller")
        names = [c.name for c in self.controllers]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate controller names in rig '{self.id}'")

    @property
    def controller_count(self) -> int:
        return len(self.controllers)

    @property
    def mins(self) -> np.ndarray:
        return np.array([c.min for c in self.controllers])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([c.max for c in self.controllers])

    @property
    def neutral_values(self) -> np.ndarray:
        return np.array([c.neutral for c in self.controllers])


@dataclass(frozen=True)
class ControllerFrame:
    """Timestamped controller values in rig order."""

    timestamp: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _locked(self.values))


def compose_blendshapes(bank: BlendshapeBank, weights) -> Mesh:
    """Neutral plus the weighted sum of delta meshes, per coordinate."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != len(bank.deltas):
        raise DimensionError(f"{w.size} weights for {len(bank.deltas)} deltas")
    if not np.all(np.isfinite(w)):
        raise ValidationError("non-finite blendshape weight")
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ValidationError("blendshape weights must lie in [0, 1]")
    out = bank.neutral.vertices.copy()
    for wi, (_, delta) in zip(w, bank.deltas):
        out += wi * delta.vertices
    return Mesh(out)


def clamp_controllers(rig: CharacterRig, raw, timestamp: float) -> ControllerFrame:
    """Clamp raw values into each controller's [min, max] range."""
    v = np.asarray(raw, dtype=np.float64).ravel()
    if v.size != rig.controller_count:
        raise DimensionError(
            f"{v.size} values for rig '{rig.id}' with {rig.controller_count} controllers"
        )
    return ControllerFrame(timestamp, np.clip(v, rig.mins, rig.maxs))


def export_mesh(mesh: Mesh, path) -> None:
    """Write an ASCII vertex list (one `v x y z` line per vertex, LF endings)."""
    pts = mesh.vertices.reshape(-1, 3)
    lines = ["v %.9g %.9g %.9g" % (x, y, z) for x, y, z in pts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii", newline="\n")


def import_mesh(path) -> Mesh:
    """Read a vertex list written by export_mesh."""
    coords = []
    for ln, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] != "v" or len(parts) != 4:
            raise FormatError(f"{path}:{ln}: expected 'v x y z'")
        try:
            coords.extend(float(p) for p in parts[1:])
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: {e}") from e
    return Mesh(np.array(coords))


def save_bank(bank: BlendshapeBank, path) -> None:
    doc = {
        "version": BANK_FILE_VERSION,
        "neutral": bank.neutral.vertices.tolist(),
        "deltas": [{"name": n, "vertices": m.vertices.tolist()} for n, m in bank.deltas],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_bank(path) -> BlendshapeBank:
    doc = _read_json(path)
    if doc.get("version") != BANK_FILE_VERSION:
        raise FormatError(f"{path}: unsupported bank version {doc.get('version')!r}")
    try:
        neutral = Mesh(np.array(doc["neutral"], dtype=np.float64))
        deltas = [(d["name"], Mesh(np.array(d["vertices"], dtype=np.float64)))
                  for d in doc["deltas"]]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed bank file: {e}") from e
    return BlendshapeBank(neutral, tuple(deltas))


def save_rig(rig: CharacterRig, path, bank_path: str | None = None) -> None:
    doc = {
        "version": RIG_FILE_VERSION,
        "id": rig.id,
        "controllers": [
            {"name": c.name, "min": c.min, "max": c.max, "neutral": c.neutral}
            for c in rig.controllers
        ],
    }
    if bank_path is not None:
        doc["bank_path"] = bank_path
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_rig(path) -> CharacterRig:
    """Load a rig document; a relative bank_path resolves against the rig file."""
    path = Path(path)
    doc = _read_json(path)
    if doc.get("version") != RIG_FILE_VERSION:
        raise FormatError(f"{path}: unsupported rig version {doc.get('version')!r}")
    try:
        controllers = tuple(
            ControllerSpec(
                name=c["name"],
                min=float(c.get("min", 0.0)),
                max=float(c.get("max", 1.0)),
                neutral=float(c.get("neutral", 0.0)),
            )
            for c in doc["controllers"]
        )
        rig_id = doc["id"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed rig file: {e}") from e
    bank = None
    if "bank_path" in doc:
        bank = load_bank(path.parent / doc["bank_path"])
    return CharacterRig(id=rig_id, controllers=controllers, bank=bank)


def _read_json(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return doc
