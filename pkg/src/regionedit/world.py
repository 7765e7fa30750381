"""Synthetic scenes: sampling, rasterization, oracle edits and corpus files.

A scene is up to three flat shapes on a 4x4 placement grid of a 64x64
canvas. Each grid cell spans 2x2 encoder patches, so object footprints
line up with the patch grid used by the region predictor.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio
from .errors import FormatError, InfeasibleEditError
from .language import (
    ACCESSORIES,
    COLORS,
    GRID,
    MAX_OBJECTS,
    SHAPES,
    SIZES,
    Instruction,
    describe,
    propose_instruction,
)

GENERATOR_VERSION = "shapes-v1"
CANVAS = 64
CELL = CANVAS // GRID

# 8-bit values so pixels survive a PPM round trip bit-exactly.
PALETTE_8BIT = {
    "red": (217, 26, 26),
    "green": (26, 166, 51),
    "blue": (38, 64, 217),
    "yellow": (242, 217, 26),
    "purple": (140, 51, 179),
    "orange": (242, 128, 13),
    "cyan": (26, 204, 217),
    "pink": (242, 128, 179),
}
BACKGROUND_8BIT = (230, 230, 230)
CROWN_8BIT = (26, 26, 26)
COLLAR_8BIT = (255, 255, 255)
SIZE_PX = {"small": 6, "medium": 10, "large": 14}


def _rgb(c8) -> np.ndarray:
    return np.asarray(c8, dtype=np.float64) / 255.0


BACKGROUND = _rgb(BACKGROUND_8BIT)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cell: tuple
    accessory: str = "none"

    def serialize(self) -> str:
        r, c = self.cell
        return f"shape={self.shape};color={self.color};size={self.size};cell={r},{c};acc={self.accessory}"

    @classmethod
    def parse(cls, text: str) -> SceneObject:
        try:
            kv = dict(item.split("=", 1) for item in text.split(";"))
            r, c = (int(v) for v in kv["cell"].split(","))
            obj = cls(kv["shape"], kv["color"], kv["size"], (r, c), kv["acc"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad object record {text!r}: {exc}") from None
        obj.validate()
        return obj

    def validate(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise FormatError(f"unknown attribute in {self}")
        if self.accessory not in ("none",) + ACCESSORIES:
            raise FormatError(f"unknown accessory {self.accessory!r}")
        if not all(0 <= v < GRID for v in self.cell):
            raise FormatError(f"cell {self.cell} outside the {GRID}x{GRID} grid")


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple = ()
    canvas: int = CANVAS

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def validate(self, allow_empty: bool = True):
        n = len(self.objects)
        if n > MAX_OBJECTS or (n == 0 and not allow_empty):
            raise FormatError(f"scene has {n} objects")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != n:
            raise FormatError("two objects share a grid cell")
        keys = [(o.color, o.shape) for o in self.objects]
        if len(set(keys)) != n:
            raise FormatError("two objects share color and shape")
        for o in self.objects:
            o.validate()

    def free_cells(self) -> list:
        used = {o.cell for o in self.objects}
        return [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in used]

    def serialize(self) -> str:
        return "|".join(o.serialize() for o in self.objects) if self.objects else "empty"

    @classmethod
    def parse(cls, text: str) -> SceneGraph:
        text = text.strip()
        if text == "empty":
            return cls(())
        scene = cls(tuple(SceneObject.parse(t) for t in text.split("|")))
        scene.validate()
        return scene


@dataclass
class ImageSample:
    id: int
    scene: SceneGraph
    pixels: np.ndarray = field(repr=False)


@dataclass
class OracleEdit:
    """Ground-truth edit used only for evaluation."""

    instruction: Instruction
    source: SceneGraph
    edited: SceneGraph
    mask: np.ndarray = field(repr=False)
    pixels: np.ndarray = field(repr=False)

    @property
    def text(self) -> str:
        return self.instruction.text


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:CANVAS, 0:CANVAS] + 0.5


def footprint(obj: SceneObject) -> np.ndarray:
    """Boolean (64, 64) mask of the object's body (accessory excluded)."""
    r, c = obj.cell
    cy, cx = r * CELL + CELL / 2, c * CELL + CELL / 2
    h = SIZE_PX[obj.size] / 2
    dy, dx = _YY - cy, _XX - cx
    if obj.shape == "circle":
        return dy * dy + dx * dx <= h * h
    if obj.shape == "square":
        return (np.abs(dy) <= h) & (np.abs(dx) <= h)
    # upward triangle: half-width grows from 0 at the apex to h at the base
    return (dy >= -h) & (dy <= h) & (np.abs(dx) <= (dy + h) / 2)


def _accessory_mask(obj: SceneObject) -> np.ndarray:
    r, c = obj.cell
    cy, cx = r * CELL + CELL / 2, c * CELL + CELL / 2
    h = SIZE_PX[obj.size] / 2
    dy, dx = _YY - cy, _XX - cx
    inside_box = (np.abs(dx) <= h) & (dy >= -h) & (dy <= h)
    if obj.accessory == "crown":
        # sawtooth band across the top quarter of the bounding box
        depth = max(2.0, h / 2)
        teeth = np.abs(((dx + h) % 3.0) - 1.5) / 1.5 * depth
        return inside_box & (dy <= -h + depth) & (dy + h >= teeth)
    if obj.accessory == "collar":
        band = (dy >= h / 3) & (dy <= h / 3 + 2)
        return footprint(obj) & band
    return np.zeros((CANVAS, CANVAS), dtype=bool)


def rasterize(scene: SceneGraph) -> np.ndarray:
    """Hard-edged (H, W, 3) rendering on a light gray background."""
    img = np.empty((scene.canvas, scene.canvas, 3))
    img[:] = BACKGROUND
    for obj in scene.objects:
        img[footprint(obj)] = _rgb(PALETTE_8BIT[obj.color])
        if obj.accessory != "none":
            img[_accessory_mask(obj)] = _rgb(CROWN_8BIT if obj.accessory == "crown" else COLLAR_8BIT)
    return img


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


def hash64(*parts) -> int:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def sample_scene(rng: np.random.Generator) -> SceneGraph:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = sorted(rng.choice(GRID * GRID, size=n, replace=False))
    objs, taken = [], set()
    for cell in cells:
        while True:
            shape = SHAPES[rng.integers(len(SHAPES))]
            color = COLORS[rng.integers(len(COLORS))]
            if (color, shape) not in taken:
                break
        taken.add((color, shape))
        size = SIZES[rng.integers(len(SIZES))]
        acc = ("none",) + ACCESSORIES
        objs.append(SceneObject(shape, color, size, divmod(int(cell), GRID), acc[rng.integers(3)]))
    return SceneGraph(tuple(objs))


def scene_for_id(sample_id: int, version: str = GENERATOR_VERSION) -> SceneGraph:
    return sample_scene(np.random.default_rng(hash64(version, sample_id)))


def generate_corpus(count: int, seed: int, version: str = GENERATOR_VERSION) -> list[ImageSample]:
    """Deterministic list of ``count`` samples with distinct 64-bit ids."""
    if count < 1:
        raise ValueError("count must be positive")
    out, seen = [], set()
    for i in range(count):
        k = 0
        sid = hash64(version, seed, i)
        while sid in seen:
            k += 1
            sid = hash64(version, seed, i, k)
        seen.add(sid)
        scene = scene_for_id(sid, version)
        out.append(ImageSample(sid, scene, rasterize(scene)))
    return out


# ---------------------------------------------------------------------------
# edits
# ---------------------------------------------------------------------------


def apply_edit(scene: SceneGraph, ins: Instruction, rng: np.random.Generator | None = None) -> SceneGraph:
    """Scene-level counterpart of :func:`regionedit.language.apply_instruction`.

    An added object goes to a random free cell and is appended to the
    object list, so captions keep listing it last.
    """
    objs = list(scene.objects)
    if ins.op == "add":
        free = scene.free_cells()
        if not free or len(objs) >= MAX_OBJECTS:
            raise InfeasibleEditError("no room to add an object")
        if any((o.color, o.shape) == (ins.color, ins.shape) for o in objs):
            raise InfeasibleEditError(f"a {ins.color} {ins.shape} is already present")
        rng = rng if rng is not None else np.random.default_rng(0)
        cell = free[int(rng.integers(len(free)))]
        objs.append(SceneObject(ins.shape, ins.color, ins.size, cell, ins.accessory))
        return SceneGraph(tuple(objs), scene.canvas)
    idx = [i for i, o in enumerate(objs) if (o.color, o.shape) == (ins.color, ins.shape)]
    if not idx:
        raise InfeasibleEditError(f"no {ins.color} {ins.shape} in the scene")
    i = idx[0]
    if ins.op == "remove":
        del objs[i]
    elif ins.op == "change":
        if ins.new_color == ins.color or any(
            (o.color, o.shape) == (ins.new_color, ins.shape) for o in objs
        ):
            raise InfeasibleEditError(f"cannot recolor to {ins.new_color}")
        objs[i] = replace(objs[i], color=ins.new_color)
    else:
        if objs[i].accessory == ins.accessory:
            raise InfeasibleEditError(f"object already has a {ins.accessory}")
        objs[i] = replace(objs[i], accessory=ins.accessory)
    return SceneGraph(tuple(objs), scene.canvas)


_DILATE = np.ones((3, 3), dtype=bool)


def edit_mask(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Pixels that differ in any channel, dilated by one pixel (8-neighbourhood)."""
    diff = np.any(before != after, axis=-1)
    return ndimage.binary_dilation(diff, structure=_DILATE)


def oracle_edit(sample: ImageSample, ins: Instruction, seed: int = 0) -> OracleEdit:
    edited = apply_edit(sample.scene, ins, np.random.default_rng(hash64("place", sample.id, seed)))
    pixels = rasterize(edited)
    return OracleEdit(ins, sample.scene, edited, edit_mask(sample.pixels, pixels), pixels)


def make_oracle_edit(sample: ImageSample, op_kind: str, seed: int = 0) -> OracleEdit:
    """Sample a feasible instruction of kind ``op_kind`` and apply it."""
    ins = propose_instruction(describe(sample.scene), sample.scene, seed, op_kind=op_kind)
    return oracle_edit(sample, ins, seed)


def object_masks(scene: SceneGraph) -> list[np.ndarray]:
    """Per-object pixel masks (body plus accessory)."""
    out = []
    for o in scene.objects:
        m = footprint(o)
        if o.accessory != "none":
            m = m | _accessory_mask(o)
        out.append(m)
    return out


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def write_corpus(directory, samples: Sequence[ImageSample]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        lines.append(f"{s.id} {s.scene.serialize()}")
        imageio.write_ppm(d / f"{s.id}.ppm", s.pixels)
    (d / "corpus.idx").write_text("\n".join(lines) + "\n")


def read_index(directory) -> list[tuple[int, SceneGraph]]:
    path = Path(directory) / "corpus.idx"
    if not path.exists():
        raise FormatError(f"missing corpus index {path}")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            sid, ser = line.split(" ", 1)
            out.append((int(sid), SceneGraph.parse(ser)))
        except ValueError:
            raise FormatError(f"{path}:{n}: malformed line") from None
    return out


def read_corpus(directory) -> list[ImageSample]:
    d = Path(directory)
    return [ImageSample(sid, scene, imageio.read_ppm(d / f"{sid}.ppm")) for sid, scene in read_index(d)]


def write_edits(directory, samples: Iterable[ImageSample], edits: Iterable[OracleEdit]) -> None:
    """Eval-split oracle edits: ``edits.idx`` plus mask PBM and edited PPM per sample."""
    d = Path(directory)
    lines = []
    for s, e in zip(samples, edits):
        lines.append(f"{s.id}\t{e.text}\t{e.edited.serialize()}")
        imageio.write_pbm(d / f"{s.id}.mask.pbm", e.mask)
        imageio.write_ppm(d / f"{s.id}.edited.ppm", e.pixels)
    (d / "edits.idx").write_text("\n".join(lines) + "\n")


def read_edits(directory) -> dict[int, OracleEdit]:
    from .language import parse_instruction

    d = Path(directory)
    path = d / "edits.idx"
    if not path.exists():
        raise FormatError(f"missing oracle edits {path}")
    scenes = dict(read_index(d))
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        sid, text, ser = line.split("\t")
        sid = int(sid)
        out[sid] = OracleEdit(
            parse_instruction(text), scenes[sid], SceneGraph.parse(ser),
            imageio.read_pbm(d / f"{sid}.mask.pbm"), imageio.read_ppm(d / f"{sid}.edited.ppm"),
        )
    return out


# ---------------------------------------------------------------------------
# scene recovery from pixels (the captioner's "vision")
# ---------------------------------------------------------------------------


def _cell_templates():
    out = []
    for shape in SHAPES:
        for color in COLORS:
            for size in SIZES:
                for acc in ("none",) + ACCESSORIES:
                    obj = SceneObject(shape, color, size, (0, 0), acc)
                    img = rasterize(SceneGraph((obj,)))[:CELL, :CELL]
                    out.append((obj, img))
    return out


_TEMPLATES = None


def recover_scene(pixels: np.ndarray) -> SceneGraph:
    """Best-matching scene for an image, cell by cell.

    Exact for rasterized scenes; for generated images each cell takes the
    nearest template unless plain background is nearer.
    """
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = _cell_templates()
    stack = np.stack([t for _, t in _TEMPLATES])
    empty = np.broadcast_to(BACKGROUND, (CELL, CELL, 3))
    objs, taken = [], set()
    candidates = []
    for r in range(GRID):
        for c in range(GRID):
            patch = pixels[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
            bg_err = float(np.mean((patch - empty) ** 2))
            errs = np.mean((stack - patch) ** 2, axis=(1, 2, 3))
            order = np.argsort(errs, kind="stable")
            if bg_err <= errs[order[0]]:
                continue
            candidates.append((float(errs[order[0]]), (r, c), order))
    # the clearest cells claim their (color, shape) first
    for _, cell, order in sorted(candidates, key=lambda t: t[0])[:MAX_OBJECTS]:
        for j in order:
            obj = _TEMPLATES[j][0]
            if (obj.color, obj.shape) not in taken:
                taken.add((obj.color, obj.shape))
                objs.append(replace(obj, cell=cell))
                break
    objs.sort(key=lambda o: o.cell)
    return SceneGraph(tuple(objs))
