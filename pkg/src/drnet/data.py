"""Synthetic mini matrix-puzzle data: generator, RPMX files, splits.

A problem is a 3x3 matrix of panels whose bottom-right cell is missing, plus
8 candidate answers.  Each panel shows 1-5 copies of one glyph; a panel is
fully described by four ordinal attributes (each on a 5-step scale):

    id 0  shape   triangle, square, pentagon, hexagon, circle
    id 1  size    glyph radius (8/12/16/20/24 px at image size 80, scaled)
    id 2  shade   fill intensity 51/102/153/204/255
    id 3  count   1-5 glyphs (one centered, otherwise a fixed 2x3 anchor grid)

Each attribute is governed row-wise by one rule:

    id 0  constant          all three row values equal
    id 1  progression       value increases by exactly 1 per column
    id 2  distribute_three  each row is a permutation of one fixed 3-value set

A generation spec enables a subset of attributes and rules.  Disabled
attributes are held at a fixed default value everywhere, which makes them
constant rows; every problem therefore records a rule for all four
attributes, and the answer panel is the unique candidate satisfying all of
them.  Distractors perturb 1-2 attribute values of the answer (any
attribute), so every distractor breaks at least one recorded rule.

Generation is a pure function of (spec, sample index): identical bytes on
any machine.  Rendering is crude on purpose — hard-edged polygons, no
anti-aliasing — so models must read attributes, not rendering artifacts.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, BinaryIO, Iterator, Sequence

import numpy as np

from .config import NUM_CANDIDATES, PANELS_PER_PROBLEM
from .errors import ConfigurationError, FormatError, GenerationError

ATTRIBUTES = ("shape", "size", "shade", "count")
RULES = ("constant", "progression", "distribute_three")
NUM_VALUES = 5  # every attribute uses a 5-step ordinal scale

#: Default ordinal for attributes a spec leaves disabled.
DEFAULT_ORDINALS = {"shape": 4, "size": 2, "shade": 4, "count": 0}

BASE_IMAGE_SIZE = 80
BASE_RADII = (8.0, 12.0, 16.0, 20.0, 24.0)
SHADES = (51, 102, 153, 204, 255)

#: Glyph anchor centers as (x, y) fractions of the panel, row-major 2x3 grid.
ANCHORS = (
    (1 / 6, 1 / 3), (1 / 2, 1 / 3), (5 / 6, 1 / 3),
    (1 / 6, 2 / 3), (1 / 2, 2 / 3), (5 / 6, 2 / 3),
)

_SQRT3_2 = 0.8660254037844386
_SQRT2_2 = 0.7071067811865476
_COS18 = 0.9510565162951535
_SIN18 = 0.3090169943749474
_COS54 = 0.5877852522924731
_SIN54 = 0.8090169943749475

#: Unit-radius vertices (x right, y up) for each polygonal shape ordinal.
_UNIT_VERTICES = {
    0: ((0.0, 1.0), (-_SQRT3_2, -0.5), (_SQRT3_2, -0.5)),  # triangle
    1: ((_SQRT2_2, _SQRT2_2), (-_SQRT2_2, _SQRT2_2),
        (-_SQRT2_2, -_SQRT2_2), (_SQRT2_2, -_SQRT2_2)),  # square
    2: ((0.0, 1.0), (-_COS18, _SIN18), (-_COS54, -_SIN54),
        (_COS54, -_SIN54), (_COS18, _SIN18)),  # pentagon
    3: ((1.0, 0.0), (0.5, _SQRT3_2), (-0.5, _SQRT3_2),
        (-1.0, 0.0), (-0.5, -_SQRT3_2), (0.5, -_SQRT3_2)),  # hexagon
}
_CIRCLE_ORDINAL = 4

SPLITS = ("train", "val", "test")

RPMX_MAGIC = b"RPMX"
RPMX_VERSION = 1


# ---------------------------------------------------------------------------
# Spec and problem containers
# ---------------------------------------------------------------------------

@dataclass
class MiniRpmSpec:
    """Everything that determines a generated dataset."""

    n_samples: int
    seed: int = 0
    image_size: int = 80
    attributes: tuple[str, ...] = ATTRIBUTES
    rules: tuple[str, ...] = RULES
    distractor_max_changes: int = 2
    distractor_retries: int = 100

    def __post_init__(self) -> None:
        self.attributes = tuple(self.attributes)
        self.rules = tuple(self.rules)

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be >= 16, got {self.image_size}")
        if not self.attributes:
            raise ConfigurationError("at least one attribute must be enabled")
        if not self.rules:
            raise ConfigurationError("at least one rule must be enabled")
        for name in self.attributes:
            if name not in ATTRIBUTES:
                raise ConfigurationError(
                    f"unknown attribute {name!r}; valid: {', '.join(ATTRIBUTES)}"
                )
        for name in self.rules:
            if name not in RULES:
                raise ConfigurationError(
                    f"unknown rule {name!r}; valid: {', '.join(RULES)}"
                )
        if len(set(self.attributes)) != len(self.attributes):
            raise ConfigurationError("duplicate attribute names")
        if len(set(self.rules)) != len(self.rules):
            raise ConfigurationError("duplicate rule names")
        if not 1 <= self.distractor_max_changes <= len(ATTRIBUTES):
            raise ConfigurationError(
                "distractor_max_changes must lie in "
                f"[1, {len(ATTRIBUTES)}], got {self.distractor_max_changes}"
            )
        if self.distractor_retries < 1:
            raise ConfigurationError("distractor_retries must be >= 1")

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


def spec_from_mapping(mapping: dict[str, Any]) -> MiniRpmSpec:
    known = {f.name for f in fields(MiniRpmSpec)}
    kwargs: dict[str, Any] = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigurationError(
                f"unknown key data.{key}; valid keys: {', '.join(sorted(known))}"
            )
        if key in ("attributes", "rules"):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            kwargs[key] = tuple(value)
        else:
            try:
                kwargs[key] = int(value)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for data.{key}: {value!r}") from exc
    if "n_samples" not in kwargs:
        raise ConfigurationError("data.n_samples is required")
    return MiniRpmSpec(**kwargs)


@dataclass
class RpmProblem:
    """One puzzle: 16 panels (8 context + 8 candidates), answer, rules."""

    panels: np.ndarray  # (16, H, W) uint8
    target: int
    rules: tuple[tuple[int, int], ...]  # (attribute id, rule id), ascending id
    split: str | None = None

    def validate(self) -> None:
        if not isinstance(self.panels, np.ndarray) or self.panels.dtype != np.uint8:
            raise ConfigurationError("panels must be a uint8 array")
        if self.panels.ndim != 3 or self.panels.shape[0] != PANELS_PER_PROBLEM:
            raise ConfigurationError(
                f"panels must have shape (16, H, W), got {self.panels.shape}"
            )
        if not 0 <= self.target < NUM_CANDIDATES:
            raise ConfigurationError(f"target must lie in [0, 8), got {self.target}")
        for attr_id, rule_id in self.rules:
            if not 0 <= attr_id < len(ATTRIBUTES):
                raise ConfigurationError(f"bad attribute id {attr_id}")
            if not 0 <= rule_id < len(RULES):
                raise ConfigurationError(f"bad rule id {rule_id}")
        if self.split is not None and self.split not in SPLITS:
            raise ConfigurationError(f"bad split tag {self.split!r}")


def rule_label(rules: Sequence[tuple[int, int]]) -> str:
    """Canonical text label, e.g. ``shape=constant|size=progression``."""
    parts = [
        f"{ATTRIBUTES[attr_id]}={RULES[rule_id]}"
        for attr_id, rule_id in sorted(rules)
    ]
    return "|".join(parts)


# ---------------------------------------------------------------------------
# Attribute-level generation (no rendering)
# ---------------------------------------------------------------------------

def _rng_for(spec: MiniRpmSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _fill_rows(rule_id: int, rng: np.random.Generator) -> np.ndarray:
    """A (3, 3) value matrix for one attribute under the given rule."""
    rows = np.empty((3, 3), dtype=np.int64)
    if rule_id == 0:  # constant
        for r in range(3):
            rows[r, :] = rng.integers(NUM_VALUES)
    elif rule_id == 1:  # progression: +1 per column
        for r in range(3):
            start = int(rng.integers(NUM_VALUES - 2))
            rows[r] = (start, start + 1, start + 2)
    elif rule_id == 2:  # distribute_three
        values = rng.permutation(NUM_VALUES)[:3]
        for r in range(3):
            rows[r] = values[rng.permutation(3)]
    else:
        raise GenerationError(f"bad rule id {rule_id}")
    return rows


def generate_attributes(
    spec: MiniRpmSpec, index: int
) -> tuple[np.ndarray, np.ndarray, int, tuple[tuple[int, int], ...]]:
    """Attribute stage of generation: matrix, candidates, target, rules.

    Returns (matrix (3, 3, 4) ordinals, candidates (8, 4) ordinals, target,
    rules).  ``candidates[target]`` equals ``matrix[2, 2]``.  Pure function
    of (spec, index).
    """
    spec.validate()
    if not 0 <= index:
        raise GenerationError(f"sample index must be non-negative, got {index}")
    rng = _rng_for(spec, index)
    enabled_rules = sorted(RULES.index(r) for r in spec.rules)
    enabled_attrs = {ATTRIBUTES.index(a) for a in spec.attributes}

    matrix = np.empty((3, 3, len(ATTRIBUTES)), dtype=np.int64)
    rules = []
    for attr_id, attr_name in enumerate(ATTRIBUTES):
        if attr_id in enabled_attrs:
            rule_id = enabled_rules[rng.integers(len(enabled_rules))]
            matrix[:, :, attr_id] = _fill_rows(rule_id, rng)
        else:
            rule_id = 0  # held at its default value -> constant rows
            matrix[:, :, attr_id] = DEFAULT_ORDINALS[attr_name]
        rules.append((attr_id, rule_id))

    answer = matrix[2, 2].copy()
    seen = {tuple(answer)}
    distractors = []
    n_attrs = len(ATTRIBUTES)
    while len(distractors) < NUM_CANDIDATES - 1:
        for _ in range(spec.distractor_retries):
            n_changes = int(rng.integers(1, spec.distractor_max_changes + 1))
            which = rng.choice(n_attrs, size=n_changes, replace=False)
            cand = answer.copy()
            for attr_id in which:
                delta = int(rng.integers(NUM_VALUES - 1))
                cand[attr_id] = delta if delta < answer[attr_id] else delta + 1
            key = tuple(cand)
            if key not in seen:
                seen.add(key)
                distractors.append(cand)
                break
        else:
            raise GenerationError(
                f"could not build 7 distinct distractors for sample index {index} "
                f"within {spec.distractor_retries} retries"
            )

    ordered = [answer] + distractors
    perm = rng.permutation(NUM_CANDIDATES)
    candidates = np.stack([ordered[perm[k]] for k in range(NUM_CANDIDATES)])
    target = int(np.nonzero(perm == 0)[0][0])
    return matrix, candidates, target, tuple(rules)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _glyph_centers(count_ordinal: int, size: int) -> list[tuple[float, float]]:
    n = count_ordinal + 1
    if n == 1:
        return [(size / 2.0, size / 2.0)]
    return [(fx * size, fy * size) for fx, fy in ANCHORS[:n]]


def _polygon_mask(
    px: np.ndarray, py: np.ndarray, verts: list[tuple[float, float]]
) -> np.ndarray:
    """Even-odd (crossing number) rasterization at pixel centers."""
    mask = np.zeros((py.shape[0], px.shape[1]), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        mask ^= straddles & (px < x_cross)
    return mask


def render_panel(attrs: Sequence[int], image_size: int) -> np.ndarray:
    """Rasterize one panel from its 4 attribute ordinals to (H, W) uint8.

    Hard-edged fill at pixel centers; background 0; deterministic: only
    IEEE-754 +,-,*,/ on fixed constants, so results are machine-portable.
    """
    shape_o, size_o, shade_o, count_o = (int(a) for a in attrs)
    for name, o in zip(ATTRIBUTES, (shape_o, size_o, shade_o, count_o)):
        if not 0 <= o < NUM_VALUES:
            raise GenerationError(f"{name} ordinal {o} out of range [0, {NUM_VALUES})")
    radius = BASE_RADII[size_o] * (image_size / BASE_IMAGE_SIZE)
    shade = SHADES[shade_o]
    img = np.zeros((image_size, image_size), dtype=np.uint8)
    px = (np.arange(image_size, dtype=np.float64) + 0.5)[None, :]
    py = (np.arange(image_size, dtype=np.float64) + 0.5)[:, None]
    for cx, cy in _glyph_centers(count_o, image_size):
        if shape_o == _CIRCLE_ORDINAL:
            mask = (px - cx) ** 2 + (py - cy) ** 2 <= radius * radius
        else:
            verts = [
                (cx + radius * ux, cy - radius * uy)
                for ux, uy in _UNIT_VERTICES[shape_o]
            ]
            mask = _polygon_mask(px, py, verts)
        img[mask] = shade
    return img


#: Row-major 3x3 cells excluding the missing bottom-right one.
CONTEXT_CELLS = tuple(
    (r, c) for r in range(3) for c in range(3) if (r, c) != (2, 2)
)


def render_problem(
    matrix: np.ndarray, candidates: np.ndarray, image_size: int
) -> np.ndarray:
    panels = np.zeros((PANELS_PER_PROBLEM, image_size, image_size), dtype=np.uint8)
    for k, (r, c) in enumerate(CONTEXT_CELLS):
        panels[k] = render_panel(matrix[r, c], image_size)
    for j in range(NUM_CANDIDATES):
        panels[8 + j] = render_panel(candidates[j], image_size)
    return panels


def generate_minirpm(spec: MiniRpmSpec, index: int) -> RpmProblem:
    """Generate the fully rendered problem for (spec, index)."""
    matrix, candidates, target, rules = generate_attributes(spec, index)
    panels = render_problem(matrix, candidates, spec.image_size)
    return RpmProblem(panels=panels, target=target, rules=rules)


# ---------------------------------------------------------------------------
# RPMX serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<BBHHBB")  # version, n_panels, H, W, target, n_rules


def write_rpmx(problem: RpmProblem, sink: str | Path | BinaryIO) -> None:
    """Serialize one problem; bit-exact little-endian layout.

    magic "RPMX" | u8 version=1 | u8 n_panels=16 | u16 height | u16 width |
    u8 target | u8 n_rules | n_rules x (u8 attribute_id, u8 rule_id) |
    n_panels*height*width raw bytes, panel-major, row-major within a panel.
    """
    problem.validate()
    h, w = problem.panels.shape[1:]
    blob = bytearray()
    blob += RPMX_MAGIC
    blob += _HEADER.pack(
        RPMX_VERSION, PANELS_PER_PROBLEM, h, w, problem.target, len(problem.rules)
    )
    for attr_id, rule_id in problem.rules:
        blob += struct.pack("<BB", attr_id, rule_id)
    blob += np.ascontiguousarray(problem.panels).tobytes()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(bytes(blob))
    else:
        sink.write(bytes(blob))


def read_rpmx(source: str | Path | BinaryIO) -> RpmProblem:
    """Parse one RPMX blob; FormatError (with byte offset) on damage."""
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    if len(data) < 4 or data[:4] != RPMX_MAGIC:
        raise FormatError(
            f"bad magic at offset 0: expected {RPMX_MAGIC!r}, got {data[:4]!r}"
        )
    if len(data) < 4 + _HEADER.size:
        raise FormatError(f"truncated header at offset {len(data)} (need 10 bytes)")
    version, n_panels, h, w, target, n_rules = _HEADER.unpack_from(data, 4)
    if version != RPMX_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if n_panels != PANELS_PER_PROBLEM:
        raise FormatError(f"bad panel count {n_panels} at offset 5 (expected 16)")
    if target >= NUM_CANDIDATES:
        raise FormatError(f"bad target {target} at offset 8")
    offset = 4 + _HEADER.size
    rules = []
    for _ in range(n_rules):
        if offset + 2 > len(data):
            raise FormatError(f"truncated rule table at offset {offset}")
        attr_id, rule_id = struct.unpack_from("<BB", data, offset)
        if attr_id >= len(ATTRIBUTES) or rule_id >= len(RULES):
            raise FormatError(f"bad rule pair ({attr_id}, {rule_id}) at offset {offset}")
        rules.append((attr_id, rule_id))
        offset += 2
    payload = n_panels * h * w
    if len(data) - offset < payload:
        raise FormatError(
            f"truncated payload at offset {len(data)}: "
            f"expected {payload} panel bytes from offset {offset}"
        )
    if len(data) - offset > payload:
        raise FormatError(f"trailing bytes after offset {offset + payload}")
    panels = np.frombuffer(
        data, dtype=np.uint8, count=payload, offset=offset
    ).reshape(n_panels, h, w).copy()
    return RpmProblem(panels=panels, target=target, rules=tuple(rules))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_panels(panels: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    """Mirror all panels identically; horizontal mirrors x, vertical y."""
    out = panels
    if horizontal:
        out = out[:, :, ::-1]
    if vertical:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment_flip(
    problem: RpmProblem, p: float, rng: np.random.Generator
) -> RpmProblem:
    """With probability p flip horizontally, independently vertically.

    Both flips apply to the whole problem (all 16 panels identically) so
    visual row/column structure stays consistent; target is unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"flip probability must lie in [0, 1], got {p}")
    horizontal = bool(rng.random() < p)
    vertical = bool(rng.random() < p)
    if not (horizontal or vertical):
        return problem
    return RpmProblem(
        panels=flip_panels(problem.panels, horizontal, vertical),
        target=problem.target,
        rules=problem.rules,
        split=problem.split,
    )


# ---------------------------------------------------------------------------
# Datasets and splits
# ---------------------------------------------------------------------------

class MiniRpmDataset:
    """A contiguous index range of generated problems, tagged with a split."""

    def __init__(self, spec: MiniRpmSpec, start: int, stop: int, split: str):
        spec.validate()
        if split not in SPLITS:
            raise ConfigurationError(f"bad split name {split!r}")
        if not 0 <= start <= stop <= spec.n_samples:
            raise ConfigurationError(
                f"bad index range [{start}, {stop}) for {spec.n_samples} samples"
            )
        self.spec = spec
        self.start = start
        self.stop = stop
        self.split = split

    def __len__(self) -> int:
        return self.stop - self.start

    def __getitem__(self, i: int) -> RpmProblem:
        if not 0 <= i < len(self):
            raise IndexError(i)
        problem = generate_minirpm(self.spec, self.start + i)
        problem.split = self.split
        return problem

    def __iter__(self) -> Iterator[RpmProblem]:
        for i in range(len(self)):
            yield self[i]


def make_splits(
    spec: MiniRpmSpec, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
) -> tuple[MiniRpmDataset, MiniRpmDataset, MiniRpmDataset]:
    """Disjoint train/val/test index ranges covering all samples."""
    spec.validate()
    if len(ratios) != 3:
        raise ConfigurationError("ratios must have three entries (train, val, test)")
    if any(r < 0 for r in ratios):
        raise ConfigurationError("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)}")
    n = spec.n_samples
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    n_test = n - n_train - n_val
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    for name, size in sizes.items():
        if size < 1:
            raise ConfigurationError(
                f"split {name!r} would be empty ({n} samples at ratios {ratios})"
            )
    train = MiniRpmDataset(spec, 0, n_train, "train")
    val = MiniRpmDataset(spec, n_train, n_train + n_val, "val")
    test = MiniRpmDataset(spec, n_train + n_val, n, "test")
    return train, val, test


class RpmxFolder:
    """Problems stored as ``<root>/<split>/<index>.rpmx`` files."""

    def __init__(self, root: str | Path, split: str):
        if split not in SPLITS:
            raise ConfigurationError(f"bad split name {split!r}")
        self.root = Path(root)
        self.split = split
        folder = self.root / split
        if not folder.is_dir():
            raise FormatError(f"missing split directory {folder}")
        self.files = sorted(folder.glob("*.rpmx"))
        if not self.files:
            raise FormatError(f"no .rpmx files under {folder}")

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, i: int) -> RpmProblem:
        if not 0 <= i < len(self):
            raise IndexError(i)
        problem = read_rpmx(self.files[i])
        problem.split = self.split
        return problem

    def __iter__(self) -> Iterator[RpmProblem]:
        for i in range(len(self)):
            yield self[i]


class MaterializedDataset:
    """Any problem dataset pre-rendered into memory for fast epochs."""

    def __init__(self, dataset):
        problems = [dataset[i] for i in range(len(dataset))]
        if not problems:
            raise ConfigurationError("cannot materialize an empty dataset")
        self.panels = np.stack([p.panels for p in problems])
        self.targets = np.array([p.target for p in problems], dtype=np.int64)
        self.rules = [p.rules for p in problems]
        self.split = problems[0].split

    def __len__(self) -> int:
        return self.panels.shape[0]

    def __getitem__(self, i: int) -> RpmProblem:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return RpmProblem(
            panels=self.panels[i],
            target=int(self.targets[i]),
            rules=self.rules[i],
            split=self.split,
        )

    def __iter__(self) -> Iterator[RpmProblem]:
        for i in range(len(self)):
            yield self[i]


# ---------------------------------------------------------------------------
# Batch assembly and dataset export
# ---------------------------------------------------------------------------

def problems_to_tensors(problems: Sequence[RpmProblem]):
    """Stack problems into model inputs: (B, 16, 1, H, W) in [0, 1] + targets."""
    import torch

    panels = np.stack([p.panels for p in problems]).astype(np.float32) / 255.0
    targets = np.array([p.target for p in problems], dtype=np.int64)
    return (
        torch.from_numpy(panels).unsqueeze(2),
        torch.from_numpy(targets),
    )


def write_dataset(
    spec: MiniRpmSpec,
    out_dir: str | Path,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> dict[str, Any]:
    """Write all splits as an RPMX tree plus spec.cfg and manifest.json.

    Returns the manifest mapping (split sizes and a content hash that is
    identical across reruns with the same spec).
    """
    from .config import config_to_text

    out = Path(out_dir)
    splits = make_splits(spec, ratios)
    digest = hashlib.sha256()
    counts = {}
    for dataset in splits:
        folder = out / dataset.split
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(len(dataset)):
            problem = dataset[i]
            buf = io.BytesIO()
            write_rpmx(problem, buf)
            payload = buf.getvalue()
            (folder / f"{dataset.start + i:05d}.rpmx").write_bytes(payload)
            digest.update(f"{dataset.split}/{dataset.start + i:05d}".encode())
            digest.update(payload)
        counts[dataset.split] = len(dataset)
    manifest = {
        "format": "rpmx-tree-v1",
        "splits": counts,
        "sha256": digest.hexdigest(),
    }
    (out / "spec.cfg").write_text(config_to_text({"data": spec.to_mapping()}))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
