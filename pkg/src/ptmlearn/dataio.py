"""Datasets, synthetic generation, and model/result serialization.

Raster input is binary PGM only; datasets are described by a JSON manifest
that either references PGM files or carries pixel values inline.  Model
files are canonical JSON (sorted keys, two-space indent, trailing newline)
with floats written in shortest round-trip form, so saving a loaded model
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dictionary import AtomParams, Pattern, make_mother
from .geometry import ParamDomain, TransformModel, TransformParams
from .jpats import ClassModel
from .manifold import Image, Projection, SamplingGrid, render_values

SCHEMA_VERSION = 1
PLANTED_COEF_RANGE = (0.5, 1.5)


class PgmParseError(ValueError):
    """Raised for malformed PGM input; the message carries a byte offset."""


class ModelFormatError(ValueError):
    """Raised when a model or manifest file violates the expected schema."""


# ---------------------------------------------------------------------------
# PGM


def load_pgm(path) -> Image:
    """Read a binary (P5) PGM file into an image with values in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise PgmParseError(f"unsupported magic {data[:2]!r} at byte 0 (binary PGM 'P5' required)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise PgmParseError(f"malformed header token {token!r} at byte {start}")
        fields.append(int(token))
    cols, rows, maxval = fields
    if cols < 1 or rows < 1:
        raise PgmParseError(f"bad dimensions {cols}x{rows} in header ending at byte {pos}")
    if not 0 < maxval <= 65535:
        raise PgmParseError(f"unsupported maxval {maxval} in header ending at byte {pos}")
    pos += 1  # single whitespace byte separates header from payload
    sample_bytes = 1 if maxval < 256 else 2
    expected = rows * cols * sample_bytes
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise PgmParseError(
            f"truncated payload at byte {pos + len(payload)}: expected {expected} bytes, got {len(payload)}"
        )
    dtype = ">u2" if sample_bytes == 2 else np.uint8
    raw = np.frombuffer(payload, dtype=dtype).astype(float)
    grid = SamplingGrid(x0=0.0, y0=0.0, width=float(cols), height=float(rows), rows=rows, cols=cols)
    return Image(grid, raw / maxval)


def save_pgm(path, image: Image, maxval: int = 255) -> None:
    """Write image values, clipped to [0, 1], as a binary PGM file."""
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    g = image.grid
    quant = np.round(np.clip(image.values, 0.0, 1.0) * maxval).astype(int)
    header = f"P5\n{g.cols} {g.rows}\n{maxval}\n".encode("ascii")
    if maxval < 256:
        payload = quant.astype(np.uint8).tobytes()
    else:
        payload = quant.astype(">u2").tobytes()
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str | None = None
    values: tuple | None = None
    label: int | None = None

    def __post_init__(self):
        if (self.path is None) == (self.values is None):
            raise ValueError("entry needs exactly one of path or inline values")


@dataclass(eq=False)
class DatasetManifest:
    grid: SamplingGrid
    entries: tuple
    normalized: bool = False

    def __post_init__(self):
        self.entries = tuple(self.entries)
        labels = [e.label for e in self.entries]
        with_label = [l for l in labels if l is not None]
        if with_label and len(with_label) != len(labels):
            raise ValueError("either all entries carry labels or none do")
        if with_label and set(with_label) != set(range(max(with_label) + 1)):
            raise ValueError("labels must be contiguous 0..M-1")

    @property
    def labels(self):
        if not self.entries or self.entries[0].label is None:
            return None
        return np.array([e.label for e in self.entries], dtype=int)


def load_dataset(manifest: DatasetManifest, base_dir="."):
    """Images (and labels or None) described by a manifest."""
    base = Path(base_dir)
    images = []
    for e in manifest.entries:
        if e.values is not None:
            images.append(Image(manifest.grid, np.array(e.values, dtype=float)))
            continue
        img = load_pgm(base / e.path)
        if (img.grid.rows, img.grid.cols) != (manifest.grid.rows, manifest.grid.cols):
            raise ModelFormatError(
                f"{e.path}: raster is {img.grid.rows}x{img.grid.cols}, "
                f"manifest grid wants {manifest.grid.rows}x{manifest.grid.cols}"
            )
        images.append(Image(manifest.grid, img.values))
    return images, manifest.labels


def _grid_doc(grid: SamplingGrid) -> dict:
    return {
        "x0": float(grid.x0),
        "y0": float(grid.y0),
        "width": float(grid.width),
        "height": float(grid.height),
        "rows": int(grid.rows),
        "cols": int(grid.cols),
    }


def _grid_from_doc(doc) -> SamplingGrid:
    return SamplingGrid(
        x0=doc["x0"], y0=doc["y0"], width=doc["width"], height=doc["height"], rows=doc["rows"], cols=doc["cols"]
    )


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    entries = []
    for e in manifest.entries:
        doc = {}
        if e.path is not None:
            doc["path"] = e.path
        else:
            doc["values"] = [float(v) for v in e.values]
        if e.label is not None:
            doc["label"] = int(e.label)
        entries.append(doc)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "dataset",
        "grid": _grid_doc(manifest.grid),
        "normalized": bool(manifest.normalized),
        "entries": entries,
    }
    Path(path).write_text(_canonical_json(doc), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    doc = _load_json(path)
    _check_schema(doc, "dataset")
    try:
        entries = tuple(
            ManifestEntry(
                path=e.get("path"),
                values=tuple(e["values"]) if "values" in e else None,
                label=e.get("label"),
            )
            for e in doc["entries"]
        )
        return DatasetManifest(grid=_grid_from_doc(doc["grid"]), entries=entries, normalized=doc["normalized"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc


def _check_schema(doc, kind):
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ModelFormatError("missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ModelFormatError(f"schema_version {doc['schema_version']} not supported (expected {SCHEMA_VERSION})")
    if doc.get("kind") != kind:
        raise ModelFormatError(f"expected a {kind} file, found kind={doc.get('kind')!r}")


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for planted-manifold datasets; the seed is mandatory."""

    grid: SamplingGrid
    model: TransformModel
    lambda_domain: ParamDomain
    gamma_domain: ParamDomain
    atoms_per_class: tuple
    images_per_class: int
    noise_variance: float = 0.0
    seed: int = 0
    mother_kind: str = "gaussian"
    mu: float = -3.0
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "atoms_per_class", tuple(int(k) for k in self.atoms_per_class))
        if not self.atoms_per_class or any(k < 1 for k in self.atoms_per_class):
            raise ValueError("each class needs at least one planted atom")
        if self.images_per_class < 1:
            raise ValueError("need at least one image per class")
        if self.noise_variance < 0.0:
            raise ValueError("noise variance must be nonnegative")


@dataclass(eq=False)
class SynthResult:
    class_images: tuple     # per class: tuple of Image
    manifest: DatasetManifest
    patterns: tuple         # planted pattern per class
    lambdas: tuple          # per class: tuple of TransformParams
    snr_db: float | None


def generate_synthetic(spec: SynthSpec) -> SynthResult:
    """Render planted random patterns under random transformations.

    Atom parameters are drawn uniformly from the atom box, coefficients
    uniformly from [0.5, 1.5], transformations uniformly from the
    transformation box; Gaussian pixel noise of the requested variance is
    added after rendering.  All draws come from one seeded generator.
    """
    rng = np.random.default_rng(spec.seed)
    mother = make_mother(spec.mother_kind, spec.mu)
    sigma = math.sqrt(spec.noise_variance)
    patterns = []
    lambdas = []
    images = []
    signal_power = 0.0
    for k_atoms in spec.atoms_per_class:
        gammas = spec.gamma_domain.sample(rng, k_atoms)
        coefs = rng.uniform(PLANTED_COEF_RANGE[0], PLANTED_COEF_RANGE[1], size=k_atoms)
        pattern = Pattern(mother)
        for gv, c in zip(gammas, coefs):
            pattern = pattern.with_atom(AtomParams.from_vector(gv), float(c))
        patterns.append(pattern)
        vecs = spec.lambda_domain.sample(rng, spec.images_per_class)
        class_lams = tuple(spec.model.from_vector(v) for v in vecs)
        lambdas.append(class_lams)
        class_imgs = []
        for lam in class_lams:
            clean = render_values(pattern, lam, spec.grid)
            signal_power += float(clean @ clean)
            values = clean
            if sigma > 0.0:
                values = values + rng.normal(0.0, sigma, size=clean.size)
            if spec.normalize:
                norm = float(np.linalg.norm(values))
                if norm > 0.0:
                    values = values / norm
            class_imgs.append(Image(spec.grid, values))
        images.append(tuple(class_imgs))

    n_total = spec.images_per_class * len(spec.atoms_per_class)
    mean_power = signal_power / (n_total * spec.grid.n)
    snr_db = 10.0 * math.log10(mean_power / spec.noise_variance) if spec.noise_variance > 0.0 else None

    multi = len(spec.atoms_per_class) > 1
    entries = []
    for m, cls in enumerate(images):
        for img in cls:
            entries.append(
                ManifestEntry(values=tuple(float(v) for v in img.values), label=m if multi else None)
            )
    manifest = DatasetManifest(grid=spec.grid, entries=tuple(entries), normalized=spec.normalize)
    return SynthResult(
        class_images=tuple(images),
        manifest=manifest,
        patterns=tuple(patterns),
        lambdas=tuple(lambdas),
        snr_db=snr_db,
    )


# ---------------------------------------------------------------------------
# Models


def _mother_doc(mother) -> dict:
    doc = {"kind": mother.kind}
    if mother.kind == "imq":
        doc["mu"] = float(mother.mu)
    return doc


def _mother_from_doc(doc):
    return make_mother(doc["kind"], doc.get("mu", -3.0))


def _domain_doc(domain: ParamDomain) -> dict:
    return {"lows": [float(v) for v in domain.lows], "highs": [float(v) for v in domain.highs]}


def _domain_from_doc(doc) -> ParamDomain:
    return ParamDomain(doc["lows"], doc["highs"])


def _pattern_doc(pattern: Pattern) -> dict:
    return {
        "atoms": [
            {"params": [float(v) for v in a.params.to_vector()], "coef": float(a.coef)} for a in pattern.atoms
        ]
    }


def _pattern_from_doc(doc, mother) -> Pattern:
    pattern = Pattern(mother)
    for a in doc["atoms"]:
        pattern = pattern.with_atom(AtomParams.from_vector(a["params"]), a["coef"])
    return pattern


def _params_doc(p: TransformParams) -> list:
    return [float(p.angle), float(p.tx), float(p.ty), float(p.sx), float(p.sy)]


def save_model(model: ClassModel, path) -> None:
    """Serialize a learned model as canonical JSON (residuals excluded)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "model",
        "mother": _mother_doc(model.mother),
        "transform_model": model.transform_model.value,
        "grid": _grid_doc(model.grid),
        "lambda_domain": _domain_doc(model.lambda_domain),
        "gamma_domain": _domain_doc(model.gamma_domain),
        "patterns": [_pattern_doc(p) for p in model.patterns],
        "projections": [
            [{"params": _params_doc(pr.params), "distance": float(pr.distance)} for pr in row]
            for row in model.projections
        ],
        "labels": [int(l) for l in model.labels],
        "class_slices": [[int(s.start), int(s.stop)] for s in model.class_slices],
        "error_trace": [
            [int(entry[0]), float(entry[1]), int(entry[2]), float(entry[3])] for entry in model.error_trace
        ],
        "beta": float(model.beta),
        "stop_reason": model.stop_reason,
        "reference_indices": [int(r) for r in model.reference_indices],
    }
    Path(path).write_text(_canonical_json(doc), encoding="utf-8")


def load_model(path) -> ClassModel:
    """Rebuild a model from its file; projection residuals come back None."""
    doc = _load_json(path)
    _check_schema(doc, "model")
    try:
        mother = _mother_from_doc(doc["mother"])
        projections = tuple(
            tuple(
                Projection(TransformParams(*pr["params"]), float(pr["distance"]), None) for pr in row
            )
            for row in doc["projections"]
        )
        return ClassModel(
            patterns=tuple(_pattern_from_doc(p, mother) for p in doc["patterns"]),
            projections=projections,
            labels=np.array(doc["labels"], dtype=int),
            class_slices=tuple(slice(a, b) for a, b in doc["class_slices"]),
            error_trace=tuple(tuple(entry) for entry in doc["error_trace"]),
            beta=float(doc["beta"]),
            stop_reason=doc["stop_reason"],
            reference_indices=tuple(int(r) for r in doc["reference_indices"]),
            transform_model=TransformModel(doc["transform_model"]),
            lambda_domain=_domain_from_doc(doc["lambda_domain"]),
            gamma_domain=_domain_from_doc(doc["gamma_domain"]),
            mother=mother,
            grid=_grid_from_doc(doc["grid"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: {exc}") from exc


def write_error_csv(trace, path, value_label: str = "normalized_error") -> None:
    """Two-column CSV of (atoms, value) rows, one per trace entry."""
    lines = [f"atoms,{value_label}"]
    for j, val in trace:
        lines.append(f"{int(j)},{float(val)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
