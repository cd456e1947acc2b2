"""Batch command-line entry points.

Subcommands: synth, learn, learn-multi, project, classify.  Options come
from an optional JSON config file with command-line flags taking
precedence; every run logs the fully-resolved configuration to standard
error.  Standard output carries machine-readable JSON, progress and logs
go to standard error, and output files are canonical so identical inputs
reproduce them byte for byte.

Exit codes: 0 success, 1 usage, 2 parse/format, 3 numerical contract
violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dictionary import make_mother
from .geometry import ParamDomain, TransformModel, default_lambda_domain
from .jpats import AlphaSchedule, BetaPolicy, JpatsConfig, classify, from_pats_result, run_jpats
from .manifold import Image, SamplingGrid, project
from .optimize import SolverOptions
from .pats import PatsConfig, default_gamma_domain, run_pats

EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_CONTRACT = 3


class ContractError(RuntimeError):
    """A numerical invariant the pipeline promises was violated."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract reserves 2
    # for file parse errors, so usage problems are remapped to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Config resolution


def _read_config(path) -> dict:
    if path is None:
        return {}
    doc = dataio._load_json(path)
    if not isinstance(doc, dict):
        raise dataio.ModelFormatError(f"{path}: config must be a JSON object")
    return doc


def _overlay_flags(cfg: dict, args, keys) -> dict:
    out = dict(cfg)
    for flag, key in keys:
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


_COMMON_KEYS = (
    ("seed", "seed"),
    ("max_atoms", "max_atoms"),
    ("model", "model"),
    ("mother", "mother"),
    ("mu", "mu"),
    ("alpha_start", "alpha_start"),
    ("alpha_end", "alpha_end"),
    ("alpha_center", "alpha_center"),
)


def _domain_opt(cfg: dict, key: str) -> ParamDomain | None:
    if key not in cfg:
        return None
    doc = cfg[key]
    return ParamDomain(doc["lows"], doc["highs"])


def _solver_opt(cfg: dict) -> SolverOptions:
    return SolverOptions(**cfg.get("solver", {}))


def _grid_from_config(cfg: dict) -> SamplingGrid:
    # rotation and scaling act about the coordinate origin, so synthetic
    # windows default to a centered frame
    doc = cfg.get("grid", {})
    rows = int(doc.get("rows", 32))
    cols = int(doc.get("cols", 32))
    return SamplingGrid(
        x0=float(doc.get("x0", -0.5 * cols)),
        y0=float(doc.get("y0", -0.5 * rows)),
        width=float(doc.get("width", cols)),
        height=float(doc.get("height", rows)),
        rows=rows,
        cols=cols,
    )


def _pats_kwargs(cfg: dict) -> dict:
    kwargs = {}
    if "model" in cfg:
        kwargs["model"] = TransformModel(cfg["model"])
    kwargs["lambda_domain"] = _domain_opt(cfg, "lambda_domain")
    kwargs["gamma_domain"] = _domain_opt(cfg, "gamma_domain")
    for key in (
        "max_atoms",
        "error_tol",
        "coef_limit",
        "coarse_points",
        "projection_points",
        "projection_cycles",
        "reference",
    ):
        if key in cfg:
            kwargs[key] = cfg[key]
    kwargs["solver"] = _solver_opt(cfg)
    return kwargs


def _alpha_from_config(cfg: dict) -> AlphaSchedule:
    base = AlphaSchedule()
    return AlphaSchedule(
        start=float(cfg.get("alpha_start", base.start)),
        end=float(cfg.get("alpha_end", base.end)),
        center=float(cfg.get("alpha_center", base.center)),
        slope=float(cfg.get("alpha_slope", base.slope)),
    )


def _jpats_config(cfg: dict) -> JpatsConfig:
    kwargs = _pats_kwargs(cfg)
    kwargs["alpha"] = _alpha_from_config(cfg)
    if "beta" in cfg:
        doc = cfg["beta"]
        kwargs["beta"] = BetaPolicy(mode=doc.get("mode", "fitted"), value=float(doc.get("value", 1.0)))
    for key in ("coef_significance", "patience", "block_order"):
        if key in cfg:
            kwargs[key] = cfg[key]
    return JpatsConfig(**kwargs)


def _resolved(cfg: dict, extra: dict) -> None:
    merged = dict(cfg)
    merged.update(extra)
    _log("resolved config: " + json.dumps(merged, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# Commands


def _cmd_synth(args) -> int:
    cfg = _overlay_flags(_read_config(args.config), args, _COMMON_KEYS)
    grid = _grid_from_config(cfg)
    model = TransformModel(cfg.get("model", "full5"))
    lam_domain = _domain_opt(cfg, "lambda_domain") or default_lambda_domain(model, grid.width)
    gamma_domain = _domain_opt(cfg, "gamma_domain") or default_gamma_domain(grid)
    spec = dataio.SynthSpec(
        grid=grid,
        model=model,
        lambda_domain=lam_domain,
        gamma_domain=gamma_domain,
        atoms_per_class=tuple(cfg.get("atoms_per_class", (5,))),
        images_per_class=int(cfg.get("images_per_class", 20)),
        noise_variance=float(cfg.get("noise_variance", 0.0)),
        seed=int(cfg.get("seed", 0)),
        mother_kind=cfg.get("mother", "gaussian"),
        mu=float(cfg.get("mu", -3.0)),
        normalize=bool(cfg.get("normalize", False)),
    )
    _resolved(cfg, {"command": "synth", "out_dir": str(args.out_dir)})
    result = dataio.generate_synthetic(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "dataset.json"
    dataio.save_manifest(result.manifest, manifest_path)
    _log(f"wrote {len(result.manifest.entries)} images to {manifest_path}")
    _emit(
        {
            "manifest": str(manifest_path),
            "images": len(result.manifest.entries),
            "classes": len(spec.atoms_per_class),
            "snr_db": result.snr_db,
        }
    )
    return 0


def _require_trace_monotone(values, what: str) -> None:
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{what} contains non-finite values")
    if np.any(np.diff(arr) > 1e-12):
        raise ContractError(f"{what} increased between accepted iterations")


def _cmd_learn(args) -> int:
    cfg = _overlay_flags(_read_config(args.config), args, _COMMON_KEYS)
    manifest = dataio.load_manifest(args.dataset)
    images, labels = dataio.load_dataset(manifest, Path(args.dataset).parent)
    if labels is not None and len(set(labels.tolist())) > 1:
        raise dataio.ModelFormatError("dataset has multiple classes; use learn-multi")
    mother = make_mother(cfg.get("mother", "gaussian"), float(cfg.get("mu", -3.0)))
    config = PatsConfig(**_pats_kwargs(cfg))
    _resolved(cfg, {"command": "learn", "dataset": str(args.dataset), "out_dir": str(args.out_dir)})
    _log(f"learning a single manifold from {len(images)} images")
    result = run_pats(images, mother, config)
    _require_trace_monotone([rel for _, rel in result.error_trace], "normalized error trace")
    _log(f"stopped after {result.pattern.atom_count} atoms: {result.stop_reason}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.json"
    csv_path = out_dir / "error.csv"
    dataio.save_model(from_pats_result(result, mother, config, images[0].grid), model_path)
    dataio.write_error_csv(result.error_trace, csv_path, "normalized_error")
    _emit(
        {
            "model": str(model_path),
            "error_csv": str(csv_path),
            "atoms": result.pattern.atom_count,
            "final_error": result.final_error,
            "normalized_error": result.error_trace[-1][1],
            "stop_reason": result.stop_reason,
        }
    )
    return 0


def _cmd_learn_multi(args) -> int:
    cfg = _overlay_flags(_read_config(args.config), args, _COMMON_KEYS)
    manifest = dataio.load_manifest(args.dataset)
    images, labels = dataio.load_dataset(manifest, Path(args.dataset).parent)
    if labels is None:
        raise dataio.ModelFormatError("learn-multi needs a labeled dataset")
    n_classes = int(labels.max()) + 1
    class_images = tuple(
        tuple(img for img, l in zip(images, labels) if l == m) for m in range(n_classes)
    )
    mother = make_mother(cfg.get("mother", "gaussian"), float(cfg.get("mu", -3.0)))
    config = _jpats_config(cfg)
    _resolved(cfg, {"command": "learn-multi", "dataset": str(args.dataset), "out_dir": str(args.out_dir)})
    sizes = ", ".join(str(len(c)) for c in class_images)
    _log(f"learning {n_classes} manifolds jointly from class sizes [{sizes}]")
    model = run_jpats(class_images, mother, config)
    _require_trace_monotone([entry[2] for entry in model.error_trace], "misclassification trace")
    _log(f"stopped: {model.stop_reason}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.json"
    err_path = out_dir / "error.csv"
    mis_path = out_dir / "misclassification.csv"
    dataio.save_model(model, model_path)
    base = model.error_trace[0][1]
    norm = base if base > 0.0 else 1.0
    n_total = len(images)
    dataio.write_error_csv(
        [(entry[0], entry[1] / norm) for entry in model.error_trace], err_path, "normalized_error"
    )
    dataio.write_error_csv(
        [(entry[0], 100.0 * entry[2] / n_total) for entry in model.error_trace],
        mis_path,
        "misclassification_pct",
    )
    _emit(
        {
            "model": str(model_path),
            "error_csv": str(err_path),
            "misclassification_csv": str(mis_path),
            "atoms": [p.atom_count for p in model.patterns],
            "final_misclassified": int(model.error_trace[-1][2]),
            "stop_reason": model.stop_reason,
        }
    )
    return 0


def _load_one_image(path, index: int):
    path = Path(path)
    if path.suffix == ".json":
        manifest = dataio.load_manifest(path)
        images, _ = dataio.load_dataset(manifest, path.parent)
        if not 0 <= index < len(images):
            raise dataio.ModelFormatError(f"image index {index} out of range for {len(images)} entries")
        return images[index]
    return dataio.load_pgm(path)


def _cmd_project(args) -> int:
    model = dataio.load_model(args.model_file)
    u = _load_one_image(args.image, args.index)
    if (u.grid.rows, u.grid.cols) != (model.grid.rows, model.grid.cols):
        raise dataio.ModelFormatError("image raster does not match the model grid")
    _resolved({}, {"command": "project", "model": str(args.model_file), "image": str(args.image)})
    u = Image(model.grid, u.values)  # adopt the model's coordinate frame
    best = None
    distances = []
    for m, pattern in enumerate(model.patterns):
        proj = project(u, pattern, model.transform_model, model.lambda_domain)
        distances.append(proj.distance)
        if best is None or proj.distance < best[1].distance:
            best = (m, proj)
    m, proj = best
    if not np.isfinite(proj.distance):
        raise ContractError("projection distance is not finite")
    names = model.transform_model.param_names
    vec = model.transform_model.to_vector(proj.params)
    _emit(
        {
            "class": m,
            "params": {name: float(v) for name, v in zip(names, vec)},
            "distance": proj.distance,
            "distances": distances,
        }
    )
    return 0


def _cmd_classify(args) -> int:
    model = dataio.load_model(args.model_file)
    manifest = dataio.load_manifest(args.dataset)
    images, labels = dataio.load_dataset(manifest, Path(args.dataset).parent)
    if (manifest.grid.rows, manifest.grid.cols) != (model.grid.rows, model.grid.cols):
        raise dataio.ModelFormatError("dataset raster does not match the model grid")
    _resolved(
        {},
        {
            "command": "classify",
            "model": str(args.model_file),
            "dataset": str(args.dataset),
            "threshold": args.threshold,
        },
    )
    predicted = []
    for i, u in enumerate(images):
        u = Image(model.grid, u.values)
        predicted.append(classify(u, model, reject_threshold=args.threshold))
        _log(f"classified {i + 1}/{len(images)}")
    payload = {"labels": predicted, "outliers": sum(1 for p in predicted if p == "outlier")}
    if labels is not None:
        wrong = sum(1 for p, l in zip(predicted, labels) if p != int(l))
        payload["misclassification_pct"] = 100.0 * wrong / len(images)
    else:
        payload["misclassification_pct"] = None
    _emit(payload)
    return 0


# ---------------------------------------------------------------------------
# Wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="ptmlearn", description="Learn smooth pattern transformation manifolds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=False, alpha=False):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out-dir", default=".", help="directory for output files")
        p.add_argument("--max-atoms", type=int)
        p.add_argument("--model", choices=[m.value for m in TransformModel])
        p.add_argument("--mother", choices=["gaussian", "imq"])
        p.add_argument("--mu", type=float)
        if seed:
            p.add_argument("--seed", type=int)
        if alpha:
            p.add_argument("--alpha-start", type=float)
            p.add_argument("--alpha-end", type=float)
            p.add_argument("--alpha-center", type=float)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    common(p, seed=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("learn", help="fit one manifold to a dataset")
    p.add_argument("dataset", help="dataset manifest")
    common(p)
    p.set_defaults(fn=_cmd_learn)

    p = sub.add_parser("learn-multi", help="fit per-class manifolds jointly")
    p.add_argument("dataset", help="labeled dataset manifest")
    common(p, alpha=True)
    p.set_defaults(fn=_cmd_learn_multi)

    p = sub.add_parser("project", help="project one image onto a model")
    p.add_argument("model_file", help="model file")
    p.add_argument("image", help="PGM file or dataset manifest")
    p.add_argument("--index", type=int, default=0, help="entry index when image is a manifest")
    p.set_defaults(fn=_cmd_project)

    p = sub.add_parser("classify", help="label every image in a dataset")
    p.add_argument("model_file", help="multi-class model file")
    p.add_argument("dataset", help="dataset manifest")
    p.add_argument("--threshold", type=float, help="reject as outlier beyond this distance")
    p.set_defaults(fn=_cmd_classify)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; keep 2 for parse failures of
        # data files only.
        return EXIT_USAGE if exc.code else 0
    try:
        return args.fn(args)
    except (dataio.PgmParseError, dataio.ModelFormatError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return EXIT_FORMAT
    except ContractError as exc:
        _log(f"contract violation: {exc}")
        return EXIT_CONTRACT
    except ValueError as exc:
        _log(f"error: invalid configuration: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
