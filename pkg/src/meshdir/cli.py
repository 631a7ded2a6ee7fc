"""Batch front end: phantom generation, registration runs, evaluation, comparison.

Run configuration is a flat INI document (sections [inputs], [optimizer],
[elasticity], [run], [provider]); every optimizer field can be set there
and a few common ones overridden on the command line.  Each repeat writes
a self-contained run directory with a checksum manifest so evaluation can
verify artifact integrity.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import EvalReport, build_report, dice, folded_volume, hausdorff95
from .moea import (
    OptimizerConfig,
    Snapshot,
    decode_genotype,
    optimize,
    select_solution,
    write_convergence_csv,
)
from .phantom import generate_phantom, parse_phantom_spec, write_phantom_spec
from .seeding import DvfSet, load_dvf_set, synthetic_dvf_provider
from .tetmesh import TetMeshPair, extract_dvf, save_mesh, save_state
from .volumes import (
    Dvf,
    LabelVolume,
    RegistrationProblem,
    Volume,
    build_problem,
    default_elasticity_table,
    load_volume,
    save_volume,
    warp_mask,
)

__all__ = [
    "RunConfig",
    "parse_run_config",
    "cmd_phantom",
    "cmd_register",
    "cmd_evaluate",
    "cmd_compare",
    "main",
]

EVAL_HEADER = "run_id,config,time_point,hausdorff95_mm,dice_bladder,folded_volume_ml"


@dataclass
class RunConfig:
    """Everything one `register` invocation needs."""

    name: str
    source_image: str
    target_image: str
    source_labels: str
    target_labels: str
    label_names: tuple[str, ...] = ()
    guidance_max_points: int | None = None
    elasticity: dict[str, float] = field(default_factory=dict)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    strategy: str = "cold"
    repeats: int = 1
    base_seed: int = 0
    provider_kind: str | None = None  # files | synthetic
    provider_paths: tuple[str, ...] = ()
    provider_units: str = "mm"
    provider_truth: str | None = None
    provider_n: int = 15
    provider_smoothing: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0)
    provider_noise: tuple[float, ...] = (0.0, 2.0, 5.0)
    provider_seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("cold", "seeded"):
            raise ValueError(f"strategy must be cold or seeded, got {self.strategy!r}")
        if self.repeats < 1:
            raise ValueError("repeat count must be >= 1")
        if self.strategy == "seeded" and self.provider_kind not in ("files", "synthetic"):
            raise ValueError("seeded strategy needs a [provider] section (files or synthetic)")


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def parse_run_config(path) -> RunConfig:
    """Read a run INI; relative input paths resolve against the file."""
    path = Path(path)
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("inputs"):
        raise ValueError(f"{path}: missing [inputs] section")
    base = path.parent
    inputs = parser["inputs"]

    def respath(key):
        raw = inputs.get(key)
        if raw is None:
            raise ValueError(f"{path}: [inputs] missing {key}")
        return str((base / raw).resolve()) if not Path(raw).is_absolute() else raw

    opt_kwargs = {}
    if parser.has_section("optimizer"):
        sec = parser["optimizer"]
        ints = (
            "population_size",
            "n_clusters",
            "archive_capacity",
            "coarse_points",
            "resolutions",
            "rng_seed",
            "samples_per_tet",
            "seed_steps",
            "stagnation_window",
        )
        reals = (
            "time_budget_s",
            "frac_primary",
            "frac_other",
            "init_noise_frac",
            "seed_noise_frac",
            "stagnation_tol",
            "step_init",
            "seconds_per_eval",
        )
        for key in ints:
            if sec.get(key) is not None:
                opt_kwargs[key] = int(sec[key])
        for key in reals:
            if sec.get(key) is not None:
                opt_kwargs[key] = float(sec[key])
        if sec.get("max_generations") is not None:
            opt_kwargs["max_generations"] = int(sec["max_generations"])
        if sec.get("snapshot_times_s") is not None:
            opt_kwargs["snapshot_times_s"] = _floats(sec["snapshot_times_s"])
        if sec.get("step_bounds") is not None:
            lo, hi = _floats(sec["step_bounds"])
            opt_kwargs["step_bounds"] = (lo, hi)
    # the paper-mirroring 5-minute snapshot is the CLI default
    opt_kwargs.setdefault("snapshot_times_s", (300.0,))

    elasticity = {}
    if parser.has_section("elasticity"):
        elasticity = {k: float(v) for k, v in parser["elasticity"].items()}

    run = parser["run"] if parser.has_section("run") else {}
    kwargs = dict(
        name=run.get("name", path.stem),
        source_image=respath("source_image"),
        target_image=respath("target_image"),
        source_labels=respath("source_labels"),
        target_labels=respath("target_labels"),
        label_names=tuple(
            tok.strip() for tok in inputs.get("label_names", "").split(",") if tok.strip()
        ),
        guidance_max_points=(
            int(inputs["guidance_max_points"])
            if inputs.get("guidance_max_points") is not None
            else None
        ),
        elasticity=elasticity,
        optimizer=OptimizerConfig(**opt_kwargs),
        strategy=run.get("strategy", "cold"),
        repeats=int(run.get("repeats", "1")),
        base_seed=int(run.get("base_seed", "0")),
    )
    if parser.has_section("provider"):
        sec = parser["provider"]
        kwargs["provider_kind"] = sec.get("kind", "files")
        raw_paths = sec.get("paths", "")
        kwargs["provider_paths"] = tuple(
            str((base / tok).resolve()) if not Path(tok).is_absolute() else tok
            for tok in (t.strip() for t in raw_paths.split(","))
            if tok
        )
        kwargs["provider_units"] = sec.get("units", "mm")
        truth = sec.get("truth")
        if truth:
            kwargs["provider_truth"] = (
                str((base / truth).resolve()) if not Path(truth).is_absolute() else truth
            )
        if sec.get("n") is not None:
            kwargs["provider_n"] = int(sec["n"])
        if sec.get("smoothing_levels") is not None:
            kwargs["provider_smoothing"] = _floats(sec["smoothing_levels"])
        if sec.get("noise_levels") is not None:
            kwargs["provider_noise"] = _floats(sec["noise_levels"])
        if sec.get("rng_seed") is not None:
            kwargs["provider_seed"] = int(sec["rng_seed"])
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# Shared plumbing

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header: str, rows) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _named_labels(vol: LabelVolume, names: tuple[str, ...]) -> LabelVolume:
    if not names:
        return vol
    return replace(vol, label_names=names)


def _load_problem(cfg: RunConfig) -> RegistrationProblem:
    for p in (cfg.source_image, cfg.target_image, cfg.source_labels, cfg.target_labels):
        if not Path(p).is_file():
            raise FileNotFoundError(f"input does not exist: {p}")
    source_image = load_volume(cfg.source_image)
    target_image = load_volume(cfg.target_image)
    source_labels = _named_labels(load_volume(cfg.source_labels), cfg.label_names)
    target_labels = _named_labels(load_volume(cfg.target_labels), cfg.label_names)
    if not isinstance(source_labels, LabelVolume) or not isinstance(target_labels, LabelVolume):
        raise ValueError("label inputs must be integer label volumes")
    table = default_elasticity_table(source_labels)
    for name, value in cfg.elasticity.items():
        label = source_labels.label_id(name)
        if label is None:
            raise ValueError(f"[elasticity] names unknown label {name!r}")
        table[label] = value
    return build_problem(
        source_image,
        target_image,
        source_labels,
        target_labels,
        elasticity_table=table,
        guidance_max_points=cfg.guidance_max_points,
    )


def _build_dvf_set(cfg: RunConfig, problem: RegistrationProblem) -> DvfSet:
    if cfg.provider_kind == "files":
        if not cfg.provider_paths:
            raise ValueError("[provider] kind=files needs a non-empty paths list")
        return load_dvf_set(cfg.provider_paths, problem, units=cfg.provider_units)
    if cfg.provider_truth is None:
        raise ValueError("[provider] kind=synthetic needs truth = <dvf file>")
    truth = load_volume(cfg.provider_truth)
    if not isinstance(truth, Dvf):
        raise ValueError(f"{cfg.provider_truth} is not a displacement field")
    return synthetic_dvf_provider(
        problem,
        truth,
        n=cfg.provider_n,
        smoothing_levels=cfg.provider_smoothing,
        noise_levels=cfg.provider_noise,
        rng_seed=cfg.provider_seed,
    )


def _primary_label(labels: LabelVolume) -> int:
    for i, name in enumerate(labels.label_names):
        if "bladder" in name.lower():
            return i + 1
    return min(labels.labels)


# ---------------------------------------------------------------------------
# phantom

def cmd_phantom(spec_path, out_dir) -> int:
    spec = parse_phantom_spec(spec_path)
    case = generate_phantom(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "source.mha": case.source_image,
        "target.mha": case.target_image,
        "source_labels.mha": case.source_labels,
        "target_labels.mha": case.target_labels,
        "truth_dvf.mha": case.truth,
    }
    for name, vol in files.items():
        save_volume(vol, out / name)
    write_phantom_spec(spec, out / "phantom.ini")
    manifest = {
        "kind": "phantom",
        "label_names": list(case.source_labels.label_names),
        "artifacts": {name: _sha256(out / name) for name in [*files, "phantom.ini"]},
    }
    _write_json(manifest, out / "manifest.json")
    print(f"phantom written to {out}")
    return 0


# ---------------------------------------------------------------------------
# register

def _time_point_dirname(label: str) -> str:
    return label if label == "final" else f"t{int(label):04d}"


def _snapshot_label(time_s: float) -> str:
    return str(int(round(time_s)))


def _warp_all_labels(labels: LabelVolume, dvf: Dvf) -> LabelVolume:
    merged = np.zeros_like(labels.data)
    for label in sorted(labels.labels):
        piece = warp_mask(labels, dvf, label)
        merged[piece.data == label] = label
    return LabelVolume(merged, labels.spacing, labels.origin, label_names=labels.label_names)


def _write_time_point(
    dirpath: Path,
    mesh,
    entries,
    problem: RegistrationProblem,
    generation: int,
) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, dirpath / "mesh.txt")
    rows = [
        (i, e.objectives.deformation, e.objectives.similarity, e.objectives.guidance)
        for i, e in enumerate(entries)
    ]
    _write_csv(dirpath / "objectives.csv", "index,deformation,similarity,guidance", rows)
    sel = select_solution(entries)
    pair = decode_genotype(mesh, entries[sel].genotype)
    save_state(pair.source, dirpath / "selected_source.txt")
    save_state(pair.target, dirpath / "selected_target.txt")
    dvf = extract_dvf(pair, problem.target_image)
    save_volume(dvf, dirpath / "dvf.mha")
    flags = LabelVolume(
        dvf.extrapolated.astype(np.uint8), dvf.spacing, dvf.origin, label_names=("extrapolated",)
    )
    save_volume(flags, dirpath / "extrapolated.mha")
    save_volume(_warp_all_labels(problem.source_labels, dvf), dirpath / "warped_labels.mha")
    _write_json(
        {
            "selected_index": sel,
            "generation": generation,
            "objectives": {
                "deformation": entries[sel].objectives.deformation,
                "similarity": entries[sel].objectives.similarity,
                "guidance": entries[sel].objectives.guidance,
            },
        },
        dirpath / "selected.json",
    )


def _run_one_repeat(
    cfg: RunConfig,
    problem: RegistrationProblem,
    dvf_set: DvfSet | None,
    seed: int,
    rdir: Path,
) -> dict:
    rdir.mkdir(parents=True, exist_ok=True)
    opt_cfg = replace(cfg.optimizer, rng_seed=seed)
    t0 = time.time()
    result = optimize(problem, opt_cfg, strategy=cfg.strategy, dvf_set=dvf_set)
    wall_s = time.time() - t0

    write_convergence_csv(result.log_rows, rdir / "convergence.csv")
    save_volume(problem.source_labels, rdir / "source_labels.mha")
    save_volume(problem.target_labels, rdir / "target_labels.mha")

    snapshots = list(result.snapshots)
    seen = {_snapshot_label(s.time_s) for s in snapshots}
    for want in opt_cfg.snapshot_times_s:
        # a snapshot at/after the budget end is the final state
        if _snapshot_label(want) not in seen:
            snapshots.append(
                Snapshot(want, result.generations, result.mesh, list(result.archive.entries))
            )
    time_points = []
    for snap in snapshots:
        label = _snapshot_label(snap.time_s)
        _write_time_point(
            rdir / _time_point_dirname(label), snap.mesh, snap.entries, problem, snap.generation
        )
        time_points.append(label)
    _write_time_point(
        rdir / "final", result.mesh, list(result.archive.entries), problem, result.generations
    )
    time_points.append("final")

    artifacts = {}
    for p in sorted(rdir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[str(p.relative_to(rdir))] = _sha256(p)
    return {
        "run_id": rdir.name,
        "config": cfg.name,
        "strategy": cfg.strategy,
        "seed": seed,
        "status": "complete",
        "label_names": list(problem.source_labels.label_names),
        "provider": None if dvf_set is None else {"dvf_ids": list(dvf_set.ids)},
        "inputs": {
            p: _sha256(p)
            for p in (cfg.source_image, cfg.target_image, cfg.source_labels, cfg.target_labels)
        },
        "time_points": time_points,
        "generations": result.generations,
        "switch_generation": result.switch_generation,
        "elapsed_s": result.elapsed_s,
        "wall_s": wall_s,
        "artifacts": artifacts,
    }


def cmd_register(
    config_path,
    out_dir,
    seed: int | None = None,
    repeats: int | None = None,
    time_budget_s: float | None = None,
    snapshots: tuple[float, ...] | None = None,
) -> int:
    cfg = parse_run_config(config_path)
    if seed is not None:
        cfg.base_seed = seed
    if repeats is not None:
        cfg.repeats = repeats
        cfg.__post_init__()
    opt_overrides = {}
    if time_budget_s is not None:
        opt_overrides["time_budget_s"] = time_budget_s
    if snapshots is not None:
        opt_overrides["snapshot_times_s"] = snapshots
    if opt_overrides:
        cfg.optimizer = replace(cfg.optimizer, **opt_overrides)

    problem = _load_problem(cfg)
    dvf_set = _build_dvf_set(cfg, problem) if cfg.strategy == "seeded" else None
    out = Path(out_dir)
    failures = 0
    for r in range(cfg.repeats):
        run_seed = cfg.base_seed + r
        rdir = out / f"{cfg.name}_s{run_seed:04d}"
        try:
            manifest = _run_one_repeat(cfg, problem, dvf_set, run_seed, rdir)
        except Exception as exc:  # mark the repeat failed, keep going
            failures += 1
            rdir.mkdir(parents=True, exist_ok=True)
            manifest = {
                "run_id": rdir.name,
                "config": cfg.name,
                "strategy": cfg.strategy,
                "seed": run_seed,
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
            }
            print(f"{rdir.name}: FAILED ({manifest['error']})")
        else:
            print(
                f"{rdir.name}: {manifest['generations']} generations, "
                f"{manifest['elapsed_s']:.1f}s budget time"
            )
        _write_json(manifest, rdir / "manifest.json")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# evaluate

def _verify_manifest(rdir: Path, manifest: dict) -> None:
    for rel, expect in manifest.get("artifacts", {}).items():
        p = rdir / rel
        if not p.is_file():
            raise FileNotFoundError(f"{rdir.name}: missing artifact {rel}")
        got = _sha256(p)
        if got != expect:
            raise ValueError(f"{rdir.name}: checksum mismatch for {rel}")


def _load_run_dvf(dirpath: Path) -> Dvf:
    dvf = load_volume(dirpath / "dvf.mha")
    flags = load_volume(dirpath / "extrapolated.mha")
    return Dvf(
        dvf.vectors, dvf.spacing, dvf.origin, extrapolated=flags.data.astype(bool)
    )


def evaluate_run(rdir) -> list[EvalReport]:
    """Metrics for one run directory, one report per stored time point."""
    rdir = Path(rdir)
    manifest = json.loads((rdir / "manifest.json").read_text(encoding="ascii"))
    if manifest.get("status") != "complete":
        raise ValueError(f"{rdir.name}: run is not complete (status={manifest.get('status')})")
    _verify_manifest(rdir, manifest)
    names = tuple(manifest.get("label_names", ()))
    source_labels = _named_labels(load_volume(rdir / "source_labels.mha"), names)
    target_labels = _named_labels(load_volume(rdir / "target_labels.mha"), names)
    primary = _primary_label(source_labels)

    reports = []
    for label in manifest["time_points"]:
        dirpath = rdir / _time_point_dirname(label)
        dvf = _load_run_dvf(dirpath)
        selected = json.loads((dirpath / "selected.json").read_text(encoding="ascii"))
        dice_by_name = {}
        hd95 = float("nan")
        for organ in sorted(source_labels.labels):
            warped = warp_mask(source_labels, dvf, organ)
            dice_by_name[source_labels.name_of(organ)] = dice(warped, target_labels, label=organ)
            if organ == primary:
                hd95 = hausdorff95(warped, target_labels, label=organ)
        reports.append(
            EvalReport(
                run_id=manifest["run_id"],
                config=manifest["config"],
                time_point=label,
                hausdorff95_mm=hd95,
                dice=dice_by_name,
                folded_volume_ml=folded_volume(dvf),
                runtime_s=float(manifest.get("elapsed_s", float("nan"))),
                selected_index=int(selected["selected_index"]),
            )
        )
    return reports


def cmd_evaluate(run_dirs, out_csv) -> int:
    rows = []
    for rdir in run_dirs:
        for rep in evaluate_run(rdir):
            rows.append(
                (
                    rep.run_id,
                    rep.config,
                    rep.time_point,
                    rep.hausdorff95_mm,
                    rep.dice_primary(),
                    rep.folded_volume_ml,
                )
            )
    _write_csv(out_csv, EVAL_HEADER, rows)
    print(f"wrote {len(rows)} evaluation rows to {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# compare

def _read_eval_csv(path) -> list[dict]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != EVAL_HEADER:
        raise ValueError(f"{path}: not an evaluation CSV (header mismatch)")
    rows = []
    keys = lines[0].split(",")
    for line in lines[1:]:
        if not line:
            continue
        rows.append(dict(zip(keys, line.split(","))))
    return rows


COMPARE_HEADER = (
    "case,time_point,n_baseline,n_other,median_baseline_mm,iqr_low_baseline_mm,"
    "iqr_high_baseline_mm,median_other_mm,iqr_low_other_mm,iqr_high_other_mm,"
    "relative_difference_pct,u_statistic,p_value,exact,significant"
)


def cmd_compare(groups, out_csv, alpha: float = 0.05) -> int:
    """groups: ordered (name, eval_csv) pairs; the first is the baseline."""
    if len(groups) < 2:
        raise ValueError("compare needs at least two name=csv groups")
    reports = []
    for name, csv_path in groups:
        for row in _read_eval_csv(csv_path):
            reports.append(
                EvalReport(
                    run_id=row["run_id"],
                    config=name,
                    time_point=row["time_point"],
                    hausdorff95_mm=float(row["hausdorff95_mm"]),
                    dice={"bladder": float(row["dice_bladder"])},
                    folded_volume_ml=float(row["folded_volume_ml"]),
                )
            )
    _, comparison = build_report(reports, alpha=alpha)
    rows = [
        (
            c["case"],
            c["time_point"],
            c["n_baseline"],
            c["n_other"],
            c["median_baseline_mm"],
            c["iqr_low_baseline_mm"],
            c["iqr_high_baseline_mm"],
            c["median_other_mm"],
            c["iqr_low_other_mm"],
            c["iqr_high_other_mm"],
            c["relative_difference_pct"],
            c["u_statistic"],
            c["p_value"],
            c["exact"],
            c["significant"],
        )
        for c in comparison
    ]
    _write_csv(out_csv, COMPARE_HEADER, rows)
    print(f"wrote {len(rows)} comparison rows to {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def _parse_groups(raw: list[str]) -> list[tuple[str, str]]:
    groups = []
    for tok in raw:
        if "=" not in tok:
            raise ValueError(f"group {tok!r} is not name=csv")
        name, _, csv_path = tok.partition("=")
        groups.append((name, csv_path))
    return groups


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="meshdir",
        description="Mesh-based deformable registration: phantom, register, evaluate, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom case")
    p.add_argument("--spec", required=True, help="phantom INI file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("register", help="run registration repeats from a config")
    p.add_argument("--config", required=True, help="run INI file")
    p.add_argument("--out", required=True, help="output directory for run subdirectories")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--repeats", type=int, help="override the repeat count")
    p.add_argument("--time-budget-s", type=float, help="override the optimizer time budget")
    p.add_argument("--snapshots", help="override snapshot times, comma-separated seconds")

    p = sub.add_parser("evaluate", help="compute metrics for finished runs")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("compare", help="statistical comparison of evaluation CSVs")
    p.add_argument(
        "--groups", nargs="+", required=True, help="name=eval.csv entries; first is baseline"
    )
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True, help="output CSV path")

    args = parser.parse_args(argv)
    if args.command == "phantom":
        return cmd_phantom(args.spec, args.out)
    if args.command == "register":
        snaps = _floats(args.snapshots) if args.snapshots else None
        return cmd_register(
            args.config,
            args.out,
            seed=args.seed,
            repeats=args.repeats,
            time_budget_s=args.time_budget_s,
            snapshots=snaps,
        )
    if args.command == "evaluate":
        return cmd_evaluate(args.runs, args.out)
    return cmd_compare(_parse_groups(args.groups), args.out, alpha=args.alpha)


if __name__ == "__main__":
    raise SystemExit(main())
