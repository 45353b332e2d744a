"""Command-line front end: dataset generation, solving, training, evaluation, rendering.

Every subcommand reads its inputs from flags and an optional JSON run
config; nothing is taken from the environment. ``run`` chains the whole
pipeline from a single config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import (SPLITS, CaseEntry, DatasetManifest, GridSpec, PackConfig, ScalarField,
                     load_manifest, read_field, read_layout, write_field, write_layout)
from .layout import (PlacementError, battery_mask, generate_layout, rasterize_conductivity)
from .metrics import EvalReport, comparison_table, evaluate
from .nets import (BackboneConfig, HeadConfig, build_backbone, build_head,
                   build_supervised_baseline, load_model)
from .solver import DENSE_MAX_SIDE, SolveOptions, solve_dense, solve_lowfi, solve_reference
from .training import (TrainConfig, TrainingDivergedError, load_cases, posttrain,
                       predict_backbone, predict_pipeline, pretrain, save_log,
                       train_supervised)

log = logging.getLogger("packthermal")

DEFAULT_SPLITS = {"pretrain": 200, "labeled": 20, "val": 20, "test": 50}
LAYOUT_ATTEMPTS = 16
SOLVERS = ("reference", "lowfi", "dense")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run config

@dataclass
class NetSettings:
    widths: list[int] | None = None
    max_groups: int = 8
    out_scale: float = 1.0
    use_conductivity: bool = False


@dataclass
class RunConfig:
    workdir: str = "run"
    count: int = 290
    seed: int = 0
    cells: int = 8
    grid: int = 64
    splits: dict = field(default_factory=lambda: dict(DEFAULT_SPLITS))
    solver: str = "reference"
    method: str = "iterative"
    tolerance: float = 1e-10
    workers: int | None = None
    pretrain_splits: list[str] = field(default_factory=lambda: ["pretrain"])
    train_seeds: list[int] = field(default_factory=lambda: [0])
    pack: PackConfig = field(default_factory=PackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: NetSettings = field(default_factory=NetSettings)
    head: NetSettings = field(default_factory=NetSettings)
    render: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        return d


_NESTED = {"pack": PackConfig, "train": TrainConfig, "backbone": NetSettings,
           "head": NetSettings}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is TrainConfig:
        names.discard("seed")  # seeds come from train_seeds / --seed
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in doc.items():
        if cls is RunConfig and k in _NESTED:
            v = _build(_NESTED[k], v, f"{where}.{k}")
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "config")
    unknown = sorted(set(cfg.splits) - set(SPLITS))
    if unknown:
        raise ConfigError(f"config.splits: unknown split(s) {', '.join(unknown)}")
    if cfg.solver not in SOLVERS:
        raise ConfigError(f"config.solver must be one of {SOLVERS}")
    if not cfg.train_seeds:
        raise ConfigError("config.train_seeds must list at least one seed")
    SolveOptions(tolerance=cfg.tolerance, method=cfg.method)
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    return run_config_from_dict(doc)


def write_resolved(cfg: RunConfig, directory) -> Path:
    out = Path(directory) / "run_config.resolved.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    return out


def _backbone_config(cfg: RunConfig) -> BackboneConfig:
    kw = {"max_groups": cfg.backbone.max_groups, "out_scale": cfg.backbone.out_scale}
    if cfg.backbone.widths is not None:
        kw["widths"] = tuple(cfg.backbone.widths)
    return BackboneConfig.from_pack(cfg.pack, **kw)


def _head_config(cfg: RunConfig) -> HeadConfig:
    kw = {"max_groups": cfg.head.max_groups, "out_scale": cfg.head.out_scale,
          "use_conductivity": cfg.head.use_conductivity}
    if cfg.head.widths is not None:
        kw["widths"] = tuple(cfg.head.widths)
    return HeadConfig.from_pack(cfg.pack, **kw)


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=seed)


# ------------------------------------------------------------ dataset stages

def split_sizes(count: int, sizes: dict | None = None) -> dict:
    """Scale split sizes to ``count`` cases (largest remainder).

    Every split with a nonzero share gets at least one case when ``count``
    allows it.
    """
    sizes = dict(DEFAULT_SPLITS if sizes is None else sizes)
    active = [k for k in SPLITS if sizes.get(k, 0) > 0]
    out = {k: 0 for k in SPLITS}
    base = 1 if count >= len(active) else 0
    for k in active:
        out[k] = base
    rest = count - base * len(active)
    weight = {k: sizes[k] - base for k in active}
    total = sum(weight.values()) or 1
    shares = {k: rest * weight[k] / total for k in active}
    for k in active:
        out[k] += int(shares[k])
    left = count - sum(out.values())
    for k in sorted(active, key=lambda k: shares[k] - int(shares[k]), reverse=True)[:left]:
        out[k] += 1
    return out


def case_seed(seed: int, index: int, attempt: int) -> int:
    """Independent, reproducible layout seed for one case and retry."""
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1, np.uint64)[0])


def _layout_for_case(seed: int, index: int, cells: int):
    last = None
    for attempt in range(LAYOUT_ATTEMPTS):
        try:
            return generate_layout(case_seed(seed, index, attempt), cells)
        except PlacementError as exc:
            last = exc
    raise PlacementError(f"case {index}: {LAYOUT_ATTEMPTS} attempts failed; last error: {last}")


def gen_layouts(out, count: int, seed: int, cells: int = 8, grid: int = 64,
                sizes: dict | None = None, pack: PackConfig | None = None) -> DatasetManifest:
    pack = pack or PackConfig()
    out = Path(out)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    (out / "conductivity").mkdir(parents=True, exist_ok=True)
    spec = GridSpec.square(grid)
    plan = split_sizes(count, sizes)
    tags = [tag for tag in SPLITS for _ in range(plan.get(tag, 0))]
    entries = []
    for i, tag in enumerate(tags):
        layout = _layout_for_case(seed, i, cells)
        cid = f"case_{i:05d}"
        write_layout(layout, out / "layouts" / f"{cid}.json")
        write_field(rasterize_conductivity(layout, spec, pack),
                    out / "conductivity" / f"{cid}.tfld")
        entries.append(CaseEntry(cid, f"layouts/{cid}.json", f"conductivity/{cid}.tfld", tag))
    manifest = DatasetManifest(entries, out)
    manifest.save(out / "manifest.json")
    log.info("wrote %d cases (%s) to %s", count, plan, out)
    return manifest


def _solve_one(job):
    root, entry, solver, opts, pack, scheme = job
    root = Path(root)
    layout = read_layout(root / entry.layout)
    raw = read_field(root / entry.conductivity)
    spec = GridSpec(raw.spec.rows, raw.spec.cols,
                    layout.domain_mm[0] * 1e-3, layout.domain_mm[1] * 1e-3)
    lam = ScalarField(spec, raw.values)
    mask = battery_mask(layout, spec)
    if solver == "dense":
        t = solve_dense(lam, mask, pack, scheme=scheme)
    elif solver == "lowfi":
        t = solve_lowfi(lam, mask, pack, opts)
    else:
        t = solve_reference(lam, mask, pack, opts)
    rel = f"temperature_{solver}/{entry.case_id}.tfld"
    (root / rel).parent.mkdir(parents=True, exist_ok=True)
    write_field(t, root / rel)
    return entry.case_id, rel


def solve_manifest(path, solver: str = "reference", opts: SolveOptions | None = None,
                   pack: PackConfig | None = None, force: bool = False,
                   workers: int | None = None, scheme: str = "reference") -> DatasetManifest:
    """Solve every case and record the temperature paths in the manifest."""
    pack = pack or PackConfig()
    opts = opts or SolveOptions()
    manifest = load_manifest(path)
    if solver not in SOLVERS:
        raise ValueError(f"solver must be one of {SOLVERS}")
    todo = [e for e in manifest.cases
            if force or e.solver != solver or e.temperature is None
            or not manifest.resolve(e.temperature).is_file()]
    if solver == "dense" and todo:
        side = max(read_field(manifest.resolve(todo[0].conductivity)).spec.shape)
        if side > DENSE_MAX_SIDE:
            from .solver import GridTooLargeError
            raise GridTooLargeError(f"dense solver is limited to {DENSE_MAX_SIDE}x"
                                    f"{DENSE_MAX_SIDE} grids, manifest has {side}x{side}")
    jobs = [(str(manifest.root), e, solver, opts, pack, scheme) for e in todo]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = dict(pool.map(_solve_one, jobs))
    else:
        done = dict(map(_solve_one, jobs))
    manifest.cases = [dataclasses.replace(e, temperature=done[e.case_id], solver=solver)
                      if e.case_id in done else e for e in manifest.cases]
    manifest.save(path)
    log.info("solved %d case(s), %d already up to date", len(done),
             len(manifest.cases) - len(done))
    return manifest


# ----------------------------------------------------------- training stages

def run_pretrain(manifest_path, cfg: RunConfig, seed: int, out_model, log_path=None):
    manifest = load_manifest(manifest_path)
    cases = load_cases(manifest, tuple(cfg.pretrain_splits))
    model = build_backbone(_backbone_config(cfg), seed)
    model, tlog = pretrain(model, cases, _train_config(cfg, seed), cfg.pack)
    model.save(out_model)
    save_log(tlog, log_path or str(out_model) + ".log.jsonl")
    return model, tlog


def run_posttrain(manifest_path, backbone_path, cfg: RunConfig, seed: int, out_model,
                  log_path=None):
    manifest = load_manifest(manifest_path)
    cases = load_cases(manifest, "labeled")
    backbone = load_model(backbone_path)
    head = build_head(_head_config(cfg), seed + 100)
    head, tlog = posttrain(backbone, head, cases, _train_config(cfg, seed), cfg.pack)
    head.save(out_model)
    meta_path = Path(str(out_model) + ".json")
    meta = json.loads(meta_path.read_text())
    meta["backbone"] = os.path.relpath(Path(backbone_path).resolve(),
                                       Path(out_model).resolve().parent)
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    save_log(tlog, log_path or str(out_model) + ".log.jsonl")
    return head, tlog


def run_supervised(manifest_path, cfg: RunConfig, seed: int, out_model, log_path=None):
    manifest = load_manifest(manifest_path)
    cases = load_cases(manifest, "labeled")
    val = load_cases(manifest, "val")
    model = build_supervised_baseline(_backbone_config(cfg), seed + 200)
    model, tlog = train_supervised(model, cases, _train_config(cfg, seed), val)
    model.save(out_model)
    save_log(tlog, log_path or str(out_model) + ".log.jsonl")
    return model, tlog


def predictor(model_path, backbone_path=None, t0: float = 25.0):
    """``(model_id, predict(case))`` for a saved model.

    ``truth`` predicts the ground truth itself and ``constant`` predicts the
    cold-plate temperature everywhere; both serve as reference points.
    """
    if str(model_path) == "truth":
        return "truth", lambda case: case.truth.values
    if str(model_path) == "constant":
        return "constant", lambda case: np.full(case.lam.spec.shape, t0)
    model = load_model(model_path)
    if model.kind == "head":
        if backbone_path is None:
            meta = json.loads(Path(str(model_path) + ".json").read_text())
            if "backbone" not in meta:
                raise ValueError(f"{model_path} is a projection head; pass --backbone")
            backbone_path = Path(model_path).resolve().parent / meta["backbone"]
        backbone = load_model(backbone_path)
        return str(model_path), lambda case: predict_pipeline(backbone, model, case.lam)
    return str(model_path), lambda case: predict_backbone(model, case.lam)


def run_eval(manifest_path, split, model_path, backbone_path=None, t0: float = 25.0,
             cases=None):
    if cases is None:
        cases = load_cases(load_manifest(manifest_path), split)
    model_id, fn = predictor(model_path, backbone_path, t0)
    return evaluate(fn, cases, split, model_id)


# ---------------------------------------------------------------- rendering

def pgm_bytes(values: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> bytes:
    """8-bit binary PGM; ``[vmin, vmax]`` maps linearly onto ``[0, 255]``."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    if hi < lo:
        raise ValueError("render range has max < min")
    if hi == lo:
        pix = np.full(v.shape, 128, dtype=np.uint8)
    else:
        pix = np.rint(np.clip((v - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)
    rows, cols = v.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes()


def render(field_path, out, vmin=None, vmax=None) -> None:
    Path(out).write_bytes(pgm_bytes(read_field(field_path).values, vmin, vmax))


# --------------------------------------------------------------- full run

def _render_sample(case, model_path, out_dir) -> None:
    """Truth and prediction for one case, as TFLD plus PGMs on a shared scale."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, fn = predictor(model_path)
    fields = {"truth": case.truth, "pipeline": ScalarField(case.truth.spec, fn(case))}
    lo, hi = float(case.truth.values.min()), float(case.truth.values.max())
    for name, f in fields.items():
        stem = out_dir / f"{case.case_id}_{name}"
        write_field(f, stem.with_suffix(".tfld"))
        render(stem.with_suffix(".tfld"), stem.with_suffix(".pgm"), lo, hi)


def run_pipeline(cfg: RunConfig) -> dict:
    """gen -> solve -> (pretrain -> posttrain -> supervised -> eval) per seed -> summary."""
    work = Path(cfg.workdir)
    work.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, work)
    data = work / "data"
    mpath = data / "manifest.json"
    if not mpath.is_file():
        gen_layouts(data, cfg.count, cfg.seed, cfg.cells, cfg.grid, cfg.splits, cfg.pack)
    solve_manifest(mpath, cfg.solver,
                   SolveOptions(tolerance=cfg.tolerance, method=cfg.method),
                   cfg.pack, workers=cfg.workers)
    test_cases = load_cases(load_manifest(mpath), "test")
    constant = run_eval(mpath, "test", "constant", t0=cfg.pack.t0, cases=test_cases)
    constant.to_json(work / "report_constant.json")
    per_seed = []
    for seed in cfg.train_seeds:
        sd = work / f"seed_{seed}"
        sd.mkdir(exist_ok=True)
        bb, pre_log = run_pretrain(mpath, cfg, seed, sd / "backbone.ptmw")
        run_posttrain(mpath, sd / "backbone.ptmw", cfg, seed, sd / "head.ptmw")
        run_supervised(mpath, cfg, seed, sd / "supervised.ptmw")
        reports = {name: run_eval(mpath, "test", sd / f"{model}.ptmw", cases=test_cases)
                   for name, model in (("backbone", "backbone"), ("pipeline", "head"),
                                       ("supervised", "supervised"))}
        for name, rep in reports.items():
            rep.to_json(sd / f"report_{name}.json")
        pi, sup = reports["pipeline"].aggregate, reports["supervised"].aggregate
        print(f"seed {seed}\n" + comparison_table([reports["pipeline"], reports["supervised"]]))
        per_seed.append({
            "seed": seed,
            "pipeline": pi, "supervised": sup, "backbone": reports["backbone"].aggregate,
            "mae_improvement": 1 - pi["mae"] / sup["mae"],
            "bmae_improvement": 1 - pi["bmae"] / sup["bmae"],
            "pretrain_epoch_loss": pre_log.epoch_loss,
        })
        if cfg.render and test_cases:
            _render_sample(test_cases[0], sd / "head.ptmw", sd / "render")
    summary = {
        "constant": constant.aggregate,
        "seeds": per_seed,
        "median_mae_improvement": statistics.median(s["mae_improvement"] for s in per_seed),
    }
    (work / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


# -------------------------------------------------------------------- argparse

def _config_arg(path) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _cmd_gen(a):
    sizes = None
    if a.splits:
        vals = [int(x) for x in a.splits.split(",")]
        if len(vals) != len(SPLITS):
            raise ConfigError(f"--splits needs {len(SPLITS)} comma-separated counts")
        sizes = dict(zip(SPLITS, vals))
    gen_layouts(a.out, a.count, a.seed, a.cells, a.grid, sizes)


def _cmd_solve(a):
    opts = SolveOptions(tolerance=a.tol, method=a.method)
    solve_manifest(a.manifest, a.solver, opts, _config_arg(a.config).pack, a.force, a.workers,
                   a.scheme)


def _cmd_pretrain(a):
    cfg = _config_arg(a.config)
    _, tlog = run_pretrain(a.manifest, cfg, a.seed, a.out_model, a.log)
    print(json.dumps(tlog.summary()))


def _cmd_posttrain(a):
    cfg = _config_arg(a.config)
    _, tlog = run_posttrain(a.manifest, a.backbone, cfg, a.seed, a.out_model, a.log)
    print(json.dumps(tlog.summary()))


def _cmd_supervised(a):
    cfg = _config_arg(a.config)
    _, tlog = run_supervised(a.manifest, cfg, a.seed, a.out_model, a.log)
    print(json.dumps(tlog.summary()))


def _cmd_eval(a):
    report = run_eval(a.manifest, a.split, a.model, a.backbone)
    report.to_json(a.report)
    if a.csv:
        report.to_csv(a.csv)
    reports = [report]
    if a.compare:
        other = run_eval(a.manifest, a.split, a.compare, a.compare_backbone)
        other.to_json(Path(a.report).with_suffix(".compare.json"))
        reports.append(other)
    print(comparison_table(reports))


def _cmd_render(a):
    render(a.field, a.out, a.min, a.max)


def _cmd_run(a):
    cfg = load_run_config(a.config)
    if a.workdir:
        cfg.workdir = a.workdir
    summary = run_pipeline(cfg)
    print(f"median MAE improvement over {len(summary['seeds'])} seed(s): "
          f"{summary['median_mae_improvement'] * 100:.1f}%")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="packthermal",
                                description="Battery-pack temperature surrogate pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-layouts", help="generate random layouts and a manifest")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cells", type=int, default=8)
    g.add_argument("--grid", type=int, default=64, help="pixels per side")
    g.add_argument("--splits", help="pretrain,labeled,val,test counts, rescaled to --count")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    s = sub.add_parser("solve", help="compute temperature fields for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--solver", choices=SOLVERS, default="reference")
    s.add_argument("--scheme", choices=("reference", "lowfi"), default="reference",
                   help="system solved by --solver dense")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--method", choices=("iterative", "sparse"), default="iterative")
    s.add_argument("--force", action="store_true", help="re-solve already solved cases")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--config", help="run config JSON (pack constants)")
    s.set_defaults(func=_cmd_solve)

    for name, func, help_ in (("pretrain", _cmd_pretrain, "physics-informed backbone training"),
                              ("posttrain", _cmd_posttrain, "projection-head training"),
                              ("train-supervised", _cmd_supervised, "supervised baseline")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--manifest", required=True)
        t.add_argument("--config")
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--out-model", required=True)
        t.add_argument("--log", help="step log (JSON lines); default <out-model>.log.jsonl")
        if name == "posttrain":
            t.add_argument("--backbone", required=True)
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="score a model on a split")
    e.add_argument("--model", required=True,
                   help="PTMW model, or 'truth' / 'constant' for reference predictors")
    e.add_argument("--backbone", help="backbone for a projection-head model")
    e.add_argument("--compare", help="second model for a side-by-side table")
    e.add_argument("--compare-backbone")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--csv")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("render", help="write a field as a grayscale PGM")
    r.add_argument("--field", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--min", type=float)
    r.add_argument("--max", type=float)
    r.set_defaults(func=_cmd_render)

    u = sub.add_parser("run", help="run the whole pipeline from one config file")
    u.add_argument("--config", required=True)
    u.add_argument("--workdir", help="override the config's workdir")
    u.set_defaults(func=_cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
