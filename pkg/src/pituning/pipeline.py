"""End-to-end orchestration: data, population tuning, distillation, per-user device tuning, reports."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ExperimentConfig, config_to_text
from .data import (
    Dataset,
    DatasetSchema,
    IntentDistribution,
    WindowArrays,
    chronological_split,
    compute_intent_distribution,
    generate_synthetic_population,
    load_dataset,
    make_synthetic_spec,
    window_sequences,
)
from .device import ForgetPlan, finetune_device, manage_intents, unlearn
from .distill import train_student
from .metrics import MetricsReport, mean_report, report_from_scores
from .model import ModelCheckpoint, PredictorConfig, load_checkpoint, predict_logits, predict_proba
from .population import train_population
from .tree import feature_names, predict_baseline, sequence_features, train_baseline, write_feature_matrix

log = logging.getLogger(__name__)

ARMS = ("student", "finetune_only", "pituning")
TREE_ARM = "tree"


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunPaths:
    root: Path

    def __getattr__(self, name):
        files = {
            "config": "config.txt", "seeds": "seeds.txt", "population_data": "data/population.csv",
            "device_data": "data/device.csv", "teacher": "teacher.ckpt", "student": "student.ckpt",
            "p_out": "p_out.txt", "p_pop": "p_pop.txt", "population_report": "population_report.txt",
            "distill_report": "distill_report.txt", "plans": "plans.txt", "metrics_ledger": "metrics_ledger.tsv",
            "unlearn_ledger": "unlearn_ledger.tsv", "results": "results.tsv", "manifest": "manifest.txt",
            "failed": "failed_stage.txt",
        }
        if name in files:
            return self.root / files[name]
        raise AttributeError(name)

    def user(self, uid: int) -> Path:
        return self.root / "users" / str(uid)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _vector_text(v) -> str:
    return " ".join(repr(float(x)) for x in v) + "\n"


def read_vector(path) -> np.ndarray:
    return np.array([float(x) for x in Path(path).read_text().split()])


# -- data -----------------------------------------------------------------------------------------

def schema_of(cfg: ExperimentConfig, n_users: int | None = None) -> DatasetSchema:
    d = cfg.data
    return DatasetSchema(n_users or d.n_users, d.n_locations, d.n_timeslots, d.n_events, d.n_intents, d.window)


def synthetic_specs(cfg: ExperimentConfig):
    d = cfg.data
    spec = make_synthetic_spec(schema_of(cfg), n_clusters=d.n_clusters, n_tail=d.n_tail, tail_weight=d.tail_weight,
                               tail_focus=d.tail_focus, noise_rate=d.noise_rate, switch_rate=d.switch_rate,
                               events_per_user=d.events_per_user, seed=cfg.stage_seed("data"))
    weights = list(spec.cluster_weights)
    if d.device_tail_weight >= 0:
        head = (1.0 - d.device_tail_weight) / (len(weights) - 1)
        weights = [head] * (len(weights) - 1) + [d.device_tail_weight]
    device = replace(spec, schema=schema_of(cfg, d.device_users), cluster_weights=weights,
                     events_per_user=d.device_events, seed=cfg.stage_seed("device_data"))
    return spec, device


def stage_data(cfg: ExperimentConfig, paths: RunPaths) -> tuple[Dataset, Dataset]:
    paths.population_data.parent.mkdir(parents=True, exist_ok=True)
    if cfg.data.path:
        shutil.copyfile(cfg.data.path, paths.population_data)
        shutil.copyfile(cfg.data.device_path, paths.device_data)
    else:
        pop_spec, dev_spec = synthetic_specs(cfg)
        generate_synthetic_population(pop_spec).save(paths.population_data)
        generate_synthetic_population(dev_spec).save(paths.device_data)
    return load_run_data(cfg, paths)


def load_run_data(cfg: ExperimentConfig, paths: RunPaths) -> tuple[Dataset, Dataset]:
    pop = load_dataset(paths.population_data)
    dev = load_dataset(paths.device_data)
    return pop, dev


def population_arrays(dataset: Dataset, window: int, val_fraction: float) -> tuple[WindowArrays, WindowArrays]:
    """Per-user chronological hold-out: the last ``val_fraction`` of each user's windows validate."""
    train, val = [], []
    for uid in dataset.user_ids():
        a = WindowArrays.from_windows(window_sequences(dataset.users[uid], window), window)
        i_tr, i_va = chronological_split(len(a), [1.0 - val_fraction, val_fraction])
        train.append(a.take(i_tr))
        val.append(a.take(i_va))
    if not train:
        raise ValueError("population dataset has no users")
    return WindowArrays.concat(train), WindowArrays.concat(val)


@dataclass
class DeviceSplit:
    train: WindowArrays
    val: WindowArrays
    test: WindowArrays
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def device_split(records, window: int, fractions: Sequence[float], keep: float = 1.0) -> DeviceSplit:
    """Chronological train/val/test split; ``keep < 1`` drops the oldest training windows."""
    a = WindowArrays.from_windows(window_sequences(records, window), window)
    i_tr, i_va, i_te = chronological_split(len(a), fractions)
    if keep < 1.0 and len(i_tr):
        n = max(1, int(math.ceil(keep * len(i_tr))))
        i_tr = i_tr[len(i_tr) - n:]
    return DeviceSplit(a.take(i_tr), a.take(i_va), a.take(i_te), i_tr, i_va, i_te)


# -- population and distillation ----------------------------------------------------------------

def model_config(cfg: ExperimentConfig) -> PredictorConfig:
    m = cfg.model
    return PredictorConfig.for_schema(schema_of(cfg), embed_dim=m.embed_dim, n_layers=m.teacher_layers,
                                      n_heads=m.n_heads, dropout=m.dropout, attention_hidden=m.attention_hidden,
                                      head_hidden=m.head_hidden, use_iat=m.use_iat,
                                      normalize_attention=m.normalize_attention)


def stage_population(cfg: ExperimentConfig, paths: RunPaths, pop: Dataset):
    train, val = population_arrays(pop, cfg.data.window, cfg.data.val_fraction)
    pcfg = replace(cfg.population, seed=cfg.stage_seed("population"))
    teacher, report, p_out = train_population(train, val, model_config(cfg), pcfg)
    p_pop = compute_intent_distribution(train.targets, cfg.data.n_intents)
    teacher.save(paths.teacher)
    _write(paths.p_out, _vector_text(p_out.probs))
    _write(paths.p_pop, _vector_text(p_pop.probs))
    _write(paths.population_report, report.to_text())
    return teacher, report


def stage_distill(cfg: ExperimentConfig, paths: RunPaths, pop: Dataset, teacher: ModelCheckpoint):
    train, val = population_arrays(pop, cfg.data.window, cfg.data.val_fraction)
    dcfg = replace(cfg.distill, seed=cfg.stage_seed("distill"))
    result = train_student(teacher, train, val, dcfg)
    result.checkpoint.save(paths.student)
    text = result.report.to_text() + (f"teacher_params: {result.teacher_params}\n"
                                      f"student_params: {result.param_count}\n")
    _write(paths.distill_report, text)
    return result


# -- device stage ---------------------------------------------------------------------------------

def stage_plan(cfg: ExperimentConfig, paths: RunPaths, dev: Dataset) -> dict[int, ForgetPlan]:
    p_out = IntentDistribution(read_vector(paths.p_out))
    p_pop = IntentDistribution(read_vector(paths.p_pop))
    plans = {}
    for uid in dev.user_ids():
        split = device_split(dev.users[uid], cfg.data.window, cfg.data.device_split, cfg.run.device_fraction)
        if cfg.run.p_in_source == "population":
            p_in = p_pop
        else:
            p_in = compute_intent_distribution(split.train.targets, cfg.data.n_intents, cfg.run.p_in_smoothing)
        plan = manage_intents(p_out, p_pop, p_in, cfg.unlearn.threshold, uid)
        plans[uid] = plan
        _write(paths.user(uid) / "plan.txt", plan.to_text() + "\n")
    _write(paths.plans, "".join(p.to_text() + "\n" for p in plans.values()))
    return plans


def read_plans(path) -> dict[int, ForgetPlan]:
    plans = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            p = ForgetPlan.from_text(line)
            plans[p.user_id] = p
    return plans


@dataclass
class UserResult:
    user_id: int
    reports: dict[str, MetricsReport]
    unlearn_line: str | None
    skipped: str | None = None


def _score(model, arrays: WindowArrays, n_intents: int, ks) -> MetricsReport:
    return report_from_scores(predict_logits(model, arrays), arrays.targets, n_intents, ks)


def tune_user(cfg: ExperimentConfig, student_path: str, uid: int, records, plan: ForgetPlan,
              user_dir: str) -> UserResult:
    torch.set_num_threads(1)
    split = device_split(records, cfg.data.window, cfg.data.device_split, cfg.run.device_fraction)
    if len(split.train) == 0 or len(split.test) == 0:
        return UserResult(uid, {}, None, skipped=f"too few windows ({len(records) - 1})")
    student = load_checkpoint(student_path)
    n_i, ks = cfg.data.n_intents, cfg.eval.ks
    ft_cfg = replace(cfg.finetune, seed=cfg.stage_seed("finetune") + uid)
    reports = {"student": _score(student.model, split.test, n_i, ks)}
    ft, _ = finetune_device(student, split.train, split.val, ft_cfg)
    reports["finetune_only"] = _score(ft.model, split.test, n_i, ks)

    unlearn_line = None
    if cfg.run.unlearning and not plan.is_empty:
        ul_cfg = replace(cfg.unlearn, seed=cfg.stage_seed("unlearn") + uid)
        unlearned, rep = unlearn(student, split.train, split.val, plan, ul_cfg)
        full, _ = finetune_device(unlearned, split.train, split.val, ft_cfg)
        reports["pituning"] = _score(full.model, split.test, n_i, ks)
        unlearn_line = "\t".join(str(x) for x in (
            uid, ",".join(map(str, sorted(plan.forget))), rep.steps, rep.stopped_by_floor,
            repr(rep.pre_forget_ce), repr(rep.post_forget_ce), repr(rep.pre_retain_acc), repr(rep.post_retain_acc)))
        _write(Path(user_dir) / "unlearn.txt", rep.to_text())
    else:
        # no forget set (or unlearning disabled): the full method is plain fine-tuning
        reports["pituning"] = reports["finetune_only"]

    if cfg.run.tree_baseline:
        reports[TREE_ARM] = _tree_arm(cfg, student, records, split, Path(user_dir))
    _write(Path(user_dir) / "metrics.tsv", _report_table(reports))
    return UserResult(uid, reports, unlearn_line)


def _tree_arm(cfg, student: ModelCheckpoint, records, split: DeviceSplit, user_dir: Path) -> MetricsReport:
    n_i = cfg.data.n_intents
    arrays = WindowArrays.from_windows(window_sequences(records, cfg.data.window), cfg.data.window)
    probs = predict_proba(student.model, arrays)
    X, y = sequence_features(records, probs, cfg.data.n_events, cfg.data.n_timeslots)
    names = feature_names(n_i, cfg.data.n_events)
    write_feature_matrix(user_dir / "features.csv", X, names, y)
    tcfg = replace(cfg.tree, seed=cfg.stage_seed("tree"))
    handle = train_baseline(X[split.train_idx], y[split.train_idx], n_i, tcfg,
                            X[split.val_idx], y[split.val_idx])
    scores = predict_baseline(handle, X[split.test_idx])
    return report_from_scores(scores, y[split.test_idx], n_i, cfg.eval.ks)


def _fmt(v: float) -> str:
    return repr(float(v))


def _report_table(reports: dict[str, MetricsReport]) -> str:
    cols = list(next(iter(reports.values())).row())
    lines = ["arm\t" + "\t".join(cols)]
    for arm, rep in reports.items():
        lines.append(arm + "\t" + "\t".join(_fmt(rep.row()[c]) for c in cols))
    return "\n".join(lines) + "\n"


def stage_device(cfg: ExperimentConfig, paths: RunPaths, dev: Dataset, plans: dict[int, ForgetPlan]):
    jobs = [(cfg, str(paths.student), uid, dev.users[uid], plans[uid], str(paths.user(uid)))
            for uid in dev.user_ids()]
    for job in jobs:
        Path(job[-1]).mkdir(parents=True, exist_ok=True)
    if cfg.run.workers > 1:
        with ProcessPoolExecutor(cfg.run.workers) as pool:
            results = list(pool.map(tune_user, *zip(*jobs)))
    else:
        results = [tune_user(*job) for job in jobs]
    results.sort(key=lambda r: r.user_id)
    kept = [r for r in results if r.skipped is None]
    if not kept:
        raise ValueError("no device user had enough data to evaluate")

    arms = list(kept[0].reports)
    cols = list(kept[0].reports[arms[0]].row())
    ledger = ["user\tarm\t" + "\t".join(cols)]
    for r in kept:
        for arm in arms:
            ledger.append(f"{r.user_id}\t{arm}\t" + "\t".join(_fmt(r.reports[arm].row()[c]) for c in cols))
    for r in results:
        if r.skipped:
            ledger.append(f"# user {r.user_id} skipped: {r.skipped}")
    _write(paths.metrics_ledger, "\n".join(ledger) + "\n")
    header = "user\tforget\tsteps\tstopped_by_floor\tpre_forget_ce\tpost_forget_ce\tpre_retain_acc\tpost_retain_acc"
    _write(paths.unlearn_ledger, "\n".join([header] + [r.unlearn_line for r in kept if r.unlearn_line]) + "\n")

    rows = {arm: mean_report([r.reports[arm] for r in kept]) for arm in arms}
    write_results(paths.results, rows, len(kept))
    return rows, kept


def write_results(path: Path, rows: dict[str, dict[str, float]], n_users: int) -> None:
    cols = list(next(iter(rows.values())))
    lines = ["row\t" + "\t".join(cols) + "\tn_users"]
    for arm, row in rows.items():
        lines.append(arm + "\t" + "\t".join(_fmt(row[c]) for c in cols) + f"\t{n_users}")
    _write(path, "\n".join(lines) + "\n")


def read_results(path) -> dict[str, dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")[1:]
    out = {}
    for line in lines[1:]:
        parts = line.split("\t")
        out[parts[0]] = {c: float(v) for c, v in zip(cols, parts[1:])}
    return out


# -- manifest ---------------------------------------------------------------------------------------

REQUIRED = ("config", "seeds", "teacher", "student", "p_out", "p_pop", "plans", "metrics_ledger",
            "unlearn_ledger", "results")


def write_manifest(paths: RunPaths) -> None:
    entries = []
    for p in sorted(paths.root.rglob("*")):
        if p.is_file() and p != paths.manifest:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            entries.append(f"{p.relative_to(paths.root).as_posix()}\t{p.stat().st_size}\t{digest}")
    _write(paths.manifest, "\n".join(entries) + "\n")


def missing_artifacts(root) -> list[str]:
    paths = RunPaths(Path(root))
    missing = [getattr(paths, k).relative_to(paths.root).as_posix() for k in REQUIRED
               if not getattr(paths, k).exists()]
    if paths.plans.exists():
        for uid in read_plans(paths.plans):
            for name in ("plan.txt", "metrics.tsv"):
                if not (paths.user(uid) / name).exists():
                    missing.append(f"users/{uid}/{name}")
    return missing


# -- orchestration ----------------------------------------------------------------------------------

def _seeds_text(cfg: ExperimentConfig) -> str:
    stages = ("data", "device_data", "population", "distill", "unlearn", "finetune", "tree")
    lines = [f"global {cfg.run.seed}"] + [f"{s} {cfg.stage_seed(s)}" for s in stages]
    lines.append("per-user unlearn/finetune seeds add the user id")
    return "\n".join(lines) + "\n"


def run_stage(paths: RunPaths, name: str, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        _write(paths.failed, f"{name}\n{type(exc).__name__}: {exc}\n")
        raise StageFailed(name, exc) from exc


@dataclass
class RunResult:
    root: Path
    rows: dict[str, dict[str, float]]
    teacher_val_prec_w: float = float("nan")
    student_agreement: float = float("nan")


def prepare_run(cfg: ExperimentConfig, out_dir=None) -> RunPaths:
    cfg.validate()
    torch.set_num_threads(1)
    paths = RunPaths(Path(out_dir or cfg.run.out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    if paths.failed.exists():
        paths.failed.unlink()
    _write(paths.config, config_to_text(cfg))
    _write(paths.seeds, _seeds_text(cfg))
    return paths


def run_device_stages(cfg: ExperimentConfig, paths: RunPaths, dev: Dataset):
    plans = run_stage(paths, "plan-forget", stage_plan, cfg, paths, dev)
    rows, _ = run_stage(paths, "tune-device", stage_device, cfg, paths, dev, plans)
    return rows


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Generate/load data, tune the teacher, distil, then personalise and score every device user."""
    paths = prepare_run(cfg, out_dir)
    pop, dev = run_stage(paths, "generate-data", stage_data, cfg, paths)
    teacher, prep = run_stage(paths, "train-population", stage_population, cfg, paths, pop)
    student = run_stage(paths, "distill", stage_distill, cfg, paths, pop, teacher)
    rows = run_device_stages(cfg, paths, dev)
    write_manifest(paths)
    return RunResult(paths.root, rows, prep.extra.get("val_prec_w_best", float("nan")), student.agreement)


# -- sweeps -----------------------------------------------------------------------------------------

SWEEP_AXES = ("device_data_size", "sequence_length")


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float], out_dir=None) -> list[tuple[float, dict]]:
    """Metric rows per value: the data-size axis reruns the device stage, the length axis the whole pipeline."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    root = Path(out_dir or cfg.run.out_dir)
    table = []
    if axis == "device_data_size":
        base = run_pipeline(cfg, root / "base")
        base_paths = RunPaths(base.root)
        for v in values:
            vcfg = _with(cfg, "run", device_fraction=float(v))
            paths = prepare_run(vcfg, root / f"size_{v:g}")
            for name in ("teacher", "student", "p_out", "p_pop"):
                shutil.copyfile(getattr(base_paths, name), getattr(paths, name))
            pop, dev = load_run_data(vcfg, base_paths)
            rows = run_device_stages(vcfg, paths, dev)
            write_manifest(paths)
            table.append((float(v), rows))
    else:
        for v in values:
            vcfg = _with(cfg, "data", window=int(v))
            res = run_pipeline(vcfg, root / f"length_{int(v)}")
            table.append((float(v), res.rows))
    write_sweep(root, axis, table)
    return table


def _with(cfg: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    new = dataclasses.replace(cfg)
    for f in dataclasses.fields(new):
        setattr(new, f.name, dataclasses.replace(getattr(cfg, f.name)))
    setattr(new, section, dataclasses.replace(getattr(new, section), **changes))
    return new


def write_sweep(root: Path, axis: str, table) -> None:
    arms = list(table[0][1])
    cols = list(table[0][1][arms[0]])
    lines = [f"{axis}\tarm\t" + "\t".join(cols)]
    for v, rows in table:
        for arm in arms:
            lines.append(f"{v:g}\t{arm}\t" + "\t".join(_fmt(rows[arm][c]) for c in cols))
    _write(root / "sweep.tsv", "\n".join(lines) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [v for v, _ in table]
    for arm in arms:
        ax.plot(xs, [rows[arm]["prec_w"] for _, rows in table], marker="o", label=arm)
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("weighted precision")
    ax.legend()
    fig.tight_layout()
    fig.savefig(root / "sweep.png", dpi=100, metadata={"Software": None})
    plt.close(fig)


# -- report -----------------------------------------------------------------------------------------

class ReportError(RuntimeError):
    pass


def report(run_dir) -> str:
    """Consolidated, deterministic text report for a run directory."""
    paths = RunPaths(Path(run_dir))
    missing = missing_artifacts(run_dir)
    if len(missing) == len(REQUIRED) and not paths.population_report.exists():
        raise ReportError("no run artifacts found; missing: " + ", ".join(missing))
    out = [f"run: {paths.root.name}"]
    if paths.population_report.exists():
        for line in paths.population_report.read_text().splitlines():
            if line.startswith(("best_epoch", "val_prec_w_best")):
                out.append(f"teacher {line}")
    if paths.distill_report.exists():
        for line in paths.distill_report.read_text().splitlines():
            if line.startswith(("teacher_agreement", "teacher_params", "student_params")):
                out.append(f"student {line}")

    if paths.results.exists():
        rows = read_results(paths.results)
        cols = list(next(iter(rows.values())))
        out.append("")
        out.append("aggregate (mean over device users)")
        out.append(f"{'row':<14}" + "".join(f"{c:>10}" for c in cols))
        for arm, row in rows.items():
            out.append(f"{arm:<14}" + "".join(f"{row[c]:>10.4f}" if c != "n_users" else f"{int(row[c]):>10d}"
                                              for c in cols))
        pairs = [("finetune_only", "student"), ("pituning", "finetune_only"), ("pituning", "student")]
        metric_cols = [c for c in cols if c != "n_users"]
        out.append("")
        out.append("deltas")
        for a, b in pairs:
            if a in rows and b in rows:
                out.append(f"{a} - {b}: " + " ".join(f"{c}={rows[a][c] - rows[b][c]:+.4f}" for c in metric_cols))

    if paths.plans.exists():
        plans = read_plans(paths.plans)
        n = len(plans)
        with_f = sum(not p.is_empty for p in plans.values())
        kinds = {"static": 0, "dynamic": 0, "both": 0}
        for p in plans.values():
            for k in p.provenance.values():
                kinds[k] += 1
        out.append("")
        out.append("forget plans")
        out.append(f"users: {n}")
        out.append(f"users with non-empty forget set: {with_f} ({with_f / max(n, 1):.4f})")
        out.append(f"mean forget set size: {np.mean([len(p.forget) for p in plans.values()]) if n else 0:.4f}")
        out.append("provenance counts: " + " ".join(f"{k}={v}" for k, v in kinds.items()))
    if paths.unlearn_ledger.exists():
        lines = paths.unlearn_ledger.read_text().splitlines()[1:]
        if lines:
            steps = [int(l.split("\t")[2]) for l in lines]
            floors = sum(l.split("\t")[3] == "True" for l in lines)
            out.append(f"unlearning runs: {len(lines)}, mean steps {np.mean(steps):.2f}, stopped by floor {floors}")
    if paths.failed.exists():
        out.append("")
        out.append("failed stage: " + paths.failed.read_text().splitlines()[0])
    if missing:
        out.append("")
        out.append("missing artifacts: " + ", ".join(missing))
    return "\n".join(out) + "\n"

