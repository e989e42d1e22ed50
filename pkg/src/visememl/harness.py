"""Experiment campaigns: the loss-ablation matrix and the silent-data sweep.

A campaign writes one directory per run::

    <out>/<name>/<spec>/<seed>/result.csv    rates, status, timing
    <out>/<name>/<spec>/<seed>/epochs.csv    per-epoch losses
    <out>/<name>/<spec>/<seed>/checkpoint.bin

plus ``<out>/<name>/language/checkpoint.bin`` for the shared language model
and the rendered reports (``table.md``/``table.csv``, ``sweep.md``/``sweep.csv``).
Reports are built only from the ``result.csv`` files, so ``report`` can
rebuild them later and identical configurations give identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .config import CampaignConfig
from .losses import LossConfig
from .metrics import ver, wer
from .models import (LanguageConfig, LanguageModel, VisualConfig, VisualModel, load_checkpoint,
                     save_checkpoint)
from .synth import Dataset, GenConfig, SpeechType, gen_dataset, reduce_silent
from .training import (EpochLog, TrainConfig, by_type, max_length, predict_visemes, train_language,
                       train_visual)
from .viseme_map import PAD

BASELINE = "NCE+SCE"
FULL = "NCE+SCE+WKL+NKL+SKL"
TABLE_ROWS = (
    "NCE",
    "NCE+SCE",
    "NCE+SCE+NKL",
    "NCE+SCE+SKL",
    "NCE+SCE+NKL+SKL",
    "NCE+SCE+KL",
    "NCE+SCE+KL+NKL",
    "NCE+SCE+KL+SKL",
    "NCE+SCE+KL+NKL+SKL",
    "NCE+SCE+WKL",
    "NCE+SCE+WKL+NKL",
    "NCE+SCE+WKL+SKL",
    "NCE+SCE+WKL+NKL+SKL",
)
RATE_KEYS = ("ver_normal", "ver_silent", "wer_normal", "wer_silent")
RESULT_FIELDS = ("spec", "loss", "study", "fraction", "seed", "status", *RATE_KEYS,
                 "n_normal", "n_silent", "best_epoch", "seconds", "error")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    loss: LossConfig
    gen: GenConfig = GenConfig()
    train: TrainConfig = TrainConfig()
    visual: VisualConfig = VisualConfig()
    repeats: int = 5
    seeds: tuple[int, ...] = ()
    fraction: float = 1.0
    study: str = "single"

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if not self.seeds:
            object.__setattr__(self, "seeds", tuple(range(self.repeats)))
        if len(self.seeds) != self.repeats:
            raise ValueError("need exactly `repeats` seeds")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if not self.name or "/" in self.name:
            raise ValueError(f"bad spec name {self.name!r}")


@dataclass
class RunResult:
    spec: str
    seed: int
    loss: str = ""
    study: str = "single"
    fraction: float = 1.0
    status: str = "ok"
    ver_normal: float = math.nan
    ver_silent: float = math.nan
    wer_normal: float = math.nan
    wer_silent: float = math.nan
    n_normal: int = 0
    n_silent: int = 0
    best_epoch: int = 0
    seconds: float = 0.0
    error: str = ""
    epochs: list[EpochLog] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def row(self) -> dict[str, str]:
        out = {}
        for k in RESULT_FIELDS:
            v = getattr(self, k)
            out[k] = repr(v) if isinstance(v, float) else str(v)
        return out


# datasets are regenerated inside each worker; cache per process
@functools.lru_cache(maxsize=4)
def _dataset(gen: GenConfig) -> Dataset:
    return gen_dataset(gen)


def run_dataset(gen: GenConfig, fraction: float, seed: int) -> Dataset:
    """The training data of one run: the campaign dataset with silent data reduced."""
    ds = _dataset(gen)
    return ds if fraction == 1.0 else reduce_silent(ds, fraction, seed)


def _language_inputs(model: VisualModel, utts, L):
    return [p if p else [PAD] for p in predict_visemes(model, utts, L)]


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_epochs(path: Path, log: Sequence[EpochLog]) -> None:
    terms = sorted({k for e in log for k in e.terms})
    fields = ["epoch", "lr", "train_loss", "val_loss", *[f"term_{t}" for t in terms], "skipped"]
    rows = []
    for e in log:
        row = {"epoch": e.epoch, "lr": repr(e.lr), "train_loss": repr(e.train_loss),
               "val_loss": repr(e.val_loss), "skipped": e.skipped}
        row.update({f"term_{t}": repr(e.terms.get(t, math.nan)) for t in terms})
        rows.append(row)
    _write_csv(path, fields, rows)


def _visual_job(spec: ExperimentSpec, seed: int, run_dir: str | None) -> RunResult:
    """Train and score one visual model; WER is filled in later."""
    start = time.perf_counter()
    res = RunResult(spec.name, seed, spec.loss.label, spec.study, spec.fraction)
    try:
        ds = run_dataset(spec.gen, spec.fraction, seed)
        res.n_normal, res.n_silent = ds.n_normal, ds.n_silent
        loss = dataclasses.replace(spec.loss, n_normal=max(ds.n_normal, 1), n_silent=max(ds.n_silent, 1))
        model = VisualModel(dataclasses.replace(spec.visual, input_dim=spec.gen.feature_dim), seed=seed)
        tr = train_visual(model, ds, loss, spec.train.replace(seed=seed))
        res.epochs, res.best_epoch = tr.log, tr.best_epoch
        L = max_length(ds)
        for stype in SpeechType:
            test = by_type(ds.test, stype)
            setattr(res, f"ver_{stype.value}", ver([u.labels for u in test], predict_visemes(model, test, L)))
        if run_dir is not None:
            d = Path(run_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(d / "checkpoint.bin", model.state_dict())
            _write_epochs(d / "epochs.csv", tr.log)
    except (FloatingPointError, ad.NonFiniteError) as exc:
        res.status, res.error = "failed", f"{type(exc).__name__}: {exc}"
    res.seconds = time.perf_counter() - start
    return res


def fit_language_model(visual: VisualModel, ds: Dataset, language: LanguageConfig,
                       cfg: TrainConfig) -> LanguageModel:
    """Train the word decoder on the visual model's normal-speech predictions."""
    L = max_length(ds)
    train = by_type(ds.train, SpeechType.NORMAL)
    val = by_type(ds.val, SpeechType.NORMAL)
    lm = LanguageModel(language, seed=cfg.seed)
    train_language(lm, _language_inputs(visual, train, L), [u.words for u in train],
                   _language_inputs(visual, val, L), [u.words for u in val], cfg)
    return lm


def score_words(lm: LanguageModel, visual: VisualModel, ds: Dataset) -> dict[str, float]:
    L = max_length(ds)
    out = {}
    for stype in SpeechType:
        test = by_type(ds.test, stype)
        hyp = lm.greedy(_language_inputs(visual, test, L)).words
        out[f"wer_{stype.value}"] = wer([u.words for u in test], hyp)
    return out


def _run_dir(root: Path | None, spec: ExperimentSpec, seed: int) -> str | None:
    return None if root is None else str(root / spec.name / str(seed))


def _execute(jobs, workers: int | None):
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(jobs) == 1:
        return [_visual_job(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(_visual_job, *j) for j in jobs]
        return [f.result() for f in futures]


def _finish(results: list[RunResult], specs: dict[str, ExperimentSpec], lm: LanguageModel,
            root: Path | None) -> None:
    """Fill in WER from saved or retrained models and write each result.csv."""
    for res in results:
        spec = specs[res.spec]
        if res.ok:
            ds = run_dataset(spec.gen, spec.fraction, res.seed)
            d = _run_dir(root, spec, res.seed)
            if d is not None:
                model = VisualModel.from_state(load_checkpoint(Path(d) / "checkpoint.bin"))
            else:
                model = _retrain(spec, res.seed)
            for k, v in score_words(lm, model, ds).items():
                setattr(res, k, v)
        if root is not None:
            d = Path(_run_dir(root, spec, res.seed))
            d.mkdir(parents=True, exist_ok=True)
            _write_csv(d / "result.csv", RESULT_FIELDS, [res.row()])


def _retrain(spec: ExperimentSpec, seed: int) -> VisualModel:
    ds = run_dataset(spec.gen, spec.fraction, seed)
    loss = dataclasses.replace(spec.loss, n_normal=max(ds.n_normal, 1), n_silent=max(ds.n_silent, 1))
    model = VisualModel(dataclasses.replace(spec.visual, input_dim=spec.gen.feature_dim), seed=seed)
    train_visual(model, ds, loss, spec.train.replace(seed=seed))
    return model


def _language_for(results, specs, root, language, lm_cfg, reference: str | None = None):
    """Language model fitted on the first successful run of ``reference``
    (the baseline when present, otherwise the first spec)."""
    order = [r for r in results if r.ok]
    if not order:
        return None
    pick = [r for r in order if r.spec == reference] or order
    ref = pick[0]
    spec = specs[ref.spec]
    d = _run_dir(root, spec, ref.seed)
    if d is not None:
        visual = VisualModel.from_state(load_checkpoint(Path(d) / "checkpoint.bin"))
    else:
        visual = _retrain(spec, ref.seed)
    lm = fit_language_model(visual, _dataset(spec.gen), language, lm_cfg)
    if root is not None:
        (root / "language").mkdir(parents=True, exist_ok=True)
        save_checkpoint(root / "language" / "checkpoint.bin", lm.state_dict())
    return lm


def run_specs(specs: Sequence[ExperimentSpec], out_dir: str | Path | None = None,
              language: LanguageConfig = LanguageConfig(), lm_train: TrainConfig = TrainConfig.language_defaults(),
              workers: int | None = 1, reference: str | None = BASELINE) -> list[RunResult]:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("spec names must be unique within a campaign")
    root = Path(out_dir) if out_dir is not None else None
    by_name = {s.name: s for s in specs}
    jobs = [(s, seed, _run_dir(root, s, seed)) for s in specs for seed in s.seeds]
    results = _execute(jobs, workers)
    lm = _language_for(results, by_name, root, language, lm_train, reference)
    _finish(results, by_name, lm, root)
    return results


def run_experiment(spec: ExperimentSpec, out_dir: str | Path | None = None,
                   language: LanguageConfig = LanguageConfig(),
                   lm_train: TrainConfig = TrainConfig.language_defaults(),
                   workers: int | None = 1) -> list[RunResult]:
    """One result per seed. The word decoder is fitted on this spec's first run."""
    return run_specs([spec], out_dir, language, lm_train, workers, reference=spec.name)


# campaigns -------------------------------------------------------------------

def _spec(cfg: CampaignConfig, terms: str, name: str | None = None, fraction: float = 1.0,
          study: str = "single") -> ExperimentSpec:
    weights = {t: w for t, w in cfg.weights.items() if t in terms.split("+")}
    return ExperimentSpec(name or terms, LossConfig.parse(terms, weights=weights), cfg.gen, cfg.train,
                          cfg.visual, cfg.repeats, cfg.seeds, fraction, study)


def table_specs(cfg: CampaignConfig) -> list[ExperimentSpec]:
    return [_spec(cfg, row, study="table") for row in TABLE_ROWS]


def sweep_specs(cfg: CampaignConfig) -> list[ExperimentSpec]:
    return [_spec(cfg, terms, f"{terms}@{f:g}", f, "sweep")
            for f in sorted(cfg.fractions) for terms in (BASELINE, FULL)]


def run_table_matrix(cfg: CampaignConfig) -> list[RunResult]:
    results = run_specs(table_specs(cfg), cfg.directory, cfg.language, cfg.lm_train, cfg.workers)
    write_reports(cfg.directory, results)
    return results


def run_silent_sweep(cfg: CampaignConfig) -> list[RunResult]:
    specs = sweep_specs(cfg)
    reference = f"{BASELINE}@1" if 1.0 in cfg.fractions else specs[-2].name
    results = run_specs(specs, cfg.directory, cfg.language, cfg.lm_train, cfg.workers, reference)
    write_reports(cfg.directory, results)
    return results


# reports ---------------------------------------------------------------------

def read_results(campaign_dir: str | Path) -> list[RunResult]:
    rows = []
    for path in sorted(Path(campaign_dir).glob("*/*/result.csv")):
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append(RunResult(
                    spec=row["spec"], seed=int(row["seed"]), loss=row["loss"], study=row["study"],
                    fraction=float(row["fraction"]), status=row["status"],
                    **{k: float(row[k]) for k in RATE_KEYS},
                    n_normal=int(row["n_normal"]), n_silent=int(row["n_silent"]),
                    best_epoch=int(row["best_epoch"]), seconds=float(row["seconds"]), error=row["error"],
                ))
    return rows


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _sort_key(r: RunResult):
    return (r.fraction, r.spec, r.seed)


def table_rows(results: Sequence[RunResult]) -> list[dict]:
    """Per-loss mean/std in percent, ordered like the ablation table."""
    ok = [r for r in results if r.study == "table" and r.ok]
    rows = []
    losses = [t for t in TABLE_ROWS if any(r.loss == t for r in ok)]
    for loss in losses:
        runs = sorted((r for r in ok if r.loss == loss), key=_sort_key)
        row = {"loss": loss, "runs": len(runs)}
        for k in RATE_KEYS:
            m, s = mean_std([100 * getattr(r, k) for r in runs])
            row[f"{k}_mean"], row[f"{k}_std"] = m, s
        rows.append(row)
    return rows


def sweep_rows(results: Sequence[RunResult]) -> list[dict]:
    ok = [r for r in results if r.study == "sweep" and r.ok]
    rows = []
    for frac in sorted({r.fraction for r in ok}):
        row = {"fraction": frac}
        for tag, loss in (("baseline", BASELINE), ("full", FULL)):
            runs = sorted((r for r in ok if r.fraction == frac and r.loss == loss), key=_sort_key)
            row[f"{tag}_runs"] = len(runs)
            row[f"{tag}_n_silent"] = runs[0].n_silent if runs else 0
            row[f"{tag}_m"], row[f"{tag}_sigma"] = mean_std([100 * r.ver_silent for r in runs])
        rows.append(row)
    return rows


def _fmt(x: float, digits: int) -> str:
    return "nan" if math.isnan(x) else f"{x:.{digits}f}"


def _failures_md(results) -> list[str]:
    failed = sorted((r for r in results if not r.ok), key=_sort_key)
    lines = ["", "## Failures", ""]
    if not failed:
        return lines + ["none"]
    lines += ["| spec | seed | error |", "|---|---|---|"]
    lines += [f"| {r.spec} | {r.seed} | {r.error} |" for r in failed]
    return lines


def table_markdown(results: Sequence[RunResult]) -> str:
    lines = ["# Loss ablation (rates in %, mean ± std over seeds)", "",
             "| loss | runs | VER normal | VER silent | WER normal | WER silent |",
             "|---|---|---|---|---|---|"]
    for row in table_rows(results):
        cells = [f"{_fmt(row[f'{k}_mean'], 2)} ± {_fmt(row[f'{k}_std'], 2)}" for k in RATE_KEYS]
        lines.append(f"| {row['loss']} | {row['runs']} | " + " | ".join(cells) + " |")
    return "\n".join(lines + _failures_md([r for r in results if r.study == "table"])) + "\n"


def sweep_markdown(results: Sequence[RunResult]) -> str:
    lines = ["# Silent VER (%) against the retained fraction of silent training data", "",
             "| fraction | N_S | baseline m | baseline σ | full m | full σ |",
             "|---|---|---|---|---|---|"]
    for row in sweep_rows(results):
        lines.append(f"| {row['fraction']:g} | {row['full_n_silent']} | {_fmt(row['baseline_m'], 2)} | "
                     f"{_fmt(row['baseline_sigma'], 2)} | {_fmt(row['full_m'], 2)} | {_fmt(row['full_sigma'], 2)} |")
    return "\n".join(lines + _failures_md([r for r in results if r.study == "sweep"])) + "\n"


def _csv_text(rows: list[dict], fields: Sequence[str], failures) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in fields])
    for r in sorted(failures, key=_sort_key):
        w.writerow([f"# failed {r.spec} seed {r.seed}: {r.error}"])
    return buf.getvalue()


def table_csv(results: Sequence[RunResult]) -> str:
    fields = ["loss", "runs"] + [f"{k}_{s}" for k in RATE_KEYS for s in ("mean", "std")]
    return _csv_text(table_rows(results), fields, [r for r in results if r.study == "table" and not r.ok])


def sweep_csv(results: Sequence[RunResult]) -> str:
    fields = ["fraction", "baseline_n_silent", "baseline_runs", "baseline_m", "baseline_sigma",
              "full_n_silent", "full_runs", "full_m", "full_sigma"]
    return _csv_text(sweep_rows(results), fields, [r for r in results if r.study == "sweep" and not r.ok])


def render(results: Sequence[RunResult], fmt: str = "md") -> dict[str, str]:
    """Reports for every study present in ``results``; keys are file names."""
    if fmt not in ("md", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = {}
    studies = {r.study for r in results}
    if "table" in studies:
        out[f"table.{fmt}"] = table_markdown(results) if fmt == "md" else table_csv(results)
    if "sweep" in studies:
        out[f"sweep.{fmt}"] = sweep_markdown(results) if fmt == "md" else sweep_csv(results)
    return out


def write_reports(campaign_dir: str | Path, results: Sequence[RunResult] | None = None,
                  formats: Sequence[str] = ("md", "csv")) -> dict[str, str]:
    campaign_dir = Path(campaign_dir)
    if results is None:
        results = read_results(campaign_dir)
    written = {}
    for fmt in formats:
        for name, text in render(results, fmt).items():
            (campaign_dir / name).write_text(text)
            written[name] = text
    return written
