"""End-to-end run: train or load a model, calibrate every scheme, evaluate, analyze, report.

Each stage writes its artifacts under the run directory together with a
manifest in ``stages/<name>.json`` holding the hash of the stage's inputs.
A stage whose manifest hash still matches (and whose outputs exist) is
skipped, so an interrupted run resumes where it stopped and a changed
input invalidates everything downstream of it.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bias_analysis as ba
from .calibrate import GAMMA_GRID, INTENSITIES, CalibrationResult, calibrate_scheme, generate_batch
from .corpus import Vocabulary, build_vocabulary, load_documents, split_corpus, tokenize
from .errors import EmptyRunDir, InkmarkError, StageError
from .langmodel import NGramModel, train_ngram
from .taskeval import load_task, random_baseline, score_task, task_category
from .util import content_hash, derive_seed, parallel_map, read_json, write_json
from .watermark import WatermarkSpec

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
SCHEMES = ("KGW", "EWD", "SIR")
STAGES = ("train", "calibrate", "evaluate", "analyze", "report")
LENGTH_BUCKETS = ((4, 8), (9, 16), (17, 32), (33, 64))
REPORT_FIELDS = ("scheme", "intensity", "task", "metric", "raw", "unwatermarked_raw", "baseline", "normalized")


@dataclass(frozen=True)
class RunConfig:
    out_dir: str
    model: str | None = None  # model JSON; trained from ``corpus`` when the file is missing
    endpoint: str | None = None
    vocab: str | None = None  # vocabulary JSON for an endpoint; built from ``corpus`` otherwise
    spec: str | None = None  # optional extra watermark evaluated next to the calibrated ones
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    intensity: str = "moderate"
    corpus: tuple[str, ...] = (str(DATA_DIR / "corpus.txt"),)
    tasks_dir: str = str(DATA_DIR / "tasks")
    tasks: tuple[str, ...] = ()  # task file stems; empty means every bundled task
    order: int = 3
    min_count: int = 2
    n_calib: int = 200
    n_ppl: int = 200
    prefix_tokens: int = 16
    snippet_tokens: int = 64
    gamma_grid: tuple[float, ...] = GAMMA_GRID
    key: int | None = None
    k_values: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if (self.model is None) == (self.endpoint is None):
            raise ValueError("set exactly one of model path and endpoint")
        if self.intensity not in INTENSITIES:
            raise ValueError(f"unknown intensity {self.intensity!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        obj = dict(obj)
        for name in ("corpus", "tasks", "gamma_grid", "k_values"):
            if name in obj:
                value = obj[name]
                obj[name] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        return cls(**obj)

    @property
    def watermark_key(self) -> int:
        return self.key if self.key is not None else derive_seed(self.seed, "key") % (1 << 32)

    def seed_for(self, stage: str) -> int:
        return derive_seed(self.seed, stage)


class Run:
    """Stage bookkeeping for one run directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "stages").mkdir(exist_ok=True)

    def manifest_path(self, stage: str) -> Path:
        return self.root / "stages" / f"{stage}.json"

    def is_fresh(self, stage: str, input_hash: str) -> bool:
        path = self.manifest_path(stage)
        if not path.exists():
            return False
        manifest = read_json(path)
        return manifest.get("input_hash") == input_hash and all(
            (self.root / o).exists() for o in manifest.get("outputs", [])
        )

    def finish(self, stage: str, input_hash: str, outputs: Sequence[Path]) -> str:
        rel = sorted(str(Path(o).relative_to(self.root)) for o in outputs)
        write_json(self.manifest_path(stage), {"stage": stage, "input_hash": input_hash, "outputs": rel})
        return self.output_hash(stage)

    def output_hash(self, stage: str) -> str:
        manifest = read_json(self.manifest_path(stage))
        return content_hash(*[self.root / o for o in manifest["outputs"]])


# model ---------------------------------------------------------------------


def _documents(paths: Sequence[str]) -> list[str]:
    docs = []
    for p in paths:
        docs.extend(load_documents(p))
    return docs


def train_model(corpus_paths: Sequence[str], order: int = 3, min_count: int = 2) -> NGramModel:
    docs = _documents(corpus_paths)
    vocab = build_vocabulary(docs, min_count)
    return train_ngram([tokenize(d, vocab) for d in docs], vocab, order)


def open_model(config: RunConfig, vocab: Vocabulary | None = None):
    if config.endpoint is not None:
        from .remote import RemoteModel

        if vocab is None:
            if config.vocab is not None:
                vocab = Vocabulary.from_json(Path(config.vocab).read_text(encoding="utf-8"))
            else:
                vocab = build_vocabulary(_documents(config.corpus), config.min_count)
        return RemoteModel(config.endpoint, vocab)
    return NGramModel.load(config.model)


# stages --------------------------------------------------------------------


def _stage_train(run: Run) -> str:
    cfg = run.config
    if cfg.endpoint is not None:
        sources = [Path(cfg.vocab)] if cfg.vocab else list(map(Path, cfg.corpus))
        h = content_hash("endpoint", cfg.endpoint, *sources, cfg.min_count)
        if not run.is_fresh("train", h):
            vocab = open_model(cfg).vocab
            path = run.root / "vocab.json"
            path.write_text(vocab.to_json() + "\n", encoding="utf-8")
            run.finish("train", h, [path])
        return run.output_hash("train")
    model_path = Path(cfg.model)
    if model_path.exists():
        h = content_hash("load", model_path)
    else:
        h = content_hash("train", *map(Path, cfg.corpus), cfg.order, cfg.min_count)
    if not run.is_fresh("train", h):
        if not model_path.exists():
            log.info("training %d-gram model on %s", cfg.order, ", ".join(cfg.corpus))
            model_path.parent.mkdir(parents=True, exist_ok=True)
            train_model(cfg.corpus, cfg.order, cfg.min_count).save(model_path)
        vocab = NGramModel.load(model_path).vocab
        path = run.root / "vocab.json"
        path.write_text(vocab.to_json() + "\n", encoding="utf-8")
        run.finish("train", h, [path])
    return content_hash(run.output_hash("train"), model_path)


def _calibrate_one(scheme: str, cfg: RunConfig, model, prefixes, snippets, negatives) -> dict:
    result = calibrate_scheme(
        model, scheme, cfg.intensity, prefixes, snippets, negatives,
        key=cfg.watermark_key, seed=cfg.seed_for("calibrate"), gamma_grid=cfg.gamma_grid,
    )
    return result.to_dict()


def _stage_calibrate(run: Run, model, upstream: str) -> str:
    cfg = run.config
    h = content_hash(
        upstream, *map(Path, cfg.corpus), cfg.intensity, cfg.n_calib, cfg.n_ppl, cfg.prefix_tokens,
        cfg.snippet_tokens, list(cfg.gamma_grid), cfg.watermark_key, cfg.seed_for("calibrate"),
    )
    if run.is_fresh("calibrate", h):
        return run.output_hash("calibrate")
    docs = _documents(cfg.corpus)
    split = split_corpus(
        docs, cfg.n_calib, cfg.n_ppl, cfg.seed_for("split"), model.vocab, cfg.prefix_tokens, cfg.snippet_tokens
    )
    gen_length = INTENSITIES[cfg.intensity].gen_length
    negatives = generate_batch(model, None, split.calibration_prefixes, gen_length, cfg.seed_for("calibrate"), "negative")
    out = run.root / "calibration"
    out.mkdir(exist_ok=True)
    job = partial(
        _calibrate_one, cfg=cfg, model=model, prefixes=split.calibration_prefixes,
        snippets=split.perplexity_snippets, negatives=negatives,
    )
    results = parallel_map(job, SCHEMES, cfg.workers)
    paths = []
    for scheme, result in zip(SCHEMES, results):
        path = out / f"{scheme}.json"
        write_json(path, result)
        paths.append(path)
    write_json(out / "split.json", {"calibration_ids": split.calibration_ids, "perplexity_ids": split.perplexity_ids})
    return run.finish("calibrate", h, paths + [out / "split.json"])


def run_specs(run: Run) -> list[tuple[str, WatermarkSpec]]:
    """(intensity label, spec) for every watermark the run evaluates."""
    specs = []
    for scheme in SCHEMES:
        result = CalibrationResult.from_dict(read_json(run.root / "calibration" / f"{scheme}.json"))
        specs.append((run.config.intensity, result.spec))
    if run.config.spec is not None:
        specs.append(("fixed", WatermarkSpec.from_dict(read_json(run.config.spec))))
    return specs


def task_files(cfg: RunConfig) -> list[Path]:
    root = Path(cfg.tasks_dir)
    if cfg.tasks:
        return [root / f"{name}.jsonl" for name in cfg.tasks]
    return sorted(root.glob("*.jsonl"))


def evaluation_record(model, spec: WatermarkSpec | None, intensity: str, task_path: Path) -> dict:
    task = load_task(task_path)
    report = score_task(model, spec, task)
    return {
        "scheme": spec.scheme if spec is not None else "none",
        "intensity": intensity,
        "task": task_path.stem,
        "category": task_category(task),
        "spec": spec.to_dict() if spec is not None else None,
        "score": report.to_dict(),
    }


def _evaluate_job(job, model) -> dict:
    intensity, spec, path = job
    return evaluation_record(model, spec, intensity, path)


def _stage_evaluate(run: Run, model, upstream: str) -> str:
    cfg = run.config
    files = task_files(cfg)
    h = content_hash(upstream, *files, Path(cfg.spec) if cfg.spec else "")
    if run.is_fresh("evaluate", h):
        return run.output_hash("evaluate")
    out = run.root / "eval"
    out.mkdir(exist_ok=True)
    jobs = [(intensity, spec, f) for intensity, spec in run_specs(run) for f in files]
    records = parallel_map(partial(_evaluate_job, model=model), jobs, cfg.workers)
    paths = []
    for (intensity, spec, f), rec in zip(jobs, records):
        path = out / f"{spec.scheme}__{intensity}__{f.stem}.json"
        write_json(path, rec)
        paths.append(path)
    return run.finish("evaluate", h, paths)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _artifact(out: Path, stem: str, name: str) -> Path:
    return out / (f"{stem}__{name}" if stem else name)


def analyze_cls(model, spec: WatermarkSpec, task, out: Path, stem: str) -> dict:
    gamma = spec.nominal_gamma
    outcomes = ba.enumerate_partitions(model, task, ba.effective_label_delta(spec), gamma)
    base = random_baseline(task)
    path = _artifact(out, stem, "partitions.csv")
    _write_csv(
        path, ("bitstring", "probability", "accuracy", "normalized"),
        [(o.bitstring, repr(o.probability), repr(o.accuracy), "" if o.normalized is None else repr(o.normalized))
         for o in outcomes],
    )
    return {
        "expected_accuracy": ba.expected_accuracy(outcomes),
        "worst_case_accuracy": ba.worst_case_accuracy(outcomes),
        "best_case_accuracy": ba.best_case_accuracy(outcomes),
        "random_baseline": base,
        "probability_of_random_collapse": ba.probability_of_random_collapse(outcomes, base),
        "files": [path.name],
    }


def analyze_mcq(model, spec: WatermarkSpec, task, out: Path, stem: str, k_values: Sequence[int]) -> dict:
    orders = ba.preference_orders(model, spec, task)
    n_min = min(len(ex.choices) for ex in task)
    rows = ba.rank_stability(model, spec, task, [k for k in k_values if k <= n_min], orders=orders)
    path = _artifact(out, stem, "stability.csv")
    _write_csv(
        path, ("variant", "k", "proportion_unchanged", "random_permutation_baseline"),
        [(r.variant, r.k, repr(r.proportion_unchanged), repr(r.random_permutation_baseline)) for r in rows],
    )
    by_len = ba.stability_by_length(model, spec, task, LENGTH_BUCKETS, orders=orders)
    len_path = _artifact(out, stem, "stability_by_length.csv")
    _write_csv(len_path, ("bucket", "n", "k", "proportion"), [(r["bucket"], r["n"], r["k"], repr(r["proportion"])) for r in by_len])
    return {
        "top1_set_stability": next(r.proportion_unchanged for r in rows if r.k == 1 and r.variant == "set"),
        "stability_by_length": [[r["bucket"], r["proportion"]] for r in by_len],
        "files": [path.name, len_path.name],
    }


def _stage_analyze(run: Run, model, upstream: str) -> str:
    cfg = run.config
    h = content_hash(upstream, list(cfg.k_values), [list(b) for b in LENGTH_BUCKETS])
    if run.is_fresh("analyze", h):
        return run.output_hash("analyze")
    out = run.root / "analysis"
    out.mkdir(exist_ok=True)
    summary, paths = {}, []
    for intensity, spec in run_specs(run):
        for f in task_files(cfg):
            task = load_task(f)
            cat = task_category(task)
            stem = f"{spec.scheme}__{intensity}__{f.stem}"
            if cat == "CLS":
                summary[stem] = analyze_cls(model, spec, task, out, stem)
            elif cat == "MCQ":
                summary[stem] = analyze_mcq(model, spec, task, out, stem, cfg.k_values)
            else:
                continue
            paths += [out / name for name in summary[stem]["files"]]
    write_json(out / "summary.json", summary)
    return run.finish("analyze", h, paths + [out / "summary.json"])


# report --------------------------------------------------------------------

_SCHEME_ORDER = {s: i for i, s in enumerate(SCHEMES)}
_INTENSITY_ORDER = {name: i for i, name in enumerate(INTENSITIES)}


def _row_key(row: dict):
    return (
        _SCHEME_ORDER.get(row["scheme"], len(SCHEMES)), row["scheme"],
        _INTENSITY_ORDER.get(row["intensity"], len(INTENSITIES)), row["intensity"], row["task"],
    )


def collect_rows(run_dir: str | Path) -> list[dict]:
    rows = []
    for path in sorted(Path(run_dir).rglob("*.json")):
        try:
            rec = read_json(path)
        except (ValueError, UnicodeDecodeError):
            continue
        if not isinstance(rec, dict) or not {"scheme", "intensity", "task", "score"} <= rec.keys():
            continue
        s = rec["score"]
        rows.append({
            "scheme": rec["scheme"],
            "intensity": rec["intensity"],
            "task": rec["task"],
            "metric": s["metric_name"],
            "raw": s["raw"],
            "unwatermarked_raw": s["unwatermarked_raw"],
            "baseline": s["random_baseline"],
            "normalized": s["normalized"],
        })
    return sorted(rows, key=_row_key)


def average_row(rows: Sequence[dict]) -> dict:
    avg = {"scheme": "average", "intensity": "", "task": "", "metric": ""}
    for col in ("raw", "unwatermarked_raw", "baseline", "normalized"):
        values = [r[col] for r in rows if r[col] is not None]
        avg[col] = float(np.mean(values)) if values else None
    return avg


def _fmt(value, digits: int | None = None) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.{digits}f}" if digits is not None else repr(value)
    return str(value)


def build_report(run_dir: str | Path) -> tuple[str, str]:
    """Markdown and CSV summary of every evaluation record under ``run_dir``."""
    rows = collect_rows(run_dir)
    if not rows:
        raise EmptyRunDir(f"no evaluation reports under {run_dir}")
    table = rows + [average_row(rows)]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in table:
        writer.writerow([_fmt(r[c]) for c in REPORT_FIELDS])

    lines = ["# Watermark impact on downstream tasks", ""]
    lines.append("| " + " | ".join(REPORT_FIELDS) + " |")
    lines.append("|" + "---|" * len(REPORT_FIELDS))
    for r in table:
        lines.append("| " + " | ".join(_fmt(r[c], 4) for c in REPORT_FIELDS) + " |")

    summary_path = Path(run_dir) / "analysis" / "summary.json"
    if summary_path.exists():
        summary = read_json(summary_path)
        cls = {k: v for k, v in summary.items() if "expected_accuracy" in v}
        mcq = {k: v for k, v in summary.items() if "top1_set_stability" in v}
        if cls:
            lines += ["", "## Label partitions", ""]
            lines.append("| run | expected | worst case | best case | random | P(collapse) |")
            lines.append("|---|---|---|---|---|---|")
            for k, v in sorted(cls.items()):
                lines.append(
                    f"| {k} | {v['expected_accuracy']:.4f} | {v['worst_case_accuracy']:.4f} | "
                    f"{v['best_case_accuracy']:.4f} | {v['random_baseline']:.4f} | "
                    f"{v['probability_of_random_collapse']:.4f} |"
                )
        if mcq:
            lines += ["", "## Top-1 rank stability", ""]
            lines.append("| run | overall | by mean option length |")
            lines.append("|---|---|---|")
            for k, v in sorted(mcq.items()):
                by_len = ", ".join(f"{b}: {p:.3f}" for b, p in v["stability_by_length"])
                lines.append(f"| {k} | {v['top1_set_stability']:.4f} | {by_len} |")
    return "\n".join(lines) + "\n", buf.getvalue()


def write_report(run_dir: str | Path, out_dir: str | Path | None = None) -> tuple[Path, Path]:
    markdown, table = build_report(run_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md, csv_path = out_dir / "report.md", out_dir / "report.csv"
    md.write_text(markdown, encoding="utf-8")
    csv_path.write_text(table, encoding="utf-8")
    return md, csv_path


def _stage_report(run: Run, upstream: str) -> str:
    h = content_hash(upstream)
    if not run.is_fresh("report", h):
        run.finish("report", h, list(write_report(run.root)))
    return run.output_hash("report")


# driver --------------------------------------------------------------------


def run_pipeline(config: RunConfig, stop_after: str | None = None) -> Path:
    """Run (or resume) every stage; returns the path of ``report.md``."""
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"unknown stage {stop_after!r}; expected one of {STAGES}")
    run = Run(config)
    write_json(run.root / "config.json", asdict(replace(config, workers=1)))
    model = None
    upstream = ""
    for stage in STAGES:
        try:
            if stage == "train":
                upstream = _stage_train(run)
                model = open_model(config)
            elif stage == "calibrate":
                upstream = _stage_calibrate(run, model, upstream)
            elif stage == "evaluate":
                upstream = _stage_evaluate(run, model, upstream)
            elif stage == "analyze":
                upstream = _stage_analyze(run, model, content_hash(upstream, run.output_hash("calibrate")))
            else:
                upstream = _stage_report(run, content_hash(upstream, run.output_hash("evaluate")))
        except InkmarkError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(stage, exc) from exc
        except (OSError, ValueError, KeyError) as exc:
            raise StageError(stage, exc) from exc
        log.info("stage %s done", stage)
        if stage == stop_after:
            break
    return run.root / "report.md"
