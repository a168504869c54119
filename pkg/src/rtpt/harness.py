"""Datasets, resumable evaluation runs, exact metrics, reports and plots."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

from .attacks import AttackCache
from .augment import sample_seed
from .errors import ConfigurationError, InputError, IntegrityError
from .model import EncoderBackend
from .pipeline import InferenceOutcome, MethodConfig, infer, initial_state, make_views
from .toy import DEFAULT_NOISE, TOY_IMAGE_SHAPE, render_texture, toy_class_names

log = logging.getLogger(__name__)

CLEAN = "clean"
REPORT_FORMATS = ("csv", "md", "txt")


# -- datasets --------------------------------------------------------------------


@dataclass
class DatasetHandle:
    name: str
    class_names: list[str]
    samples: list[tuple[Any, torch.Tensor, int]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s[0] for s in self.samples]
        if len(set(map(str, ids))) != len(ids):
            raise InputError(f"dataset {self.name!r} has duplicate sample ids")
        c = len(self.class_names)
        for sid, _, label in self.samples:
            if not 0 <= int(label) < c:
                raise InputError(f"sample {sid!r} has label {label} outside [0, {c})")

    def __iter__(self) -> Iterator[tuple[Any, torch.Tensor, int]]:
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)

    def subset(self, n: int) -> DatasetHandle:
        return DatasetHandle(self.name, self.class_names, self.samples[:n], dict(self.meta))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.name, self.class_names]).encode())
        for sid, image, label in self.samples:
            h.update(json.dumps([str(sid), int(label)]).encode())
            h.update(np.ascontiguousarray(image.numpy()).tobytes())
        return h.hexdigest()[:16]


def make_toy_dataset(
    seed: int = 0,
    n_samples: int = 500,
    n_classes: int = 10,
    image_shape=TOY_IMAGE_SHAPE,
    noise: float = DEFAULT_NOISE,
) -> DatasetHandle:
    """Balanced synthetic textures; sample ``i`` depends only on ``(seed, i)``."""
    names = toy_class_names(n_classes)
    samples = []
    for i in range(n_samples):
        label = i % n_classes
        rng = np.random.default_rng([seed, i])
        image = torch.from_numpy(render_texture(label, rng, tuple(image_shape), noise))
        samples.append((i, image, label))
    meta = {"kind": "toy", "seed": seed, "n_samples": n_samples, "n_classes": n_classes,
            "image_shape": list(image_shape), "noise": noise}
    return DatasetHandle(f"toy-c{n_classes}", names, samples, meta)


def folder_dataset(root, image_shape=(3, 224, 224), name: str | None = None, limit: int | None = None) -> DatasetHandle:
    """Images under ``root/<class index>/`` with class names listed in ``root/classnames.txt``.

    Images are resized on the short side and center-cropped to ``image_shape``.
    """
    from torchvision.io import ImageReadMode, decode_image
    import torchvision.transforms.v2.functional as TF

    root = Path(root)
    names_file = root / "classnames.txt"
    if not names_file.exists():
        raise InputError(f"{names_file} not found; one class name per line is required")
    class_names = [ln.strip() for ln in names_file.read_text().splitlines() if ln.strip()]
    _, h, w = image_shape
    samples = []
    for label in range(len(class_names)):
        folder = root / str(label)
        if not folder.is_dir():
            continue
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            img = decode_image(str(path), mode=ImageReadMode.RGB)
            img = TF.center_crop(TF.resize(img, [min(h, w)], antialias=True), [h, w])
            samples.append((f"{label}/{path.name}", img.to(torch.float64) / 255.0, label))
            if limit is not None and len(samples) >= limit:
                break
    return DatasetHandle(name or root.name, class_names, samples, {"kind": "folder", "root": str(root)})


# -- records ---------------------------------------------------------------------


@dataclass
class EvalRecord:
    sample_id: Any
    dataset: str
    method: str
    condition: str
    correct: bool
    predicted_class: int
    label: int
    seed: int
    config_hash: str
    backend: str
    timing: float = 0.0

    def key(self) -> tuple:
        return (self.dataset, self.method, self.condition, str(self.sample_id))

    def canonical(self) -> str:
        """Stable serialization without timing, for byte-level comparisons."""
        d = asdict(self)
        d.pop("timing")
        return json.dumps(d, sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> EvalRecord:
        return cls(**json.loads(line))


def load_records(path) -> list[EvalRecord]:
    """Read a record file; a torn final line from an interrupted run is dropped."""
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    records = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(EvalRecord.from_json(line))
        except (json.JSONDecodeError, TypeError) as exc:
            if i == len(lines) - 1:
                log.warning("dropping incomplete last record in %s", path)
                break
            raise IntegrityError(f"malformed record on line {i + 1} of {path}") from exc
    return records


def canonical_lines(records: Iterable[EvalRecord]) -> list[str]:
    return sorted(r.canonical() for r in records)


class RecordWriter:
    """Single appender for a record file; rewrites it first if the tail was torn."""

    def __init__(self, path, existing: list[EvalRecord]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and len(existing) != sum(1 for ln in self.path.read_text().splitlines() if ln.strip()):
            self.path.write_text("".join(r.to_json() + "\n" for r in existing))
        self._fh = open(self.path, "a")

    def write(self, record: EvalRecord):
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


# -- evaluation -------------------------------------------------------------------


@dataclass
class Condition:
    """Clean inputs or the cached adversarial images of one attack spec."""

    name: str
    images: dict | None = None  # sample key -> adversarial image

    @classmethod
    def clean(cls) -> Condition:
        return cls(CLEAN)

    @classmethod
    def from_cache(cls, cache: AttackCache) -> Condition:
        recs = cache.records(verify=True)
        return cls(f"{cache.spec.family}:{cache.spec_hash}", {k: r.image for k, r in recs.items()})


@dataclass
class _Task:
    sample_id: Any
    image: torch.Tensor
    label: int
    condition: str
    methods: list[MethodConfig]


_WORKER: dict = {}


def _worker_init(backend, class_names, dataset_name, run_seed):
    torch.set_num_threads(1)
    _WORKER.update(backend=backend, class_names=class_names, dataset=dataset_name, seed=run_seed, inits={})


def _worker_run(task: _Task) -> list[EvalRecord]:
    return _evaluate(task, **{k: _WORKER[k] for k in ("backend", "class_names", "dataset", "seed", "inits")})


def _evaluate(task: _Task, backend, class_names, dataset, seed, inits) -> list[EvalRecord]:
    view_seed = sample_seed(seed, task.sample_id)
    shared = {}
    out = []
    for cfg in task.methods:
        key = (cfg.template, cfg.temperature)
        if key not in inits:
            inits[key] = initial_state(backend, class_names, cfg)
        views = None
        if cfg.use_ensemble or cfg.use_entmin:
            if cfg.augment not in shared:
                shared[cfg.augment] = make_views(task.image, cfg, view_seed, task.sample_id)
            views = shared[cfg.augment]
        outcome: InferenceOutcome = infer(
            backend, class_names, task.image, cfg, view_seed, task.sample_id, views=views, init=inits[key]
        )
        out.append(EvalRecord(
            sample_id=task.sample_id,
            dataset=dataset,
            method=cfg.name,
            condition=task.condition,
            correct=outcome.predicted_class == task.label,
            predicted_class=outcome.predicted_class,
            label=int(task.label),
            seed=view_seed,
            config_hash=cfg.config_hash,
            backend=backend.identifier,
            timing=outcome.wall_time,
        ))
    return out


def run_eval(
    dataset: DatasetHandle,
    backend: EncoderBackend,
    methods: Sequence[MethodConfig],
    conditions: Sequence[Condition] = (Condition(CLEAN),),
    out_path=None,
    seed: int = 0,
    workers: int = 1,
    order: Sequence[int] | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> list[EvalRecord]:
    """Evaluate every method on every sample under every condition.

    Records already present in ``out_path`` are kept and skipped, so an
    interrupted run resumes where it stopped.  Each (sample, condition) pair
    is one unit of work; its augmented views are generated once and shared by
    all methods.  Returns the complete record list for this request.
    """
    methods = [m.validate() for m in methods]
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate method names in {names}")
    existing = load_records(out_path) if out_path is not None else []
    done = {r.key() for r in existing}
    writer = RecordWriter(out_path, existing) if out_path is not None else None

    tasks = []
    indices = list(order) if order is not None else range(len(dataset))
    for cond in conditions:
        for idx in indices:
            sid, image, label = dataset.samples[idx]
            todo = [m for m in methods if (dataset.name, m.name, cond.name, str(sid)) not in done]
            if not todo:
                continue
            if cond.images is not None:
                key = sid if isinstance(sid, (int, str)) else str(sid)
                if key not in cond.images:
                    raise InputError(f"attack cache for {cond.name} has no sample {sid!r}")
                image = cond.images[key]
            tasks.append(_Task(sid, image, label, cond.name, todo))

    new: list[EvalRecord] = []
    try:
        if workers <= 1:
            inits = {}
            results = (
                _evaluate(t, backend, dataset.class_names, dataset.name, seed, inits) for t in tasks
            )
            _drain(results, writer, new, len(tasks), progress)
        else:
            ctx = mp.get_context("spawn")
            with ProcessPoolExecutor(
                workers, mp_context=ctx, initializer=_worker_init,
                initargs=(backend, dataset.class_names, dataset.name, seed),
            ) as pool:
                _drain(pool.map(_worker_run, tasks, chunksize=4), writer, new, len(tasks), progress)
    finally:
        if writer is not None:
            writer.close()

    wanted = {(dataset.name, m.name, c.name) for m in methods for c in conditions}
    ids = {str(dataset.samples[i][0]) for i in indices}
    prior = [r for r in existing if r.key()[:3] in wanted and str(r.sample_id) in ids]
    return prior + new


def _drain(results, writer, sink, total, progress):
    for i, batch in enumerate(results):
        for rec in batch:
            if writer is not None:
                writer.write(rec)
            sink.append(rec)
        if progress is not None:
            progress(i + 1, total)


# -- metrics and reports ----------------------------------------------------------


def percent(x: Fraction) -> Decimal:
    """Exact fraction to a one-decimal percentage, rounding halves up."""
    value = Decimal(x.numerator * 100) / Decimal(x.denominator)
    return value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class Score:
    correct: int
    total: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.correct, self.total)

    @property
    def display(self) -> str:
        return str(percent(self.fraction))


@dataclass
class ReportRow:
    method: str
    dataset: str
    scores: dict[str, Score]  # condition -> score; "clean" is Acc, the rest Rob


@dataclass
class ReportTable:
    dataset: str
    conditions: list[str]
    rows: list[ReportRow]

    def score(self, method: str, condition: str = CLEAN) -> Score:
        for row in self.rows:
            if row.method == method:
                return row.scores[condition]
        raise KeyError(method)

    def column_label(self, condition: str) -> str:
        return "Acc." if condition == CLEAN else f"Rob. {condition}"

    def __eq__(self, other):
        return isinstance(other, ReportTable) and (
            self.dataset, self.conditions, [(r.method, r.dataset, r.scores) for r in self.rows]
        ) == (other.dataset, other.conditions, [(r.method, r.dataset, r.scores) for r in other.rows])


def compute_metrics(records: Iterable[EvalRecord]) -> ReportTable:
    """Acc over clean records and Rob per attack condition, kept as exact counts."""
    records = list(records)
    if not records:
        raise InputError("no records to aggregate")
    datasets = {r.dataset for r in records}
    if len(datasets) > 1:
        raise InputError(f"records mix datasets {sorted(datasets)}; aggregate one dataset at a time")
    conditions = sorted({r.condition for r in records}, key=lambda c: (c != CLEAN, c))
    methods: list[str] = []
    counts: dict[tuple[str, str], list[int]] = {}
    for r in records:
        if r.method not in methods:
            methods.append(r.method)
        c = counts.setdefault((r.method, r.condition), [0, 0])
        c[0] += int(bool(r.correct))
        c[1] += 1
    rows = [
        ReportRow(m, records[0].dataset, {c: Score(*counts[(m, c)]) for c in conditions if (m, c) in counts})
        for m in methods
    ]
    return ReportTable(records[0].dataset, conditions, rows)


def _column_max(table: ReportTable, cond: str) -> Fraction | None:
    vals = [r.scores[cond].fraction for r in table.rows if cond in r.scores]
    return max(vals) if vals else None


def render_markdown(table: ReportTable) -> str:
    head = ["Method"] + [table.column_label(c) for c in table.conditions]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] + ["---:"] * len(table.conditions)) + "|"]
    best = {c: _column_max(table, c) for c in table.conditions}
    for row in table.rows:
        cells = [row.method]
        for c in table.conditions:
            s = row.scores.get(c)
            if s is None:
                cells.append("")
            elif s.fraction == best[c]:
                cells.append(f"**{s.display}**")
            else:
                cells.append(s.display)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_text(table: ReportTable) -> str:
    head = ["Method"] + [table.column_label(c) for c in table.conditions]
    body = [[r.method] + [r.scores[c].display if c in r.scores else "-" for c in table.conditions] for r in table.rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    fmt = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    )
    rule = "-" * len(fmt(head))
    return "\n".join([f"dataset: {table.dataset}", fmt(head), rule] + [fmt(b) for b in body]) + "\n"


def render_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "condition", "percent", "correct", "total"])
    for row in table.rows:
        for c in table.conditions:
            if c in row.scores:
                s = row.scores[c]
                writer.writerow([row.method, row.dataset, c, s.display, s.correct, s.total])
    return buf.getvalue()


def parse_csv(text: str) -> ReportTable:
    rows: dict[str, ReportRow] = {}
    conditions: list[str] = []
    dataset = None
    for rec in csv.DictReader(io.StringIO(text)):
        dataset = rec["dataset"]
        if rec["condition"] not in conditions:
            conditions.append(rec["condition"])
        row = rows.setdefault(rec["method"], ReportRow(rec["method"], rec["dataset"], {}))
        row.scores[rec["condition"]] = Score(int(rec["correct"]), int(rec["total"]))
    if dataset is None:
        raise InputError("empty report CSV")
    conditions.sort(key=lambda c: (c != CLEAN, c))
    return ReportTable(dataset, conditions, list(rows.values()))


def emit_report(table: ReportTable, fmt: str, path=None) -> str:
    """Render ``table`` as csv, md or txt; also write it when ``path`` is given."""
    renderers = {"csv": render_csv, "md": render_markdown, "txt": render_text}
    if fmt not in renderers:
        raise ConfigurationError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    text = renderers[fmt](table)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# -- plots ------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_view_weights(weights: torch.Tensor, path, title: str = "") -> Path:
    """Bar chart of per-view ensembling weights with the uniform level marked."""
    plt = _pyplot()
    w = weights.detach().cpu().numpy()
    fig, ax = plt.subplots(figsize=(8, 3))
    colors = ["tab:red"] + ["tab:blue"] * (len(w) - 1)
    ax.bar(np.arange(len(w)), w, color=colors)
    ax.axhline(1.0 / len(w), color="k", linestyle="--", linewidth=1, label="uniform")
    ax.set_xlabel("view index (0 = input)")
    ax.set_ylabel("weight")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sensitivity(xs: Sequence[float], series: dict[str, Sequence[float]], path, xlabel: str, log_x: bool = False) -> Path:
    """Line plot of metrics against one hyperparameter."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    if log_x:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
