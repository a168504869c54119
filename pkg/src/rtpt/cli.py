"""Command-line front end: ``rtpt attack|eval|ablate|report|plot``.

Settings come from an optional YAML config (``--config``) and can be
overridden per key with ``--set section.key=value`` or the dedicated flags.
Exit codes: 0 success, 2 configuration error, 3 input error, 4 integrity
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import config as config_mod
from .attacks import FAMILIES, PRESETS, find_cache, generate_and_cache
from .errors import ConfigurationError, RTPTError
from .harness import (
    REPORT_FORMATS,
    Condition,
    compute_metrics,
    emit_report,
    folder_dataset,
    load_records,
    make_toy_dataset,
    plot_sensitivity,
    plot_view_weights,
    run_eval,
)
from .model import load_backend
from .pipeline import ABLATION_ROWS, ablation_label, infer, method_preset

log = logging.getLogger("rtpt")

RECORDS_NAME = "records.jsonl"


# -- config assembly ----------------------------------------------------------


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out


def build_config(args) -> config_mod.RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        raw = yaml.safe_load(path.read_text()) or {}
    if isinstance(raw.get("attack"), str):
        raw["attack"] = PRESETS[raw["attack"]].to_dict() if raw["attack"] in PRESETS else raw["attack"]
    overrides = _parse_set(getattr(args, "set", None))
    flag_map = {
        "backend": ("backend", "name"),
        "backend_seed": ("backend", "seed"),
        "checkpoint": ("backend", "checkpoint"),
        "dataset": ("dataset", "kind"),
        "data_root": ("dataset", "root"),
        "n_samples": ("dataset", "n_samples"),
        "n_classes": ("dataset", "n_classes"),
        "noise": ("dataset", "noise"),
        "family": ("attack", "family"),
        "eps": ("attack", "epsilon"),
        "steps": ("attack", "steps"),
        "step_size": ("attack", "step_size"),
        "template": ("attack", "prompt_template"),
        "attack_seed": ("attack", "seed"),
        "seed": ("eval", "seed"),
        "workers": ("eval", "workers"),
        "out": ("eval", "out_dir"),
        "cache_root": ("eval", "cache_root"),
    }
    for dest, (section, key) in flag_map.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    preset = getattr(args, "preset", None)
    if preset is not None:
        raw["attack"] = PRESETS[preset].to_dict()
    for section, values in overrides.items():
        if section == "methods":
            raise ConfigurationError("use --methods to choose methods")
        current = raw.get(section)
        if section == "attack" and current is None:
            current = PRESETS["pgd-rn50"].to_dict()
        merged = dict(current or {})
        merged.update(values)
        raw[section] = merged
    methods = getattr(args, "methods", None)
    if methods:
        raw["methods"] = [m.strip() for m in methods.split(",") if m.strip()]
    return config_mod.from_dict(raw)


def make_backend(cfg: config_mod.RunConfig):
    kwargs = dict(cfg.backend.options)
    if cfg.backend.name == "toy":
        kwargs["seed"] = cfg.backend.seed
    elif cfg.backend.checkpoint is not None:
        kwargs["checkpoint"] = cfg.backend.checkpoint
    return load_backend(cfg.backend.name, **kwargs)


def make_dataset(cfg: config_mod.RunConfig, backend):
    d = cfg.dataset
    if d.kind == "toy":
        kwargs = {} if d.noise is None else {"noise": d.noise}
        return make_toy_dataset(d.seed, d.n_samples, d.n_classes, backend.input_shape, **kwargs)
    root = config_mod.dataset_root(d.root)
    if root is None:
        raise ConfigurationError(f"folder datasets need dataset.root or ${config_mod.DATASET_ROOT_ENV}")
    limit = d.limit if d.limit is not None else d.n_samples
    return folder_dataset(root, backend.input_shape, limit=limit)


def _progress(label):
    def report(i, total):
        if i == total or i % max(1, total // 20) == 0:
            log.info("%s %d/%d", label, i, total)

    return report


# -- subcommands ----------------------------------------------------------------


def cmd_attack(args) -> int:
    cfg = build_config(args)
    if cfg.attack is None:
        raise ConfigurationError("no attack configured")
    backend = make_backend(cfg)
    dataset = make_dataset(cfg, backend)
    cache = generate_and_cache(dataset, cfg.attack, backend, cache_root=cfg.eval.cache_root,
                               progress=_progress("attack"))
    print(f"spec_hash={cfg.attack.spec_hash} cache={cache.path} samples={len(cache)}")
    return 0


def _conditions(cfg, dataset, backend, args):
    conds = [Condition.clean()]
    if getattr(args, "clean_only", False) or cfg.attack is None:
        return conds
    spec_hash = args.attack_hash or cfg.attack.spec_hash
    cache = find_cache(cfg.eval.cache_root, spec_hash, dataset.name)
    if cache.meta.get("dataset_fingerprint") != dataset.fingerprint():
        raise ConfigurationError(f"attack cache {cache.path} was built from a different dataset")
    if cache.meta.get("backend") != backend.identifier:
        raise ConfigurationError(f"attack cache {cache.path} was built with backend {cache.meta.get('backend')}")
    conds.append(Condition.from_cache(cache))
    return conds


def _run(cfg, args, out_dir: Path) -> int:
    backend = make_backend(cfg)
    dataset = make_dataset(cfg, backend)
    conditions = _conditions(cfg, dataset, backend, args)
    config_mod.freeze(cfg, out_dir)
    records_path = out_dir / RECORDS_NAME
    records = run_eval(dataset, backend, cfg.method_configs(), conditions, out_path=records_path,
                       seed=cfg.eval.seed, workers=cfg.eval.workers, progress=_progress("eval"))
    table = compute_metrics(records)
    for fmt in cfg.report.formats:
        emit_report(table, fmt, out_dir / f"report.{fmt}")
    print(emit_report(table, "txt"))
    print(f"records={records_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    return _run(cfg, args, Path(cfg.eval.out_dir))


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    names = tuple(f"ablation-{ablation_label(flags)}" for flags in ABLATION_ROWS)
    cfg = config_mod.RunConfig(cfg.backend, cfg.dataset, cfg.attack, names, cfg.method, cfg.eval, cfg.report)
    return _run(cfg, args, Path(cfg.eval.out_dir) / "ablation")


def cmd_report(args) -> int:
    records = []
    for path in args.records:
        if not Path(path).exists():
            raise ConfigurationError(f"record file {path} not found")
        records.extend(load_records(path))
    table = compute_metrics(records)
    text = emit_report(table, args.format, args.output)
    if args.output is None:
        print(text)
    return 0


def cmd_plot(args) -> int:
    cfg = build_config(args)
    backend = make_backend(cfg)
    dataset = make_dataset(cfg, backend)
    out = Path(args.output)
    if args.kind == "weights":
        idx = args.sample
        if not 0 <= idx < len(dataset):
            raise ConfigurationError(f"sample index {idx} outside dataset of {len(dataset)}")
        sid, image, label = dataset.samples[idx]
        title = f"sample {sid} clean"
        if not args.clean_only and cfg.attack is not None:
            cond = _conditions(cfg, dataset, backend, args)[1]
            image = cond.images[sid if isinstance(sid, (int, str)) else str(sid)]
            title = f"sample {sid} {cond.name}"
        mcfg = cfg.method_configs()[0] if args.methods else method_preset("rtpt")
        outcome = infer(backend, dataset.class_names, image, mcfg, cfg.eval.seed, sid)
        plot_view_weights(outcome.weights, out, title)
    else:
        values = [float(v) if args.param != "k" else int(v) for v in args.values.split(",")]
        conditions = _conditions(cfg, dataset, backend, args)
        series = {c.name: [] for c in conditions}
        for v in values:
            mcfg = method_preset("rtpt").replace(**{args.param: v})
            recs = run_eval(dataset, backend, [mcfg], conditions, seed=cfg.eval.seed, workers=cfg.eval.workers)
            table = compute_metrics(recs)
            for c in conditions:
                series[c.name].append(float(table.score(mcfg.name, c.name).fraction * 100))
        plot_sensitivity(values, series, out, args.param, log_x=args.param == "weight_temperature")
    print(f"plot={out}")
    return 0


# -- parser ------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--backend", help="toy, clip-rn50 or clip-vit-b16")
    p.add_argument("--backend-seed", type=int)
    p.add_argument("--checkpoint", help="CLIP checkpoint file or directory")
    p.add_argument("--dataset", choices=("toy", "folder"))
    p.add_argument("--data-root", help=f"folder dataset root (default ${config_mod.DATASET_ROOT_ENV})")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int, help="run seed for augmentation")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--cache-root", help="attack cache directory")


def _attack_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--eps", type=float, help="L-inf budget in 1/255 units")
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--template", help="attacker prompt template")
    p.add_argument("--attack-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtpt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="generate and cache adversarial examples")
    _common(p)
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate methods on clean and cached adversarial inputs"),
        ("ablate", cmd_ablate, "evaluate the six ensemble/weighting/EntMin rows"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _attack_flags(p)
        if name == "eval":
            p.add_argument("--methods", help="comma-separated presets, e.g. zeroshot,ensemble,tpt,rtpt")
        p.add_argument("--attack-hash", help="use the cache with this spec-hash")
        p.add_argument("--clean-only", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate record files into a table")
    p.add_argument("records", nargs="+")
    p.add_argument("--format", default="md", help=f"one of {REPORT_FORMATS}")
    p.add_argument("--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="per-view weight bars or sensitivity curves")
    p.add_argument("kind", choices=("weights", "sensitivity"))
    _common(p)
    _attack_flags(p)
    p.add_argument("--output", required=True)
    p.add_argument("--sample", type=int, default=0, help="dataset index for weight bars")
    p.add_argument("--methods", help="method preset for weight bars (default rtpt)")
    p.add_argument("--param", default="k", choices=("k", "rho", "weight_temperature", "lr"))
    p.add_argument("--values", default="1,5,10,20,30,40")
    p.add_argument("--attack-hash")
    p.add_argument("--clean-only", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RTPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
