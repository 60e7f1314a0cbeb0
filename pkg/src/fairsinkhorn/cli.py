"""``fairsinkhorn generate|train|probe|zeroshot|compare``.

Run directory layout (under ``--out`` or ``[report].out_dir``)::

    data/   train.jsonl val.jsonl test.jsonl schema.json prompts.json manifest.json
    train/  checkpoint.bin checkpoint_epoch<k>.bin train_log.jsonl manifest.json
    probe/  report.json report.csv
    zeroshot/ report.json report.csv

Exit codes: 0 success, 1 usage/config/input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import DatasetFormatError, load_dataset, read_schema, write_dataset, write_schema
from .encoders import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import REPORT_FORMAT_VERSION, EvaluationReport, MetricError, read_report, write_report
from .ot import SinkhornError
from .synthetic import generate
from .train import NumericalError, class_mean_prompts, linear_probe, train, zeroshot

log = logging.getLogger("fairsinkhorn")

MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(directory: Path, cfg: RunConfig, files: list[Path], timestamps: bool) -> None:
    doc = {
        "format_version": MANIFEST_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "files": {p.name: _sha256(p) for p in files},
    }
    if timestamps:
        doc["created"] = time.time()
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest_config(path) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    return RunConfig.from_dict(doc["config"])


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.report.out_dir)


def _data_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.data.dir)
    return d if d.is_absolute() else _out_dir(cfg) / d


def split_counts(n: int, split) -> tuple[int, int, int]:
    n_train = int(round(n * split[0]))
    n_val = min(int(round(n * split[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, timestamps: bool = True) -> Path:
    gen = cfg.generator_config()
    ds = generate(gen)
    out = _data_dir(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    n_train, n_val, _ = split_counts(len(ds), cfg.data.split)
    parts = {
        "train": ds.subset(range(0, n_train)),
        "val": ds.subset(range(n_train, n_train + n_val)),
        "test": ds.subset(range(n_train + n_val, len(ds))),
    }
    files = []
    for name, part in parts.items():
        path = out / f"{name}.jsonl"
        write_dataset(path, part)
        files.append(path)
    schema_path = out / "schema.json"
    write_schema(schema_path, gen.schema, gen.image_dim, gen.text_dim)
    files.append(schema_path)
    # zero-shot prompts: class-mean text features of the validation split
    # (falls back to train when the validation split is empty)
    source = parts["val"] if len(set(parts["val"].labels())) == 2 else parts["train"]
    if len(source) and len(set(source.labels())) == 2:
        prompts_path = out / "prompts.json"
        prompts = class_mean_prompts(source)
        prompts_path.write_text(json.dumps({
            "format_version": 1, "config_hash": cfg.config_hash(),
            "negative": prompts[0].tolist(), "positive": prompts[1].tolist()}) + "\n")
        files.append(prompts_path)
    _write_manifest(out, cfg, files, timestamps)
    log.info("wrote %d/%d/%d samples to %s", len(parts["train"]), len(parts["val"]),
             len(parts["test"]), out)
    return out


def _load_split(cfg: RunConfig, name: str):
    d = _data_dir(cfg)
    schema, image_dim, text_dim = read_schema(d / "schema.json")
    return load_dataset(d / f"{name}.jsonl", schema, image_dim, text_dim)


def cmd_train(cfg: RunConfig, timestamps: bool = True) -> Path:
    train_ds = _load_split(cfg, "train")
    val_ds = _load_split(cfg, "val")
    out = _out_dir(cfg) / "train"
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with log_path.open("w") as fh:
        fh.write(json.dumps({"format_version": 1, "config_hash": cfg.config_hash()}) + "\n")

        def sink(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = train(train_ds, cfg, val_ds, timestamps=timestamps, on_record=sink)
    files = [log_path]
    for epoch, ckpt in sorted(result.periodic.items()):
        p = out / f"checkpoint_epoch{epoch}.bin"
        save_checkpoint(ckpt, p)
        files.append(p)
    final = out / "checkpoint.bin"
    save_checkpoint(result.checkpoint, final)
    files.append(final)
    _write_manifest(out, cfg, files, timestamps)
    last = result.epoch_records()[-1] if result.epoch_records() else {}
    log.info("training done: %s", {k: v for k, v in last.items() if k != "time"})
    return final


def _checkpoint_path(cfg: RunConfig, override) -> Path:
    return Path(override) if override else _out_dir(cfg) / "train" / "checkpoint.bin"


def cmd_probe(cfg: RunConfig, checkpoint=None) -> EvaluationReport:
    ckpt = load_checkpoint(_checkpoint_path(cfg, checkpoint))
    report = linear_probe(ckpt, _load_split(cfg, "train"), _load_split(cfg, "test"), cfg)
    write_report(report, _out_dir(cfg) / "probe", cfg.config_hash())
    return report


def load_prompts(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != 1:
        raise DatasetFormatError(f"{path}: unsupported prompts format_version")
    return np.array([doc["negative"], doc["positive"]], dtype=np.float64)


def cmd_zeroshot(cfg: RunConfig, checkpoint=None, prompts=None) -> EvaluationReport:
    ckpt = load_checkpoint(_checkpoint_path(cfg, checkpoint))
    prompts_path = Path(prompts) if prompts else Path(cfg.report.prompts)
    if not prompts_path.is_absolute() and not prompts:
        prompts_path = _out_dir(cfg) / prompts_path
    report = zeroshot(ckpt, _load_split(cfg, "test"), load_prompts(prompts_path), cfg)
    write_report(report, _out_dir(cfg) / "zeroshot", cfg.config_hash())
    return report


def compare_reports(a: EvaluationReport, b: EvaluationReport) -> dict:
    """Side-by-side fields (fractions) with ``b - a`` deltas."""
    if a.attribute_name != b.attribute_name:
        raise UsageError(f"attribute mismatch: {a.attribute_name!r} vs {b.attribute_name!r}")
    row = {"attribute": a.attribute_name, "model_a": a.model, "model_b": b.model}
    metrics = ["dpd", "deodds", "auc", "es_auc"]
    values_a = {m: getattr(a, m) for m in metrics}
    values_b = {m: getattr(b, m) for m in metrics}
    for lv in sorted(set(a.group_auc) | set(b.group_auc)):
        name = f"auc_{a.level_names.get(lv, b.level_names.get(lv, lv))}"
        metrics.append(name)
        values_a[name] = a.group_auc.get(lv)
        values_b[name] = b.group_auc.get(lv)
    for m in metrics:
        va, vb = values_a[m], values_b[m]
        row[f"{m}_a"], row[f"{m}_b"] = va, vb
        row[f"{m}_delta"] = None if va is None or vb is None else vb - va
    row["es_auc_improved"] = b.es_auc > a.es_auc
    return row


def _reports_by_attribute(directory: Path) -> dict[str, EvaluationReport]:
    out = {}
    for path in sorted(directory.glob("report*.json")):
        rep = EvaluationReport.from_record(json.loads(path.read_text()))
        out[rep.attribute_name] = rep
    if not out:
        raise UsageError(f"no reports found in {directory}")
    return out


def cmd_compare(dir_a, dir_b) -> str:
    ra = _reports_by_attribute(Path(dir_a))
    rb = _reports_by_attribute(Path(dir_b))
    rows = []
    for attr in sorted(set(ra) | set(rb)):
        if attr not in ra:
            raise UsageError(f"missing report for attribute {attr!r} in {dir_a}")
        if attr not in rb:
            raise UsageError(f"missing report for attribute {attr!r} in {dir_b}")
        rows.append(compare_reports(ra[attr], rb[attr]))
    return comparison_csv(rows)


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# format_version={REPORT_FORMAT_VERSION}\n")
    columns: list[str] = []
    for r in rows:
        columns += [c for c in r if c not in columns]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c)
            if isinstance(v, bool):
                cells.append(int(v))
            elif isinstance(v, float):
                cells.append(f"{100.0 * v:.4f}")
            else:
                cells.append("" if v is None else v)
        w.writerow(cells)
    return buf.getvalue()


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairsinkhorn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override [report].out_dir")
        p.add_argument("--no-timestamps", action="store_true",
                       help="omit wall-clock fields so reruns are byte-identical")

    common(sub.add_parser("generate", help="write synthetic train/val/test splits"))
    common(sub.add_parser("train", help="CLIP / FairCLIP pre-training"))
    p = sub.add_parser("probe", help="linear probe on frozen image embeddings")
    common(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("zeroshot", help="zero-shot evaluation with prompt feature vectors")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--prompts", help="prompts JSON (defaults to [report].prompts)")
    p = sub.add_parser("compare", help="compare two report directories")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    common(p, config_required=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fmt = "%(levelname)s %(name)s: %(message)s" if args.no_timestamps else \
        "%(asctime)s %(levelname)s %(name)s: %(message)s"
    logging.basicConfig(level=logging.INFO, format=fmt)
    timestamps = not args.no_timestamps
    try:
        if args.command == "compare":
            text = cmd_compare(args.dir_a, args.dir_b)
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(text)
            sys.stdout.write(text)
            return 0
        cfg = load_config(args.config).with_overrides(args.seed, args.out)
        if args.command == "generate":
            cmd_generate(cfg, timestamps)
        elif args.command == "train":
            cmd_train(cfg, timestamps)
        elif args.command == "probe":
            report = cmd_probe(cfg, args.checkpoint)
            log.info("probe AUC %.4f ES-AUC %.4f", report.auc, report.es_auc)
        elif args.command == "zeroshot":
            report = cmd_zeroshot(cfg, args.checkpoint, args.prompts)
            log.info("zero-shot AUC %.4f ES-AUC %.4f", report.auc, report.es_auc)
    except (NumericalError, SinkhornError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return 2
    except (ConfigError, UsageError, DatasetFormatError, CheckpointError, MetricError,
            FileNotFoundError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
