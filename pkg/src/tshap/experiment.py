"""Experiment configuration and the pipeline stages behind the CLI.

Every stage reads the resolved :class:`ExperimentConfig`, writes its outputs
under ``output_dir`` atomically, and drops a ``manifest.json`` recording the
config hash, seeds and package version next to them.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import os
import re
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import yaml

from . import __version__
from .attribution import (
    GROUP_NAMES,
    AttributionMap,
    read_attribution_csv,
    write_attribution_csv,
)
from .data import (
    CLASS_NAMES,
    FALL,
    JOINT_NAMES,
    FeatureSequence,
    GeneratorConfig,
    generate_dataset,
    kfold_split,
    preprocess,
    read_sequences_csv,
    to_binary_label,
    write_sequences_csv,
)
from .errors import ConfigError, InvalidArgumentError
from .metrics import (
    DEFAULT_FRACTIONS,
    RAW,
    MetricsReport,
    base_attribution,
    classification_scores,
    evaluate_maps,
    latency_profile,
    write_report,
)
from .models import ModelConfig, TrainedModel, argmax_labels, load_model, save_model, train
from .smoothing import SmoothingConfig, smooth

OUTPUT_ROOT_ENV = "TSHAP_OUTPUT_ROOT"
METHODS = ("shap", "saliency", "gradcam")


# --------------------------------------------------------------------------
# configuration


@dataclass
class ModelSection:
    h: int = 128
    T: int = 100
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    binary_mode: bool = False


@dataclass
class CnnSection:
    kernel_width: int = 5
    channels: int = 32
    epochs: int = 30


@dataclass
class AttributionSection:
    methods: list = field(default_factory=lambda: list(METHODS))
    granularity: str = "per_group"
    mode: str = "exact"
    n_permutations: int = 100
    seed: int = 0
    per_class: int | None = None  # explained test sequences per class and fold; None = all


@dataclass
class MetricsSection:
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    abs_rank: bool = False
    latency_runs: int = 3
    latency_warmup: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    k: int = 5
    output_dir: str = "runs/default"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelSection = field(default_factory=ModelSection)
    cnn: CnnSection = field(default_factory=CnnSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    smoothing: list = field(default_factory=lambda: [SmoothingConfig("uniform", w=2),
                                                      SmoothingConfig("ewma", alpha=0.5)])
    sweep_w: list = field(default_factory=lambda: [1, 2, 3])
    metrics: MetricsSection = field(default_factory=MetricsSection)

    @property
    def n_classes(self) -> int:
        return 2 if self.model.binary_mode else len(self.generator.classes)

    def model_config(self, fold: int, kind: str = "lstm") -> ModelConfig:
        m = self.model
        epochs = self.cnn.epochs if kind == "cnn" else m.epochs
        return ModelConfig(h=m.h, C=self.n_classes, T=m.T, learning_rate=m.learning_rate,
                           batch_size=m.batch_size, epochs=epochs, seed=m.seed + fold,
                           binary_mode=m.binary_mode, kind=kind, kernel_width=self.cnn.kernel_width,
                           channels=self.cnn.channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["generator"]["raw_length_range"] = list(self.generator.raw_length_range)
        d["generator"]["classes"] = list(self.generator.classes)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def resolved_output(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if cls is not GeneratorConfig else getattr(GeneratorConfig(), name)
        path = f"{where}.{name}" if where else name
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, str):
                # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
                try:
                    value = float(value)
                except ValueError:
                    pass
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, (list, tuple)):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list, got {value!r}")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    sections = {
        "generator": GeneratorConfig,
        "model": ModelSection,
        "cnn": CnnSection,
        "attribution": AttributionSection,
        "metrics": MetricsSection,
    }
    kwargs = {}
    for name, cls in sections.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    if "smoothing" in raw:
        items = raw.pop("smoothing")
        if not isinstance(items, list):
            raise ConfigError("smoothing: expected a list of smoothing configs")
        kwargs["smoothing"] = [_build(SmoothingConfig, it, f"smoothing[{i}]") for i, it in enumerate(items)]
    top = _build(ExperimentConfig, {k: v for k, v in raw.items()}, "")
    cfg = dataclasses.replace(top, **kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.k < 2:
        raise ConfigError("k: must be >= 2")
    if cfg.generator.n_subjects < cfg.k:
        raise ConfigError(f"generator.n_subjects: {cfg.generator.n_subjects} subjects cannot fill k={cfg.k} folds")
    bad = sorted(set(cfg.attribution.methods) - set(METHODS))
    if bad:
        raise ConfigError(f"attribution.methods: unknown method(s) {', '.join(bad)}")
    if cfg.attribution.granularity not in ("per_group", "per_feature"):
        raise ConfigError("attribution.granularity: must be per_group or per_feature")
    if cfg.attribution.mode not in ("exact", "sampled"):
        raise ConfigError("attribution.mode: must be exact or sampled")
    if cfg.attribution.mode == "exact" and cfg.attribution.granularity == "per_feature":
        raise ConfigError("attribution.mode: per_feature granularity supports sampled mode only")
    if cfg.attribution.n_permutations < 1:
        raise ConfigError("attribution.n_permutations: must be >= 1")
    pc = cfg.attribution.per_class
    if pc is not None and (isinstance(pc, bool) or not isinstance(pc, int) or pc < 1):
        raise ConfigError(f"attribution.per_class: must be null or an integer >= 1, got {pc!r}")
    fr = cfg.metrics.fractions
    if not fr or any(not 0 <= f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
        raise ConfigError("metrics.fractions: must be a non-empty ascending list within [0, 1]")
    if any(not isinstance(w, int) or w < 0 for w in cfg.sweep_w) or not cfg.sweep_w:
        raise ConfigError("sweep_w: must be a non-empty list of integers >= 0")
    if cfg.metrics.latency_runs < 1 or cfg.metrics.latency_warmup < 0:
        raise ConfigError("metrics.latency_runs must be >= 1 and latency_warmup >= 0")
    try:
        cfg.model_config(0)
        cfg.model_config(0, "cnn")
    except InvalidArgumentError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _set_path(raw: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file, then ``key=value`` overrides (dotted keys)."""
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(raw, key.strip(), yaml.safe_load(value))
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# file helpers


@contextlib.contextmanager
def atomic_path(path: Path) -> Iterator[Path]:
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    tmp_path = Path(tmp)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


def write_text(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_json(path: Path, obj: Any) -> None:
    write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_manifest(directory: Path, cfg: ExperimentConfig, stage: str, **extra) -> None:
    write_json(directory / "manifest.json", {
        "stage": stage,
        "artifact_version": __version__,
        "config_sha256": cfg.digest(),
        "seeds": {"global": cfg.seed, "generator": cfg.generator.seed, "model": cfg.model.seed,
                  "attribution": cfg.attribution.seed, "folds": cfg.seed},
        "config": cfg.to_dict(),
        **extra,
    })


def method_file_tag(method: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", method).strip("_")


# --------------------------------------------------------------------------
# stages


def _data_dir(cfg):
    return cfg.resolved_output() / "data"


def _model_dir(cfg):
    return cfg.resolved_output() / "models"


def _attr_dir(cfg):
    return cfg.resolved_output() / "attributions"


def _eval_dir(cfg):
    return cfg.resolved_output() / "eval"


def cmd_generate(cfg: ExperimentConfig, log=print) -> list[FeatureSequence]:
    raw = generate_dataset(cfg.generator)
    seqs = [preprocess(s, cfg.model.T) for s in raw]
    out = _data_dir(cfg)
    with atomic_path(out / "dataset.csv") as tmp:
        write_sequences_csv(tmp, seqs)
    counts = {CLASS_NAMES[c]: sum(s.label == c for s in seqs) for c in cfg.generator.labels}
    write_manifest(out, cfg, "generate", n_sequences=len(seqs), class_counts=counts,
                   raw_lengths={str(s.seq_id): s.length for s in raw})
    for name, n in counts.items():
        log(f"{name:>8}: {n}")
    return seqs


def load_dataset(cfg: ExperimentConfig) -> list[FeatureSequence]:
    path = _data_dir(cfg) / "dataset.csv"
    if not path.exists():
        raise InvalidArgumentError(f"{path} not found; run `generate` first")
    return read_sequences_csv(path)


def _label(cfg, s: FeatureSequence) -> int:
    return to_binary_label(s.label) if cfg.model.binary_mode else s.label


def _positive(cfg) -> int:
    return 1 if cfg.model.binary_mode else FALL


def cmd_train(cfg: ExperimentConfig, log=print) -> dict:
    seqs = load_dataset(cfg)
    folds = kfold_split(seqs, cfg.k, cfg.seed)
    out = _model_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    hist_rows, metric_rows, scores = [], [], []
    kinds = ["lstm"] + (["cnn"] if "gradcam" in cfg.attribution.methods else [])
    for fold in range(cfg.k):
        tr, te = folds.split(seqs, fold)
        for kind in kinds:
            model = train(tr, cfg.model_config(fold, kind))
            with atomic_path(out / f"fold{fold}_{kind}.json") as tmp:
                save_model(model, tmp)
            for epoch, (loss, acc) in enumerate(zip(model.history["loss"], model.history["accuracy"])):
                hist_rows.append([fold, kind, epoch, _fmt(loss), _fmt(acc)])
            if kind == "lstm":
                X = np.stack([s.data for s in te])
                pred = argmax_labels(model.logits(X))
                sc = classification_scores([_label(cfg, s) for s in te], pred, _positive(cfg))
                scores.append(sc)
                metric_rows.append([fold] + [_fmt(sc[m]) for m in ("accuracy", "precision", "recall", "f1")])
                log(f"fold {fold}: " + "  ".join(f"{m}={sc[m]:.4f}" for m in sc))
    names = ("accuracy", "precision", "recall", "f1")
    metric_rows.append(["mean"] + [_fmt(statistics.fmean(s[m] for s in scores)) for m in names])
    metric_rows.append(["sd"] + [_fmt(statistics.stdev([s[m] for s in scores])) for m in names])
    write_csv(out / "history.csv", ("fold", "kind", "epoch", "loss", "accuracy"), hist_rows)
    write_csv(out / "train_metrics.csv", ("fold",) + names, metric_rows)
    write_json(out / "folds.json", {"k": folds.k, "fold_of_subject": {str(s): f for s, f in
                                                                      sorted(folds.fold_of_subject.items())}})
    write_manifest(out, cfg, "train")
    log("mean: " + "  ".join(f"{m}={statistics.fmean(s[m] for s in scores):.4f}" for m in names))
    return {"scores": scores}


def load_folds(cfg):
    obj = json.loads((_model_dir(cfg) / "folds.json").read_text())
    from .data import FoldAssignment
    return FoldAssignment(obj["k"], {int(s): f for s, f in obj["fold_of_subject"].items()})


def load_fold_model(cfg, fold: int, kind: str = "lstm") -> TrainedModel:
    path = _model_dir(cfg) / f"fold{fold}_{kind}.json"
    if not path.exists():
        raise InvalidArgumentError(f"{path} not found; run `train` first")
    return load_model(path)


def explained_sequences(cfg, test: list[FeatureSequence]) -> list[FeatureSequence]:
    """The first ``per_class`` test sequences of each class, by seq_id (all when unset)."""
    if cfg.attribution.per_class is None:
        return sorted(test, key=lambda s: s.seq_id)
    chosen = []
    for c in cfg.generator.labels:
        members = sorted((s for s in test if s.label == c), key=lambda s: s.seq_id)
        chosen.extend(members[:cfg.attribution.per_class])
    return sorted(chosen, key=lambda s: s.seq_id)


def _shap_kwargs(cfg) -> dict:
    a = cfg.attribution
    return {"granularity": a.granularity, "mode": a.mode, "n_permutations": a.n_permutations, "seed": a.seed}


def cmd_explain(cfg: ExperimentConfig, methods: list[str] | None = None, folds_only: list[int] | None = None,
                log=print) -> dict[str, list[AttributionMap]]:
    """Write one attribution CSV per method tag (raw methods plus every T-SHAP variant)."""
    methods = list(methods or cfg.attribution.methods)
    seqs = load_dataset(cfg)
    folds = load_folds(cfg)
    produced: dict[str, list[AttributionMap]] = {}
    for fold in range(cfg.k):
        if folds_only is not None and fold not in folds_only:
            continue
        _, te = folds.split(seqs, fold)
        lstm = load_fold_model(cfg, fold)
        cnn = load_fold_model(cfg, fold, "cnn") if "gradcam" in methods else None
        for x in explained_sequences(cfg, te):
            target = int(np.argmax(lstm.predict_proba(x)))
            for method in methods:
                A = base_attribution(method, lstm, x, target, cnn, _shap_kwargs(cfg))
                A.meta.update(fold=fold, seq_id=x.seq_id)
                produced.setdefault(A.method, []).append(A)
                if method == "shap":
                    for sc in cfg.smoothing:
                        S = smooth(A, sc)
                        produced.setdefault(S.method, []).append(S)
        log(f"fold {fold}: explained {len(explained_sequences(cfg, te))} sequences")
    out = _attr_dir(cfg)
    for tag, maps in produced.items():
        with atomic_path(out / f"{method_file_tag(tag)}.csv") as tmp:
            write_attribution_csv(tmp, maps)
            sidecar = tmp.with_suffix(".json")
        os.replace(sidecar, out / f"{method_file_tag(tag)}.json")
    write_manifest(out, cfg, "explain", methods=sorted(produced))
    return produced


def _load_base_maps(cfg) -> dict[str, dict[int, AttributionMap]]:
    out = {}
    for method in cfg.attribution.methods:
        path = _attr_dir(cfg) / f"{method}.csv"
        if not path.exists():
            raise InvalidArgumentError(f"{path} not found; run `explain` first")
        out[method] = {A.meta["seq_id"]: A for A in read_attribution_csv(path)}
    return out


def _fold_setup(cfg):
    seqs = load_dataset(cfg)
    folds = load_folds(cfg)
    by_fold = []
    for fold in range(cfg.k):
        _, te = folds.split(seqs, fold)
        by_fold.append((fold, te, explained_sequences(cfg, te)))
    return by_fold


def fold_accuracy(cfg, model, test) -> float:
    X = np.stack([s.data for s in test])
    return float(np.mean(argmax_labels(model.logits(X)) == np.array([_label(cfg, s) for s in test])))


def evaluate_run(cfg: ExperimentConfig, smoothing_cfgs, methods=None) -> MetricsReport:
    """Metrics for stored base maps crossed with ``[raw] + smoothing_cfgs``."""
    methods = list(methods or cfg.attribution.methods)
    base = _load_base_maps(cfg)
    report = MetricsReport()
    for fold, _, explained in _fold_setup(cfg):
        lstm = load_fold_model(cfg, fold)
        for x in explained:
            maps = {}
            for method in methods:
                for sc in [None] + list(smoothing_cfgs):
                    maps[(method, RAW if sc is None else sc.tag)] = smooth(base[method][x.seq_id], sc)
            report.extend(evaluate_maps(lstm, x, maps, fold, cfg.metrics.fractions, cfg.metrics.abs_rank))
    return report


def measure_latency(cfg: ExperimentConfig) -> dict:
    """Per-sequence wall time of each attribution method and each smoothing step (serial)."""
    by_fold = _fold_setup(cfg)
    fold, _, explained = by_fold[0]
    x = explained[0]
    lstm = load_fold_model(cfg, fold)
    cnn = load_fold_model(cfg, fold, "cnn") if "gradcam" in cfg.attribution.methods else None
    runs, warm = cfg.metrics.latency_runs, cfg.metrics.latency_warmup
    target = int(np.argmax(lstm.predict_proba(x)))
    out = {"sequence": x.seq_id, "fold": fold, "runs": runs, "warmup": warm}
    out["inference"] = dict(zip(("mean_ms", "sd_ms", "p95_ms"),
                                latency_profile(lambda: lstm.predict_proba(x), runs, warm)))
    for method in cfg.attribution.methods:
        base = base_attribution(method, lstm, x, target, cnn, _shap_kwargs(cfg))
        out[method] = dict(zip(("mean_ms", "sd_ms", "p95_ms"), latency_profile(
            lambda m=method: base_attribution(m, lstm, x, target, cnn, _shap_kwargs(cfg)), runs, warm)))
        for sc in cfg.smoothing:
            out[f"{method}|{sc.tag}"] = dict(zip(("mean_ms", "sd_ms", "p95_ms"), latency_profile(
                lambda s=sc: smooth(base, s), max(runs, 20), warm)))
    return out


def _representative(explained_by_fold) -> FeatureSequence:
    for _, _, explained in explained_by_fold:
        for x in explained:
            if x.label == FALL:
                return x
    return explained_by_fold[0][2][0]


def cmd_evaluate(cfg: ExperimentConfig, log=print) -> MetricsReport:
    report = evaluate_run(cfg, cfg.smoothing)
    out = _eval_dir(cfg)
    with atomic_path(out / "report.csv") as tmp:
        write_report(report, tmp)
    summary = report.summary()
    for entry in summary.values():
        entry.pop("latency_ms")
    write_json(out / "summary.json", summary)

    # heatmap grids for one representative (fall) sequence
    base = _load_base_maps(cfg)
    rep_x = _representative(_fold_setup(cfg))
    for method in cfg.attribution.methods:
        for sc in [None] + list(cfg.smoothing):
            A = smooth(base[method][rep_x.seq_id], sc)
            header = ("t",) + (GROUP_NAMES if A.G == len(GROUP_NAMES) else tuple(f"f{i}" for i in range(A.G)))
            write_csv(out / f"fig6_heatmap_{method_file_tag(A.method)}.csv", header,
                      [[t] + [_fmt(v) for v in A.values[t]] for t in range(A.T)])

    # per-joint magnitude averaged over explained sequences
    rows = []
    for method, sm in report.cells():
        mags = np.mean([r.per_joint for r in report.rows if r.method == method and r.smoothing == sm], axis=0)
        rows.extend([method, sm, j, JOINT_NAMES[j], _fmt(mags[j])] for j in range(len(JOINT_NAMES)))
    write_csv(out / "fig8_per_joint.csv", ("method", "smoothing", "joint", "joint_name", "magnitude"), rows)

    # timing is nondeterministic, so it goes to JSON rather than the CSVs of record
    lat = measure_latency(cfg)
    pairs = []
    for key, entry in summary.items():
        method, sm = key.split("|")
        ms = lat[method]["mean_ms"] + (lat[f"{method}|{sm}"]["mean_ms"] if sm != RAW else 0.0)
        pairs.append({"method": method, "smoothing": sm, "latency_ms": ms, "aup": entry["aup"]["mean"]})
    write_json(out / "latency.json", lat)
    write_json(out / "fig7_latency_aup.json", pairs)
    write_manifest(out, cfg, "evaluate", sequences=rep_x.seq_id)
    for key, entry in summary.items():
        log(f"{key:<32} AUP {entry['aup']['mean']:.4f} ± {entry['aup']['sd']:.4f}   "
            f"TV {entry['tv']['mean']:.6f} ± {entry['tv']['sd']:.6f}")
    return report


def cmd_sweep_w(cfg: ExperimentConfig, ws: list[int] | None = None, log=print) -> list[dict]:
    ws = list(ws or cfg.sweep_w)
    cfgs = [SmoothingConfig("uniform", w=w) for w in ws]
    report = evaluate_run(cfg, cfgs, methods=["shap"])
    accs = []
    for fold, te, _ in _fold_setup(cfg):
        accs.append(fold_accuracy(cfg, load_fold_model(cfg, fold), te))
    rows = []
    for w, sc in zip(ws, cfgs):
        aups = list(report.fold_means("aup", "shap", sc.tag).values())
        rows.append({"w": w, "aup_mean": statistics.fmean(aups), "aup_sd": statistics.stdev(aups) if len(aups) > 1 else 0.0,
                     "accuracy_mean": statistics.fmean(accs), "accuracy_sd": statistics.stdev(accs)})
    out = cfg.resolved_output() / "sweep"
    write_csv(out / "table5.csv", list(rows[0]), [[_fmt(v) for v in r.values()] for r in rows])
    write_manifest(out, cfg, "sweep-w", w_values=ws)
    for r in rows:
        log(f"w={r['w']}: AUP {r['aup_mean']:.4f} ± {r['aup_sd']:.4f}  accuracy {r['accuracy_mean']:.4f} ± {r['accuracy_sd']:.4f}")
    return rows


def cmd_ablate(cfg: ExperimentConfig, log=print) -> list[dict]:
    cfgs = [c for c in cfg.smoothing]
    if not any(c.kind == "uniform" for c in cfgs):
        cfgs.insert(0, SmoothingConfig("uniform", w=2))
    if not any(c.kind == "ewma" for c in cfgs):
        cfgs.append(SmoothingConfig("ewma", alpha=0.5))
    report = evaluate_run(cfg, cfgs, methods=["shap"])
    rows = []
    for sc_tag, label in [(RAW, "raw")] + [(c.tag, f"{c.kind}:{c.tag}") for c in cfgs]:
        aups = list(report.fold_means("aup", "shap", sc_tag).values())
        tvs = list(report.fold_means("tv", "shap", sc_tag).values())
        rows.append({"method": label, "aup_mean": statistics.fmean(aups), "aup_sd": statistics.stdev(aups) if len(aups) > 1 else 0.0,
                     "tv_mean": statistics.fmean(tvs), "tv_sd": statistics.stdev(tvs) if len(tvs) > 1 else 0.0})
    out = cfg.resolved_output() / "ablate"
    write_csv(out / "table6.csv", list(rows[0]), [[_fmt(v) for v in r.values()] for r in rows])
    write_manifest(out, cfg, "ablate")
    for r in rows:
        log(f"{r['method']:<32} AUP {r['aup_mean']:.4f}  TV {r['tv_mean']:.6f}")
    return rows


# --------------------------------------------------------------------------
# optional SVG rendering from the emitted CSV/JSON


def _color(v: float, vmax: float) -> str:
    """Diverging blue-white-red scale; ``v`` in [-vmax, vmax]."""
    u = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if u >= 0:
        r, g, b = 255, int(255 * (1 - u)), int(255 * (1 - u))
    else:
        r, g, b = int(255 * (1 + u)), int(255 * (1 + u)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(header: list[str], grid: np.ndarray, title: str, cell: int = 6, row_h: int = 18) -> str:
    T, G = grid.shape
    left, top = 90, 30
    width, height = left + T * cell + 10, top + G * row_h + 30
    vmax = float(np.max(np.abs(grid))) if grid.size else 0.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="18">{title}</text>']
    for g in range(G):
        y = top + g * row_h
        parts.append(f'<text x="4" y="{y + row_h - 5}">{header[g]}</text>')
        for t in range(T):
            parts.append(f'<rect x="{left + t * cell}" y="{y}" width="{cell}" height="{row_h}" fill="{_color(grid[t, g], vmax)}"/>')
    parts.append(f'<text x="{left}" y="{height - 8}">t = 0 .. {T - 1}, |max| = {vmax:.3g}</text></svg>')
    return "\n".join(parts) + "\n"


def scatter_svg(points: list[dict], title: str) -> str:
    w, h, pad = 420, 300, 50
    xs = [p["latency_ms"] for p in points]
    ys = [p["aup"] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = (lambda v: pad + (w - 2 * pad) * (0.5 if x1 == x0 else (v - x0) / (x1 - x0)))
    sy = (lambda v: h - pad - (h - 2 * pad) * (0.5 if y1 == y0 else (v - y0) / (y1 - y0)))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">',
             f'<text x="{pad}" y="20">{title}</text>',
             f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
             f'<text x="{w // 2 - 30}" y="{h - 15}">latency (ms)</text>',
             f'<text x="5" y="{pad - 10}">AUP</text>']
    for p in points:
        cx, cy = sx(p["latency_ms"]), sy(p["aup"])
        parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="steelblue"/>')
        parts.append(f'<text x="{cx + 4:.1f}" y="{cy - 4:.1f}">{p["method"]}|{p["smoothing"]}</text>')
    return "\n".join(parts) + "\n</svg>\n"


def bars_svg(labels: list[str], values: list[float], title: str) -> str:
    bw, h, pad = 14, 260, 40
    w = pad * 2 + bw * len(labels)
    vmax = max(values) if values and max(values) > 0 else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + 80}" font-family="sans-serif" font-size="9">',
             f'<text x="{pad}" y="18">{title}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        bh = (h - pad) * v / vmax
        x = pad + i * bw
        parts.append(f'<rect x="{x}" y="{h - bh:.1f}" width="{bw - 2}" height="{bh:.1f}" fill="darkorange"/>')
        parts.append(f'<text transform="translate({x + 8},{h + 4}) rotate(60)">{lab}</text>')
    return "\n".join(parts) + "\n</svg>\n"


def cmd_report(cfg: ExperimentConfig, log=print) -> list[Path]:
    src = _eval_dir(cfg)
    if not (src / "report.csv").exists():
        raise InvalidArgumentError(f"{src / 'report.csv'} not found; run `evaluate` first")
    out = cfg.resolved_output() / "report"
    written = []
    for path in sorted(src.glob("fig6_heatmap_*.csv")):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        grid = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        target = out / (path.stem + ".svg")
        write_text(target, heatmap_svg(rows[0][1:], grid, path.stem.replace("fig6_heatmap_", "")))
        written.append(target)
    points = json.loads((src / "fig7_latency_aup.json").read_text())
    target = out / "fig7_latency_aup.svg"
    write_text(target, scatter_svg(points, "faithfulness vs latency"))
    written.append(target)
    with open(src / "fig8_per_joint.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for method, sm in sorted({(r["method"], r["smoothing"]) for r in rows}):
        sel = [r for r in rows if r["method"] == method and r["smoothing"] == sm]
        target = out / f"fig8_per_joint_{method_file_tag(method + '_' + sm)}.svg"
        write_text(target, bars_svg([r["joint_name"] for r in sel], [float(r["magnitude"]) for r in sel],
                                    f"per-joint magnitude: {method} {sm}"))
        written.append(target)
    write_manifest(out, cfg, "report", files=[p.name for p in written])
    log(f"wrote {len(written)} SVG files to {out}")
    return written
