"""Experiment orchestration: dataset preparation, training variants, stream
evaluation, the beta sweep, the support-set ablation, and report tables.

Layout under the output directory:

  data/glyphs.records            gen-data output
  train/<variant>/seed<k>/       checkpoint.ckpt(+.bin), train_log.jsonl,
                                 resolved.config
  adapt/<name>/seed<k>/          result.tsv, stream.stream(+.streambin),
                                 resolved.config
  sweep/<row>/seed<k>/           per-beta results + sweep/beta_table.tsv
  ablate/<row>/seed<k>/          ablation results + ablate/table.tsv
  report.txt, report.tsv         cmd_report output

Everything runs sequentially and deterministically; independent seeds can be
dispatched to separate processes via the --seed flag when wall-clock matters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .adapt import (
    AdaptConfig,
    adapt_stream,
    aggregate_runs,
    read_result_records,
    read_result_summary,
    save_result,
    stream_accuracy,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    adapt_config,
    convnet_spec,
    derive_seeds,
    meta_config,
    serialize_config,
    source_domains,
    target_domains,
    validate_dataset_path,
)
from .datasets import Dataset, generate_synthetic_glyphs, load_records, save_records
from .metatrain import TrainResult, joint_config_matching, joint_train, train
from .model import DualBranchConvNet
from .streams import build_test_stream, save_stream

TRAIN_VARIANTS = ("meta", "batch_inner", "support_reuse", "support_no_extra",
                  "vanilla", "joint_ssl")


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(cfg: RunConfig, directory: Path) -> None:
    (directory / "resolved.config").write_text(serialize_config(cfg), encoding="utf-8")


def prepare_dataset(cfg: RunConfig, data_seed: int) -> Dataset:
    if cfg.dataset_source == "synthetic":
        return generate_synthetic_glyphs(cfg.dataset_samples, cfg.dataset_classes,
                                         cfg.dataset_image_size, _rng(data_seed),
                                         channels=cfg.dataset_channels)
    validate_dataset_path(cfg)
    return load_records(cfg.dataset_source)


def build_model(cfg: RunConfig) -> DualBranchConvNet:
    return DualBranchConvNet(convnet_spec(cfg))


def cmd_gen_data(cfg: RunConfig, out: Path) -> Path:
    """Materialize the synthetic dataset as a records file."""
    seed = derive_seeds(cfg, cfg.run_seeds[0]).data
    dataset = generate_synthetic_glyphs(cfg.dataset_samples, cfg.dataset_classes,
                                        cfg.dataset_image_size, _rng(seed),
                                        channels=cfg.dataset_channels)
    directory = _ensure_dir(Path(out) / "data")
    path = directory / "glyphs.dataset"       # manifest; pixel bytes go to glyphs.records
    save_records(dataset, path)
    _write_resolved(cfg, directory)
    return path


def train_one(cfg: RunConfig, variant: str, seed: int, out: Path) -> Path:
    """Train a single variant for one seed; returns the checkpoint path."""
    if variant not in TRAIN_VARIANTS:
        raise ConfigError(f"unknown training variant {variant!r}; "
                          f"choose from {', '.join(TRAIN_VARIANTS)}")
    sub = derive_seeds(cfg, seed)
    dataset = prepare_dataset(cfg, sub.data)
    model = build_model(cfg)
    init = model.init_params(_rng(sub.init))
    src = source_domains(cfg)
    directory = _ensure_dir(Path(out) / "train" / variant / f"seed{seed}")
    log_path = directory / "train_log.jsonl"
    log_path.unlink(missing_ok=True)

    if variant in ("vanilla", "joint_ssl"):
        mcfg = meta_config(cfg)
        iters = mcfg.iterations_per_epoch or max(1, len(dataset) // max(mcfg.support_size(), 1))
        jcfg = joint_config_matching(mcfg, iters, cfg.baseline_batch_size,
                                     use_ssl=(variant == "joint_ssl"))
        result: TrainResult = joint_train(model, dataset, src, jcfg,
                                          _rng(sub.stream), init=init, log_path=log_path)
    else:
        mcfg = meta_config(cfg,
                           batch_inner=(variant == "batch_inner") or cfg.meta_batch_inner,
                           support_reuse=(variant == "support_reuse") or cfg.meta_support_reuse,
                           support_no_extra=(variant == "support_no_extra") or cfg.meta_support_no_extra)
        result = train(model, dataset, src, mcfg, _rng(sub.stream),
                       init=init, log_path=log_path)
    ckpt = directory / "checkpoint.ckpt"
    save_checkpoint(result.bundle, ckpt)
    _write_resolved(cfg, directory)
    return ckpt


def cmd_train(cfg: RunConfig, out: Path, variant: str = "meta") -> list[Path]:
    return [train_one(cfg, variant, seed, out) for seed in cfg.run_seeds]


def adapt_one(cfg: RunConfig, checkpoint: Path, seed: int, directory: Path,
              acfg: AdaptConfig) -> float:
    """Evaluate one checkpoint on one seeded test stream; returns accuracy."""
    sub = derive_seeds(cfg, seed)
    dataset = prepare_dataset(cfg, sub.data)
    stream = build_test_stream(dataset, target_domains(cfg), cfg.stream_kind,
                               cfg.stream_period, cfg.stream_length,
                               _rng(sub.adaptation))
    model = build_model(cfg)
    bundle = load_checkpoint(checkpoint)
    result = adapt_stream(model, bundle, stream, acfg)
    _ensure_dir(directory)
    save_stream(stream, directory / "stream.stream")
    save_result(result, directory / "result.tsv",
                extras={"schedule": cfg.stream_kind,
                        "period": str(cfg.stream_period),
                        "seed": str(seed),
                        "checkpoint": Path(checkpoint).name})
    _write_resolved(cfg, directory)
    return stream_accuracy(result).overall


def _summary_lines(name: str, per_seed: list[tuple[int, float]]) -> list[str]:
    lines = [f"name = {name}", f"runs = {len(per_seed)}"]
    for seed, acc in per_seed:
        lines.append(f"accuracy[seed{seed}] = {acc!r}")
    accs = [a for _, a in per_seed]
    if len(accs) >= 2:
        agg = aggregate_runs(accs)
        lines.append(f"mean = {agg.mean!r}")
        lines.append(f"ci95_halfwidth = {agg.halfwidth!r}")
    else:
        lines.append(f"mean = {accs[0]!r}")
        lines.append("ci95_halfwidth = -")
    return lines


def _require_checkpoint(checkpoint: Path) -> Path:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint: no such file: {checkpoint}")
    return checkpoint


def cmd_adapt(cfg: RunConfig, out: Path, checkpoint: Path) -> Path:
    """Run the configured adaptation mode over every seed's test stream."""
    checkpoint = _require_checkpoint(checkpoint)
    acfg = adapt_config(cfg)
    base = Path(out) / "adapt" / acfg.mode
    per_seed = [(seed, adapt_one(cfg, checkpoint, seed, base / f"seed{seed}", acfg))
                for seed in cfg.run_seeds]
    summary = base / "summary.txt"
    summary.write_text("\n".join(_summary_lines(acfg.mode, per_seed)) + "\n",
                       encoding="utf-8")
    return summary


def cmd_sweep_beta(cfg: RunConfig, out: Path, checkpoint: Path,
                   betas=None) -> Path:
    """Evaluate a range of test-time learning rates plus a frozen reference."""
    checkpoint = _require_checkpoint(checkpoint)
    betas = sorted(set(cfg.adapt_beta_sweep if betas is None else betas))
    rows: list[tuple[str, str, list[tuple[int, float]]]] = []
    base = Path(out) / "sweep"

    def run_row(name: str, acfg: AdaptConfig) -> list[tuple[int, float]]:
        return [(seed, adapt_one(cfg, checkpoint, seed, base / name / f"seed{seed}", acfg))
                for seed in cfg.run_seeds]

    rows.append(("no_adapt", "-",
                 run_row("no_adapt", adapt_config(cfg, mode="no_adapt", lr=0.0))))
    for beta in betas:
        name = f"beta_{beta!r}"
        rows.append((name, repr(beta),
                     run_row(name, adapt_config(cfg, mode="ours_sample", lr=beta))))

    lines = ["name\tbeta\truns\tmean_accuracy\tci95_halfwidth"]
    for name, beta_text, per_seed in rows:
        accs = [a for _, a in per_seed]
        if len(accs) >= 2:
            agg = aggregate_runs(accs)
            lines.append(f"{name}\t{beta_text}\t{agg.n}\t{agg.mean!r}\t{agg.halfwidth!r}")
        else:
            lines.append(f"{name}\t{beta_text}\t1\t{accs[0]!r}\t-")
    table = base / "beta_table.tsv"
    _ensure_dir(base)
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table


# ablation rows: display label, training variant, adaptation mode
ABLATION_ROWS = (
    ("full", "meta", "ours_sample"),
    ("w/o Adapt.", "meta", "no_adapt"),
    ("w/o Seq.", "batch_inner", "ours_sample"),
    ("support-reuse", "support_reuse", "ours_sample"),
    ("D'=0", "support_no_extra", "ours_sample"),
)

_ROW_DIRS = {"full": "full", "w/o Adapt.": "wo_adapt", "w/o Seq.": "wo_seq",
             "support-reuse": "support_reuse", "D'=0": "no_extra"}


def cmd_ablate(cfg: RunConfig, out: Path) -> Path:
    """Train every ablation variant per seed, adapt, and tabulate."""
    base = Path(out) / "ablate"
    checkpoints: dict[tuple[str, int], Path] = {}
    for _, variant, _ in ABLATION_ROWS:
        for seed in cfg.run_seeds:
            if (variant, seed) not in checkpoints:
                checkpoints[(variant, seed)] = train_one(cfg, variant, seed, out)

    lines = ["method\truns\tmean_accuracy\tci95_halfwidth"]
    for label, variant, mode in ABLATION_ROWS:
        acfg = adapt_config(cfg, mode=mode, lr=0.0 if mode == "no_adapt" else cfg.adapt_lr)
        per_seed = []
        for seed in cfg.run_seeds:
            directory = base / _ROW_DIRS[label] / f"seed{seed}"
            per_seed.append((seed, adapt_one(cfg, checkpoints[(variant, seed)],
                                             seed, directory, acfg)))
        accs = [a for _, a in per_seed]
        if len(accs) >= 2:
            agg = aggregate_runs(accs)
            lines.append(f"{label}\t{agg.n}\t{agg.mean!r}\t{agg.halfwidth!r}")
        else:
            lines.append(f"{label}\t1\t{accs[0]!r}\t-")
    table = base / "table.tsv"
    _ensure_dir(base)
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table


def _collect_results(results_dir: Path) -> dict[str, list[Path]]:
    groups: dict[str, list[Path]] = {}
    for path in sorted(results_dir.rglob("result.tsv")):
        with open(path, encoding="utf-8") as fh:
            if not fh.readline().startswith("# stream-result-v1"):
                continue
        rel = path.parent.relative_to(results_dir)
        group = str(rel.parent) if rel.parent != Path(".") else str(rel)
        groups.setdefault(group, []).append(path)
    return groups


def cmd_report(results_dir: Path) -> tuple[Path, Path]:
    """Aggregate every stored stream result under a directory into tables.

    Accuracies are recomputed from the raw per-step records and checked
    against each file's stored summary; per-domain columns come from the
    summaries.  Regeneration is byte-identical.
    """
    results_dir = Path(results_dir)
    groups = _collect_results(results_dir)
    if not groups:
        raise ConfigError(f"no results under {results_dir}")

    tsv = ["method\tperiod\truns\tmean_accuracy\tci95_halfwidth\tper_domain"]
    txt = ["method                          T_p       runs  mean ± CI95          per-domain",
           "-" * 100]
    for group in sorted(groups):
        accs, periods, domain_accs = [], set(), {}
        for path in groups[group]:
            records = read_result_records(path)
            summary = read_result_summary(path)
            acc = stream_accuracy(records).overall
            if abs(acc - float(summary["accuracy"])) > 0:
                raise ValueError(f"{path}: stored accuracy disagrees with records")
            accs.append(acc)
            periods.add(summary.get("period", "-"))
            for key, value in summary.items():
                if key.startswith("accuracy[") and key.endswith("]"):
                    domain_accs.setdefault(key[9:-1], []).append(float(value))
        period = ",".join(sorted(periods))
        if len(accs) >= 2:
            agg = aggregate_runs(accs)
            mean, hw = agg.mean, repr(agg.halfwidth)
            mean_txt = f"{agg.mean:.4f} ± {agg.halfwidth:.4f}"
        else:
            mean, hw = accs[0], "-"
            mean_txt = f"{accs[0]:.4f}"
        domains = " ".join(f"{k}={np.mean(v):.4f}" for k, v in sorted(domain_accs.items()))
        tsv.append(f"{group}\t{period}\t{len(accs)}\t{mean!r}\t{hw}\t"
                   + ",".join(f"{k}={np.mean(v)!r}" for k, v in sorted(domain_accs.items())))
        txt.append(f"{group:<30}  {period:<8}  {len(accs):<4}  {mean_txt:<19}  {domains}")

    txt_path = results_dir / "report.txt"
    tsv_path = results_dir / "report.tsv"
    txt_path.write_text("\n".join(txt) + "\n", encoding="utf-8")
    tsv_path.write_text("\n".join(tsv) + "\n", encoding="utf-8")
    return txt_path, tsv_path
