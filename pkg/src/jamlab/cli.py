"""Command-line entry point for the whole pipeline.

Subcommands: synth, featurize, train, eval, fuse, flops, ablate.
Exit codes: 0 success, 1 config error, 2 I/O error, 3 numeric failure.
Config precedence: --set overrides > config file > scale preset > defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, features, metrics, signals, training
from .model import ModelConfig, VARIANTS, build_model, count_params
from .seeding import derive_seed

OUTPUT_ROOT_ENV = "JAMLAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class ClockSection:
    sample_rate_hz: float = 20e6
    num_samples: int = 20000


@dataclass
class GridSection:
    jnr_min_db: float = -25.0
    jnr_max_db: float = 15.0
    jnr_step_db: float = 1.0
    realizations: int = 1000
    pr_min_db: float = -3.0
    pr_max_db: float = 3.0
    classes: tuple = signals.COMPOUND_CLASSES


@dataclass
class FeatureSection:
    stft_fft_size: int = 4096
    stft_window_continuous: int = 128
    stft_window_burst: int = 64
    stft_hop_fraction: float = 0.08
    welch_segment: int = 2048
    welch_overlap: float = 0.5
    welch_fft_size: int = 4096
    image_side: int = 224
    log_epsilon: float = 1e-12
    clamp_db: float = 80.0


@dataclass
class ModelSection:
    channel_divisor: int = 1
    se_reduction: int = 16
    head_hidden: int = 256
    dropout_p: float = 0.6
    num_classes: int = 9


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 0.0
    split: tuple = (0.8, 0.1, 0.1)
    monte_carlo_runs: int = 10
    run_index: int = 0


@dataclass
class RunConfig:
    """Declarative run description; defaults are the full-scale values."""

    clock: ClockSection = field(default_factory=ClockSection)
    grid: GridSection = field(default_factory=GridSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    master_seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sample_clock(self) -> signals.SampleClock:
        return signals.SampleClock(self.clock.sample_rate_hz, self.clock.num_samples)

    def generation_grid(self) -> dataio.GenerationGrid:
        g = self.grid
        unknown = set(g.classes) - set(signals.COMPOUND_CLASSES)
        if unknown:
            raise ConfigError(f"unknown compound classes {sorted(unknown)}")
        return dataio.GenerationGrid(
            jnr_min_db=g.jnr_min_db, jnr_max_db=g.jnr_max_db, jnr_step_db=g.jnr_step_db,
            realizations=g.realizations, pr_min_db=g.pr_min_db, pr_max_db=g.pr_max_db,
            classes=tuple(g.classes),
        )

    def feature_pipeline(self) -> dataio.FeaturePipelineConfig:
        f = self.features
        return dataio.FeaturePipelineConfig(
            stft_fft_size=f.stft_fft_size,
            stft_window_continuous=f.stft_window_continuous,
            stft_window_burst=f.stft_window_burst,
            stft_hop_fraction=f.stft_hop_fraction,
            welch_segment=f.welch_segment,
            welch_overlap=f.welch_overlap,
            welch_fft_size=f.welch_fft_size,
            image_side=f.image_side,
            log_epsilon=f.log_epsilon,
            clamp_db=f.clamp_db,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        d = m.channel_divisor
        if d < 1:
            raise ConfigError("model.channel_divisor must be >= 1")
        return ModelConfig(
            input_side=self.features.image_side,
            stft_stem=max(1, 32 // d),
            stft_stages=tuple(max(1, c // d) for c in (64, 128, 256, 512)),
            psd_stem=max(1, 64 // d),
            psd_stages=tuple(max(1, c // d) for c in (64, 128)),
            se_reduction=m.se_reduction,
            head_hidden=m.head_hidden,
            num_classes=m.num_classes,
            dropout_p=m.dropout_p,
        )

    def train_config(self) -> training.TrainConfig:
        t = self.train
        return training.TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, lr_max=t.lr_max, lr_min=t.lr_min,
            split=tuple(t.split), dropout_p=self.model.dropout_p,
            master_seed=self.master_seed, monte_carlo_runs=t.monte_carlo_runs,
        )


_SECTION_TYPES = {
    "clock": ClockSection,
    "grid": GridSection,
    "features": FeatureSection,
    "model": ModelSection,
    "train": TrainSection,
}


def _coerce(value, current):
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, int) and not isinstance(value, bool):
        iv = int(value)
        if float(iv) != float(value):
            raise ConfigError(f"expected an integer, got {value!r}")
        return iv
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(value)
    return value


def _apply_section(section, updates: dict, path: str) -> None:
    valid = {f.name for f in dataclasses.fields(section)}
    for key, value in updates.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {path}.{key}")
        try:
            setattr(section, key, _coerce(value, getattr(section, key)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {path}.{key}: {exc}") from exc


def apply_config_dict(config: RunConfig, doc: dict) -> None:
    for key, value in doc.items():
        if key == "master_seed":
            config.master_seed = int(value)
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            _apply_section(getattr(config, key), value, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")


def apply_desk_preset(config: RunConfig) -> None:
    """Desk scale: small images, quarter-width model, short grid and schedule."""
    config.grid.jnr_min_db = 0.0
    config.grid.jnr_max_db = 10.0
    config.grid.jnr_step_db = 10.0
    config.grid.realizations = 100
    config.features.image_side = 64
    config.model.channel_divisor = 4
    config.train.epochs = 20


def _parse_set_override(spec: str) -> tuple:
    if "=" not in spec:
        raise ConfigError(f"--set expects section.key=value, got {spec!r}")
    dotted, raw = spec.split("=", 1)
    parts = dotted.strip().split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def load_run_config(args, base_doc: dict = None) -> RunConfig:
    config = RunConfig()
    if getattr(args, "scale", None) == "desk":
        apply_desk_preset(config)
    if base_doc:
        apply_config_dict(config, base_doc)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        apply_config_dict(config, doc)
    for spec in getattr(args, "set", None) or []:
        parts, value = _parse_set_override(spec)
        if len(parts) == 1 and parts[0] == "master_seed":
            config.master_seed = int(value)
        elif len(parts) == 2 and parts[0] in _SECTION_TYPES:
            _apply_section(getattr(config, parts[0]), {parts[1]: value}, parts[0])
        else:
            raise ConfigError(f"unknown config key {'.'.join(parts)!r}")
    if getattr(args, "seed", None) is not None:
        config.master_seed = args.seed
    return config


def _resolve_out(args, default_name: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        out = Path(root) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(config: RunConfig, out_dir: Path) -> None:
    (out_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def _add_common(parser, needs_out=True):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--jobs", type=int, default=1, help="worker parallelism")
    parser.add_argument("--scale", choices=("paper", "desk"), default="paper",
                        help="preset: full-scale defaults or desk-scale")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    if needs_out:
        parser.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV})")


def cmd_synth(args) -> int:
    config = load_run_config(args)
    out_dir = _resolve_out(args, "dataset")
    _echo_config(config, out_dir)
    grid = config.generation_grid()
    manifest = dataio.generate_dataset(
        grid, config.sample_clock(), config.feature_pipeline(), config.master_seed,
        out_dir, jobs=max(1, args.jobs),
    )
    print(f"wrote {len(manifest)} samples to {out_dir}")
    return 0


def cmd_featurize(args) -> int:
    config = load_run_config(args)
    manifest = dataio.read_manifest(args.manifest)
    src_root = Path(args.manifest).parent
    out_dir = _resolve_out(args, "features")
    _echo_config(config, out_dir)
    pipeline = config.feature_pipeline()
    clock_info = manifest.config["clock"]
    new_records = []
    for rec in manifest.records:
        sig = dataio.read_signal(src_root / rec.iq_path, clock_info["sample_rate_hz"])
        stft_cfg = pipeline.stft_config(rec.stft_window_len)
        tfi, psd = features.signal_features(
            sig, stft_cfg, pipeline.welch_config(), pipeline.image_side,
            pipeline.log_epsilon, pipeline.clamp_db,
        )
        base = rec.sample_id.replace("/", "__")
        tfi_rel, psd_rel = f"{base}_tfi.jlt", f"{base}_psd.jlt"
        dataio.write_tensor(out_dir / tfi_rel, tfi.pixels.astype(np.float32))
        dataio.write_tensor(out_dir / psd_rel, psd.pixels.astype(np.float32))
        new_records.append(dataclasses.replace(rec, tfi_path=tfi_rel, psd_path=psd_rel,
                                               iq_path=str((src_root / rec.iq_path).resolve())))
    new_config = dict(manifest.config)
    new_config["features"] = dataclasses.asdict(pipeline)
    dataio.write_manifest(out_dir / "manifest.txt",
                          dataio.Manifest(new_config, new_records))
    print(f"featurized {len(new_records)} samples into {out_dir}")
    return 0


def _load_split_sets(manifest, root, train_cfg):
    tfi, psd, labels, jnr = dataio.load_feature_arrays(manifest, root)
    dataset = training.FeatureDataset(tfi, psd, labels, jnr)
    split_seed = derive_seed(train_cfg.master_seed, "split")
    train_idx, val_idx, test_idx = training.split_dataset(
        manifest, train_cfg.split, split_seed
    )
    return dataset, train_idx, val_idx, test_idx


def _train_one(config: RunConfig, manifest, root, variant: str, run_index: int,
               log_fn=None):
    train_cfg = config.train_config()
    dataset, train_idx, val_idx, test_idx = _load_split_sets(manifest, root, train_cfg)
    model_cfg = config.model_config()
    classes = manifest.config["grid"]["classes"]
    if model_cfg.num_classes != len(classes):
        # the manifest's class tuple is the label space
        model_cfg = dataclasses.replace(model_cfg, num_classes=len(classes))
    model = build_model(
        model_cfg, variant=variant,
        init_seed=derive_seed(config.master_seed, "init", run_index),
    )
    history = training.fit(model, dataset.subset(train_idx), dataset.subset(val_idx),
                           train_cfg, run_index=run_index, log_fn=log_fn)
    return model, history, dataset, test_idx


def cmd_train(args) -> int:
    config = load_run_config(args)
    manifest = dataio.read_manifest(args.manifest)
    root = Path(args.manifest).parent
    out_dir = _resolve_out(args, "train")
    _echo_config(config, out_dir)
    log_path = out_dir / "train_log.tsv"
    with open(log_path, "w") as log_file:
        log_file.write("epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\n")

        def log_fn(rec):
            line = (f"{rec['epoch']}\t{rec['lr']:.8g}\t{rec['train_loss']:.6f}"
                    f"\t{rec['val_loss']:.6f}\t{rec['val_accuracy']:.6f}")
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        model, history, _, _ = _train_one(
            config, manifest, root, args.variant, config.train.run_index, log_fn
        )
    ckpt = out_dir / "checkpoint.jlc"
    dataio.save_checkpoint(model, ckpt, extra_meta={
        "history_epochs": len(history),
        "run_config": config.to_dict(),
    })
    print(f"saved checkpoint to {ckpt}")
    return 0


def _per_jnr_accuracy(preds, labels, jnr):
    rows = []
    for level in sorted(set(jnr.tolist())):
        mask = jnr == level
        acc = float(np.mean(preds[mask] == labels[mask]))
        rows.append((level, int(mask.sum()), acc))
    return rows


def cmd_eval(args) -> int:
    model, meta = dataio.load_checkpoint(args.checkpoint)
    manifest = dataio.read_manifest(args.manifest)
    root = Path(args.manifest).parent
    out_dir = _resolve_out(args, "eval")
    # default to the training-time config so the test split is the same one
    saved = meta.get("extra", {}).get("run_config")
    config = load_run_config(args, base_doc=saved)
    train_cfg = config.train_config()
    dataset, _, _, test_idx = _load_split_sets(manifest, root, train_cfg)
    test_set = dataset.subset(test_idx)
    loss, accuracy, preds = training.evaluate(model, test_set)
    class_names = tuple(manifest.config["grid"]["classes"])
    cm = metrics.confusion_from_predictions(test_set.labels, preds, class_names)
    oa = metrics.overall_accuracy(cm)
    per_class = metrics.precision_recall_f1(cm)
    (out_dir / "confusion.tsv").write_text(metrics.confusion_to_tsv(cm) + "\n")
    (out_dir / "class_metrics.tsv").write_text(
        metrics.class_metrics_to_tsv(per_class) + "\n"
    )
    jnr_rows = _per_jnr_accuracy(preds, test_set.labels, test_set.jnr_db)
    jnr_lines = ["jnr_db\tcount\taccuracy"]
    jnr_lines += [f"{lvl:g}\t{n}\t{acc:.6f}" for lvl, n, acc in jnr_rows]
    (out_dir / "accuracy_vs_jnr.tsv").write_text("\n".join(jnr_lines) + "\n")
    _plot_confusion(cm, out_dir / "confusion.png")
    _plot_jnr_curve(jnr_rows, out_dir / "accuracy_vs_jnr.png")
    print(f"test loss {loss:.4f}  OA {oa:.2f}%  ({len(test_set)} samples)")
    return 0


def _plot_confusion(cm, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(cm.num_classes), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(cm.num_classes), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(cm.num_classes):
        for j in range(cm.num_classes):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    fontsize=7)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_jnr_curve(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    levels = [r[0] for r in rows]
    accs = [100.0 * r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(levels, accs, marker="o")
    ax.set_xlabel("JNR (dB)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 101)
    ax.grid(True, alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_fuse(args) -> int:
    model, meta = dataio.load_checkpoint(args.checkpoint)
    out_dir = _resolve_out(args, "fused")
    if model.is_fused:
        raise ConfigError("checkpoint is already fused")
    side = model.config.input_side
    rng = np.random.default_rng(derive_seed(0, "fuse-probe"))
    probes = [
        (rng.random((2, 1, side, side), dtype=np.float32),
         rng.random((2, 1, side, side), dtype=np.float32))
        for _ in range(4)
    ]
    import jamlab.tensor as T

    with T.no_grad():
        before = [model.forward(T.Tensor(a), T.Tensor(b)).data for a, b in probes]
        model.fuse()
        after = [model.forward(T.Tensor(a), T.Tensor(b)).data for a, b in probes]
    deviation = max(float(np.max(np.abs(x - y))) for x, y in zip(before, after))
    ckpt = out_dir / "checkpoint_fused.jlc"
    dataio.save_checkpoint(model, ckpt, extra_meta={"fuse_probe_deviation": deviation})
    (out_dir / "fusion_report.txt").write_text(
        f"probe batches: {len(probes)}\nmax output deviation: {deviation:.3e}\n"
    )
    print(f"fused checkpoint at {ckpt}; max probe deviation {deviation:.3e}")
    return 0


def cmd_flops(args) -> int:
    config = load_run_config(args)
    model = build_model(config.model_config(), variant=args.variant)
    report = metrics.flops_model(model, fused_acb=not args.train_form)
    print(report.render_table())
    print(f"parameters: {count_params(model):,}")
    if getattr(args, "out", None):
        out_dir = _resolve_out(args, "flops")
        (out_dir / "flops.tsv").write_text(report.machine_rows() + "\n")
    return 0


def cmd_ablate(args) -> int:
    config = load_run_config(args)
    manifest = dataio.read_manifest(args.manifest)
    root = Path(args.manifest).parent
    out_dir = _resolve_out(args, "ablation")
    _echo_config(config, out_dir)
    results = {}
    for variant in VARIANTS:
        accs = []
        for run in range(args.runs):
            model, _, dataset, test_idx = _train_one(config, manifest, root, variant, run)
            _, accuracy, _ = training.evaluate(model, dataset.subset(test_idx))
            accs.append(100.0 * accuracy)
            print(f"{variant} run {run}: OA {accs[-1]:.2f}%")
        results[variant] = (float(np.mean(accs)), float(np.std(accs)),
                            count_params(model))
    lines = ["variant\tmean_oa\tstd_oa\tparams"]
    for variant, (mean_oa, std_oa, params) in results.items():
        lines.append(f"{variant}\t{mean_oa:.4f}\t{std_oa:.4f}\t{params}")
    table = "\n".join(lines)
    (out_dir / "ablation.tsv").write_text(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jamlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the dataset grid")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("featurize", help="re-render feature images from stored IQ")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fuse", help="fold ACB branches into inference kernels")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("flops", help="report conv/linear FLOPs for a config")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--train-form", action="store_true",
                   help="count unfused three-branch ACBs")
    _add_common(p)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("ablate", help="train and compare all model variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--runs", type=int, default=3)
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (dataio.CorruptFileError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
