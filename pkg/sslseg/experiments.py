"""
Experiment configuration and the commands behind the command line: cohort
generation, pretraining, finetuning, the label-efficiency sweep and
per-volume evaluation.
"""
import configparser
import logging
import os
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import List

import numpy as np
from natsort import natsorted

from . import io, models, plot, utils
from .contrastive import ContrastiveConfig, pretrain_contrastive
from .regression import CorruptionConfig, pretrain_regression
from .synth import PhantomConfig, generate_subject, subject_id
from .train import ScheduleConfig, evaluate_volume, finetune
from .transforms import AugmentationConfig, FinetuneAugmentConfig, normalize_unit
from .unet_torch import UNetConfig
from .utils import ConfigError, DataError

experiments_logger = logging.getLogger(__name__)

METHODS = ("regression", "contrastive", "none")
RESULT_COLUMNS = ("method", "N", "seed", "class", "dice", "seconds")


@dataclass
class DatasetConfig:
    manifest: str = ""
    n_unlabeled: int = 200
    n_labeled: int = 32
    n_train: int = 24
    n_val: int = 2
    n_test: int = 6
    split_seed: int = 0

    def validate(self):
        for name in ("n_unlabeled", "n_labeled", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}={getattr(self, name)} must be >= 0")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if not self.manifest and self.n_train + self.n_val + self.n_test > self.n_labeled:
            raise ValueError(f"n_train + n_val + n_test = "
                             f"{self.n_train + self.n_val + self.n_test} exceeds "
                             f"n_labeled={self.n_labeled}")
        return self


@dataclass
class PretrainConfig:
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    seed: int = 0

    def validate(self):
        if not self.methods:
            raise ValueError("methods must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}, expected a subset of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError(f"methods {self.methods} contain duplicates")
        return self


@dataclass
class SweepConfig:
    n_values: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    nested_subsets: bool = False
    baseline_all_methods: bool = False
    augment: bool = True

    def validate(self):
        if not self.n_values:
            raise ValueError("n_values must not be empty")
        if any(n < 1 for n in self.n_values) or list(self.n_values) != sorted(set(self.n_values)):
            raise ValueError(f"n_values {self.n_values} must be positive, unique and ascending")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self


@dataclass
class OutputConfig:
    dir: str = "results"
    record_seconds: bool = True
    save_overlays: bool = True

    def validate(self):
        if not self.dir:
            raise ValueError("dir must not be empty")
        return self


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pretrain_schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(epochs=50))
    regression: CorruptionConfig = field(default_factory=CorruptionConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    finetune_augment: FinetuneAugmentConfig = field(default_factory=FinetuneAugmentConfig)
    finetune_schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def path(self, *parts):
        return os.path.join(self.output.dir, *parts)


# section -> [(attribute of ExperimentConfig, key prefix, key aliases, excluded keys)]
_SECTIONS = {
    "dataset": [("dataset", "", {}, ()), ("phantom", "", {}, ())],
    "model": [("model", "", {}, ())],
    "pretrain": [("pretrain", "", {}, ()),
                 ("pretrain_schedule", "", {"lr": "initial_lr", "patience": "plateau_patience",
                                            "min_delta": "plateau_min_delta"}, ())],
    "regression": [("regression", "", {}, ("seed",))],
    "contrastive": [("contrastive", "", {}, ("seed",))],
    "augment": [("augment", "", {}, ()), ("finetune_augment", "finetune_", {}, ())],
    "finetune": [("finetune_schedule", "", {"lr": "initial_lr", "patience": "plateau_patience",
                                            "min_delta": "plateau_min_delta"}, ()),
                 ("sweep", "", {}, ())],
    "output": [("output", "", {}, ())],
}
_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def _parse_scalar(tp, text):
    text = text.strip()
    if tp is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"{text!r} is not a boolean")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _parse_value(tp, text):
    origin = typing.get_origin(tp)
    if origin in (tuple, list):
        args = typing.get_args(tp)
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        if origin is tuple:
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values, got {len(items)}")
            return tuple(_parse_scalar(a, t) for a, t in zip(args, items))
        return [_parse_scalar(args[0], t) for t in items]
    return _parse_scalar(tp, text)


def _key_map(section):
    """ INI key -> (attribute, field) for one section """
    keys = {}
    for attr, prefix, aliases, excluded in _SECTIONS[section]:
        cls = type(getattr(ExperimentConfig(), attr))
        for f in fields(cls):
            if f.name in excluded:
                continue
            keys[prefix + f.name] = (attr, f)
        for alias, target in aliases.items():
            keys[prefix + alias] = keys[prefix + target]
    return keys


def parse_config(parser):
    """
    Build an ExperimentConfig from a ConfigParser.

    Raises:
        ConfigError: naming section.key for unknown keys, unparsable values
            and failed invariants.
    """
    cfg = ExperimentConfig()
    given_num_classes = False
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}], expected one of {list(_SECTIONS)}")
        keys = _key_map(section)
        for key, text in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            attr, f = keys[key]
            try:
                value = _parse_value(f.type, text)
            except ValueError as err:
                raise ConfigError(f"{section}.{key}: {err}") from None
            setattr(cfg, attr, replace(getattr(cfg, attr), **{f.name: value}))
            given_num_classes |= (section == "model" and f.name == "num_classes")

    if not given_num_classes and not cfg.dataset.manifest:
        cfg.model = replace(cfg.model, num_classes=cfg.phantom.num_classes)
    cfg.regression = replace(cfg.regression, seed=cfg.pretrain.seed)
    cfg.contrastive = replace(cfg.contrastive, seed=cfg.pretrain.seed)
    return validate_config(cfg)


def validate_config(cfg):
    """Run every section's invariants, re-raised as ConfigError naming the section."""
    checks = [("dataset", cfg.dataset.validate), ("model", cfg.model.validate),
              ("pretrain", cfg.pretrain.validate), ("pretrain", cfg.pretrain_schedule.validate),
              ("regression", cfg.regression.validate), ("contrastive", cfg.contrastive.validate),
              ("augment", cfg.augment.validate), ("augment", cfg.finetune_augment.validate),
              ("finetune", cfg.finetune_schedule.validate), ("finetune", cfg.sweep.validate),
              ("output", cfg.output.validate)]
    if not cfg.dataset.manifest:
        checks.append(("dataset", lambda: cfg.phantom.validate(divisor=2**cfg.model.depth)))
    for section, check in checks:
        try:
            check()
        except ValueError as err:
            error_message = f"[{section}] {err}"
            experiments_logger.critical(error_message)
            raise ConfigError(error_message) from None
    if not cfg.dataset.manifest and cfg.model.num_classes != cfg.phantom.num_classes:
        raise ConfigError(f"model.num_classes={cfg.model.num_classes} does not match "
                          f"dataset.n_label_classes={cfg.phantom.n_label_classes} "
                          f"(+1 background)")
    if not cfg.dataset.manifest and cfg.sweep.n_values[-1] > cfg.dataset.n_train:
        raise ConfigError(f"finetune.n_values {cfg.sweep.n_values} exceed the "
                          f"{cfg.dataset.n_train} training subjects")
    return cfg


def load_config(path=None, out_dir=None, seed=None):
    """
    Read an INI experiment config; defaults apply to missing sections/keys.

    Args:
        path (str, optional): config file, None for all defaults.
        out_dir (str, optional): overrides output.dir.
        seed (int, optional): overrides the pretraining and generation seeds.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
    overrides = []
    if out_dir is not None:
        overrides.append(("output", "dir", str(out_dir)))
    if seed is not None:
        overrides += [("pretrain", "seed", str(int(seed))), ("dataset", "seed", str(int(seed)))]
    for section, key, value in overrides:
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = value
    return parse_config(parser)


class Cohort:
    """Subjects of one experiment with their split, loaded or generated on demand."""

    def __init__(self, manifest, base_dir=None, phantom=None):
        self.manifest = manifest
        self.base_dir = base_dir
        self.phantom = phantom
        self._cache = {}

    def entries(self, split):
        return natsorted(self.manifest.split(split), key=lambda e: e.subject_id)

    def volume(self, entry):
        if entry.subject_id not in self._cache:
            if self.phantom is not None:
                index = int(entry.subject_id.rsplit("_", 1)[1])
                images, labels = generate_subject(self.phantom, index)
                volume = io.Volume(entry.subject_id, normalize_unit(images)[:, np.newaxis],
                                   labels if entry.labeled else None)
            else:
                volume = io.load_entry(entry, self.base_dir)
            self._cache[entry.subject_id] = volume
        return self._cache[entry.subject_id]

    def stack(self, entries, with_labels=True):
        """Concatenate slices of several subjects.

        Returns:
            tuple: (slices [N x 1 x H x W], labels [N x H x W] or None,
            subject index of every slice).
        """
        if not entries:
            return np.zeros((0, 1, 1, 1), np.float32), None, np.zeros(0, np.int64)
        vols = [self.volume(e) for e in entries]
        shapes = {v.slices.shape[1:] for v in vols}
        if len(shapes) > 1:
            raise DataError(f"subjects have different slice shapes {natsorted(shapes)}")
        slices = np.concatenate([v.slices for v in vols])
        labels = np.concatenate([v.labels for v in vols]) if with_labels else None
        slice_subject = np.concatenate([np.full(v.n_slices, i) for i, v in enumerate(vols)])
        return slices, labels, slice_subject


def phantom_entries(cfg):
    """ manifest entries of the in-memory phantom cohort, labeled after the unlabeled ones """
    d = cfg.dataset
    entries = []
    for index in range(d.n_unlabeled + d.n_labeled):
        sid = subject_id(index)
        path = sid + io.VOLUME_SUFFIX
        entries.append(io.ManifestEntry(sid, path, path if index >= d.n_unlabeled else None))
    return entries


def phantom_manifest(cfg):
    d = cfg.dataset
    params = {"phantom": {f.name: getattr(cfg.phantom, f.name) for f in fields(cfg.phantom)},
              "n_unlabeled": d.n_unlabeled, "n_labeled": d.n_labeled}
    return io.split_manifest(phantom_entries(cfg), counts=(d.n_train, d.n_val, d.n_test),
                             seed=d.split_seed, params=params)


def load_cohort(cfg):
    if cfg.dataset.manifest:
        manifest = io.load_manifest(cfg.dataset.manifest)
        return Cohort(manifest, base_dir=os.path.dirname(os.path.abspath(cfg.dataset.manifest)))
    return Cohort(phantom_manifest(cfg), phantom=cfg.phantom)


def cmd_gen_data(cfg):
    """Write the phantom cohort as SSLVOL1 files plus manifest.tsv under <out>/data."""
    if cfg.dataset.manifest:
        raise ConfigError("dataset.manifest is set, there is no phantom cohort to generate")
    cohort = load_cohort(cfg)
    data_dir = cfg.path("data")
    os.makedirs(data_dir, exist_ok=True)
    for entry in cohort.manifest.entries:
        io.save_volume(os.path.join(data_dir, entry.volume_path), cohort.volume(entry))
    manifest_path = os.path.join(data_dir, "manifest.tsv")
    io.save_manifest(manifest_path, cohort.manifest)
    experiments_logger.info(f"wrote {len(cohort.manifest.entries)} volumes and {manifest_path}, "
                            f"splits {cohort.manifest.counts()}")
    return manifest_path


def checkpoint_path(cfg, method):
    return cfg.path("checkpoints", f"pretrain_{method}.ckpt")


def _pretrain_one(cfg, cohort, method):
    seed = cfg.pretrain.seed
    net = models.build_model(cfg.model, rng_seed=seed)
    history_path = cfg.path(f"pretrain_{method}_history.csv")
    if method == "none":
        io.write_csv(history_path, ["epoch", "train_loss", "lr"], [])
    else:
        data, _, slice_subject = cohort.stack(cohort.entries("pretrain"), with_labels=False)
        if len(data) == 0:
            error_message = "the pretraining pool is empty"
            experiments_logger.critical(error_message)
            raise DataError(error_message)
        t0 = time.time()
        if method == "regression":
            models.swap_heads(net, "regression", seed=seed)
            net, history = pretrain_regression(net, data, cfg.regression, cfg.pretrain_schedule)
            io.write_history_csv(history_path, history)
        else:
            net, histories = pretrain_contrastive(net, data, cfg.contrastive, cfg.augment,
                                                  cfg.pretrain_schedule,
                                                  slice_subject=slice_subject)
            rows = [[stage, e, loss, lr] for stage in ("global", "local")
                    for e, loss, lr in zip(histories[stage]["epoch"],
                                           histories[stage]["train_loss"],
                                           histories[stage]["lr"])]
            io.write_csv(history_path, ["stage", "epoch", "train_loss", "lr"], rows)
        experiments_logger.info(f"pretrained {method} in {time.time() - t0:.2f}s")
    path = checkpoint_path(cfg, method)
    net.save_model(path, metadata={"method": method, "seed": seed})
    return path


def cmd_pretrain(cfg, methods=None):
    """
    Pretrain every configured method (or the given ones).

    Writes checkpoints/pretrain_<method>.ckpt and pretrain_<method>_history.csv
    under the output directory. Method "none" stores the random initialization
    and an empty history. The regression history has one row per epoch; the
    contrastive history has one row per epoch of each stage (global, then
    local), so 2 x epochs rows keyed by its leading "stage" column.

    Returns:
        dict: method -> checkpoint path.
    """
    methods = list(methods or cfg.pretrain.methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown pretraining method(s) {unknown}, expected {METHODS}")
    cohort = load_cohort(cfg)
    return {method: _pretrain_one(cfg, cohort, method) for method in methods}


def draw_subset(train_ids, n, seed, nested=False):
    """
    Draw n training subjects for one (N, seed) cell.

    Without nesting every (N, seed) draws independently without replacement;
    with nesting a seed fixes one ordering so smaller subsets are prefixes of
    larger ones.
    """
    train_ids = natsorted(train_ids)
    if n > len(train_ids):
        raise ConfigError(f"N={n} exceeds the {len(train_ids)} training subjects")
    if nested:
        order = utils.rng_stream(seed).permutation(len(train_ids))
    else:
        order = utils.rng_stream(seed, n).choice(len(train_ids), n, replace=False)
    return [train_ids[i] for i in order[:n]]


def sweep_threads():
    value = os.environ.get("SSLSEG_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"SSLSEG_THREADS={value!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"SSLSEG_THREADS={n} must be >= 1")
    return n


def _load_pretrained(path):
    try:
        net, _ = io.model_from_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    return net


def _finetune_cell(cfg, cohort, path, subset, seed):
    """ finetune one model on the given subjects and return (net, history) """
    by_id = {e.subject_id: e for e in cohort.entries("train")}
    x, y, _ = cohort.stack([by_id[s] for s in subset])
    val_x, val_y, _ = cohort.stack(cohort.entries("val"))
    net = _load_pretrained(path)
    models.swap_heads(net, "segmentation", seed=seed)
    augment = cfg.finetune_augment if cfg.sweep.augment else None
    return finetune(net, x, y, val_x, val_y, schedule=cfg.finetune_schedule, seed=seed,
                    augment=augment)


def _test_dice(cfg, cohort, net):
    """ per-class Dice averaged over the test subjects """
    classes = list(range(1, cfg.model.num_classes))
    scores = {c: [] for c in classes}
    for entry in cohort.entries("test"):
        vol = cohort.volume(entry)
        for c, d in evaluate_volume(net, vol.slices, vol.labels, classes).items():
            scores[c].append(d)
    return {c: float(np.mean(v)) for c, v in scores.items()}


def _run_cell(cfg, cohort, method, n, seed, subset):
    t0 = time.time()
    net, _ = _finetune_cell(cfg, cohort, checkpoint_path(cfg, method), subset, seed)
    dice = _test_dice(cfg, cohort, net)
    seconds = time.time() - t0 if cfg.output.record_seconds else 0.0
    experiments_logger.info(f"{method} N={n} seed={seed} dice="
                            f"{', '.join(f'{d:.3f}' for d in dice.values())}")
    return [(method, n, seed, c, d, seconds) for c, d in dice.items()]


def _summary(rows):
    groups = {}
    for method, n, _, c, d, _ in rows:
        groups.setdefault((method, n, c), []).append(d)
    return [(method, n, c, float(np.mean(v)), float(np.std(v)), len(v))
            for (method, n, c), v in sorted(groups.items())]


def _sort_rows(rows):
    return sorted(rows, key=lambda r: (r[0], r[1], r[2], r[3]))


def cmd_sweep(cfg):
    """
    Finetune every (method, N, seed) cell and evaluate on the test cohort.

    Writes results.csv, baseline.csv (full-data supervised arm per seed),
    summary.csv and dice_vs_n.svg under the output directory. Cells run in a
    thread pool capped by SSLSEG_THREADS; rows are sorted before writing.

    Returns:
        list of tuple: result rows (method, N, seed, class, dice, seconds).
    """
    cohort = load_cohort(cfg)
    train_ids = [e.subject_id for e in cohort.entries("train")]
    if not cohort.entries("test"):
        raise DataError("the test split is empty")
    too_large = [n for n in cfg.sweep.n_values if n > len(train_ids)]
    if too_large:
        error_message = (f"N values {too_large} exceed the {len(train_ids)} training subjects")
        experiments_logger.critical(error_message)
        raise ConfigError(error_message)

    methods = list(cfg.pretrain.methods)
    missing = [m for m in methods + ["none"] if not os.path.exists(checkpoint_path(cfg, m))]
    if missing:
        experiments_logger.info(f"pretraining missing checkpoints {missing}")
        cmd_pretrain(cfg, missing)

    cells = [(m, n, seed, draw_subset(train_ids, n, seed, cfg.sweep.nested_subsets))
             for m in methods for n in cfg.sweep.n_values for seed in cfg.sweep.seeds]
    baseline_methods = methods if cfg.sweep.baseline_all_methods else ["none"]
    if cfg.sweep.baseline_all_methods and "none" not in baseline_methods:
        baseline_methods = baseline_methods + ["none"]
    n_all = len(train_ids)
    baseline_cells = [(m, n_all, seed, natsorted(train_ids))
                      for m in baseline_methods for seed in cfg.sweep.seeds]

    # fill the volume cache before workers share the cohort
    for split in ("train", "val", "test"):
        for entry in cohort.entries(split):
            cohort.volume(entry)

    n_threads = sweep_threads()
    experiments_logger.info(f">>> sweep {len(cells)} cells + {len(baseline_cells)} baseline "
                            f"cells on {n_threads} thread(s)")
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [pool.submit(_run_cell, cfg, cohort, *cell) for cell in cells]
        baseline_futures = [pool.submit(_run_cell, cfg, cohort, *cell) for cell in baseline_cells]
        rows = _sort_rows([r for f in futures for r in f.result()])
        baseline_rows = _sort_rows([r for f in baseline_futures for r in f.result()])

    io.write_csv(cfg.path("results.csv"), list(RESULT_COLUMNS), rows)
    io.write_csv(cfg.path("baseline.csv"), list(RESULT_COLUMNS), baseline_rows)
    io.write_csv(cfg.path("summary.csv"), ["method", "N", "class", "mean", "std", "n"],
                 _summary(rows + baseline_rows))

    series = {}
    for method, n, d in _mean_dice(rows):
        series.setdefault(method, []).append((n, d))
    baseline = [d for method, _, d in _mean_dice(baseline_rows) if method == "none"]
    plot.dice_vs_n_svg(cfg.path("dice_vs_n.svg"), series,
                       baseline=baseline[0] if baseline else None)
    return rows


def _mean_dice(rows):
    """ (method, N, Dice averaged over seeds and classes) per (method, N) """
    groups = {}
    for method, n, _, _, d, _ in rows:
        groups.setdefault((method, n), []).append(d)
    return [(method, n, float(np.mean(v))) for (method, n), v in sorted(groups.items())]


def cmd_finetune(cfg, method="none", n_subjects=None, checkpoint=None):
    """
    Finetune one pretrained checkpoint with the first configured seed.

    Writes checkpoints/finetune_<method>.ckpt and finetune_<method>_history.csv.
    """
    cohort = load_cohort(cfg)
    train_ids = [e.subject_id for e in cohort.entries("train")]
    seed = cfg.sweep.seeds[0]
    subset = natsorted(train_ids) if n_subjects is None else \
        draw_subset(train_ids, n_subjects, seed, cfg.sweep.nested_subsets)
    if checkpoint is not None:
        path = checkpoint
    else:
        path = checkpoint_path(cfg, method)
        if not os.path.exists(path):
            cmd_pretrain(cfg, [method])
    net, history = _finetune_cell(cfg, cohort, path, subset, seed)
    out = cfg.path("checkpoints", f"finetune_{method}.ckpt")
    net.save_model(out, metadata={"method": method, "seed": seed, "n_subjects": len(subset),
                                  "best_epoch": history["best_epoch"]})
    io.write_history_csv(cfg.path(f"finetune_{method}_history.csv"), history,
                         columns=("epoch", "train_loss", "val_loss", "lr"))
    return out


def cmd_eval(cfg, checkpoint):
    """
    Per-subject, per-class volume Dice of a segmentation checkpoint on the test split.

    Writes eval.csv (subject_id, class, dice) ending with one "mean" row per
    class, and returns its rows. With output.save_overlays, also writes
    overlays/<subject_id>.png: predictions in color, ground-truth outlines in
    white, the volume Dice in the title strip.
    """
    ckpt = io.load_checkpoint(checkpoint)
    net = models.build_model(cfg.model)
    models.swap_heads(net, "segmentation")
    if ckpt.head != "segmentation":
        raise io.CheckpointError(f"{checkpoint} holds a {ckpt.head} head, "
                                 "expected a finetuned segmentation checkpoint")
    io.load_state_into(net, ckpt)

    cohort = load_cohort(cfg)
    classes = list(range(1, cfg.model.num_classes))
    rows = []
    for entry in cohort.entries("test"):
        vol = cohort.volume(entry)
        try:
            dice, preds = evaluate_volume(net, vol.slices, vol.labels, classes,
                                          return_labels=True)
        except ValueError as err:
            raise DataError(f"subject {entry.subject_id}: {err}") from None
        if cfg.output.save_overlays:
            title = entry.subject_id + " " + " ".join(f"dice[{c}]={d:.3f}"
                                                      for c, d in dice.items())
            plot.volume_overlay_png(cfg.path("overlays", f"{entry.subject_id}.png"),
                                    vol.slices, preds, vol.labels, title=title)
        rows.extend((entry.subject_id, c, d) for c, d in dice.items())
    if not rows:
        raise DataError("the test split is empty")
    rows += [("mean", c, float(np.mean([d for _, k, d in rows if k == c]))) for c in classes]
    io.write_csv(cfg.path("eval.csv"), ["subject_id", "class", "dice"], rows)
    return rows
