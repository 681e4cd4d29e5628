"""Dataset-level three-stage self-training.

Stage 1 lets the Oracle annotate a class-preserving subset of the training
images and keeps each single-image model's full prediction as a pseudo-label.
Stage 2 trains a dataset model on those pseudo-labels and uses it to
pseudo-label the remaining training images.  Stage 3 retrains from scratch on
all pseudo-labels and is scored on the held-out split with a confusion matrix
accumulated across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .imgdata import (IGNORE, DatasetIndex, LabelMap, load_image, load_label,
                      save_label, select_subset_class_preserving)
from .micronet import (ModelState, TrainConfig, forward, get_preset, init_model,
                       load_checkpoint, predict, train_inner)
from .rng import RngStream, derive_seed
from .samplers import OracleConfig, SampleSet, pixel_labeling
from .segmetrics import ConfusionCounts, MetricsReport, confusion, metrics

FULL_BUDGET = "full"


@dataclass
class PipelineConfig:
    dataset_fraction: float = 1.0
    pixel_budget: float | str = 0.005  # fraction of pixels, or "full"
    threshold: float = 99.5
    batch: int = 5
    objective: str = "miou"
    preset: str = "micro-A"
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs: int = 30
    warm_start: str | None = None
    seed: int = 0

    def validate(self):
        if not 0.0 < self.dataset_fraction <= 1.0:
            raise ValidationError("dataset_fraction must be in (0, 1]")
        if self.pixel_budget != FULL_BUDGET:
            if not isinstance(self.pixel_budget, (int, float)) or not 0.0 < self.pixel_budget <= 1.0:
                raise ValidationError("pixel_budget must be in (0, 1] or 'full'")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        self.train.validate()


@dataclass
class PipelineResult:
    report: MetricsReport
    counts: ConfusionCounts
    subset: DatasetIndex
    sample_sets: list[SampleSet | None]
    stage1_provenance: list[tuple[int, float]]  # (|S|, single-image mIoU)


def budget_pixels(budget: float | str, height: int, width: int) -> int:
    if budget == FULL_BUDGET:
        return height * width
    return max(1, math.ceil(budget * height * width))


def _dense_mask(lbl: LabelMap) -> np.ndarray:
    idx = np.flatnonzero(lbl.data.reshape(-1) != IGNORE)
    if idx.size == 0:
        raise ValidationError("label map has no supervised pixels")
    return idx


def train_dataset_model(model: ModelState,
                        items: list[tuple[np.ndarray, LabelMap, np.ndarray]],
                        epochs: int, tcfg: TrainConfig, seed: int):
    """Minibatch-of-one training: each epoch visits every (image, labels,
    mask) once in a seeded shuffled order, one Adam step per visit."""
    from .imgdata import ImageTensor

    step_cfg = TrainConfig(tcfg.learning_rate, tcfg.weight_decay, 1,
                           tcfg.beta1, tcfg.beta2, tcfg.eps)
    for epoch in range(epochs):
        order = RngStream(derive_seed(seed, 0xE60C, epoch)).permutation(len(items))
        for i in order:
            img_arr, lbl, mask = items[i]
            train_inner(model, ImageTensor(img_arr), lbl, mask, step_cfg)


def _evaluate_split(model: ModelState, index: DatasetIndex) -> tuple[MetricsReport, ConfusionCounts]:
    total: ConfusionCounts | None = None
    for img_path, lbl_path in index.entries:
        img = load_image(img_path)
        gt = load_label(lbl_path)
        pred = predict(forward(model, img))
        counts = confusion(pred, gt)
        total = counts if total is None else total.merged(counts)
    return metrics(total), total


def _check_disjoint(train_index: DatasetIndex, test_index: DatasetIndex):
    train_set = {e for e in train_index.entries}
    if any(e in train_set for e in test_index.entries):
        raise ValidationError("train and test indices overlap")


def _fresh_dataset_model(cfg: PipelineConfig, num_classes: int, key: int) -> ModelState:
    if cfg.warm_start:
        model = load_checkpoint(cfg.warm_start, expect_preset=cfg.preset)
        if model.preset.num_classes != num_classes:
            raise ValidationError("warm-start checkpoint has %d classes, need %d"
                                  % (model.preset.num_classes, num_classes))
        model.t = 0
        for name in model.adam_m:
            model.adam_m[name][:] = 0
            model.adam_v[name][:] = 0
        return model
    return init_model(get_preset(cfg.preset, num_classes), derive_seed(cfg.seed, key))


def _annotate_subset(subset: DatasetIndex, cfg: PipelineConfig, progress=None):
    """Stage 1: Oracle-annotate each subset image; pseudo-label = final
    prediction of its single-image model (ground truth itself at full budget)."""
    pseudos: list[LabelMap] = []
    sample_sets: list[SampleSet | None] = []
    provenance: list[tuple[int, float]] = []
    images: list[np.ndarray] = []
    for i, (img_path, lbl_path) in enumerate(subset.entries):
        img = load_image(img_path)
        gt = load_label(lbl_path)
        images.append(img.data)
        if cfg.pixel_budget == FULL_BUDGET:
            pseudos.append(LabelMap(gt.data.copy(), gt.num_classes))
            sample_sets.append(None)
            provenance.append((gt.height * gt.width, 100.0))
        else:
            k = budget_pixels(cfg.pixel_budget, gt.height, gt.width)
            ocfg = OracleConfig(k, cfg.threshold, cfg.batch, cfg.objective,
                                seed=derive_seed(cfg.seed, 0x0A11, i))
            model = init_model(get_preset(cfg.preset, gt.num_classes),
                               derive_seed(cfg.seed, 0x51, i))
            res = pixel_labeling(img, gt, model, ocfg, cfg.train)
            pseudos.append(res.pred)
            sample_sets.append(res.samples)
            provenance.append((len(res.samples), res.history[-1][1]))
        if progress:
            progress("stage1", (i + 1) / len(subset.entries))
    return images, pseudos, sample_sets, provenance


def run_pipeline(train_index: DatasetIndex, test_index: DatasetIndex,
                 cfg: PipelineConfig, out_dir=None, progress=None) -> PipelineResult:
    cfg.validate()
    if not train_index.entries or not test_index.entries:
        raise ValidationError("train and test indices must be non-empty")
    _check_disjoint(train_index, test_index)

    subset = select_subset_class_preserving(train_index, cfg.dataset_fraction,
                                            derive_seed(cfg.seed, 0x5085E7))
    images, pseudos, sample_sets, provenance = _annotate_subset(subset, cfg, progress)

    # stage 2: dataset model on the annotated subset, then pseudo-label the rest
    subset_paths = {e for e in subset.entries}
    remaining = [e for e in train_index.entries if e not in subset_paths]
    items = [(img, lbl, _dense_mask(lbl)) for img, lbl in zip(images, pseudos)]
    if remaining:
        model2 = _fresh_dataset_model(cfg, train_index.num_classes, 0xDA7A2)
        train_dataset_model(model2, items, cfg.epochs, cfg.train,
                            derive_seed(cfg.seed, 0xD2))
        if progress:
            progress("stage2", 0.5)
        from .imgdata import ImageTensor

        for img_path, _ in remaining:
            img = load_image(img_path)
            pl = predict(forward(model2, img))
            items.append((img.data, pl, _dense_mask(pl)))
    if progress:
        progress("stage2", 1.0)

    # stage 3: fresh model over every pseudo-label, scored on the test split
    model3 = _fresh_dataset_model(cfg, train_index.num_classes, 0xDA7A3)
    train_dataset_model(model3, items, cfg.epochs, cfg.train,
                        derive_seed(cfg.seed, 0xD3))
    report, counts = _evaluate_split(model3, test_index)
    if progress:
        progress("stage3", 1.0)

    if out_dir is not None:
        _write_artifacts(Path(out_dir), subset, pseudos, sample_sets, model3)
    return PipelineResult(report, counts, subset, sample_sets, provenance)


def naive_sparse_baseline(train_index: DatasetIndex, test_index: DatasetIndex,
                          cfg: PipelineConfig, progress=None) -> PipelineResult:
    """Negative control: one dataset model trained directly on the sparse
    Oracle samples, no pseudo-labels."""
    cfg.validate()
    if not train_index.entries or not test_index.entries:
        raise ValidationError("train and test indices must be non-empty")
    _check_disjoint(train_index, test_index)

    subset = select_subset_class_preserving(train_index, cfg.dataset_fraction,
                                            derive_seed(cfg.seed, 0x5085E7))
    items = []
    sample_sets: list[SampleSet | None] = []
    provenance: list[tuple[int, float]] = []
    for i, (img_path, lbl_path) in enumerate(subset.entries):
        img = load_image(img_path)
        gt = load_label(lbl_path)
        if cfg.pixel_budget == FULL_BUDGET:
            items.append((img.data, LabelMap(gt.data.copy(), gt.num_classes), _dense_mask(gt)))
            sample_sets.append(None)
            provenance.append((gt.height * gt.width, 100.0))
        else:
            k = budget_pixels(cfg.pixel_budget, gt.height, gt.width)
            ocfg = OracleConfig(k, cfg.threshold, cfg.batch, cfg.objective,
                                seed=derive_seed(cfg.seed, 0x0A11, i))
            model = init_model(get_preset(cfg.preset, gt.num_classes),
                               derive_seed(cfg.seed, 0x51, i))
            res = pixel_labeling(img, gt, model, ocfg, cfg.train)
            sparse = res.samples.sparse_label_map(gt.height, gt.width, gt.num_classes)
            items.append((img.data, sparse, res.samples.flat_indices(gt.width)))
            sample_sets.append(res.samples)
            provenance.append((len(res.samples), res.history[-1][1]))
        if progress:
            progress("stage1", (i + 1) / len(subset.entries))

    model = _fresh_dataset_model(cfg, train_index.num_classes, 0xDA7A3)
    train_dataset_model(model, items, cfg.epochs, cfg.train,
                        derive_seed(cfg.seed, 0xD3))
    report, counts = _evaluate_split(model, test_index)
    if progress:
        progress("train", 1.0)
    return PipelineResult(report, counts, subset, sample_sets, provenance)


def _write_artifacts(out: Path, subset: DatasetIndex, pseudos: list[LabelMap],
                     sample_sets: list[SampleSet | None], model: ModelState):
    from .micronet import save_checkpoint

    (out / "pseudo").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    for i, ((img_path, _), pseudo) in enumerate(zip(subset.entries, pseudos)):
        stem = Path(img_path).stem
        save_label(pseudo, out / "pseudo" / ("%s_pseudo.pgm" % stem))
        ss = sample_sets[i]
        if ss is not None:
            ss.save_csv(out / "samples" / ("%s_samples.csv" % stem))
    save_checkpoint(model, out / "ckpt" / "dataset_model.mnet")
