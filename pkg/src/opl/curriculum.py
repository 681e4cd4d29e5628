"""Replay a recorded sample set against a fresh model under different
pixel orderings, and the cross-architecture transfer study.

Training reads labels only from the sample set itself; the ground truth is
used solely to score the final prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError
from .imgdata import ImageTensor, LabelMap
from .micronet import ArchPreset, TrainConfig, forward, get_preset, init_model, predict
from .micronet import train_inner
from .rng import RngStream, derive_seed
from .samplers import SampleSet
from .segmetrics import MetricsReport, evaluate

MODES = ("correct", "no_order", "random_order", "reverse")


@dataclass
class ReplayMode:
    mode: str
    no_order_iters: int = 200
    permutation_seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError("mode must be one of %s" % (MODES,))
        if self.no_order_iters < 1:
            raise ValidationError("no_order_iters must be >= 1")


def acquisition_batches(n: int, batch_size: int) -> list[int]:
    """Round sizes of the acquisition schedule: the seed pixel alone, then
    full batches (the final one may come up short)."""
    sizes = [1]
    left = n - 1
    while left > 0:
        take = min(batch_size, left)
        sizes.append(take)
        left -= take
    return sizes


def equal_budget_iters(n_samples: int, batch_size: int, inner_iters: int) -> int:
    """no_order iteration count that matches the total gradient steps the
    batched schedule spends."""
    return len(acquisition_batches(n_samples, batch_size)) * inner_iters


def replay(img: ImageTensor, gt: LabelMap, samples: SampleSet, mode: ReplayMode,
           preset: ArchPreset, seed: int, tcfg: TrainConfig) -> tuple[LabelMap, MetricsReport]:
    """Fresh model trained on the recorded samples under the given ordering;
    returns the final prediction and its metrics against the full truth."""
    mode.validate()
    tcfg.validate()
    if len(samples) == 0:
        raise ValidationError("cannot replay an empty sample set")
    samples_in_order = list(samples.entries)
    if mode.mode == "random_order":
        perm = RngStream(derive_seed(mode.permutation_seed, 0x9E9)).permutation(len(samples_in_order))
        samples_in_order = [samples_in_order[i] for i in perm]
    elif mode.mode == "reverse":
        samples_in_order = samples_in_order[::-1]

    model = init_model(preset, seed)
    H, W = gt.height, gt.width
    sparse = SampleSet(entries=samples_in_order).sparse_label_map(H, W, gt.num_classes)
    all_idx = [r * W + c for r, c, _ in samples_in_order]

    if mode.mode == "no_order":
        cfg = TrainConfig(tcfg.learning_rate, tcfg.weight_decay, mode.no_order_iters,
                          tcfg.beta1, tcfg.beta2, tcfg.eps)
        train_inner(model, img, sparse, all_idx, cfg)
    else:
        if samples.batch_size is None:
            raise ValidationError("sample set lacks its acquisition batch size")
        pos = 0
        for size in acquisition_batches(len(samples_in_order), samples.batch_size):
            pos += size
            train_inner(model, img, sparse, all_idx[:pos], tcfg)

    pred = predict(forward(model, img))
    return pred, evaluate(pred, gt)


def transfer_study(img: ImageTensor, gt: LabelMap, samples: SampleSet,
                   seeds: list[int], tcfg: TrainConfig,
                   target_preset: str = "micro-B",
                   modes: tuple[str, ...] = MODES) -> dict[str, list[MetricsReport]]:
    """Replay samples recorded under one architecture on another, across all
    ordering regimes and seeds."""
    if not modes:
        raise ValidationError("transfer study needs at least one mode")
    if samples.source_preset is not None and samples.source_preset == target_preset:
        raise ValidationError("samples were recorded with %s already" % target_preset)
    preset = get_preset(target_preset, gt.num_classes)
    out: dict[str, list[MetricsReport]] = {m: [] for m in modes}
    for m in modes:
        for s in seeds:
            mode = ReplayMode(m, permutation_seed=s)
            _, report = replay(img, gt, samples, mode, preset, s, tcfg)
            out[m].append(report)
    return out
