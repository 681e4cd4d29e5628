"""The Oracle: weight-map construction, weighted sampling, the pixel-labeling
loop, its pixel-accuracy variant, and the five classic baseline samplers.

The Oracle holds the full ground-truth label map and reveals labels of chosen
pixels; every revealed label is read straight from the ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .imgdata import IGNORE, ImageTensor, LabelMap
from .micronet import ModelState, TrainConfig, forward, predict, train_inner
from .morphology import connected_components, euclidean_dt, geodesic_field, label_edges, slic
from .rng import RngStream, derive_seed
from .segmetrics import MetricsReport, evaluate, misclassification_map

OBJECTIVES = ("miou", "pixel_accuracy")


@dataclass
class SampleSet:
    """Ordered revealed pixels: entry t is (row, col, class label).

    batch_size records how many pixels each acquisition round added (the
    seed pixel forms a round of its own); replay needs it to reproduce the
    acquisition schedule.
    """

    entries: list[tuple[int, int, int]] = field(default_factory=list)
    batch_size: int | None = None
    source_preset: str | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, row: int, col: int, label: int):
        self.entries.append((int(row), int(col), int(label)))

    def pixels(self) -> set[tuple[int, int]]:
        return {(r, c) for r, c, _ in self.entries}

    def flat_indices(self, width: int) -> np.ndarray:
        return np.asarray([r * width + c for r, c, _ in self.entries], dtype=np.int64)

    def sparse_label_map(self, height: int, width: int, num_classes: int) -> LabelMap:
        """Label map that knows only the revealed pixels; IGNORE elsewhere."""
        data = np.full((height, width), IGNORE, dtype=np.uint8)
        for r, c, lab in self.entries:
            data[r, c] = lab
        return LabelMap(data, num_classes)

    def validate_against(self, gt: LabelMap):
        seen = set()
        for r, c, lab in self.entries:
            if (r, c) in seen:
                raise ValidationError("duplicate sample at (%d,%d)" % (r, c))
            seen.add((r, c))
            if gt.data[r, c] == IGNORE:
                raise ValidationError("sample at (%d,%d) hits an IGNORE pixel" % (r, c))
            if lab != gt.data[r, c]:
                raise ValidationError("sample label %d at (%d,%d) is not the truth" % (lab, r, c))

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "row", "col", "class"])
            for t, (r, c, lab) in enumerate(self.entries):
                w.writerow([t, r, c, lab])

    @classmethod
    def load_csv(cls, path) -> "SampleSet":
        out = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["t", "row", "col", "class"]:
                raise ValidationError("%s: expected header 't,row,col,class'" % path)
            for i, row in enumerate(reader):
                t, r, c, lab = (int(x) for x in row)
                if t != i:
                    raise ValidationError("%s: order indices must be contiguous" % path)
                out.append(r, c, lab)
        return out


@dataclass
class OracleConfig:
    budget: int
    threshold: float = 99.5
    batch: int = 5
    objective: str = "miou"
    seed: int = 0

    def validate(self):
        if self.budget < 1:
            raise ValidationError("budget must be >= 1")
        if not 0.0 < self.threshold <= 100.0:
            raise ValidationError("threshold must be in (0, 100]")
        if not 1 <= self.batch <= 10:
            raise ValidationError("batch must be in 1..10")
        if self.objective not in OBJECTIVES:
            raise ValidationError("objective must be one of %s" % (OBJECTIVES,))


@dataclass
class PixelLabelingResult:
    samples: SampleSet
    pred: LabelMap
    history: list[tuple[int, float]]  # (|S| when trained, reward after training)
    termination: str  # "threshold" or "budget"


def lowest_iou_class(report: MetricsReport) -> int:
    """Present class with the lowest IoU; ties go to the smallest index."""
    if not report.present_classes:
        raise ValidationError("no present classes")
    return min(sorted(report.present_classes), key=lambda c: (report.iou[c], c))


def build_weight_map(pred: LabelMap, gt: LabelMap, objective: str = "miou") -> np.ndarray:
    """Sampling distribution over the selected misclassified component.

    miou objective: restrict the misclassification map to pixels whose true
    class scores the lowest IoU, take the largest 8-connected component, and
    weight it by its distance transform (normalized to sum 1).  If the lowest
    scoring class has no misclassified true pixels (pure false-positive
    failure), the restriction falls back to the worst class that has some.

    pixel_accuracy objective: all mass on the distance-transform peak of the
    largest unrestricted misclassified component.
    """
    if objective not in OBJECTIVES:
        raise ValidationError("objective must be one of %s" % (OBJECTIVES,))
    wrong = misclassification_map(pred, gt)
    if not wrong.any():
        raise ValidationError("nothing misclassified")
    if objective == "miou":
        report = evaluate(pred, gt)
        cls = lowest_iou_class(report)
        restricted = wrong & (gt.data == cls)
        if not restricted.any():
            bad_classes = sorted(int(c) for c in np.unique(gt.data[wrong]))
            cls = min(bad_classes, key=lambda c: (report.iou.get(c, 0.0), c))
            restricted = wrong & (gt.data == cls)
        comp = connected_components(restricted, 8)
        region = comp.labels == comp.largest()
        w = euclidean_dt(region)
        return w / w.sum()
    comp = connected_components(wrong, 8)
    region = comp.labels == comp.largest()
    d = euclidean_dt(region)
    w = np.zeros_like(d)
    peak = np.unravel_index(int(np.argmax(d)), d.shape)
    w[peak] = 1.0
    return w


def weighted_sample(w: np.ndarray, n: int, rng: RngStream) -> list[tuple[int, int]]:
    """n distinct pixels drawn without replacement proportionally to w
    (weights renormalize after each draw).  A support smaller than n is
    returned whole."""
    flat = w.reshape(-1)
    support = np.flatnonzero(flat > 0)
    if support.size == 0:
        raise ValidationError("weight map has empty support")
    weights = flat[support].astype(np.float64).copy()
    picks = []
    for _ in range(min(n, support.size)):
        j = rng.choice_weighted(weights)
        picks.append(int(support[j]))
        weights[j] = 0.0
    W = w.shape[1]
    return [(p // W, p % W) for p in picks]


def pixel_labeling(img: ImageTensor, gt: LabelMap, model: ModelState,
                   cfg: OracleConfig, tcfg: TrainConfig) -> PixelLabelingResult:
    """Active-learning loop: train on the revealed set, measure the reward,
    and let the Oracle reveal the next batch from the weight map until the
    reward threshold or the pixel budget is reached."""
    cfg.validate()
    tcfg.validate()
    valid = np.flatnonzero(gt.data.reshape(-1) != IGNORE)
    if valid.size == 0:
        raise ValidationError("ground truth has no labeled pixels")
    rng = RngStream(derive_seed(cfg.seed, 0x0AC1E))
    H, W = gt.height, gt.width

    samples = SampleSet(batch_size=cfg.batch, source_preset=model.preset.name)
    seed_pix = int(valid[rng.randint(valid.size)])
    samples.append(seed_pix // W, seed_pix % W, gt.data.reshape(-1)[seed_pix])

    sparse = samples.sparse_label_map(H, W, gt.num_classes)
    history: list[tuple[int, float]] = []
    termination = "budget"
    while True:
        train_inner(model, img, sparse, samples.flat_indices(W), tcfg)
        pred = predict(forward(model, img))
        report = evaluate(pred, gt)
        reward = report.miou if cfg.objective == "miou" else report.pixel_accuracy
        history.append((len(samples), reward))
        if reward >= cfg.threshold:
            termination = "threshold"
            break
        if len(samples) >= cfg.budget:
            termination = "budget"
            break

        w = build_weight_map(pred, gt, cfg.objective)
        for r, c, _ in samples.entries:
            w[r, c] = 0.0
        picks = weighted_sample(w, cfg.batch, rng) if w.sum() > 0 else []
        if len(picks) < cfg.batch:
            taken = samples.pixels() | set(picks)
            pool = [
                (int(r), int(c))
                for r, c in zip(*np.nonzero(misclassification_map(pred, gt)))
                if (int(r), int(c)) not in taken
            ]
            if not pool:
                pool = [
                    (int(p) // W, int(p) % W) for p in valid
                    if (int(p) // W, int(p) % W) not in taken
                ]
            extra = rng.sample_without_replacement(len(pool), min(len(pool), cfg.batch - len(picks)))
            picks += [pool[j] for j in extra]
        if not picks:
            break  # every labelable pixel already revealed
        for r, c in picks:
            samples.append(r, c, gt.data[r, c])
            sparse.data[r, c] = gt.data[r, c]

    return PixelLabelingResult(samples, pred, history, termination)


# ---------------------------------------------------------------------------
# classic baseline samplers


def _valid_flat(gt: LabelMap) -> np.ndarray:
    return np.flatnonzero(gt.data.reshape(-1) != IGNORE)


def _require_n(n: int, available: int):
    if n < 1:
        raise ValidationError("sample count must be >= 1")
    if n > available:
        raise ValidationError("asked for %d samples but only %d pixels available" % (n, available))


def _finish(gt: LabelMap, picks: list[tuple[int, int]]) -> SampleSet:
    out = SampleSet()
    for r, c in picks:
        out.append(r, c, gt.data[r, c])
    return out


def sample_random(img: ImageTensor, gt: LabelMap, n: int, rng: RngStream) -> SampleSet:
    """Uniform without replacement over non-IGNORE pixels."""
    valid = _valid_flat(gt)
    _require_n(n, valid.size)
    W = gt.width
    picks = [(int(valid[j]) // W, int(valid[j]) % W)
             for j in rng.sample_without_replacement(valid.size, n)]
    return _finish(gt, picks)


def sample_uniform(img: ImageTensor, gt: LabelMap, n: int, rng: RngStream) -> SampleSet:
    """One pixel per tile of the most-square n-tile grid; tiles with no
    candidate pixels redraw from the whole image."""
    valid = _valid_flat(gt)
    _require_n(n, valid.size)
    H, W = gt.height, gt.width
    rows_t = int(np.ceil(np.sqrt(n)))
    cols_t = int(np.ceil(n / rows_t))
    taken: set[tuple[int, int]] = set()
    picks: list[tuple[int, int]] = []
    for tile in range(n):
        tr, tc = tile // cols_t, tile % cols_t
        r0, r1 = (tr * H) // rows_t, ((tr + 1) * H) // rows_t
        c0, c1 = (tc * W) // cols_t, ((tc + 1) * W) // cols_t
        cand = [
            (r, c)
            for r in range(r0, r1)
            for c in range(c0, c1)
            if gt.data[r, c] != IGNORE and (r, c) not in taken
        ]
        if not cand:
            cand = [(int(p) // W, int(p) % W) for p in valid
                    if (int(p) // W, int(p) % W) not in taken]
        pick = cand[rng.randint(len(cand))]
        taken.add(pick)
        picks.append(pick)
    return _finish(gt, picks)


def sample_edge(img: ImageTensor, gt: LabelMap, n: int, rng: RngStream) -> SampleSet:
    """Uniform over label-edge pixels; short edge sets fall back to random
    draws from the rest of the image."""
    valid = _valid_flat(gt)
    _require_n(n, valid.size)
    W = gt.width
    edge = label_edges(gt) & (gt.data != IGNORE)
    cand = np.flatnonzero(edge.reshape(-1))
    picks = [(int(cand[j]) // W, int(cand[j]) % W)
             for j in rng.sample_without_replacement(cand.size, min(n, cand.size))]
    if len(picks) < n:
        rest = np.setdiff1d(valid, cand)
        extra = rng.sample_without_replacement(rest.size, n - len(picks))
        picks += [(int(rest[j]) // W, int(rest[j]) % W) for j in extra]
    return _finish(gt, picks)


def sample_slic(img: ImageTensor, gt: LabelMap, n: int, rng: RngStream) -> SampleSet:
    """One random pixel per SLIC segment, truncated or padded to exactly n."""
    valid = _valid_flat(gt)
    _require_n(n, valid.size)
    W = gt.width
    seg = slic(img, n, 10.0)
    picks: list[tuple[int, int]] = []
    for sid in range(int(seg.max()) + 1):
        rs, cs = np.nonzero((seg == sid) & (gt.data != IGNORE))
        if rs.size:
            j = rng.randint(rs.size)
            picks.append((int(rs[j]), int(cs[j])))
    if len(picks) > n:
        keep = sorted(rng.sample_without_replacement(len(picks), n))
        picks = [picks[i] for i in keep]
    elif len(picks) < n:
        taken = set(picks)
        rest = [(int(p) // W, int(p) % W) for p in valid
                if (int(p) // W, int(p) % W) not in taken]
        extra = rng.sample_without_replacement(len(rest), n - len(picks))
        picks += [rest[j] for j in extra]
    return _finish(gt, picks)


def sample_geodesic(img: ImageTensor, gt: LabelMap, n: int, rng: RngStream) -> SampleSet:
    """Farthest-point sampling under the image-aware geodesic metric."""
    valid = _valid_flat(gt)
    _require_n(n, valid.size)
    W = gt.width
    first = int(valid[rng.randint(valid.size)])
    picks = [(first // W, first % W)]
    for _ in range(n - 1):
        dist = geodesic_field(img, picks)
        dist[gt.data == IGNORE] = -np.inf
        for r, c in picks:
            dist[r, c] = -np.inf
        far = np.unravel_index(int(np.argmax(dist)), dist.shape)
        picks.append((int(far[0]), int(far[1])))
    return _finish(gt, picks)


CLASSIC_SAMPLERS = {
    "random": sample_random,
    "uniform": sample_uniform,
    "edge": sample_edge,
    "slic": sample_slic,
    "geodesic": sample_geodesic,
}
