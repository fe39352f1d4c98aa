"""Generalized zero-shot evaluation: IoU accumulation and split means.

Counts are exact integers accumulated per class, so merging accumulators is
commutative and associative. Seen and unseen mean IoUs are reported as
percentages with their harmonic mean; cross-dataset averaging takes the
arithmetic mean of each metric independently, including the harmonic one.
Values are rounded (half to even) to two decimals only when a report is
written out.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .registry import IGNORE_INDEX, ClassRegistry


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax class map; ties break toward the lowest class index."""
    if logits.ndim != 3 or logits.shape[2] < 1:
        raise ValueError(f"expected (H, W, N_C) logits with N_C >= 1, got {tuple(logits.shape)}")
    arr = logits.detach().cpu().numpy()
    return torch.from_numpy(np.argmax(arr, axis=2).astype(np.int64))


class ConfusionAccumulator:
    """Per-class intersection and union pixel counts, additive across images."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.intersection = np.zeros(n_classes, dtype=np.int64)
        self.union = np.zeros(n_classes, dtype=np.int64)

    def add(self, pred: torch.Tensor | np.ndarray, gt: torch.Tensor | np.ndarray) -> "ConfusionAccumulator":
        p = np.asarray(pred if isinstance(pred, np.ndarray) else pred.cpu().numpy())
        g = np.asarray(gt if isinstance(gt, np.ndarray) else gt.cpu().numpy())
        if p.shape != g.shape:
            raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
        valid = g != IGNORE_INDEX
        bad = g[valid & (g >= self.n_classes)]
        if bad.size:
            raise ValueError(f"mask contains class {int(bad.max())} beyond {self.n_classes} classes")
        for c in range(self.n_classes):
            pc = (p == c) & valid
            gc = (g == c) & valid
            self.intersection[c] += int(np.count_nonzero(pc & gc))
            self.union[c] += int(np.count_nonzero(pc | gc))
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge accumulators over different class counts")
        out = ConfusionAccumulator(self.n_classes)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        return out

    def per_class_iou(self) -> dict[int, float]:
        """IoU for every class with nonzero union; zero-union classes omitted."""
        return {
            c: float(self.intersection[c]) / float(self.union[c])
            for c in range(self.n_classes)
            if self.union[c] > 0
        }


def harmonic_mean(a: float, b: float) -> float:
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    """Per-class IoUs (fractions) plus split means (percentages)."""

    per_class_iou: dict[str, float] = field(default_factory=dict)
    per_class_seen: dict[str, bool] = field(default_factory=dict)
    s_miou: float | None = None
    u_miou: float | None = None
    h_miou: float | None = None


def split_miou(per_class_iou: dict[int, float], registry: ClassRegistry) -> MetricsReport:
    """Seen/unseen mean IoUs and their harmonic mean over the scored classes.

    Classes missing from per_class_iou (zero union) are excluded from the
    means. A split with no scored classes leaves its mean undefined, and the
    harmonic mean is omitted whenever either side is undefined.
    """
    for c in per_class_iou:
        if not 0 <= c < registry.n_classes:
            raise ValueError(f"IoU given for class index {c} outside the registry")
    seen_vals = [per_class_iou[c] for c in registry.seen_indices() if c in per_class_iou]
    unseen_vals = [per_class_iou[c] for c in registry.unseen_indices() if c in per_class_iou]
    s = 100.0 * float(np.mean(seen_vals)) if seen_vals else None
    u = 100.0 * float(np.mean(unseen_vals)) if unseen_vals else None
    h = harmonic_mean(s, u) if s is not None and u is not None else None
    return MetricsReport(
        per_class_iou={registry.names[c]: v for c, v in sorted(per_class_iou.items())},
        per_class_seen={registry.names[c]: registry.seen_flags[c] for c in sorted(per_class_iou)},
        s_miou=s, u_miou=u, h_miou=h,
    )


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of each split metric independently across datasets.

    The averaged harmonic mean is the mean of the per-dataset harmonic means,
    not the harmonic mean of the averaged splits.
    """
    if not reports:
        raise ValueError("nothing to average")

    def mean_of(attr: str) -> float | None:
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(s_miou=mean_of("s_miou"), u_miou=mean_of("u_miou"),
                         h_miou=mean_of("h_miou"))


def evaluate_samples(model, samples, registry: ClassRegistry) -> tuple[ConfusionAccumulator, MetricsReport]:
    """Run inference over (image, mask) pairs and score against the registry."""
    acc = ConfusionAccumulator(registry.n_classes)
    for image, mask in samples:
        logits = model.infer(image, registry)
        acc.add(predict(logits), mask)
    return acc, split_miou(acc.per_class_iou(), registry)


_OMIT_REASON = "no_scored_classes_in_split"


def report_to_kv(report: MetricsReport, extra: dict[str, str] | None = None) -> str:
    """Key-value emission, one metric per line; split means at two decimals."""
    lines = []
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for attr in ("s_miou", "u_miou", "h_miou"):
        v = getattr(report, attr)
        if v is None:
            lines.append(f"{attr}_omitted={_OMIT_REASON}")
        else:
            lines.append(f"{attr}={v:.2f}")
    for name in sorted(report.per_class_iou):
        lines.append(f"iou.{name}={report.per_class_iou[name]:.6f}")
    return "\n".join(lines) + "\n"


def report_to_csv(report: MetricsReport) -> str:
    lines = ["class,iou,seen_flag"]
    for name in sorted(report.per_class_iou):
        seen = int(report.per_class_seen.get(name, True))
        lines.append(f"{name},{report.per_class_iou[name]:.6f},{seen}")
    for attr in ("s_miou", "u_miou", "h_miou"):
        v = getattr(report, attr)
        lines.append(f"{attr},{'' if v is None else f'{v:.2f}'},")
    return "\n".join(lines) + "\n"


def parse_kv_report(text: str) -> MetricsReport:
    report = MetricsReport()
    for line in text.splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, value = line.split("=", 1)
        if key in ("s_miou", "u_miou", "h_miou"):
            setattr(report, key, float(value))
        elif key.startswith("iou."):
            report.per_class_iou[key[4:]] = float(value)
    return report
