"""Classification metrics and the FLOPs accounting for conv/linear layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple

    @classmethod
    def empty(cls, class_names) -> "ConfusionMatrix":
        k = len(class_names)
        return cls(np.zeros((k, k), dtype=np.int64), tuple(class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_names != self.class_names:
            raise ValueError("cannot merge confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def update_confusion(cm: ConfusionMatrix, true_label: int, predicted_label: int) -> ConfusionMatrix:
    k = cm.num_classes
    if not (0 <= true_label < k and 0 <= predicted_label < k):
        raise ValueError(f"labels ({true_label}, {predicted_label}) outside [0, {k})")
    cm.counts[true_label, predicted_label] += 1
    return cm


def confusion_from_predictions(true_labels, predicted_labels, class_names) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(class_names)
    for t, p in zip(true_labels, predicted_labels):
        update_confusion(cm, int(t), int(p))
    return cm


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Percent of samples on the diagonal."""
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    return 100.0 * float(np.trace(cm.counts)) / total


@dataclass
class ClassMetrics:
    name: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    precision_degenerate: bool = False
    recall_degenerate: bool = False


def precision_recall_f1(cm: ConfusionMatrix) -> list:
    """Per-class precision, recall, and F1.

    Zero-denominator cases report 0 with the degeneracy flag set; F1 is 0
    whenever either component is 0.
    """
    out = []
    counts = cm.counts
    for k, name in enumerate(cm.class_names):
        tp = int(counts[k, k])
        fp = int(counts[:, k].sum() - tp)
        fn = int(counts[k, :].sum() - tp)
        p_deg = (tp + fp) == 0
        r_deg = (tp + fn) == 0
        precision = 0.0 if p_deg else tp / (tp + fp)
        recall = 0.0 if r_deg else tp / (tp + fn)
        f1 = 0.0 if (precision == 0.0 or recall == 0.0) else (
            2.0 * precision * recall / (precision + recall)
        )
        out.append(ClassMetrics(name, tp, fp, fn, precision, recall, f1, p_deg, r_deg))
    return out


def flops_conv_layer(out_h: int, out_w: int, kh: int, kw: int, c_in: int, c_out: int) -> int:
    """2 * H * W * kh * kw * C_in * C_out (each MAC counted as two FLOPs)."""
    if min(out_h, out_w, kh, kw, c_in, c_out) < 1:
        raise ValueError("all convolution dimensions must be positive")
    return 2 * out_h * out_w * kh * kw * c_in * c_out


def flops_linear_layer(n_in: int, n_out: int) -> int:
    """(2 * N_in - 1) * N_out: N_in multiplies and N_in - 1 adds per output."""
    if n_in < 1 or n_out < 1:
        raise ValueError("layer widths must be positive")
    return (2 * n_in - 1) * n_out


@dataclass
class FlopsRow:
    name: str
    kind: str  # "conv" or "linear"
    flops: int


@dataclass
class FlopsReport:
    rows: list = field(default_factory=list)

    def add_conv(self, name, out_h, out_w, kh, kw, c_in, c_out) -> None:
        self.rows.append(FlopsRow(name, "conv",
                                  flops_conv_layer(out_h, out_w, kh, kw, c_in, c_out)))

    def add_linear(self, name, n_in, n_out) -> None:
        self.rows.append(FlopsRow(name, "linear", flops_linear_layer(n_in, n_out)))

    @property
    def conv_total(self) -> int:
        return sum(r.flops for r in self.rows if r.kind == "conv")

    @property
    def linear_total(self) -> int:
        return sum(r.flops for r in self.rows if r.kind == "linear")

    @property
    def total(self) -> int:
        return self.conv_total + self.linear_total

    def render_table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [10])
        lines = [f"{'layer':<{width}}  {'kind':<6}  {'flops':>16}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<6}  {r.flops:>16,}")
        lines.append(f"{'conv total':<{width}}  {'':<6}  {self.conv_total:>16,}")
        lines.append(f"{'linear total':<{width}}  {'':<6}  {self.linear_total:>16,}")
        lines.append(f"{'total':<{width}}  {'':<6}  {self.total:>16,}")
        return "\n".join(lines)

    def machine_rows(self) -> str:
        lines = ["name\tkind\tflops"]
        for r in self.rows:
            lines.append(f"{r.name}\t{r.kind}\t{r.flops}")
        return "\n".join(lines)


def flops_model(model, input_side: int = None, fused_acb: bool = True) -> FlopsReport:
    """Sum conv/linear FLOPs over the model at realized feature-map sizes.

    Batch norm, activations, and pooling are excluded.  ACBs count in their
    fused single-conv inference form by default; pass fused_acb=False to
    count all three training-form branches at their true kernel sizes.
    """
    report = FlopsReport()
    for g in model.layer_geometry(input_side, fused_acb):
        if g["kind"] == "conv":
            report.add_conv(g["name"], g["out_h"], g["out_w"], g["kh"], g["kw"],
                            g["c_in"], g["c_out"])
        else:
            report.add_linear(g["name"], g["n_in"], g["n_out"])
    return report


def confusion_to_tsv(cm: ConfusionMatrix) -> str:
    """Delimited export: header row of predicted classes, one row per true class."""
    lines = ["true\\pred\t" + "\t".join(cm.class_names)]
    for k, name in enumerate(cm.class_names):
        lines.append(name + "\t" + "\t".join(str(int(v)) for v in cm.counts[k]))
    return "\n".join(lines)


def class_metrics_to_tsv(metrics: list) -> str:
    lines = ["class\ttp\tfp\tfn\tprecision\trecall\tf1"]
    for m in metrics:
        lines.append(
            f"{m.name}\t{m.tp}\t{m.fp}\t{m.fn}\t{m.precision:.6f}\t{m.recall:.6f}\t{m.f1:.6f}"
        )
    return "\n".join(lines)
