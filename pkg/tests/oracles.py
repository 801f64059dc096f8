"""Independent reference implementations used to check the real ones.

Deliberately naive: per-pixel Python loops and textbook formulas, written
without looking at the library internals, so agreement is meaningful.
"""

import math

IGNORE = 255


def brute_force_report(truths, preds, class_count):
    """Count per-pixel over a list of (truth, pred) rasters; return a dict
    shaped like MetricsReport, computed with plain Python arithmetic."""
    tp = [0] * class_count
    fp = [0] * class_count
    fn = [0] * class_count
    support = [0] * class_count
    total = 0
    correct = 0
    for truth, pred in zip(truths, preds):
        for t_row, p_row in zip(truth.tolist(), pred.tolist()):
            for t, p in zip(t_row, p_row):
                if t == IGNORE:
                    continue
                total += 1
                support[t] += 1
                if t == p:
                    correct += 1
                    tp[t] += 1
                else:
                    fp[p] += 1
                    fn[t] += 1

    def div(a, b):
        return a / b if b else 0.0

    per_class = []
    for c in range(class_count):
        per_class.append({
            "precision": div(tp[c], tp[c] + fp[c]),
            "recall": div(tp[c], support[c]),
            "f1": div(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]),
            "iou": div(tp[c], tp[c] + fp[c] + fn[c]),
            "support": support[c],
            "weight": support[c] / total if total else 0.0,
        })
    agg = {"precision": 0.0, "recall": 0.0, "f1": 0.0, "iou": 0.0}
    for m in per_class:
        for key in agg:
            agg[key] += m["weight"] * m[key]
    return {
        "per_class": per_class,
        "accuracy": div(correct, total),
        "weighted_precision": agg["precision"],
        "weighted_recall": agg["recall"],
        "weighted_f1": agg["f1"],
        "weighted_iou": agg["iou"],
        "total_pixels": total,
    }


def scalar_kl(teacher_logits, student_logits, temperature):
    """KL(softmax(t/T) || softmax(s/T)) for one pixel, via plain math."""
    t = [z / temperature for z in teacher_logits]
    s = [z / temperature for z in student_logits]
    zt = sum(math.exp(v) for v in t)
    zs = sum(math.exp(v) for v in s)
    pt = [math.exp(v) / zt for v in t]
    ps = [math.exp(v) / zs for v in s]
    return sum(p * math.log(p / q) for p, q in zip(pt, ps) if p > 0)
