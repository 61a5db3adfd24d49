"""Brute-force reference implementations used as test oracles."""


def confusion_loop(y_true, y_pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return cm


def per_class_loop(y_true, y_pred, k):
    out = []
    for c in range(k):
        tp = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            tp += t == c and p == c
            fp += t != c and p == c
            fn += t == c and p != c
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


def pairwise_auc(labels, scores):
    pos = [s for l, s in zip(labels, scores) if l]
    neg = [s for l, s in zip(labels, scores) if not l]
    credit = 0.0
    for a in pos:
        for b in neg:
            credit += 1.0 if a > b else 0.5 if a == b else 0.0
    return credit / (len(pos) * len(neg))


def pr_loop(labels, scores):
    n_pos = sum(1 for l in labels if l)
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for l, s in zip(labels, scores) if l and s >= t)
        fp = sum(1 for l, s in zip(labels, scores) if not l and s >= t)
        points.append((tp / n_pos, tp / (tp + fp)))
    return points
