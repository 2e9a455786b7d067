"""Brute-force reference implementations used only by the tests.

Deliberately written as plain loops over Python tuples, sharing no code with
the package under test.
"""

import math


def dist(p, q):
    dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def _key(pts, i, d):
    return (d, pts[i][0], pts[i][1], pts[i][2], i)


def fps(pts, m):
    pts = [tuple(p) for p in pts]
    n = len(pts)
    first = min(range(n), key=lambda i: (pts[i], i))
    chosen = [first]
    while len(chosen) < m:
        best, best_key = None, None
        for i in range(n):
            if i in chosen:
                continue
            md = min(dist(pts[i], pts[c]) for c in chosen)
            # larger distance wins; ties go to the lexicographically smaller point
            key = (-md, pts[i], i)
            if best_key is None or key < best_key:
                best, best_key = i, key
        chosen.append(best)
    return chosen


def ball_query(pts, centroids, r, k):
    pts = [tuple(p) for p in pts]
    out = []
    for c in centroids:
        found = []
        for i, p in enumerate(pts):
            d = dist(pts[c], p)
            if d <= r:
                found.append(_key(pts, i, d))
        found.sort()
        members = [f[-1] for f in found[:k]]
        members += [members[0]] * (k - len(members))
        out.append(members)
    return out


def knn(query, source, k):
    source = [tuple(p) for p in source]
    idx, dists = [], []
    for q in query:
        ranked = sorted(_key(source, i, dist(q, s)) for i, s in enumerate(source))[:k]
        idx.append([r[-1] for r in ranked])
        dists.append([r[0] for r in ranked])
    return idx, dists


def interpolate(feats, source, query, k, eps=1e-8):
    idx, dists = knn(query, source, k)
    out = []
    for row_idx, row_d in zip(idx, dists):
        inv = [1.0 / (d + eps) for d in row_d]
        total = sum(inv)
        vec = [0.0] * len(feats[0])
        for j, w in zip(row_idx, inv):
            for c in range(len(vec)):
                vec[c] += (w / total) * feats[j][c]
        out.append(vec)
    return out


def confusion(y_true, y_pred, num_classes):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return cm


def oa_acc(y_true, y_pred, num_classes):
    cm = confusion(y_true, y_pred, num_classes)
    total = sum(map(sum, cm))
    oa = sum(cm[i][i] for i in range(num_classes)) / total
    recalls = [cm[i][i] / sum(cm[i]) for i in range(num_classes) if sum(cm[i])]
    return oa, sum(recalls) / len(recalls)


def shape_iou_sets(pred, gt, parts):
    ious = []
    for part in parts:
        p = {i for i, v in enumerate(pred) if v == part}
        g = {i for i, v in enumerate(gt) if v == part}
        union = p | g
        ious.append(1.0 if not union else len(p & g) / len(union))
    return sum(ious) / len(ious)


def _mlp(x, layers):
    import numpy as np

    for W, b in layers:
        x = np.maximum(np.asarray(x) @ W + b, 0.0)
    return x


def path_levels(pts, attrs, resolution, layer_specs, weights):
    """Per-centroid loop version of one pyramid path.

    ``layer_specs`` is [(r, k)] * 3 and ``weights`` [[(W, b), ...]] * 3 as numpy.
    """
    import numpy as np

    idx = fps(pts, resolution)
    sub = [tuple(pts[i]) for i in idx]
    feats, levels = None, []
    for j, (r, k) in enumerate(layer_specs):
        groups = ball_query(sub, list(range(len(sub))), r, k)
        rows = []
        for c, members in enumerate(groups):
            grouped = []
            for m in members:
                if j == 0:
                    vec = [sub[m][d] - sub[c][d] for d in range(3)]
                    if attrs is not None:
                        vec += list(attrs[idx[m]])
                else:
                    vec = list(feats[m]) + list(feats[c])
                grouped.append(vec)
            rows.append(_mlp(grouped, weights[j]).max(axis=0))
        feats = np.array(rows)
        levels.append(feats)
    return idx, levels


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attend(a, b, g, wq, wk, wv, scaled=True):
    """Row-by-row attention with explicit dot products."""
    import numpy as np

    q, k, v = np.asarray(a) @ wq, np.asarray(b) @ wk, np.asarray(g) @ wv
    c_red = q.shape[1]
    out = []
    for i in range(len(q)):
        scores = [sum(q[i][t] * k[j][t] for t in range(c_red)) for j in range(len(k))]
        if scaled:
            scores = [s / math.sqrt(c_red) for s in scores]
        w = softmax(scores)
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(v.shape[1])])
    return np.array(out)


def fuse(xs, branch, cross, scaled_cross=True):
    sc = [attend(x, x, x, *p) + x for x, p in zip(xs, branch)]
    return attend(sc[0], sc[1], sc[2], *cross, scaled=scaled_cross) + sc[0] + sc[1] + sc[2]
