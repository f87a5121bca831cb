"""Evaluation metrics and attention-mask export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc

NLL_CLAMP = 1e-12
MAX_THRESHOLD = 0.9999


@dataclass
class EvalReport:
    unbiased_accuracy: float
    conflicting_accuracy: float | None
    aligned_accuracy: float | None
    ece: float
    nll: float
    v_score_intrinsic: float
    v_score_bias: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- classification


def accuracy(preds, labels, mask=None) -> float | None:
    """Fraction correct, optionally over ``mask``; ``None`` when nothing is selected."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} vs labels {labels.shape}")
    hit = preds == labels
    if mask is not None:
        hit = hit[np.asarray(mask, dtype=bool)]
    return float(hit.mean()) if hit.size else None


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def bin_index(confidences: np.ndarray, bins: int) -> np.ndarray:
    """Bins are ``(lo, hi]`` of equal width; exact zeros land in the first bin."""
    idx = np.ceil(np.asarray(confidences) * bins).astype(np.int64) - 1
    return np.clip(idx, 0, bins - 1)


def reliability_bins(confidences, correctness, bins: int = 15):
    """Per-bin ``(count, mean confidence, accuracy)`` rows."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correctness, dtype=np.float64)
    idx = bin_index(conf, bins)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    corr_sum = np.bincount(idx, weights=corr, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return count, conf_sum / count, corr_sum / count


def ece(confidences, correctness, bins: int = 15) -> float:
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        return 0.0
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    count, mconf, macc = reliability_bins(conf, correctness, bins)
    used = count > 0
    return float(np.sum(count[used] / conf.size * np.abs(macc[used] - mconf[used])))


def nll(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    p = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(p, NLL_CLAMP))))


# ---------------------------------------------------------------- clustering


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, np.array(centers)).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        j = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[j])
        d2 = np.minimum(d2, _sq_dists(x, x[j:j + 1])[:, 0])
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, rng: np.random.Generator, max_iter: int = 300):
    """Run Lloyd iterations; returns ``(assign, centers, inertia_history)``.

    An emptied cluster is reseeded at the point farthest from its center.
    """
    history = []
    assign = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centers)):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                far = d[np.arange(len(x)), assign].argmax()
                centers[j] = x[far]
    return assign, centers, history


def kmeans(features, k: int, seed: int = 0, restarts: int = 10) -> np.ndarray:
    """k-means++ seeded Lloyd with ``restarts`` tries; lowest inertia wins."""
    x = np.asarray(features, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    rng = nc.make_rng(seed, nc.STREAM_TRAIN, 7)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        assign, _, hist = lloyd(x, _kmeanspp(x, k, rng), rng)
        if hist[-1] < best_inertia:
            best, best_inertia = assign, hist[-1]
    return best


def _entropy_counts(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def contingency(assignments, labels) -> np.ndarray:
    _, a = np.unique(np.asarray(assignments), return_inverse=True)
    _, c = np.unique(np.asarray(labels), return_inverse=True)
    table = np.zeros((c.max() + 1, a.max() + 1))
    np.add.at(table, (c, a), 1)
    return table


def v_score(assignments, labels) -> float:
    """Harmonic mean of homogeneity and completeness."""
    assignments, labels = np.asarray(assignments), np.asarray(labels)
    if assignments.shape != labels.shape:
        raise ValueError("assignments and labels differ in length")
    if assignments.size == 0:
        return 1.0
    table = contingency(assignments, labels)  # rows: classes, cols: clusters
    n = table.sum()
    h_class = _entropy_counts(table.sum(axis=1))
    h_clust = _entropy_counts(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    col = np.broadcast_to(table.sum(axis=0, keepdims=True), table.shape)[nz]
    row = np.broadcast_to(table.sum(axis=1, keepdims=True), table.shape)[nz]
    h_class_given_clust = float(-(joint * np.log(table[nz] / col)).sum())
    h_clust_given_class = float(-(joint * np.log(table[nz] / row)).sum())
    h = 1.0 if h_class == 0 else 1.0 - h_class_given_clust / h_class
    c = 1.0 if h_clust == 0 else 1.0 - h_clust_given_class / h_clust
    return 0.0 if h + c == 0 else 2.0 * h * c / (h + c)


# ---------------------------------------------------------------- similarity


def linear_cka(x, y) -> float | None:
    """Linear CKA on column-centered activations; ``None`` if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y) or len(x) < 2:
        raise ValueError(f"need matching (N, p) and (N, q) with N >= 2, got {x.shape} {y.shape}")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        return None
    return float(np.linalg.norm(y.T @ x) ** 2 / (xx * yy))


def cka_matrix(model_a, model_b, x, branch_a: str = "i", branch_b: str = "i") -> np.ndarray:
    """CKA between every hidden encoder layer of two models on inputs ``x``."""
    ha = model_a.hidden_activations(branch_a, x)
    hb = model_b.hidden_activations(branch_b, x)
    out = np.full((len(ha), len(hb)), np.nan)
    for i, a in enumerate(ha):
        for j, b in enumerate(hb):
            v = linear_cka(a, b)
            out[i, j] = np.nan if v is None else v
    return out


# ---------------------------------------------------------------- evaluation


def evaluate(model, ds, bins: int = 15, seed: int = 0) -> EvalReport:
    """Unbiased-split accuracy, calibration and encoder clustering quality."""
    x = ds.flat()
    logits = model.predict(x)
    probs = softmax_np(logits)
    preds = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    k = ds.num_classes
    feats_i = model.encoder("i", nc.Tensor(x)).data
    feats_b = model.encoder("b", nc.Tensor(x)).data
    return EvalReport(
        unbiased_accuracy=accuracy(preds, ds.labels),
        conflicting_accuracy=accuracy(preds, ds.labels, ds.conflicting),
        aligned_accuracy=accuracy(preds, ds.labels, ~ds.conflicting),
        ece=ece(conf, preds == ds.labels, bins),
        nll=nll(probs, ds.labels),
        v_score_intrinsic=v_score(kmeans(feats_i, k, seed), ds.labels),
        v_score_bias=v_score(kmeans(feats_b, k, seed), ds.biases),
    )


# ---------------------------------------------------------------- masks


def threshold_mask(a: np.ndarray, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= MAX_THRESHOLD:
        raise ValueError(f"threshold must lie in [0, {MAX_THRESHOLD}], got {tau}")
    return np.where(a < tau, 0.0, a)


def write_pgm(path, a: np.ndarray) -> None:
    pix = np.clip(np.rint(255.0 * a), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_csv(path, a: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in a:
            writer.writerow([repr(float(v)) for v in row])


def write_reliability_csv(path, confidences, correctness, bins: int = 15) -> None:
    """One row per bin: ``lo, hi, count, mean_confidence, accuracy`` (empty bins left blank)."""
    count, mconf, macc = reliability_bins(confidences, correctness, bins)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lo", "hi", "count", "mean_confidence", "accuracy"])
        for b in range(bins):
            used = count[b] > 0
            writer.writerow([repr(b / bins), repr((b + 1) / bins), int(count[b]),
                             repr(float(mconf[b])) if used else "", repr(float(macc[b])) if used else ""])


def read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def concept_entropy(a: np.ndarray) -> np.ndarray:
    """Entropy of each concept column renormalized over tokens."""
    col = a / a.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(col > 0, -col * np.log(col), 0.0)
    return terms.sum(axis=0)


def export_masks(model, x: np.ndarray, out_dir, threshold: float = 0.0, seed: int = 0) -> list[Path]:
    """Write the CA mask of both branches per sample as CSV and PGM.

    Slot noise comes from a generator keyed by ``seed`` so exports repeat.
    """
    if not 0.0 <= threshold <= MAX_THRESHOLD:
        raise ValueError(f"threshold must lie in [0, {MAX_THRESHOLD}], got {threshold}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = nc.make_rng(seed, nc.STREAM_TRAIN, 99)
    e = model.encode(x)
    written = []
    summary = []
    for br in ("i", "b"):
        _, rec = model.dgw_update(br, e, rng)
        masks = rec.a_ca.data
        for n, a in enumerate(masks):
            stem = out / f"sample{n:05d}_{br}"
            write_csv(stem.with_suffix(".csv"), a)
            write_pgm(stem.with_suffix(".pgm"), threshold_mask(a, threshold))
            written += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
            summary.append({"sample": n, "branch": br,
                            "concept_entropy": concept_entropy(a).tolist()})
    (out / "entropy.json").write_text(json.dumps(summary, indent=1))
    written.append(out / "entropy.json")
    return written
