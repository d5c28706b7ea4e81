"""Target accuracy, proxy A-distance, embedding export and ablation grids."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DomainPair, LabeledDataset
from .networks import ModelSet
from .tensor import Tensor

TOGGLES = ("pixel_mixup", "feature_mixup", "triplet", "d_cls_branch", "pseudo_labels")
SHORT = {"pixel_mixup": "PM", "feature_mixup": "FM", "triplet": "Tri", "d_cls_branch": "Dcls", "pseudo_labels": "pseudo"}


def latent_features(models: ModelSet, images: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Concatenated ``[mu, sigma]`` for every row; no graph is recorded."""
    out = []
    with models.training(None):
        for i in range(0, len(images), chunk):
            code = models.encoder(Tensor(images[i : i + chunk]))
            out.append(np.concatenate([code.mu.data, code.sigma.data], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 2 * models.arch.d_z))


def predict(models: ModelSet, images: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Argmax class of ``C(N_e(x))``; ties go to the lowest index."""
    preds = []
    with models.training(None):
        for i in range(0, len(images), chunk):
            logits = models.classifier(models.encoder(Tensor(images[i : i + chunk])))
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def target_accuracy(models: ModelSet, target_test: LabeledDataset) -> float:
    if len(target_test) == 0:
        raise ValueError("target_accuracy on an empty dataset")
    if target_test.labels is None:
        raise ValueError(f"{target_test.name}: evaluation needs labels")
    return float(np.mean(predict(models, target_test.images) == target_test.labels))


def a_distance(
    feat_s,
    feat_t,
    seed: int = 0,
    steps: int = 500,
    lr: float = 0.1,
    l2: float = 1e-3,
) -> float:
    """Proxy A-distance ``clamp(2 * (1 - 2 * err), 0, 2)`` from a linear domain probe.

    Each feature set is split in half; an L2-regularized logistic regression
    is fitted by full-batch gradient descent on standardized training
    features and ``err`` is its error on the held-out halves.
    """
    feat_s = np.asarray(feat_s, dtype=np.float64)
    feat_t = np.asarray(feat_t, dtype=np.float64)
    if len(feat_s) < 20 or len(feat_t) < 20:
        raise ValueError(f"a_distance needs >= 20 samples per domain, got {len(feat_s)}/{len(feat_t)}")
    rng = np.random.default_rng(seed)
    ps, pt = rng.permutation(len(feat_s)), rng.permutation(len(feat_t))
    hs, ht = len(feat_s) // 2, len(feat_t) // 2
    x_tr = np.concatenate([feat_s[ps[:hs]], feat_t[pt[:ht]]])
    y_tr = np.concatenate([np.ones(hs), np.zeros(ht)])
    x_te = np.concatenate([feat_s[ps[hs:]], feat_t[pt[ht:]]])
    y_te = np.concatenate([np.ones(len(feat_s) - hs), np.zeros(len(feat_t) - ht)])

    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd

    w = np.zeros(x_tr.shape[1])
    b = 0.0
    n = len(x_tr)
    for _ in range(steps):
        p = 0.5 * (1.0 + np.tanh(0.5 * (x_tr @ w + b)))
        r = p - y_tr
        w -= lr * (x_tr.T @ r / n + l2 * w)
        b -= lr * r.mean()
    err = float(np.mean(((x_te @ w + b) > 0) != (y_te > 0.5)))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def export_embeddings(models: ModelSet, datasets: dict[str, LabeledDataset], path) -> Path:
    """CSV of ``domain,label,f0..`` rows; withheld labels are written as -1."""
    path = Path(path)
    d = 2 * models.arch.d_z
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label"] + [f"f{i}" for i in range(d)])
        for tag, ds in datasets.items():
            feats = latent_features(models, ds.images)
            labels = ds.labels if ds.labels is not None else np.full(len(ds), -1)
            for lab, row in zip(labels, feats):
                w.writerow([tag, int(lab)] + [repr(float(v)) for v in row])
    return path


# -- ablation ------------------------------------------------------------

@dataclass(frozen=True)
class AblationSpec:
    combinations: tuple[tuple[str, ...], ...]
    seeds: tuple[int, ...]
    task: str = "moons"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("an ablation needs at least one seed")
        canon = [tuple(sorted(c)) for c in self.combinations]
        if len(set(canon)) != len(canon):
            raise ValueError("ablation combinations must be distinct")
        for combo in self.combinations:
            unknown = set(combo) - set(TOGGLES)
            if unknown:
                raise ValueError(f"unknown toggles {sorted(unknown)}")


def combination_name(combo) -> str:
    return "+".join(SHORT[t] for t in TOGGLES if t in combo) or "baseline"


def mixup_ablation_spec(seeds=(0, 1, 2), task: str = "moons") -> AblationSpec:
    """Rows of the mixup/triplet ablation; class branch and pseudo labels stay on."""
    rest = ("d_cls_branch", "pseudo_labels")
    rows = [(), ("pixel_mixup",), ("pixel_mixup", "triplet"), ("feature_mixup",),
            ("pixel_mixup", "feature_mixup"), ("pixel_mixup", "feature_mixup", "triplet")]
    return AblationSpec(tuple(r + rest for r in rows), tuple(seeds), task)


def branch_ablation_spec(seeds=(0, 1, 2), task: str = "moons") -> AblationSpec:
    base = ("pixel_mixup", "feature_mixup", "triplet")
    rows = [base, base + ("d_cls_branch",), base + ("d_cls_branch", "pseudo_labels")]
    return AblationSpec(tuple(rows), tuple(seeds), task)


@dataclass
class AblationRow:
    combination: str
    mean_accuracy: float
    std_accuracy: float
    mean_a_distance: float
    accuracies: list[float]
    a_distances: list[float]


def _cell(args):
    from .trainer import train

    pair, target_test, cfg = args
    _, records = train(pair, cfg, target_test=target_test)
    return records[-1].target_accuracy, records[-1].a_distance


def run_ablation(spec: AblationSpec, cfg, pair_factory, out_dir=None, workers: int = 1) -> list[AblationRow]:
    """Train every (combination, seed) cell and aggregate mean/std per combination.

    ``pair_factory(seed)`` returns ``(DomainPair, target_test)``.  With
    ``out_dir`` set, ``cells.csv`` and ``ablation.csv`` are written there.
    """
    jobs = []
    for combo in spec.combinations:
        toggles = {t: (t in combo) for t in TOGGLES}
        for seed in spec.seeds:
            pair, target_test = pair_factory(seed)
            jobs.append((combo, seed, (pair, target_test, replace(cfg, seed=seed, **toggles))))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_cell, [j[2] for j in jobs]))
    else:
        results = [_cell(j[2]) for j in jobs]

    rows = []
    cells = []
    for combo, group in itertools.groupby(zip(jobs, results), key=lambda jr: jr[0][0]):
        group = list(group)
        accs = [r[0] for _, r in group]
        dists = [r[1] for _, r in group]
        name = combination_name(combo)
        cells.extend((name, j[1], r[0], r[1]) for j, r in group)
        rows.append(AblationRow(name, float(np.mean(accs)), float(np.std(accs)), float(np.mean(dists)), accs, dists))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["combination", "seed", "accuracy", "a_distance"])
            w.writerows(cells)
        write_ablation_table(rows, out_dir / "ablation.csv")
    return rows


def write_ablation_table(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["combination"] + [SHORT[t] for t in TOGGLES] + ["a_distance", "accuracy_mean", "accuracy_std"])
        for r in rows:
            parts = set() if r.combination == "baseline" else set(r.combination.split("+"))
            marks = ["x" if SHORT[t] in parts else "" for t in TOGGLES]
            w.writerow([r.combination] + marks + [f"{r.mean_a_distance:.4f}", f"{r.mean_accuracy:.4f}", f"{r.std_accuracy:.4f}"])


def pooled_std(rows: list[AblationRow]) -> float:
    return math.sqrt(float(np.mean([r.std_accuracy**2 for r in rows])))
