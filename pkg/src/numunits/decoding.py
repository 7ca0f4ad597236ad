"""Diagnostic decoding of subject number and syntactic depth.

* :func:`auc` is the Mann-Whitney statistic computed from average ranks.
* :class:`LinearDecoder` is an L2-regularised linear classifier (logistic
  regression by default, ridge on +/-1 labels as an alternative) whose
  penalty is selected on inner folds.
* :func:`gat_matrix` trains at one timestep and tests at every timestep
  (generalisation across time), reporting mean and SD over outer splits.
* :func:`depth_regression` runs nested cross-validated ridge regression of
  open-node depth on hidden activity, optionally with a word log-frequency
  covariate, and flags weight outliers.

Features are z-scored with training-fold statistics, so regression weights
are in standardised units.
"""
from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .grammar import EOS, DepthDataset, Stimulus
from .lstm import LanguageModel, run_layers
from .units import UnitRef, all_units

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(float(a) for a in np.logspace(-4, 3, 8))


class DecodingError(ValueError):
    pass


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), exactly, via average ranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DecodingError("scores and labels must be 1-D arrays of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DecodingError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --------------------------------------------------------------------------
# Fold helpers

def stratified_folds(labels, n_splits: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample, each class dealt round-robin after a shuffle."""
    labels = np.asarray(labels)
    folds = np.empty(len(labels), dtype=int)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % n_splits
    return folds


def group_folds(groups, n_splits: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample such that every group lands in a single fold."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    uniq = uniq[rng.permutation(len(uniq))]
    fold_of = {g: k % n_splits for k, g in enumerate(uniq)}
    return np.array([fold_of[g] for g in groups], dtype=int)


class Standardizer:
    def fit(self, X):
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        return self

    def transform(self, X):
        return (X - self.mean_) / self.scale_


# --------------------------------------------------------------------------
# Ridge

def ridge_fit(X, y, alpha: float) -> tuple[np.ndarray, float]:
    """argmin ||y - Xw - b||^2 + alpha ||w||^2 with an unpenalised intercept."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    w = np.linalg.solve(A, Xc.T @ (y - ym)) if alpha > 0 else np.linalg.lstsq(Xc, y - ym, rcond=None)[0]
    return w, float(ym - xm @ w)


def r2_score(y, pred) -> float:
    y = np.asarray(y, float)
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def _select_alpha_ridge(X, y, alphas, inner_folds) -> float:
    best, best_score = alphas[0], -np.inf
    for a in alphas:
        preds = np.empty(len(y))
        for k in np.unique(inner_folds):
            tr, te = inner_folds != k, inner_folds == k
            sc = Standardizer().fit(X[tr])
            w, b = ridge_fit(sc.transform(X[tr]), y[tr], a)
            preds[te] = sc.transform(X[te]) @ w + b
        score = r2_score(y, preds)
        if score > best_score + 1e-12:
            best, best_score = a, score
    return best


# --------------------------------------------------------------------------
# Number decoder

@dataclass
class LinearDecoder:
    """Standardise, then L2-regularised linear classifier.

    The objective is the mean loss plus ``alpha/2 * ||w||^2`` (logistic) or
    the mean squared error plus ``alpha * ||w||^2`` on +/-1 targets (ridge),
    so duplicating every sample leaves the solution unchanged.
    """

    backend: str = "logistic"
    alphas: Sequence[float] = ALPHA_GRID
    inner_splits: int = 3
    seed: int = 0
    alpha_: float = field(default=float("nan"), init=False)

    def _fit_fixed(self, X, y, alpha):
        if self.backend == "logistic":
            from sklearn.linear_model import LogisticRegression

            clf = LogisticRegression(C=1.0 / (alpha * len(y)), tol=1e-10, max_iter=10_000)
            clf.fit(X, y)
            return clf.coef_[0].copy(), float(clf.intercept_[0])
        if self.backend == "ridge":
            return ridge_fit(X, 2.0 * y - 1.0, alpha * len(y))
        raise DecodingError(f"unknown decoder backend {self.backend!r}")

    def fit(self, X, y, alpha: float | None = None) -> "LinearDecoder":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y).astype(int)
        if X.ndim != 2 or len(X) != len(y):
            raise DecodingError("X must be (n_samples, n_features) matching y")
        if not np.any(X.std(axis=0) > 0):
            raise DecodingError("all features have zero variance")
        counts = np.bincount(y, minlength=2)
        if counts.min() == 0:
            raise DecodingError("decoder needs both classes")
        if counts.max() > 4 * counts.min():
            warnings.warn(f"class imbalance {counts.tolist()} exceeds 4:1")
        self.scaler_ = Standardizer().fit(X)
        Z = self.scaler_.transform(X)
        if alpha is None:
            alpha = self._select(Z, y) if len(self.alphas) > 1 else self.alphas[0]
        self.alpha_ = float(alpha)
        self.coef_, self.intercept_ = self._fit_fixed(Z, y, self.alpha_)
        return self

    def _select(self, Z, y) -> float:
        rng = np.random.default_rng([self.seed, 5])
        folds = stratified_folds(y, self.inner_splits, rng)
        best, best_score = self.alphas[0], -np.inf
        for a in self.alphas:
            scores = []
            for k in range(self.inner_splits):
                tr, te = folds != k, folds == k
                if len(np.unique(y[tr])) < 2 or len(np.unique(y[te])) < 2:
                    continue
                w, b = self._fit_fixed(Z[tr], y[tr], a)
                scores.append(auc(Z[te] @ w + b, y[te]))
            score = float(np.mean(scores)) if scores else -np.inf
            if score > best_score + 1e-12:
                best, best_score = a, score
        return best

    def decision_function(self, X) -> np.ndarray:
        return self.scaler_.transform(np.asarray(X, dtype=float)) @ self.coef_ + self.intercept_


def train_number_decoder(X, y, seed: int = 0, backend: str = "logistic",
                         alphas: Sequence[float] = ALPHA_GRID) -> LinearDecoder:
    return LinearDecoder(backend, alphas, seed=seed).fit(X, y)


# --------------------------------------------------------------------------
# Generalisation across time

@dataclass
class GATMatrix:
    train_time: int
    mean: np.ndarray          # (T,) mean AUC per test time
    sd: np.ndarray            # (T,) SD across splits
    per_split: np.ndarray     # (n_splits, T)
    folds: np.ndarray
    label: str = ""
    tokens: list | None = None
    alphas: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def diagonal(self) -> float:
        return float(self.mean[self.train_time])

    def to_json(self) -> dict:
        return {"label": self.label, "train_time": self.train_time,
                "tokens": self.tokens, "mean_auc": self.mean.tolist(), "sd_auc": self.sd.tolist(),
                "per_split_auc": self.per_split.tolist(), "selected_alphas": self.alphas,
                "fold_assignment": self.folds.tolist(), "config": self.config}


def gat_matrix(features, labels, train_time: int, seed: int = 0, n_splits: int = 5,
               backend: str = "logistic", alphas: Sequence[float] = ALPHA_GRID,
               label: str = "") -> GATMatrix:
    """Train at ``train_time`` on each outer split, test at every timestep.

    ``features`` is (n_samples, T, n_features); ``labels`` are 0/1.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    y = np.asarray(labels).astype(int)
    n, T, _ = X.shape
    if len(y) != n:
        raise DecodingError("labels do not match samples")
    if not 0 <= train_time < T:
        raise DecodingError(f"train_time {train_time} outside 0..{T - 1}")
    rng = np.random.default_rng([seed, 11])
    folds = stratified_folds(y, n_splits, rng)
    per_split = np.empty((n_splits, T))
    chosen = []
    for k in range(n_splits):
        tr, te = folds != k, folds == k
        dec = LinearDecoder(backend, alphas, seed=seed + k).fit(X[tr, train_time], y[tr])
        chosen.append(dec.alpha_)
        for t in range(T):
            per_split[k, t] = auc(dec.decision_function(X[te, t]), y[te])
    return GATMatrix(train_time, per_split.mean(0), per_split.std(0), per_split, folds, label,
                     alphas=chosen, config={"seed": seed, "n_splits": n_splits, "backend": backend,
                                            "alpha_grid": list(alphas)})


def collect_features(model: LanguageModel, stimuli: Sequence[Stimulus], units: Sequence[UnitRef],
                     what: str = "c") -> np.ndarray:
    """(n_stimuli, T, n_units) activations over the full aligned sentences.

    Each sentence is preceded by ``<eos>``; that step is dropped, so index t
    is the step at which ``tokens[t]`` is input.
    """
    if not stimuli:
        raise DecodingError("no stimuli")
    T = len(stimuli[0].tokens)
    if any(len(s.tokens) != T or s.subject_pos != stimuli[0].subject_pos for s in stimuli):
        raise DecodingError("stimuli are not aligned (lengths or subject positions differ)")
    ids = np.stack([model.encode((EOS,) + s.tokens) for s in stimuli], axis=1)
    states, _ = run_layers(model, ids)
    cols = []
    for u in units:
        arr = getattr(states[u.layer - 1], what)
        cols.append(arr[1:, :, u.unit - 1])
    return np.stack(cols, axis=-1).transpose(1, 0, 2)


def subject_labels(stimuli: Sequence[Stimulus]) -> np.ndarray:
    """1 for plural subjects, 0 for singular."""
    return np.array([1 if s.subject_number == "P" else 0 for s in stimuli])


def gat_analysis(model: LanguageModel, stimuli: Sequence[Stimulus], units: Sequence[UnitRef],
                 train_time: int | None = None, seed: int = 0, what: str = "c",
                 label: str = "", **kw) -> GATMatrix:
    """Subject-number GAT from ``what`` activity (cell state by default) of ``units``."""
    X = collect_features(model, stimuli, units, what)
    t0 = stimuli[0].subject_pos if train_time is None else train_time
    g = gat_matrix(X, subject_labels(stimuli), t0, seed, label=label, **kw)
    g.tokens = list(stimuli[0].tokens)
    g.config.update({"feature": what, "units": [str(u) for u in units]})
    return g


def units_excluding(model: LanguageModel, exclude: Sequence[UnitRef]) -> list[UnitRef]:
    ex = set(exclude)
    return [u for u in all_units(model.n_layers, model.hidden_dim) if u not in ex]


# --------------------------------------------------------------------------
# Short-range number units

@dataclass
class SingleUnitCode:
    unit: UnitRef
    auc_subject: float        # oriented AUC at subject presentation
    auc_after: float          # oriented AUC at the intervening noun
    min_auc_after: float      # lowest oriented AUC from the intervener to the verb
    swaps: bool
    sr: bool

    def to_json(self) -> dict:
        return {"unit": str(self.unit), "auc_subject": self.auc_subject, "auc_after": self.auc_after,
                "min_auc_after": self.min_auc_after, "swaps": self.swaps, "sr_unit": self.sr}


def single_unit_codes(features, labels, units: Sequence[UnitRef], subject_t: int, intervener_t: int,
                      end_t: int | None = None, auc_threshold: float = 0.9) -> list[SingleUnitCode]:
    """Per-unit subject-number code at subject time and after the intervener.

    A one-feature linear decoder only learns a sign, so each unit is oriented
    by the sign of its class-mean difference at subject time and scored by
    exact AUC.  SR units: oriented AUC > ``auc_threshold`` at the subject and
    below 0.5 at the intervening noun.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    end_t = X.shape[1] if end_t is None else end_t
    out = []
    for j, u in enumerate(units):
        x0 = X[:, subject_t, j]
        sign = 1.0 if x0[y == 1].mean() >= x0[y == 0].mean() else -1.0
        a0 = auc(sign * x0, y) if np.ptp(x0) > 0 else 0.5
        after = [auc(sign * X[:, t, j], y) if np.ptp(X[:, t, j]) > 0 else 0.5
                 for t in range(intervener_t, end_t)]
        a1 = after[0]
        swaps = a1 < 0.5
        out.append(SingleUnitCode(u, a0, a1, min(after), swaps, a0 > auc_threshold and swaps))
    return out


def identify_sr_units(model: LanguageModel, stimuli: Sequence[Stimulus], units: Sequence[UnitRef] | None = None,
                      what: str = "c", auc_threshold: float = 0.9) -> list[SingleUnitCode]:
    """Single-unit number codes on intervener stimuli; ``.sr`` marks SR units."""
    stimuli = [s for s in stimuli if s.intervening_pos is not None]
    if not stimuli:
        raise DecodingError("identify_sr_units needs stimuli with an intervening noun")
    units = list(units) if units is not None else all_units(model.n_layers, model.hidden_dim)
    X = collect_features(model, stimuli, units, what)
    s0 = stimuli[0]
    return single_unit_codes(X, subject_labels(stimuli), units, s0.subject_pos, s0.intervening_pos,
                             s0.verb_pos, auc_threshold)


# --------------------------------------------------------------------------
# Depth regression

@dataclass
class DepthRegressionResult:
    units: list[UnitRef]
    weights: np.ndarray               # standardised, one per unit
    r2_folds: list[float]             # outer-fold test R^2, units (+ covariate)
    r2_corrected_folds: list[float]   # test R^2 on frequency-residualised depth
    r2_frequency_folds: list[float]   # frequency-only model
    alphas: list[float]
    outliers: list[tuple[UnitRef, float]]
    covariate: bool
    folds: np.ndarray
    config: dict = field(default_factory=dict)
    covariate_weight: float | None = None

    @property
    def r2_mean(self) -> float:
        return float(np.mean(self.r2_folds))

    @property
    def r2_sd(self) -> float:
        return float(np.std(self.r2_folds))

    @property
    def r2_corrected_mean(self) -> float:
        return float(np.mean(self.r2_corrected_folds)) if self.r2_corrected_folds else float("nan")

    @property
    def delta_r2(self) -> float:
        if not self.r2_frequency_folds:
            return float("nan")
        return float(np.mean(self.r2_folds) - np.mean(self.r2_frequency_folds))

    def to_json(self) -> dict:
        return {"r2_test_mean": self.r2_mean, "r2_test_sd": self.r2_sd, "r2_test_folds": self.r2_folds,
                "covariate": self.covariate,
                "r2_corrected_mean": self.r2_corrected_mean if self.covariate else None,
                "r2_corrected_folds": self.r2_corrected_folds,
                "r2_frequency_only_folds": self.r2_frequency_folds,
                "delta_r2_vs_frequency": self.delta_r2 if self.covariate else None,
                "covariate_weight": self.covariate_weight,
                "selected_alphas": self.alphas,
                "weight_mean": float(self.weights.mean()), "weight_sd": float(self.weights.std()),
                "outliers": [{"unit": str(u), "weight": w} for u, w in self.outliers],
                "weights": {str(u): float(w) for u, w in zip(self.units, self.weights)},
                "fold_assignment": self.folds.tolist(), "config": self.config}


def weight_outliers(weights, k: float = 3.0) -> np.ndarray:
    """Indices with |w - mean| > k * SD (population SD)."""
    w = np.asarray(weights, dtype=float)
    sd = w.std()
    if sd == 0:
        return np.array([], dtype=int)
    return np.flatnonzero(np.abs(w - w.mean()) > k * sd)


def nested_ridge(X, y, groups=None, n_splits: int = 5, inner_splits: int = 5,
                 alphas: Sequence[float] = ALPHA_GRID, seed: int = 0):
    """Outer-fold test R^2 with inner-fold penalty selection.

    Returns (r2 per outer fold, selected alpha per fold, fold ids, test
    predictions).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < n_splits:
        raise DecodingError(f"{n} samples cannot fill {n_splits} folds")
    rng = np.random.default_rng([seed, 13])
    groups = np.arange(n) if groups is None else np.asarray(groups)
    folds = group_folds(groups, n_splits, rng)
    preds = np.empty(n)
    r2s, chosen = [], []
    for k in range(n_splits):
        tr, te = folds != k, folds == k
        if len(alphas) > 1:
            inner = group_folds(groups[tr], min(inner_splits, len(np.unique(groups[tr]))), rng)
            a = _select_alpha_ridge(X[tr], y[tr], alphas, inner)
        else:
            a = alphas[0]
        sc = Standardizer().fit(X[tr])
        w, b = ridge_fit(sc.transform(X[tr]), y[tr], a)
        preds[te] = sc.transform(X[te]) @ w + b
        r2s.append(r2_score(y[te], preds[te]))
        chosen.append(float(a))
    return r2s, chosen, folds, preds


def word_log_frequency(corpus: Sequence[Sequence[str]]) -> dict[str, float]:
    counts = Counter(t for s in corpus for t in s)
    return {w: math.log(c + 1.0) for w, c in counts.items()}


def depth_features(model: LanguageModel, dataset: DepthDataset, what: str = "h",
                   unk: str = "<unk>") -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """Activity of every unit at each retained word (the timestep the word is input).

    Returns (X (n_points, L*H), depth, sentence index, words).
    """
    pts = dataset.points()
    if not pts:
        raise DecodingError("depth dataset has no retained points")
    by_sentence: dict[int, list] = {}
    for k, (si, pos, d) in enumerate(pts):
        by_sentence.setdefault(si, []).append((k, pos))
    X = np.empty((len(pts), model.n_layers * model.hidden_dim))
    by_len: dict[int, list[int]] = {}
    for si in by_sentence:
        by_len.setdefault(len(dataset.sentences[si]), []).append(si)
    for L, sis in by_len.items():
        ids = np.stack([model.encode([EOS] + list(dataset.sentences[si]), unk=unk) for si in sis], axis=1)
        states, _ = run_layers(model, ids)
        act = np.concatenate([getattr(s, what) for s in states], axis=-1)   # (T, B, L*H)
        for b, si in enumerate(sis):
            for k, pos in by_sentence[si]:
                X[k] = act[pos, b]      # step 0 is <eos>
    depth = np.array([d for _, _, d in pts], dtype=float)
    groups = np.array([si for si, _, _ in pts])
    words = [dataset.sentences[si][pos - 1] for si, pos, _ in pts]
    return X, depth, groups, words


def depth_regression(model: LanguageModel, dataset: DepthDataset, log_frequency: dict | None = None,
                     seed: int = 0, n_splits: int = 5, k_sd: float = 3.0, what: str = "h",
                     alphas: Sequence[float] = ALPHA_GRID) -> DepthRegressionResult:
    """Nested-CV ridge of depth on all units (+ word log-frequency if given)."""
    X, y, groups, words = depth_features(model, dataset, what)
    units = all_units(model.n_layers, model.hidden_dim)
    covariate = log_frequency is not None
    r2_freq, r2_corr = [], []
    if covariate:
        freq = np.array([log_frequency.get(w, 0.0) for w in words])[:, None]
        Xf = np.hstack([X, freq])
        r2_full, chosen, folds, _ = nested_ridge(Xf, y, groups, n_splits, alphas=alphas, seed=seed)
        r2_freq = nested_ridge(freq, y, groups, n_splits, alphas=alphas[:1], seed=seed)[0]
        # residualise depth on frequency within each outer training fold
        for k in range(n_splits):
            tr, te = folds != k, folds == k
            wf, bf = ridge_fit(freq[tr], y[tr], 0.0)
            res_tr = y[tr] - (freq[tr] @ wf + bf)
            res_te = y[te] - (freq[te] @ wf + bf)
            inner = group_folds(groups[tr], n_splits, np.random.default_rng([seed, 17, k]))
            a = _select_alpha_ridge(X[tr], res_tr, alphas, inner) if len(alphas) > 1 else alphas[0]
            sc = Standardizer().fit(X[tr])
            w, b = ridge_fit(sc.transform(X[tr]), res_tr, a)
            r2_corr.append(r2_score(res_te, sc.transform(X[te]) @ w + b))
        design = Xf
    else:
        r2_full, chosen, folds, _ = nested_ridge(X, y, groups, n_splits, alphas=alphas, seed=seed)
        design = X
    # final weights: all data, penalty chosen by CV on all data
    inner = group_folds(groups, n_splits, np.random.default_rng([seed, 19]))
    a = _select_alpha_ridge(design, y, alphas, inner) if len(alphas) > 1 else alphas[0]
    sc = Standardizer().fit(design)
    w, _ = ridge_fit(sc.transform(design), y, a)
    unit_w = w[: len(units)]
    out_idx = weight_outliers(unit_w, k_sd)
    outliers = sorted(((units[i], float(unit_w[i])) for i in out_idx), key=lambda p: -abs(p[1]))
    return DepthRegressionResult(
        units, unit_w, r2_full, r2_corr, r2_freq, chosen, outliers, covariate, folds,
        config={"seed": seed, "n_splits": n_splits, "inner_splits": n_splits, "k_sd": k_sd,
                "feature": what, "timestep": "word input step", "alpha_grid": list(alphas),
                "final_alpha": float(a), "folds_grouped_by": "sentence"},
        covariate_weight=float(w[-1]) if covariate else None)
