"""Weight-space analyses of identified units.

Efferent weights are a final-layer unit's column of the output matrix,
restricted to verb-form rows.  Effective afferent weights are the recurrent
(and optionally lower-layer) weights into one gate of a target unit, each
scaled by the maximal |h| of its source unit over a reference stimulus set.
Z-scores use the population SD.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grammar import DEFAULT_LEXICON, EOS, FunctionWords, Lexicon
from .lstm import ActivationTrace, LanguageModel, run_layers
from .units import UnitRef

GATES = {"input": "i", "forget": "f", "candidate": "g", "output": "o"}


# --------------------------------------------------------------------------
# Efferents

def segregation(singular, plural) -> float:
    """Balanced accuracy of the best single threshold separating two groups.

    Both orientations are tried, so the value lies in [0.5, 1].
    """
    a = np.asarray(singular, dtype=float)
    b = np.asarray(plural, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both weight groups must be non-empty")
    cuts = np.concatenate([[-np.inf], np.unique(np.concatenate([a, b]))])
    # fraction of each group at or below every cut
    fa = np.searchsorted(np.sort(a), cuts, side="right") / len(a)
    fb = np.searchsorted(np.sort(b), cuts, side="right") / len(b)
    ba = 0.5 * (fa + (1.0 - fb))
    return float(np.max(np.maximum(ba, 1.0 - ba)))


def verb_pairs(lexicon: Lexicon = DEFAULT_LEXICON, function_words: FunctionWords | None = None):
    pairs = list(lexicon.verbs)
    if function_words is not None:
        pairs += list(function_words.intransitive) + [tuple(function_words.aux)]
    return pairs


@dataclass
class EfferentProfile:
    unit: UnitRef
    singular_forms: list[str]
    plural_forms: list[str]
    singular: np.ndarray
    plural: np.ndarray
    segregation: float

    def __post_init__(self):
        if set(self.singular_forms) & set(self.plural_forms):
            raise ValueError("singular and plural verb forms overlap")

    @property
    def mean_difference(self) -> float:
        """Mean plural minus mean singular weight."""
        return float(self.plural.mean() - self.singular.mean())

    def to_json(self) -> dict:
        return {"unit": str(self.unit), "segregation": self.segregation,
                "mean_plural_minus_singular": self.mean_difference,
                "singular": dict(zip(self.singular_forms, self.singular.tolist())),
                "plural": dict(zip(self.plural_forms, self.plural.tolist()))}

    def rows(self) -> list[dict]:
        return ([{"unit": str(self.unit), "form": f, "number": "S", "weight": float(w)}
                 for f, w in zip(self.singular_forms, self.singular)] +
                [{"unit": str(self.unit), "form": f, "number": "P", "weight": float(w)}
                 for f, w in zip(self.plural_forms, self.plural)])


def efferent_profile(model: LanguageModel, unit: UnitRef, lexicon: Lexicon = DEFAULT_LEXICON,
                     function_words: FunctionWords | None = None) -> EfferentProfile:
    """Output weights of a final-layer unit to singular and plural verb forms."""
    unit.check(model.n_layers, model.hidden_dim)
    if unit.layer != model.n_layers:
        raise ValueError(f"{unit} is not in the final layer; it has no output-layer efferents")
    pairs = verb_pairs(lexicon, function_words)
    missing = [f for p in pairs for f in p if f not in model._index]
    if missing:
        raise KeyError(f"verb forms missing from vocabulary: {missing}")
    sg = [p[0] for p in pairs]
    pl = [p[1] for p in pairs]
    col = model.w_out[:, unit.unit - 1]
    ws = col[[model._index[f] for f in sg]]
    wp = col[[model._index[f] for f in pl]]
    return EfferentProfile(unit, sg, pl, ws, wp, segregation(ws, wp))


# --------------------------------------------------------------------------
# Afferents

def zscores(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    sd = v.std()
    if sd == 0:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def outliers(values, threshold: float = 3.0) -> np.ndarray:
    """Indices with |z| > threshold."""
    return np.flatnonzero(np.abs(zscores(values)) > threshold)


def max_activity(model: LanguageModel, sequences: Sequence[Sequence[str]]) -> np.ndarray:
    """(n_layers, H) max |h| over all timesteps of ``sequences``."""
    if not sequences:
        raise ValueError("empty reference set: activity scale undefined")
    out = np.zeros((model.n_layers, model.hidden_dim))
    by_len: dict[int, list] = {}
    for s in sequences:
        by_len.setdefault(len(s), []).append(s)
    for group in by_len.values():
        ids = np.stack([model.encode([EOS] + list(s)) for s in group], axis=1)
        states, _ = run_layers(model, ids)
        for li, st in enumerate(states):
            out[li] = np.maximum(out[li], np.abs(st.h).max(axis=(0, 1)))
    return out


def _scale_from(traces) -> np.ndarray:
    if isinstance(traces, np.ndarray):
        return traces
    traces = list(traces)
    if not traces:
        raise ValueError("empty trace set: activity scale undefined")
    return np.max([np.abs(t.h).max(axis=0) for t in traces], axis=0)


@dataclass
class EffectiveAfferent:
    target: UnitRef
    gate: str
    sources: list[UnitRef]
    kinds: list[str]              # "recurrent" or "feedforward" per source
    raw: np.ndarray
    scale: np.ndarray
    effective: np.ndarray
    z: np.ndarray
    threshold: float = 3.0
    population: str = "recurrent"

    @property
    def outliers(self) -> list[tuple[UnitRef, float]]:
        idx = np.flatnonzero(np.abs(self.z) > self.threshold)
        return sorted(((self.sources[i], float(self.z[i])) for i in idx), key=lambda p: -abs(p[1]))

    def z_of(self, source: UnitRef) -> float:
        return float(self.z[self.sources.index(source)])

    def to_json(self) -> dict:
        return {"target": str(self.target), "gate": self.gate, "population": self.population,
                "threshold": self.threshold, "sd_convention": "population",
                "sign_convention": "effective = raw weight x max|h| of source; positive values push "
                                   "the gate pre-activation up when the source is positive",
                "outliers": [{"source": str(u), "z": z} for u, z in self.outliers],
                "sources": [{"source": str(u), "kind": k, "raw": float(r), "scale": float(s),
                             "effective": float(e), "z": float(z)}
                            for u, k, r, s, e, z in zip(self.sources, self.kinds, self.raw, self.scale,
                                                        self.effective, self.z)]}

    def rows(self) -> list[dict]:
        return [{"target": str(self.target), "gate": self.gate, "source": str(u), "kind": k,
                 "raw": float(r), "scale": float(s), "effective": float(e), "z": float(z)}
                for u, k, r, s, e, z in zip(self.sources, self.kinds, self.raw, self.scale,
                                            self.effective, self.z)]


def effective_afferents(model: LanguageModel, target: UnitRef, gate: str, traces,
                        include_lower: bool = False, threshold: float = 3.0) -> EffectiveAfferent:
    """Scaled afferent weights into ``gate`` of ``target`` and their z-scores.

    ``traces`` is a collection of :class:`ActivationTrace` or a precomputed
    (n_layers, H) array of max |h| (see :func:`max_activity`).
    """
    if gate not in GATES:
        raise ValueError(f"gate must be one of {sorted(GATES)}")
    target.check(model.n_layers, model.hidden_dim)
    scale = _scale_from(traces)
    li, j = target.layer - 1, target.unit - 1
    layer = model.layers[li]
    H = model.hidden_dim
    raw = [layer.block(GATES[gate], "w_h")[j]]
    sc = [scale[li]]
    sources = [UnitRef(target.layer, k + 1) for k in range(H)]
    kinds = ["recurrent"] * H
    if include_lower and li > 0:
        raw.append(layer.block(GATES[gate], "w_x")[j])
        sc.append(scale[li - 1])
        sources += [UnitRef(target.layer - 1, k + 1) for k in range(H)]
        kinds += ["feedforward"] * H
    raw = np.concatenate(raw)
    sc = np.concatenate(sc)
    eff = raw * sc
    return EffectiveAfferent(target, gate, sources, kinds, raw, sc, eff, zscores(eff), threshold,
                             "recurrent+feedforward" if len(kinds) > H else "recurrent")


# --------------------------------------------------------------------------
# Mutual inhibition

@dataclass
class InhibitionReport:
    unit_a: UnitRef
    unit_b: UnitRef
    weights: dict                  # "a->b input" etc.
    reciprocal_positive: bool
    activity_negative: dict
    both_negative: bool
    label: str

    def to_json(self) -> dict:
        return {"unit_a": str(self.unit_a), "unit_b": str(self.unit_b), "weights": self.weights,
                "reciprocal_input_forget_positive": self.reciprocal_positive,
                "cell_activity_negative": self.activity_negative, "label": self.label}


def mutual_inhibition_check(model: LanguageModel, unit_a: UnitRef, unit_b: UnitRef,
                            traces: Sequence[ActivationTrace], span: tuple[int, int] | None = None
                            ) -> InhibitionReport:
    """Sign pattern of reciprocal input/forget weights and of C activity.

    The pair is labelled "mutually inhibiting" only when all four reciprocal
    input/forget-gate weights are positive and both units' C is negative over
    ``span`` (timesteps [start, stop), whole trace by default) in every trace.
    """
    if unit_a.layer != unit_b.layer:
        raise ValueError("mutual inhibition check needs two units in the same layer")
    layer = model.layers[unit_a.layer - 1]
    a, b = unit_a.unit - 1, unit_b.unit - 1
    w = {}
    for g in ("input", "forget"):
        m = layer.block(GATES[g], "w_h")
        w[f"{unit_a}->{unit_b} {g}"] = float(m[b, a])
        w[f"{unit_b}->{unit_a} {g}"] = float(m[a, b])
    positive = all(v > 0 for v in w.values())
    traces = list(traces)
    neg = {}
    for u in (unit_a, unit_b):
        vals = [t.unit(u, "c")[slice(*span) if span else slice(None)] for t in traces]
        neg[str(u)] = bool(traces) and all(np.all(v < 0) for v in vals)
    both = all(neg.values()) and bool(traces)
    if all(v == 0 for v in w.values()):
        label = "independent"
    elif positive and both:
        label = "mutually inhibiting"
    elif positive:
        label = "positive reciprocal weights, activity not negative"
    else:
        label = "mixed"
    return InhibitionReport(unit_a, unit_b, w, positive, neg, both, label)


def write_rows_csv(rows: Sequence[dict], path) -> None:
    rows = list(rows)
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
