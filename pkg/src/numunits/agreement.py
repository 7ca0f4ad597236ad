"""Agreement scoring, single-unit ablation sweeps and group-ablation tests.

Prefixes are run from a zero state with ``<eos>`` as the first input, the
same context every sentence has during training.  A stimulus counts as
correct when the model's log-probability of the correct verb form, given the
prefix before the verb, strictly exceeds that of the opposite form.  Exact
ties count as errors.  Accuracies are fractions in
[0, 1]; ablation deltas are reported in percentage points.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grammar import EOS, PLURAL, SINGULAR, Stimulus, StimulusSet, congruent
from .lstm import LanguageModel, log_softmax, run_layers
from .parallel import parallel_map
from .units import AblationMask, UnitRef, all_units

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 10.0   # percentage points
CHANCE = 0.5


@dataclass(frozen=True)
class Score:
    correct: bool
    logp_correct: float
    logp_wrong: float


def score_stimulus(model: LanguageModel, stimulus: Stimulus, mask: AblationMask | None = None,
                   clamp_cell: bool = False, bos: str = EOS) -> Score:
    for form in (stimulus.correct_verb, stimulus.wrong_verb):
        if form not in model._index:
            raise KeyError(f"verb form {form!r} is not in the model vocabulary")
    ids = model.encode((bos,) + stimulus.prefix)[:, None]
    states, _ = run_layers(model, ids, mask, clamp_cell)
    lp = log_softmax(states[-1].h[-1, 0] @ model.w_out.T + model.b_out)
    c, w = lp[model.token_id(stimulus.correct_verb)], lp[model.token_id(stimulus.wrong_verb)]
    return Score(bool(c > w), float(c), float(w))


class PrefixEvaluator:
    """Batched verb-margin evaluation of a fixed stimulus list.

    Identical prefixes are run once.  Unablated layer outputs are cached, so
    ablating units of layer k only reruns layers k and above.
    """

    def __init__(self, model: LanguageModel, stimuli: Sequence[Stimulus], bos: str = EOS):
        self.model = model
        self.stimuli = list(stimuli)
        for s in self.stimuli:
            for form in (s.correct_verb, s.wrong_verb):
                if form not in model._index:
                    raise KeyError(f"verb form {form!r} is not in the model vocabulary")
        groups: dict[int, OrderedDict] = defaultdict(OrderedDict)
        self._where = []
        for s in self.stimuli:
            g = groups[len(s.prefix)]
            col = g.setdefault(s.prefix, len(g))
            self._where.append((len(s.prefix), col))
        self._groups = {}
        for L, g in groups.items():
            ids = np.stack([model.encode((bos,) + p) for p in g], axis=1)
            states, _ = run_layers(model, ids)
            self._groups[L] = (ids, [st.h for st in states])
        self._stim_index = {L: [] for L in groups}
        for k, (L, col) in enumerate(self._where):
            self._stim_index[L].append((k, col))
        self._direction = np.stack([model.w_out[model.token_id(s.correct_verb)]
                                    - model.w_out[model.token_id(s.wrong_verb)] for s in self.stimuli]) \
            if self.stimuli else np.zeros((0, model.hidden_dim))
        self._offset = np.array([model.b_out[model.token_id(s.correct_verb)]
                                 - model.b_out[model.token_id(s.wrong_verb)] for s in self.stimuli])

    def top_states(self, mask: AblationMask | None = None, clamp_cell: bool = False) -> dict[int, np.ndarray]:
        """Final top-layer h of every unique prefix, per prefix length."""
        out = {}
        lowest = min(mask.layers(), default=None) if mask is not None and len(mask) else None
        for L, (ids, hs) in self._groups.items():
            if lowest is None:
                out[L] = hs[-1][-1]
                continue
            start = lowest - 1
            states, _ = run_layers(self.model, ids, mask, clamp_cell, start_layer=start,
                                   inputs=hs[start - 1] if start > 0 else None)
            out[L] = states[-1].h[-1]
        return out

    def margins(self, mask: AblationMask | None = None, clamp_cell: bool = False) -> np.ndarray:
        """logit(correct) - logit(wrong) per stimulus; > 0 means correct.

        The log-softmax normaliser is shared by both forms, so this equals the
        log-probability difference.
        """
        top = self.top_states(mask, clamp_cell)
        out = np.empty(len(self.stimuli))
        for L, pairs in self._stim_index.items():
            ks = np.array([k for k, _ in pairs])
            cols = np.array([c for _, c in pairs])
            out[ks] = np.einsum("bh,bh->b", top[L][cols], self._direction[ks]) + self._offset[ks]
        return out

    def correct(self, mask: AblationMask | None = None, clamp_cell: bool = False) -> np.ndarray:
        return self.margins(mask, clamp_cell) > 0


# --------------------------------------------------------------------------
# Accuracy tables

@dataclass(frozen=True)
class ConditionAccuracy:
    task: str
    condition: str
    n: int
    accuracy: float


def _as_stimuli(stimulus_sets) -> list[Stimulus]:
    if isinstance(stimulus_sets, StimulusSet):
        return list(stimulus_sets)
    out = []
    for item in stimulus_sets:
        if isinstance(item, StimulusSet):
            out.extend(item)
        else:
            out.append(item)
    return out


def _condition_keys(stimuli: Sequence[Stimulus]) -> list[tuple[str, str]]:
    return list(dict.fromkeys((s.task, s.condition) for s in stimuli))


def accuracy_by_condition(stimuli: Sequence[Stimulus], correct: np.ndarray) -> list[ConditionAccuracy]:
    buckets: dict = defaultdict(list)
    for s, ok in zip(stimuli, correct):
        buckets[(s.task, s.condition)].append(bool(ok))
    return [ConditionAccuracy(t, c, len(v), float(np.mean(v)))
            for (t, c), v in buckets.items() if v]


def task_accuracy(model: LanguageModel, stimulus_sets, mask: AblationMask | None = None,
                  clamp_cell: bool = False, evaluator: PrefixEvaluator | None = None) -> list[ConditionAccuracy]:
    """Per-(task, condition) accuracy; conditions without stimuli are omitted."""
    stimuli = _as_stimuli(stimulus_sets) if evaluator is None else evaluator.stimuli
    ev = evaluator or PrefixEvaluator(model, stimuli)
    return accuracy_by_condition(stimuli, ev.correct(mask, clamp_cell))


@dataclass
class AccuracyReport:
    """Rows (task, condition), columns: one per ablation plus Full."""

    rows: list[tuple[str, str]]
    n: dict
    full: dict
    ablated: "OrderedDict[str, dict]" = field(default_factory=OrderedDict)

    @classmethod
    def build(cls, full: list[ConditionAccuracy],
              ablated: dict[str, list[ConditionAccuracy]] | None = None) -> "AccuracyReport":
        rep = cls([(r.task, r.condition) for r in full], {(r.task, r.condition): r.n for r in full},
                  {(r.task, r.condition): r.accuracy for r in full})
        for name, rows in (ablated or {}).items():
            rep.ablated[name] = {(r.task, r.condition): r.accuracy for r in rows}
        return rep

    def records(self) -> list[dict]:
        out = []
        for key in self.rows:
            rec = {"task": key[0], "condition": key[1], "n": self.n[key], "full_accuracy": self.full[key]}
            for name, acc in self.ablated.items():
                rec[name] = acc.get(key)
            out.append(rec)
        return out

    def write_csv(self, path) -> None:
        recs = self.records()
        cols = ["task", "condition", "n", "full_accuracy", *self.ablated]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in recs:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def to_json(self) -> dict:
        return {"columns": ["task", "condition", "n", "full_accuracy", *self.ablated],
                "rows": self.records()}

    def format_table(self, hide_below: float | None = None) -> str:
        """Percentages; with ``hide_below`` set, reductions under it show as '-'."""
        head = ["task", "C", *self.ablated, "Full"]
        lines = ["  ".join(f"{h:>10}" for h in head)]
        for key in self.rows:
            cells = [key[0], key[1]]
            for acc in self.ablated.values():
                a = acc.get(key)
                if a is None:
                    cells.append("")
                elif hide_below is not None and 100 * (self.full[key] - a) < hide_below:
                    cells.append("-")
                else:
                    cells.append(f"{100 * a:.1f}")
            cells.append(f"{100 * self.full[key]:.1f}")
            lines.append("  ".join(f"{c:>10}" for c in cells))
        return "\n".join(lines)


# --------------------------------------------------------------------------
# Single-unit ablation sweep

@dataclass
class AblationEffect:
    unit: UnitRef
    deltas: dict          # (task, condition) -> full - ablated, percentage points
    ablated: dict         # (task, condition) -> ablated accuracy
    threshold: float = DEFAULT_THRESHOLD

    @property
    def max_delta(self) -> float:
        return max(self.deltas.values(), default=0.0)

    @property
    def flagged(self) -> list[tuple[str, str]]:
        """Conditions where this unit is an LR-number candidate."""
        return [k for k, d in self.deltas.items() if d > self.threshold]

    @property
    def number_dependence(self) -> str | None:
        nums = {cond[0] for _, cond in self.flagged}
        if not nums:
            return None
        if nums == {SINGULAR}:
            return "singular"
        if nums == {PLURAL}:
            return "plural"
        return "both"

    def to_json(self) -> dict:
        return {"unit": str(self.unit), "max_delta": self.max_delta,
                "number_dependence": self.number_dependence,
                "flagged": [f"{t}-{c}" for t, c in self.flagged],
                "deltas": {f"{t}-{c}": d for (t, c), d in self.deltas.items()},
                "ablated_accuracy": {f"{t}-{c}": a for (t, c), a in self.ablated.items()}}


def _sweep_chunk(args):
    model, stimuli, units, clamp_cell = args
    ev = PrefixEvaluator(model, stimuli)
    return [accuracy_by_condition(stimuli, ev.correct(AblationMask([u]), clamp_cell)) for u in units]


def ablation_sweep(model: LanguageModel, stimulus_sets, units: Iterable[UnitRef] | None = None,
                   threshold: float = DEFAULT_THRESHOLD, clamp_cell: bool = False,
                   jobs: int = 1) -> tuple[list[AblationEffect], list[ConditionAccuracy]]:
    """Ablate each unit alone and compare every condition with the full model.

    Returns (effects sorted by decreasing max delta, full-model accuracies).
    """
    stimuli = _as_stimuli(stimulus_sets)
    if not stimuli:
        raise ValueError("ablation_sweep needs at least one stimulus")
    units = list(units) if units is not None else all_units(model.n_layers, model.hidden_dim)
    ev = PrefixEvaluator(model, stimuli)
    full = accuracy_by_condition(stimuli, ev.correct())
    base = {(r.task, r.condition): r.accuracy for r in full}
    if jobs <= 1:
        per_unit = [accuracy_by_condition(stimuli, ev.correct(AblationMask([u]), clamp_cell)) for u in units]
    else:
        chunks = [units[k::jobs] for k in range(jobs)]
        results = parallel_map(_sweep_chunk, [(model, stimuli, ch, clamp_cell) for ch in chunks], jobs)
        by_unit = {}
        for ch, res in zip(chunks, results):
            by_unit.update(zip(ch, res))
        per_unit = [by_unit[u] for u in units]
    effects = []
    for u, rows in zip(units, per_unit):
        abl = {(r.task, r.condition): r.accuracy for r in rows}
        effects.append(AblationEffect(u, {k: 100.0 * (base[k] - abl[k]) for k in base}, abl, threshold))
    effects.sort(key=lambda e: (-e.max_delta, e.unit))
    return effects, full


def lr_number_units(effects: Sequence[AblationEffect], task: str = "NounPP",
                    threshold: float = DEFAULT_THRESHOLD, tolerance: float = 5.0) -> dict[str, list[UnitRef]]:
    """Units with the number-specific long-range signature.

    A 'singular' unit drops the singular-subject incongruent condition of
    ``task`` (SP) by more than ``threshold`` points while every plural-subject
    condition of the task stays within ``tolerance`` points; 'plural'
    mirrors this with PS.  Lists are ordered by decreasing drop.
    """
    out: dict[str, list] = {"singular": [], "plural": []}
    for number, target in (("singular", "SP"), ("plural", "PS")):
        scored = []
        for e in effects:
            d = e.deltas.get((task, target))
            if d is None or d <= threshold:
                continue
            opposite = [v for (t, c), v in e.deltas.items() if t == task and c[0] != target[0]]
            if opposite and all(abs(v) <= tolerance for v in opposite):
                scored.append((-d, e.unit))
        out[number] = [u for _, u in sorted(scored)]
    return out


# --------------------------------------------------------------------------
# Group ablation against random equal-size groups

@dataclass
class PermutationTestResult:
    target_units: list[UnitRef]
    task_condition: str
    observed_accuracy: float
    full_accuracy: float
    null: list[float]
    p_value: float
    universe_size: int
    seed: int

    @property
    def n_random(self) -> int:
        return len(self.null)

    def to_json(self) -> dict:
        return {"target_units": [str(u) for u in self.target_units],
                "task_condition": self.task_condition, "observed_accuracy": self.observed_accuracy,
                "full_accuracy": self.full_accuracy, "n_random": self.n_random,
                "p_value": self.p_value, "universe_size": self.universe_size, "seed": self.seed,
                "null_distribution": self.null}


def permutation_p_value(observed: float, null: Sequence[float]) -> float:
    """(1 + #{null <= observed}) / (n + 1)."""
    null = np.asarray(null, dtype=float)
    return float((1 + np.count_nonzero(null <= observed)) / (len(null) + 1))


def _null_chunk(args):
    model, stimuli, groups, clamp_cell = args
    ev = PrefixEvaluator(model, stimuli)
    return [float(ev.correct(AblationMask(g), clamp_cell).mean()) for g in groups]


def permutation_group_ablation(model: LanguageModel, units: Sequence[UnitRef], stimulus_sets,
                               n_random: int = 1000, seed: int = 0,
                               universe: Sequence[UnitRef] | None = None, label: str | None = None,
                               clamp_cell: bool = False, jobs: int = 1) -> PermutationTestResult:
    """Accuracy after ablating ``units`` together vs random equal-size groups.

    Accuracy pools every stimulus passed in.  Random groups are drawn
    uniformly without replacement from ``universe`` minus the targets; the
    default universe is every unit in the targets' layers.
    """
    units = sorted(set(units))
    if not units:
        raise ValueError("permutation_group_ablation needs at least one target unit")
    stimuli = _as_stimuli(stimulus_sets)
    if universe is None:
        universe = all_units(model.n_layers, model.hidden_dim, sorted({u.layer for u in units}))
    pool = [u for u in universe if u not in set(units)]
    if len(pool) < len(units):
        raise ValueError(f"only {len(pool)} non-target units available for groups of {len(units)}")
    ev = PrefixEvaluator(model, stimuli)
    full = float(ev.correct().mean())
    observed = float(ev.correct(AblationMask(units), clamp_cell).mean())
    rng = np.random.default_rng([seed, 31])
    groups = [[pool[i] for i in rng.choice(len(pool), size=len(units), replace=False)]
              for _ in range(n_random)]
    if jobs <= 1 or n_random < 2:
        null = [float(ev.correct(AblationMask(g), clamp_cell).mean()) for g in groups]
    else:
        chunks = [groups[k::jobs] for k in range(jobs)]
        res = parallel_map(_null_chunk, [(model, stimuli, ch, clamp_cell) for ch in chunks], jobs)
        null = [0.0] * n_random
        for k, vals in enumerate(res):
            null[k::jobs] = vals
    if label is None:
        label = ",".join(f"{t}-{c}" for t, c in _condition_keys(stimuli))
    return PermutationTestResult(units, label, observed, full, null, permutation_p_value(observed, null),
                                 len(pool), seed)


def select(stimulus_sets, tasks: Iterable[str] | None = None, conditions: Iterable[str] | None = None,
           incongruent_only: bool = False) -> list[Stimulus]:
    tasks = set(tasks) if tasks is not None else None
    conditions = set(conditions) if conditions is not None else None
    return [s for s in _as_stimuli(stimulus_sets)
            if (tasks is None or s.task in tasks)
            and (conditions is None or s.condition in conditions)
            and (not incongruent_only or not congruent(s.condition))]


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
