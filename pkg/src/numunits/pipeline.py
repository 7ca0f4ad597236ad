"""Run configuration and the staged end-to-end pipeline.

Each stage reads the outputs of earlier stages from the run directory and
writes its own files there.  A stage is skipped when its recorded input hash
(relevant config plus digests of upstream outputs) is unchanged and its
outputs are intact.  Every JSON file carries a ``provenance`` block, every
CSV a ``# provenance`` first line, every JSONL a provenance first record.
The plain-text corpus and vocabulary stay header-free (a vocabulary line
number is a token id); data/manifest.json holds their provenance.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .grammar import (DEFAULT_FUNCTION_WORDS, DEFAULT_LEXICON, NA_TASKS, VISUALIZATION_TASKS, DepthConfig,
                      DepthDataset, GrammarConfig, Lexicon, StimulusSet, generate_depth_dataset,
                      generate_na_task, generate_training_corpus, read_corpus, read_vocab, template,
                      write_corpus, write_vocab)
from .lstm import LanguageModel, TrainConfig, TrainState, init_model, perplexity, record_batch, train
from .units import AblationMask, UnitRef, all_units

log = logging.getLogger(__name__)

EASY_TASKS = ("Simple", "Adv", "2Adv")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# Configuration

@dataclass
class ModelSection:
    embed_dim: int = 64
    hidden_dim: int = 32
    n_layers: int = 2
    forget_bias: float = 1.0


@dataclass
class TrainSection:
    lr: float = 0.003
    optimizer: str = "adam"
    batch_size: int = 32
    bptt: int = 35
    clip_norm: float = 5.0
    epochs: int = 8
    valid_fraction: float = 0.05
    lr_decay: float = 0.5
    min_improvement: float = 0.01


@dataclass
class CorpusSection:
    n_sentences: int = 50_000
    lexicon: str | None = None          # JSON lexicon path; built-in when None
    eval_lexicon: str | None = None     # NA stimuli lexicon; the training lexicon when None
    grammar: dict = field(default_factory=dict)    # GrammarConfig overrides


@dataclass
class DataSection:
    tasks: list = field(default_factory=lambda: list(NA_TASKS))
    visualization_tasks: list = field(default_factory=lambda: list(VISUALIZATION_TASKS))
    n_per_condition: int = 600
    depth: dict = field(default_factory=dict)      # DepthConfig overrides


@dataclass
class AnalysisSection:
    threshold: float = 10.0          # ablation drop (points) that flags a condition
    tolerance: float = 5.0           # opposite-number conditions must stay within this
    lr_task: str = "NounPP"
    clamp_cell: bool = False
    max_named_units: int = 12
    gat_splits: int = 5
    decoder: str = "logistic"
    sr_auc: float = 0.9
    depth_k_sd: float = 3.0
    depth_covariate: bool = True
    afferent_threshold: float = 3.0
    include_lower: bool = False
    n_random_units: int = 2
    n_random: int = 1000
    easy_tasks: list = field(default_factory=lambda: list(EASY_TASKS))
    trace_stimuli: int = 200         # per condition in trace plots


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    jobs: int = 1
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    data: DataSection = field(default_factory=DataSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def merged(self, overrides: dict) -> "RunConfig":
        return RunConfig.from_dict(_deep_merge(self.to_dict(), overrides))

    def portable(self) -> dict:
        """Everything that can change results (not the run directory or worker count)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("jobs")
        return d

    def hash(self) -> str:
        return _digest(self.portable())

    def section_hash(self, *keys: str) -> str:
        d = self.to_dict()
        return _digest({k: d[k] for k in keys})

    def grammar_config(self) -> GrammarConfig:
        return _replace_checked(GrammarConfig(), self.corpus.grammar, "corpus.grammar")

    def depth_config(self) -> DepthConfig:
        dd = {k: tuple(v) if isinstance(v, list) else v for k, v in self.data.depth.items()}
        return _replace_checked(DepthConfig(), dd, "data.depth")

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **asdict(self.train))

    def lexicons(self) -> tuple[Lexicon, Lexicon]:
        train_lex = _load_lexicon(self.corpus.lexicon)
        eval_lex = _load_lexicon(self.corpus.eval_lexicon) if self.corpus.eval_lexicon else train_lex
        return train_lex, eval_lex


def _replace_checked(obj, overrides: dict, where: str):
    names = {f.name for f in dataclasses.fields(obj)}
    bad = sorted(set(overrides) - names)
    if bad:
        raise ConfigError(f"unknown {where} keys: {bad}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    return dataclasses.replace(obj, **vals)


def _load_lexicon(path: str | None) -> Lexicon:
    if path is None:
        return DEFAULT_LEXICON
    try:
        return Lexicon.from_dict(json.loads(Path(path).read_text()))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read lexicon {path}: {exc}") from exc


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    bad = sorted(set(d) - set(fields))
    if bad:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {bad}")
    kw = {}
    for name, val in d.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), val, f"{where}{name}.")
        else:
            kw[name] = val
    return cls(**kw)


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``overrides`` (highest precedence)."""
    base = RunConfig().to_dict()
    if path:
        try:
            base = _deep_merge(base, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(_deep_merge(base, overrides or {}))


def parse_assignment(text: str) -> dict:
    """'train.lr=0.01' -> {'train': {'lr': 0.01}}; values parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = val
    return out


# --------------------------------------------------------------------------
# Output helpers

class Run:
    """Run directory plus provenance for everything written into it."""

    def __init__(self, config: RunConfig, out: str | Path | None = None):
        self.config = config
        self.root = Path(out or config.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.provenance = {"tool": "numunits", "version": __version__,
                           "config_hash": config.hash(), "seed": config.seed}

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, rel: str, obj: dict) -> Path:
        p = self.path(rel)
        with open(p, "w") as fh:
            json.dump({"provenance": self.provenance, **obj}, fh, indent=1, default=_jsonable)
            fh.write("\n")
        return p

    def read_json(self, rel: str) -> dict:
        return json.loads(self.path(rel).read_text())

    def write_csv(self, rel: str, rows: list[dict], fieldnames: list[str] | None = None) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="") as fh:
            fh.write("# provenance: " + json.dumps(self.provenance, sort_keys=True) + "\n")
            if rows or fieldnames:
                w = csv.DictWriter(fh, fieldnames=fieldnames or list(rows[0]))
                w.writeheader()
                w.writerows(rows)
        return p

    def svg_metadata(self) -> dict:
        return {"Date": None, "Description": json.dumps(self.provenance, sort_keys=True)}


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, UnitRef):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# --------------------------------------------------------------------------
# Stages

@dataclass
class Stage:
    name: str
    fn: Callable[["Run"], list[Path]]
    config_keys: tuple[str, ...]
    deps: tuple[str, ...] = ()
    description: str = ""


def _stage_record(run: Run, name: str) -> Path:
    return run.path(".stages", f"{name}.json")


_CODE_DIGEST: str | None = None


def code_digest() -> str:
    """Digest of the package sources, so a code change invalidates every stage."""
    global _CODE_DIGEST
    if _CODE_DIGEST is None:
        h = hashlib.sha256()
        root = Path(__file__).parent
        for p in sorted(root.glob("*.py")) + sorted(root.glob("*.pyx")):
            h.update(p.name.encode() + b"\0" + p.read_bytes())
        _CODE_DIGEST = h.hexdigest()[:16]
    return _CODE_DIGEST


def stage_input_hash(run: Run, stage: Stage) -> str:
    parts = {"stage": stage.name, "config": run.config.section_hash("seed", *stage.config_keys),
             "code": code_digest()}
    for dep in stage.deps:
        rec = _stage_record(run, dep)
        parts[dep] = json.loads(rec.read_text())["outputs"] if rec.exists() else None
    return _digest(parts)


def stage_is_current(run: Run, stage: Stage) -> bool:
    rec = _stage_record(run, stage.name)
    if not rec.exists():
        return False
    d = json.loads(rec.read_text())
    if d.get("input_hash") != stage_input_hash(run, stage):
        return False
    for rel, digest in d.get("outputs", {}).items():
        p = run.root / rel
        if not p.exists() or file_digest(p) != digest:
            return False
    return True


def run_stage(run: Run, stage: Stage, force: bool = False) -> bool:
    """Run ``stage`` unless current; returns True when it executed."""
    if not force and stage_is_current(run, stage):
        log.info("stage %s: up to date, skipped", stage.name)
        return False
    t0 = time.perf_counter()
    log.info("stage %s: running", stage.name)
    try:
        outputs = stage.fn(run)
    except Exception as exc:                       # noqa: BLE001 - reported with the stage name
        raise StageError(stage.name, exc) from exc
    seconds = time.perf_counter() - t0
    # wall time lives only in this bookkeeping record, never in result files
    rec = {"stage": stage.name, "input_hash": stage_input_hash(run, stage), "seconds": round(seconds, 3),
           "outputs": {str(p.relative_to(run.root)): file_digest(p) for p in sorted(outputs)}}
    _stage_record(run, stage.name).write_text(json.dumps(rec, indent=1) + "\n")
    log.info("stage %s: done in %.1fs", stage.name, seconds)
    return True


# ---- gen-data ------------------------------------------------------------

def stage_gen_data(run: Run) -> list[Path]:
    cfg = run.config
    train_lex, eval_lex = cfg.lexicons()
    sents, vocab = generate_training_corpus(train_lex, cfg.grammar_config(), cfg.corpus.n_sentences,
                                            cfg.seed, DEFAULT_FUNCTION_WORDS)
    outs = [run.path("data", "corpus.txt"), run.path("data", "vocab.txt")]
    write_corpus(sents, outs[0])
    write_vocab(vocab, outs[1])
    counts = {}
    for task in list(cfg.data.tasks) + list(cfg.data.visualization_tasks):
        ss = generate_na_task(task, eval_lex, cfg.data.n_per_condition, cfg.seed, DEFAULT_FUNCTION_WORDS)
        p = run.path("data", f"na_{task}.jsonl")
        ss.write_jsonl(p, run.provenance)
        counts[task] = ss.counts()
        outs.append(p)
    depth = generate_depth_dataset(cfg.depth_config(), cfg.seed, train_lex, DEFAULT_FUNCTION_WORDS)
    p = run.path("data", "depth.jsonl")
    depth.write_jsonl(p, run.provenance)
    outs.append(p)
    outs.append(run.write_json("data/manifest.json", {
        "corpus_sentences": len(sents), "vocab_size": len(vocab), "na_counts_per_condition": counts,
        "depth": {"points": len(depth.points()), "cell_counts": depth.cell_counts,
                  "empty_cells": depth.empty_cells, "position_depth_correlation": depth.correlation}}))
    return outs


def load_tasks(run: Run, tasks) -> list[StimulusSet]:
    return [StimulusSet.read_jsonl(run.path("data", f"na_{t}.jsonl")) for t in tasks]


# ---- train ---------------------------------------------------------------

def stage_train(run: Run) -> list[Path]:
    cfg = run.config
    corpus = read_corpus(run.path("data", "corpus.txt"))
    vocab = read_vocab(run.path("data", "vocab.txt"))
    m = cfg.model
    model0 = init_model(vocab, m.embed_dim, m.hidden_dim, m.n_layers, cfg.seed, m.forget_bias)
    state_path = run.path("train", "train_state.json")
    resume = None
    if state_path.exists():
        d = json.loads(state_path.read_text())
        if d.get("input_hash") == _train_key(run):
            resume = TrainState.from_json(d["state"])
            log.info("resuming training after epoch %d", resume.epoch)

    def checkpoint(row, st):
        tmp = state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"input_hash": _train_key(run), "state": st.to_json()}))
        tmp.replace(state_path)

    best, rows = train(model0, corpus, cfg.train_config(), callback=checkpoint, resume=resume)
    best.meta = dict(best.meta, provenance=run.provenance, train_config=asdict(cfg.train))
    mp = run.path("train", "model.json")
    best.save(mp)
    lp = run.write_csv("train/log.csv", [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                                         for r in rows], ["epoch", "lr", "train_ppl", "valid_ppl"])
    state_path.unlink(missing_ok=True)
    return [mp, lp]


def _train_key(run: Run) -> str:
    return _digest([run.config.section_hash("seed", "model", "train", "corpus"),
                    file_digest(run.path("data", "corpus.txt")), code_digest()])


def load_model(run: Run) -> LanguageModel:
    return LanguageModel.load(run.path("train", "model.json"))


IMPORTED = "imported"


def import_checkpoint(run: Run, source) -> LanguageModel:
    """Install an external checkpoint as the run's trained model.

    The train record is marked imported, so analysis stages accept it and
    the train stage never counts as current (``pipeline`` would retrain).
    """
    model = LanguageModel.load(source)
    dest = run.path("train", "model.json")
    model.save(dest)
    rec = {"stage": "train", "input_hash": IMPORTED, "source": str(source), "seconds": 0.0,
           "outputs": {"train/model.json": file_digest(dest)}}
    _stage_record(run, "train").write_text(json.dumps(rec, indent=1) + "\n")
    return model


# ---- eval ----------------------------------------------------------------

def stage_eval(run: Run, mask: AblationMask | None = None) -> list[Path]:
    from .agreement import AccuracyReport, task_accuracy

    cfg = run.config
    model = load_model(run)
    sets = load_tasks(run, cfg.data.tasks)
    full = task_accuracy(model, sets)
    abl = None
    if mask is not None and len(mask):
        abl = {str(mask): task_accuracy(model, sets, mask, cfg.analysis.clamp_cell)}
    rep = AccuracyReport.build(full, abl)
    suffix = "" if abl is None else "_ablated"
    p1 = run.write_csv(f"eval/accuracy{suffix}.csv", rep.records())
    p2 = run.write_json(f"eval/accuracy{suffix}.json", {**rep.to_json(), "mask": str(mask) if mask else None})
    return [p1, p2]


def accuracy_table(run: Run) -> dict[str, float]:
    d = run.read_json("eval/accuracy.json")
    return {f"{r['task']}-{r['condition']}": r["full_accuracy"] for r in d["rows"]}


# ---- ablation sweep ------------------------------------------------------

def stage_ablate(run: Run) -> list[Path]:
    from .agreement import ablation_sweep, lr_number_units

    cfg, a = run.config, run.config.analysis
    model = load_model(run)
    sets = load_tasks(run, cfg.data.tasks)
    effects, _ = ablation_sweep(model, sets, threshold=a.threshold, clamp_cell=a.clamp_cell, jobs=cfg.jobs)
    lr = lr_number_units(effects, a.lr_task, a.threshold, a.tolerance)
    lr_flat = [u for k in ("singular", "plural") for u in lr[k]]
    flagged = [e.unit for e in effects if e.flagged]
    named = list(dict.fromkeys(lr_flat + flagged))[: max(a.max_named_units, len(lr_flat))]
    rows = [{"unit": str(e.unit), "task": t, "condition": c, "delta_points": round(d, 10),
             "ablated_accuracy": e.ablated[(t, c)]} for e in effects for (t, c), d in e.deltas.items()]
    p1 = run.write_csv("ablation/sweep.csv", rows)
    p2 = run.write_json("ablation/sweep.json", {
        "threshold_points": a.threshold, "tolerance_points": a.tolerance, "lr_task": a.lr_task,
        "clamp_cell": a.clamp_cell,
        "lr_units": {k: [str(u) for u in v] for k, v in lr.items()},
        "named_units": [str(u) for u in named],
        "effects": [e.to_json() for e in effects if e.max_delta > 0]})
    return [p1, p2]


def ablation_summary(run: Run) -> tuple[dict[str, list[UnitRef]], list[UnitRef]]:
    d = run.read_json("ablation/sweep.json")
    lr = {k: [UnitRef.parse(u) for u in v] for k, v in d["lr_units"].items()}
    return lr, [UnitRef.parse(u) for u in d["named_units"]]


# ---- traces --------------------------------------------------------------

def _condition_traces(model, stimuli, n: int):
    by_cond: dict[str, list] = {}
    for s in stimuli:
        if len(by_cond.setdefault(s.condition, [])) < n:
            by_cond[s.condition].append(s)
    return {c: record_batch(model, [s.tokens for s in ss]) for c, ss in by_cond.items()}


def _write_trace_csv(run: Run, rel: str, traces: dict, unit: UnitRef) -> Path:
    rows = []
    for cond, trs in traces.items():
        for q in ("h", "c", "i", "f", "o", "ctilde"):
            vals = np.stack([t.unit(unit, q) for t in trs])
            for t, tok in enumerate(trs[0].tokens):
                rows.append({"condition": cond, "quantity": q, "t": t, "token": tok,
                             "mean": repr(float(vals[:, t].mean())), "sd": repr(float(vals[:, t].std()))})
    return run.write_csv(rel, rows)


def stage_traces(run: Run) -> list[Path]:
    from . import plots

    a = run.config.analysis
    model = load_model(run)
    _, named = ablation_summary(run)
    nounpp = load_tasks(run, [a.lr_task])[0]
    traces = _condition_traces(model, nounpp.stimuli, a.trace_stimuli)
    outs = []
    for u in named:
        p = run.path("traces", f"{u}_{a.lr_task}.svg")
        plots.plot_unit_traces(traces, u, p, metadata=run.svg_metadata())
        outs += [p, _write_trace_csv(run, f"traces/{u}_{a.lr_task}.csv", traces, u)]
    outs.append(run.write_json("traces/index.json", {"units": [str(u) for u in named], "task": a.lr_task,
                                                    "stimuli_per_condition": a.trace_stimuli}))
    return outs


# ---- GAT and SR units ----------------------------------------------------

def stage_gat(run: Run) -> list[Path]:
    from . import plots
    from .decoding import gat_analysis, identify_sr_units, units_excluding

    cfg, a = run.config, run.config.analysis
    model = load_model(run)
    lr, _ = ablation_summary(run)
    lr_flat = [u for k in ("singular", "plural") for u in lr[k]]
    task = load_tasks(run, [a.lr_task])[0]
    inc = [s for s in task.stimuli if s.condition[0] != s.condition[-1]]
    kw = dict(seed=cfg.seed, n_splits=a.gat_splits, backend=a.decoder)
    curves = [gat_analysis(model, inc, units_excluding(model, lr_flat), label="Full model minus LR units", **kw)]
    for u in lr_flat:
        curves.append(gat_analysis(model, inc, [u], label=f"{u}", **kw))
    codes = identify_sr_units(model, inc, auc_threshold=a.sr_auc)
    sr = [c.unit for c in codes if c.sr and c.unit not in set(lr_flat)]
    s0 = inc[0]
    rows = [{"selection": g.label, "t": t, "token": g.tokens[t], "mean_auc": repr(float(g.mean[t])),
             "sd_auc": repr(float(g.sd[t]))} for g in curves for t in range(len(g.mean))]
    svg = run.path("gat", "gat.svg")
    plots.plot_gat(curves, svg, metadata=run.svg_metadata())
    return [svg, run.write_csv("gat/gat.csv", rows),
            run.write_json("gat/gat.json", {
                "task": a.lr_task, "conditions": "incongruent", "subject_pos": s0.subject_pos,
                "intervening_pos": s0.intervening_pos, "verb_pos": s0.verb_pos,
                "lr_units": [str(u) for u in lr_flat], "curves": [g.to_json() for g in curves]}),
            run.write_json("gat/sr_units.json", {
                "auc_threshold": a.sr_auc, "sr_units": [str(u) for u in sr],
                "units": [c.to_json() for c in codes]})]


def sr_units(run: Run) -> list[UnitRef]:
    return [UnitRef.parse(u) for u in run.read_json("gat/sr_units.json")["sr_units"]]


# ---- depth regression ----------------------------------------------------

def stage_depth(run: Run) -> list[Path]:
    from . import plots
    from .decoding import depth_regression, word_log_frequency

    cfg, a = run.config, run.config.analysis
    model = load_model(run)
    ds = DepthDataset.read_jsonl(run.path("data", "depth.jsonl"), cfg.depth_config())
    freq = word_log_frequency(read_corpus(run.path("data", "corpus.txt"))) if a.depth_covariate else None
    res = depth_regression(model, ds, freq, seed=cfg.seed, k_sd=a.depth_k_sd)
    syntax = [u for u, _ in res.outliers]
    outs = [run.write_json("depth/depth_regression.json", res.to_json()),
            run.write_csv("depth/weights.csv", [{"unit": str(u), "weight": repr(float(w)),
                                                 "outlier": u in set(syntax)}
                                                for u, w in zip(res.units, res.weights)])]
    p = run.path("depth", "weights.svg")
    idx = {u: i for i, u in enumerate(res.units)}
    plots.plot_weights(res.weights, [str(u) for u in res.units], [idx[u] for u in syntax], p,
                       metadata=run.svg_metadata())
    outs.append(p)
    vis = [t for t in ("2Adv", "NounPP", *cfg.data.visualization_tasks)
           if run.path("data", f"na_{t}.jsonl").exists()]
    sets = load_tasks(run, vis)
    for u in syntax:
        for ss in sets:
            tr = _condition_traces(model, ss.stimuli, a.trace_stimuli)
            sp = run.path("depth", f"syntax_{u}_{ss.task}.svg")
            plots.plot_unit_traces(tr, u, sp, quantities=("c",), title=f"{u} {ss.task}",
                                   metadata=run.svg_metadata())
            outs.append(sp)
    return outs


def syntax_units(run: Run) -> list[UnitRef]:
    return [UnitRef.parse(o["unit"]) for o in run.read_json("depth/depth_regression.json")["outliers"]]


# ---- connectivity --------------------------------------------------------

def stage_connectivity(run: Run) -> list[Path]:
    from . import plots
    from .connectivity import effective_afferents, efferent_profile, max_activity, mutual_inhibition_check

    cfg, a = run.config, run.config.analysis
    model = load_model(run)
    lr, named = ablation_summary(run)
    lr_flat = [u for k in ("singular", "plural") for u in lr[k]]
    syntax = syntax_units(run)
    L = model.n_layers
    rng = np.random.default_rng([cfg.seed, 41])
    pool = [u for u in all_units(L, model.hidden_dim, [L]) if u not in set(lr_flat) | set(named)]
    random_units = [pool[i] for i in sorted(rng.choice(len(pool), size=min(a.n_random_units, len(pool)),
                                                       replace=False))]
    eff_units = list(dict.fromkeys(named + [u for u in syntax if u.layer == L] + random_units))
    profiles, no_efferents = [], []
    _, eval_lex = cfg.lexicons()
    for u in eff_units:
        if u.layer == L:
            profiles.append(efferent_profile(model, u, eval_lex))
        else:
            no_efferents.append(str(u))
    task = load_tasks(run, [a.lr_task])[0]
    scale = max_activity(model, [s.tokens for s in task.stimuli])
    targets = list(dict.fromkeys(named))
    aff = [effective_afferents(model, u, g, scale, a.include_lower, a.afferent_threshold)
           for u in targets for g in ("input", "forget")]
    inhibition = []
    if lr["singular"] and lr["plural"]:
        ua, ub = lr["singular"][0], lr["plural"][0]
        if ua.layer == ub.layer:
            s0 = task.stimuli[0]
            traces = record_batch(model, [s.tokens for s in task.stimuli[: a.trace_stimuli]])
            inhibition.append(mutual_inhibition_check(model, ua, ub, traces,
                                                      (s0.subject_pos, s0.verb_pos)).to_json())
    outs = []
    if profiles:
        p = run.path("connectivity", "efferents.svg")
        plots.plot_efferents(profiles, p, metadata=run.svg_metadata())
        outs.append(p)
    if aff:
        p = run.path("connectivity", "afferents.svg")
        plots.plot_afferents(aff, p, metadata=run.svg_metadata())
        outs.append(p)
    outs += [
        run.write_json("connectivity/efferents.json", {
            "lr_units": [str(u) for u in lr_flat], "random_units": [str(u) for u in random_units],
            "syntax_units": [str(u) for u in syntax], "no_output_efferents": no_efferents,
            "profiles": [p.to_json() for p in profiles]}),
        run.write_csv("connectivity/efferents.csv", [r for p in profiles for r in p.rows()],
                      ["unit", "form", "number", "weight"]),
        run.write_json("connectivity/afferents.json", {
            "reference_set": f"{a.lr_task} (all conditions)", "scale": "max |h|",
            "reports": [r.to_json() for r in aff],
            "syntax_unit_z": {f"{r.target} {r.gate}": {str(s): r.z_of(s) for s in syntax if s in r.sources}
                              for r in aff}}),
        run.write_csv("connectivity/afferents.csv", [row for r in aff for row in r.rows()],
                      ["target", "gate", "source", "kind", "raw", "scale", "effective", "z"]),
        run.write_json("connectivity/mutual_inhibition.json", {"pairs": inhibition}),
    ]
    return outs


# ---- permutation tests ---------------------------------------------------

def stage_perm_test(run: Run) -> list[Path]:
    from .agreement import permutation_group_ablation

    cfg, a = run.config, run.config.analysis
    model = load_model(run)
    lr, _ = ablation_summary(run)
    lr_flat = [u for k in ("singular", "plural") for u in lr[k]]
    sr = sr_units(run)
    groups = {"SR+LR": sorted(set(sr) | set(lr_flat)), "SR": sorted(set(sr))}
    results = {}
    for label, units in groups.items():
        results[label] = {}
        if not units:
            continue
        for k, ss in enumerate(load_tasks(run, a.easy_tasks)):
            r = permutation_group_ablation(model, units, ss, a.n_random, seed=cfg.seed + 1000 * k,
                                           label=ss.task, clamp_cell=a.clamp_cell, jobs=cfg.jobs)
            results[label][ss.task] = r.to_json()
    rows = [{"group": g, "task": t, "n_units": len(groups[g]), "observed_accuracy": r["observed_accuracy"],
             "full_accuracy": r["full_accuracy"], "null_mean": float(np.mean(r["null_distribution"])),
             "p_value": r["p_value"]} for g, res in results.items() for t, r in res.items()]
    return [run.write_json("permutation/permutation.json", {
                "groups": {g: [str(u) for u in v] for g, v in groups.items()}, "results": results}),
            run.write_csv("permutation/permutation.csv", rows,
                          ["group", "task", "n_units", "observed_accuracy", "full_accuracy", "null_mean",
                           "p_value"])]


# ---- report --------------------------------------------------------------

def desk_checks(run: Run) -> dict:
    """Qualitative-pattern checks on a finished run (one entry per check)."""
    a = run.config.analysis
    out = {}
    acc = accuracy_table(run)
    lr_task = a.lr_task
    cong = [acc[f"{lr_task}-{c}"] for c in ("SS", "PP") if f"{lr_task}-{c}" in acc]
    out["accuracy"] = {
        "pass": acc.get("Simple-S", 0) >= 0.95 and acc.get("Simple-P", 0) >= 0.95 and bool(cong)
        and min(cong) >= 0.70,
        "detail": {"Simple-S": acc.get("Simple-S"), "Simple-P": acc.get("Simple-P"),
                   f"{lr_task} congruent": cong}}
    lr, _ = ablation_summary(run)
    out["lr_units"] = {"pass": bool(lr["singular"]) and bool(lr["plural"]),
                       "detail": {k: [str(u) for u in v] for k, v in lr.items()}}
    g = run.read_json("gat/gat.json")
    lo, hi = g["intervening_pos"], g["verb_pos"]
    minus = g["curves"][0]["mean_auc"]
    lr_curves = {c["label"]: c["mean_auc"] for c in g["curves"][1:]}
    minus_after = min(minus[lo:hi])
    lr_min = {k: min(v[g["subject_pos"]:hi]) for k, v in lr_curves.items()}
    out["gat"] = {"pass": minus_after < 0.5 and bool(lr_min) and min(lr_min.values()) > 0.8,
                  "detail": {"minus_lr_min_auc_after_intervener": minus_after,
                             "lr_min_auc_subject_to_verb": lr_min}}
    perm = run.read_json("permutation/permutation.json")["results"].get("SR+LR", {})
    ps = {t: r["p_value"] for t, r in perm.items()}
    out["group_ablation"] = {"pass": bool(ps) and all(p < 0.05 for p in ps.values()), "detail": ps}
    eff = run.read_json("connectivity/efferents.json")
    seg = {p["unit"]: p["segregation"] for p in eff["profiles"]}
    lr_seg = {u: seg.get(u) for u in eff["lr_units"]}
    rnd_seg = {u: seg.get(u) for u in eff["random_units"]}
    out["efferents"] = {
        "pass": bool(lr_seg) and all(v is not None and v >= 0.9 for v in lr_seg.values())
        and bool(rnd_seg) and all(v <= 0.7 for v in rnd_seg.values()),
        "detail": {"lr_units": lr_seg, "random_units": rnd_seg}}
    return out


def stage_report(run: Run) -> list[Path]:
    checks = desk_checks(run)
    files = sorted(str(p.relative_to(run.root)) for p in run.root.rglob("*")
                   if p.is_file() and not p.name.startswith(".") and ".stages" not in p.parts
                   and p.name not in ("index.md", "summary.json", "train_state.json"))
    lines = ["# numunits run report", "",
             f"config hash `{run.provenance['config_hash']}`, seed {run.config.seed}, "
             f"numunits {__version__}", "", "## Checks", ""]
    for name, c in checks.items():
        lines.append(f"- {name}: {'PASS' if c['pass'] else 'FAIL'} {json.dumps(c['detail'], default=str)}")
    lines += ["", "## Artifacts", ""] + [f"- [{f}]({f})" for f in files]
    idx = run.path("index.md")
    idx.write_text("\n".join(lines) + "\n")
    return [idx, run.write_json("summary.json", {"checks": checks, "config": run.config.portable(),
                                                 "artifacts": files})]


STAGES = [
    Stage("gen-data", stage_gen_data, ("corpus", "data"), (), "generate corpus, NA tasks, depth dataset"),
    Stage("train", stage_train, ("model", "train"), ("gen-data",), "train the language model"),
    Stage("eval", stage_eval, ("analysis",), ("train", "gen-data"), "agreement accuracy per condition"),
    Stage("ablate", stage_ablate, ("analysis",), ("train", "gen-data"), "single-unit ablation sweep, LR units"),
    Stage("traces", stage_traces, ("analysis",), ("ablate",), "gate and cell traces of named units"),
    Stage("gat", stage_gat, ("analysis",), ("ablate",), "generalisation across time, SR units"),
    Stage("depth", stage_depth, ("analysis", "data"), ("train", "gen-data"), "depth regression, syntax units"),
    Stage("connectivity", stage_connectivity, ("analysis", "corpus"), ("ablate", "depth"),
          "efferent and afferent weights"),
    Stage("perm-test", stage_perm_test, ("analysis",), ("ablate", "gat"), "SR+LR and SR group ablations"),
    Stage("report", stage_report, ("analysis",),
          ("eval", "ablate", "traces", "gat", "depth", "connectivity", "perm-test"), "index report"),
]
STAGE_BY_NAME = {s.name: s for s in STAGES}


def plan(names: list[str] | None = None) -> list[Stage]:
    return [s for s in STAGES if names is None or s.name in names]


def run_pipeline(config: RunConfig, out: str | Path | None = None, force: bool = False,
                 stages: list[str] | None = None) -> Run:
    run = Run(config, out)
    run.write_json("config.json", {"config": config.portable()})
    for st in plan(stages):
        run_stage(run, st, force)
    return run
