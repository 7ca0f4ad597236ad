"""Stimulus, depth-dataset and training-corpus generation.

Everything here is a pure function of (configuration, seed).  Tokens are
lower-case whitespace tokens; the synthetic lexicon has no multiword items.

The training grammar is a small probabilistic grammar whose constructions
include every agreement template (plain subject, pre-verbal adverbs, PP
attractors with common nouns and names) plus fillers: relative clauses,
progressive and copular predicates, adjective stacks, numerals and VP
coordination.  The same grammar, with relative clauses switched off, generates
the syntactic-depth sentences, so the generator's derivation tree is the
canonical parse.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EOS = "<eos>"
UNK = "<unk>"
SINGULAR, PLURAL = "S", "P"


class GrammarConfigError(ValueError):
    """Raised when a lexicon or template cannot produce the requested data."""


# --------------------------------------------------------------------------
# Lexicon

Pair = tuple[str, str]


@dataclass(frozen=True)
class Lexicon:
    subject_object_nouns: tuple[Pair, ...]
    verbs: tuple[Pair, ...]
    adverbs: tuple[str, ...]
    prepositions: tuple[str, ...]
    proper_nouns: tuple[str, ...]
    location_nouns: tuple[Pair, ...]

    def __post_init__(self):
        for name in ("subject_object_nouns", "verbs", "location_nouns"):
            pairs = getattr(self, name)
            object.__setattr__(self, name, tuple(tuple(p) for p in pairs))
            for sg, pl in getattr(self, name):
                if not sg or not pl or sg == pl:
                    raise GrammarConfigError(f"{name}: bad singular/plural pair ({sg!r}, {pl!r})")
            forms = [f for p in getattr(self, name) for f in p]
            if len(set(forms)) != len(forms):
                raise GrammarConfigError(f"{name}: duplicate surface forms")
        for name in ("adverbs", "prepositions", "proper_nouns"):
            items = tuple(getattr(self, name))
            object.__setattr__(self, name, items)
            if any(not t for t in items):
                raise GrammarConfigError(f"{name}: empty token")
            if len(set(items)) != len(items):
                raise GrammarConfigError(f"{name}: duplicate tokens")
        for name in self.__dataclass_fields__:
            for tok in _flatten(getattr(self, name)):
                if tok != tok.lower() or " " in tok:
                    raise GrammarConfigError(f"{name}: token {tok!r} must be a lower-case single word")

    def pool_sizes(self) -> dict[str, int]:
        return {k: len(getattr(self, k)) for k in self.__dataclass_fields__}

    def tokens(self) -> set[str]:
        return {t for k in self.__dataclass_fields__ for t in _flatten(getattr(self, k))}

    def subset(self, **sizes: int) -> "Lexicon":
        """Lexicon truncated to the first ``sizes[pool]`` entries of each pool."""
        return replace(self, **{k: getattr(self, k)[:n] for k, n in sizes.items()})

    def to_dict(self) -> dict:
        return {k: [list(x) if isinstance(x, tuple) else x for x in getattr(self, k)]
                for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Lexicon":
        return cls(**{k: tuple(tuple(x) if isinstance(x, list) else x for x in d[k])
                      for k in cls.__dataclass_fields__})


def _flatten(items) -> Iterable[str]:
    for x in items:
        if isinstance(x, tuple):
            yield from x
        else:
            yield x


# Animate subjects/objects and agentive transitive verbs only, so every
# combination is semantically plain.
DEFAULT_LEXICON = Lexicon(
    subject_object_nouns=(
        ("boy", "boys"), ("girl", "girls"), ("man", "men"), ("woman", "women"),
        ("guy", "guys"), ("lady", "ladies"), ("farmer", "farmers"), ("teacher", "teachers"),
        ("doctor", "doctors"), ("pilot", "pilots"), ("athlete", "athletes"),
        ("author", "authors"), ("banker", "bankers"), ("dancer", "dancers"),
        ("senator", "senators"), ("officer", "officers"), ("student", "students"),
        ("baker", "bakers"), ("singer", "singers"), ("friend", "friends"),
    ),
    verbs=(
        ("greets", "greet"), ("admires", "admire"), ("thanks", "thank"), ("knows", "know"),
        ("likes", "like"), ("hates", "hate"), ("helps", "help"), ("loves", "love"),
        ("avoids", "avoid"), ("watches", "watch"), ("encourages", "encourage"),
        ("understands", "understand"), ("remembers", "remember"), ("defends", "defend"),
        ("applauds", "applaud"),
    ),
    adverbs=("probably", "certainly", "openly", "deliberately", "kindly", "quietly",
             "happily", "secretly", "honestly", "suddenly"),
    prepositions=("near", "behind", "beside", "outside", "under"),
    proper_nouns=("pat", "alex", "sam", "chris", "robin", "taylor", "jordan", "casey",
                  "jamie", "morgan"),
    location_nouns=(
        ("car", "cars"), ("house", "houses"), ("table", "tables"), ("tree", "trees"),
        ("window", "windows"), ("school", "schools"), ("bank", "banks"),
        ("river", "rivers"), ("store", "stores"), ("office", "offices"),
    ),
)


@dataclass(frozen=True)
class FunctionWords:
    """Closed-class and filler vocabulary used by the free grammar."""

    determiner: str = "the"
    det_singular: tuple[str, ...] = ("this", "every", "one")
    det_plural: tuple[str, ...] = ("these", "two", "three", "four", "five", "ten", "some")
    adjectives: tuple[str, ...] = ("happy", "tall", "young", "old", "clever", "angry",
                                   "busy", "famous", "ecstatic", "tired")
    degree: tuple[str, ...] = ("really", "very", "extremely")
    adverb_modifiers: tuple[str, ...] = ("most", "rather")
    participles: tuple[str, ...] = ("laughing", "smiling", "waiting", "singing",
                                    "sleeping", "dancing", "running", "talking")
    intransitive: tuple[Pair, ...] = (("laughs", "laugh"), ("smiles", "smile"),
                                      ("waits", "wait"), ("sings", "sing"),
                                      ("sleeps", "sleep"), ("dances", "dance"))
    aux: Pair = ("is", "are")
    extra_prepositions: tuple[str, ...] = ("of",)
    relativizer: str = "that"
    conjunction: str = "and"

    def tokens(self) -> set[str]:
        out = {self.determiner, self.relativizer, self.conjunction, *self.aux}
        for name in ("det_singular", "det_plural", "adjectives", "degree", "adverb_modifiers",
                     "participles", "extra_prepositions", "intransitive"):
            out.update(_flatten(getattr(self, name)))
        return out


DEFAULT_FUNCTION_WORDS = FunctionWords()


# --------------------------------------------------------------------------
# Trees and open-node depth

@dataclass
class Node:
    label: str
    children: list = field(default_factory=list)   # Node | str
    number: str | None = None

    def leaves(self) -> list[str]:
        out = []
        for c in self.children:
            out.extend(c.leaves() if isinstance(c, Node) else [c])
        return out

    def __str__(self) -> str:
        return "(" + self.label + " " + " ".join(str(c) for c in self.children) + ")"


def open_node_depths(tree: Node) -> list[int]:
    """Number of open syntactic nodes at each word (1-based counts).

    Reading left to right, the prefix before word k decomposes into maximal
    already-completed constituents; the depth of word k is their number plus
    one for the word itself.  The first word therefore always has depth 1.
    """
    widths: dict[int, int] = {}

    def width(node) -> int:
        if not isinstance(node, Node):
            return 1
        w = widths.get(id(node))
        if w is None:
            w = widths[id(node)] = sum(width(c) for c in node.children)
        return w

    n = width(tree)

    def chunks(node, start: int, k: int) -> int:
        total = 0
        for c in node.children:
            w = width(c)
            if start + w <= k:
                total += 1
            elif start < k:
                total += chunks(c, start, k)
            start += w
        return total

    return [chunks(tree, 0, k) + 1 for k in range(n)]


# --------------------------------------------------------------------------
# Agreement templates

NO_INTERVENER_CONDITIONS = ("S", "P")
INTERVENER_CONDITIONS = ("SS", "SP", "PS", "PP")
NAME_CONDITIONS = ("SS", "PS")   # proper names are singular

# Slot kinds: det, subj, adv, advmod, and, prep, name, inter (location noun),
# inter_person (person noun), that, relverb, relverb2, verb, obj, obj2.
TEMPLATE_SLOTS: dict[str, tuple[str, ...]] = {
    "Simple": ("det", "subj", "verb", "det", "obj"),
    "Adv": ("det", "subj", "adv", "verb", "det", "obj"),
    "2Adv": ("det", "subj", "advmod", "adv", "verb", "det", "obj"),
    "CoAdv": ("det", "subj", "adv", "and", "adv", "verb", "det", "obj"),
    "NamePP": ("det", "subj", "prep", "name", "verb", "det", "obj"),
    "NounPP": ("det", "subj", "prep", "det", "inter", "verb", "det", "obj"),
    "NounPPAdv": ("det", "subj", "prep", "det", "inter", "adv", "verb", "det", "obj"),
    "SubjRel": ("det", "subj", "that", "relverb", "det", "inter_person", "verb", "det", "obj"),
    "DoubleSubjRel": ("det", "subj", "that", "relverb", "det", "inter_person", "that",
                      "relverb2", "det", "obj2", "verb", "det", "obj"),
}
NA_TASKS = ("Simple", "Adv", "2Adv", "CoAdv", "NamePP", "NounPP", "NounPPAdv")
VISUALIZATION_TASKS = ("SubjRel", "DoubleSubjRel")


@dataclass(frozen=True)
class Template:
    name: str
    slot_sequence: tuple[str, ...]

    def __post_init__(self):
        if self.slot_sequence.count("subj") != 1 or self.slot_sequence.count("verb") != 1:
            raise GrammarConfigError(f"{self.name}: needs exactly one subject and one main verb slot")
        n_inter = sum(s in ("name", "inter", "inter_person") for s in self.slot_sequence)
        if n_inter > 1:
            raise GrammarConfigError(f"{self.name}: at most one intervening-noun slot")

    @property
    def intervener(self) -> str | None:
        for s in self.slot_sequence:
            if s in ("name", "inter", "inter_person"):
                return s
        return None

    @property
    def conditions(self) -> tuple[str, ...]:
        if self.intervener is None:
            return NO_INTERVENER_CONDITIONS
        if self.intervener == "name":
            return NAME_CONDITIONS
        return INTERVENER_CONDITIONS


def template(name: str) -> Template:
    try:
        return Template(name, TEMPLATE_SLOTS[name])
    except KeyError:
        raise GrammarConfigError(f"unknown template {name!r}; known: {sorted(TEMPLATE_SLOTS)}") from None


def congruent(condition: str) -> bool:
    return len(condition) == 1 or condition[0] == condition[1]


@dataclass(frozen=True)
class Stimulus:
    task: str
    condition: str
    tokens: tuple[str, ...]
    subject_pos: int
    verb_pos: int
    correct_verb: str
    wrong_verb: str
    intervening_pos: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens[self.verb_pos] != self.correct_verb:
            raise ValueError("tokens[verb_pos] must equal correct_verb")
        if not 0 <= self.subject_pos < self.verb_pos < len(self.tokens):
            raise ValueError("need 0 <= subject_pos < verb_pos < len(tokens)")

    @property
    def subject_number(self) -> str:
        return self.condition[0]

    @property
    def prefix(self) -> tuple[str, ...]:
        return self.tokens[: self.verb_pos]

    def to_json(self) -> dict:
        d = asdict(self)
        d["tokens"] = list(self.tokens)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Stimulus":
        return cls(d["task"], d["condition"], tuple(d["tokens"]), d["subject_pos"], d["verb_pos"],
                   d["correct_verb"], d["wrong_verb"], d.get("intervening_pos"))


@dataclass
class StimulusSet:
    task: str
    conditions: tuple[str, ...]
    stimuli: list[Stimulus] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stimuli)

    def __iter__(self):
        return iter(self.stimuli)

    def by_condition(self, condition: str) -> list[Stimulus]:
        return [s for s in self.stimuli if s.condition == condition]

    def counts(self) -> dict[str, int]:
        c = Counter(s.condition for s in self.stimuli)
        return {cond: c.get(cond, 0) for cond in self.conditions}

    def write_jsonl(self, path, provenance: dict | None = None) -> None:
        with open(path, "w") as fh:
            if provenance is not None:
                fh.write(json.dumps({"_provenance": provenance}) + "\n")
            for s in self.stimuli:
                fh.write(json.dumps(s.to_json()) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "StimulusSet":
        stimuli = [Stimulus.from_json(d) for d in _json_lines(path)]
        if not stimuli:
            raise GrammarConfigError(f"{path}: no stimuli")
        task = stimuli[0].task
        conds = template(task).conditions if task in TEMPLATE_SLOTS else \
            tuple(dict.fromkeys(s.condition for s in stimuli))
        return cls(task, conds, stimuli)


def _slot_pools(tmpl: Template, lex: Lexicon, fw: FunctionWords) -> dict[str, int]:
    pools = {
        "subj": len(lex.subject_object_nouns), "obj": len(lex.subject_object_nouns),
        "obj2": len(lex.subject_object_nouns), "inter_person": len(lex.subject_object_nouns),
        "verb": len(lex.verbs), "relverb": len(lex.verbs), "relverb2": len(lex.verbs),
        "adv": len(lex.adverbs), "advmod": len(fw.adverb_modifiers),
        "prep": len(lex.prepositions), "name": len(lex.proper_nouns),
        "inter": len(lex.location_nouns),
    }
    return {s: pools[s] for s in tmpl.slot_sequence if s in pools}


def _combination_space(tmpl: Template, lex: Lexicon, fw: FunctionWords) -> list[tuple[str, int, int]]:
    """Independent lexical choices of a template as (slot, count, distinct_k).

    Repeated slots (two adverbs in CoAdv, two object dets) are folded: the two
    adverbs of CoAdv are drawn without repetition.  Object numbers are part of
    the lexical choice and shared across conditions.
    """
    pools = _slot_pools(tmpl, lex, fw)
    counts = Counter(s for s in tmpl.slot_sequence if s in pools)
    space = []
    for slot in pools:
        if any(x[0] == slot for x in space):
            continue
        space.append((slot, pools[slot], counts[slot]))
    for num_slot in ("obj", "obj2"):
        if num_slot in pools:
            space.append((num_slot + "_num", 2, 1))
    return space


def _space_size(space) -> int:
    total = 1
    for _, n, k in space:
        total *= math.perm(n, k)
    return total


def _sample_combo(space, rng: np.random.Generator) -> tuple:
    out = []
    for _, n, k in space:
        out.append(tuple(int(x) for x in rng.choice(n, size=k, replace=False)) if k > 1
                   else int(rng.integers(n)))
    return tuple(out)


def _enumerate_combos(space) -> list[tuple]:
    axes = [list(itertools.permutations(range(n), k)) if k > 1 else list(range(n))
            for _, n, k in space]
    return list(itertools.product(*axes))


def _draw_combinations(space, n: int, rng: np.random.Generator) -> list[tuple]:
    size = _space_size(space)
    if n == 0:
        return []
    if size <= 200_000 and n > size // 2:
        allc = _enumerate_combos(space)
        order = rng.permutation(len(allc))
        picked = [allc[i] for i in order[: min(n, size)]]
        if n > size:
            log.info("combination pool (%d) exhausted; sampling %d with replacement", size, n - size)
            extra = rng.integers(len(allc), size=n - size)
            picked += [allc[i] for i in extra]
        return picked
    seen: set = set()
    picked = []
    while len(picked) < n:
        c = _sample_combo(space, rng)
        if c not in seen:
            seen.add(c)
            picked.append(c)
    return picked


def _realize(tmpl: Template, combo: dict, cond: str, lex: Lexicon, fw: FunctionWords) -> Stimulus:
    subj_num = cond[0]
    inter_num = cond[1] if len(cond) == 2 else None
    idx = {SINGULAR: 0, PLURAL: 1}
    tokens: list[str] = []
    counters: Counter = Counter()
    subject_pos = verb_pos = None
    inter_pos = None
    correct = wrong = None
    for slot in tmpl.slot_sequence:
        k = counters[slot]
        counters[slot] += 1
        if slot == "det":
            tokens.append(fw.determiner)
        elif slot == "and":
            tokens.append(fw.conjunction)
        elif slot == "that":
            tokens.append(fw.relativizer)
        elif slot == "subj":
            subject_pos = len(tokens)
            tokens.append(lex.subject_object_nouns[combo["subj"]][idx[subj_num]])
        elif slot == "verb":
            verb_pos = len(tokens)
            pair = lex.verbs[combo["verb"]]
            correct, wrong = pair[idx[subj_num]], pair[1 - idx[subj_num]]
            tokens.append(correct)
        elif slot == "relverb":
            tokens.append(lex.verbs[combo["relverb"]][idx[subj_num]])
        elif slot == "relverb2":
            tokens.append(lex.verbs[combo["relverb2"]][idx[inter_num]])
        elif slot == "adv":
            choice = combo["adv"]
            tokens.append(lex.adverbs[choice[k] if isinstance(choice, tuple) else choice])
        elif slot == "advmod":
            tokens.append(fw.adverb_modifiers[combo["advmod"]])
        elif slot == "prep":
            tokens.append(lex.prepositions[combo["prep"]])
        elif slot == "name":
            inter_pos = len(tokens)
            tokens.append(lex.proper_nouns[combo["name"]])
        elif slot == "inter":
            inter_pos = len(tokens)
            tokens.append(lex.location_nouns[combo["inter"]][idx[inter_num]])
        elif slot == "inter_person":
            inter_pos = len(tokens)
            tokens.append(lex.subject_object_nouns[combo["inter_person"]][idx[inter_num]])
        elif slot in ("obj", "obj2"):
            tokens.append(lex.subject_object_nouns[combo[slot]][combo[slot + "_num"]])
        else:  # pragma: no cover - guarded by TEMPLATE_SLOTS
            raise GrammarConfigError(f"unknown slot {slot}")
    return Stimulus(tmpl.name, cond, tuple(tokens), subject_pos, verb_pos, correct, wrong, inter_pos)


def generate_na_task(tmpl: Template | str, lexicon: Lexicon = DEFAULT_LEXICON,
                     n_per_condition: int = 600, seed: int = 0,
                     function_words: FunctionWords = DEFAULT_FUNCTION_WORDS) -> StimulusSet:
    """Generate an agreement task: ``n_per_condition`` sentences per condition.

    Each lexical combination is realised in every condition, so conditions are
    matched item by item.  Combinations are drawn without replacement until
    the pool is exhausted.
    """
    if isinstance(tmpl, str):
        tmpl = template(tmpl)
    if n_per_condition < 0:
        raise ValueError("n_per_condition must be >= 0")
    space = _combination_space(tmpl, lexicon, function_words)
    for slot, n, k in space:
        if n < k or n == 0:
            raise GrammarConfigError(f"{tmpl.name}: pool for slot {slot!r} has {n} entries, needs {max(k, 1)}")
    rng = np.random.default_rng([seed, _stable_hash(tmpl.name)])
    combos = _draw_combinations(space, n_per_condition, rng)
    keys = [s[0] for s in space]
    out = StimulusSet(tmpl.name, tmpl.conditions)
    for cond in tmpl.conditions:
        for c in combos:
            out.stimuli.append(_realize(tmpl, dict(zip(keys, c)), cond, lexicon, function_words))
    return out


def _stable_hash(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode())


# --------------------------------------------------------------------------
# Free grammar (training corpus and depth sentences)

@dataclass(frozen=True)
class GrammarConfig:
    """Expansion probabilities of the free grammar."""

    p_plural: float = 0.5
    p_name_subject: float = 0.04
    p_bare_plural: float = 0.08
    p_quantifier: float = 0.15          # this/every/numerals instead of "the"
    p_adjective: float = 0.12
    p_second_adjective: float = 0.2
    p_degree: float = 0.3
    p_pp_subject: float = 0.35
    p_pp_object: float = 0.15
    p_pp_nested: float = 0.2
    pp_noun_weights: tuple[float, float, float] = (0.55, 0.3, 0.15)   # location, person, name
    p_relc_subject: float = 0.08
    p_relc_object: float = 0.12
    p_mods: float = 0.4
    mods_weights: tuple[float, float, float] = (0.5, 0.2, 0.3)        # adv, modifier+adv, adv and adv
    vp_weights: tuple[float, float, float, float] = (0.62, 0.14, 0.1, 0.14)  # trans, prog, intrans, cop
    p_prog_adverb: float = 0.3
    p_vp_coord: float = 0.08
    max_np_depth: int = 4
    relative_clauses: bool = True
    template_fraction: float = 0.0      # share of corpus sentences drawn from the NA templates


class Grammar:
    """Sampler and parser for the free grammar over a lexicon."""

    def __init__(self, lexicon: Lexicon = DEFAULT_LEXICON,
                 function_words: FunctionWords = DEFAULT_FUNCTION_WORDS,
                 config: GrammarConfig = GrammarConfig()):
        self.lex = lexicon
        self.fw = function_words
        self.cfg = config
        self._categories = self._build_categories()

    # ---- sampling -------------------------------------------------------
    def _num(self, rng) -> str:
        return PLURAL if rng.random() < self.cfg.p_plural else SINGULAR

    @staticmethod
    def _pick(rng, seq):
        return seq[int(rng.integers(len(seq)))]

    def _form(self, pair: Pair, num: str) -> str:
        return pair[0] if num == SINGULAR else pair[1]

    def np(self, rng, cfg: GrammarConfig, depth: int = 0, role: str = "subj",
           noun_kind: str = "person", num: str | None = None) -> Node:
        num = self._num(rng) if num is None else num
        if noun_kind == "name":
            return Node("NP", [self._pick(rng, self.lex.proper_nouns)], SINGULAR)
        children: list = []
        if num == PLURAL and rng.random() < cfg.p_bare_plural:
            pass
        elif rng.random() < cfg.p_quantifier:
            children.append(self._pick(rng, self.fw.det_singular if num == SINGULAR else self.fw.det_plural))
        else:
            children.append(self.fw.determiner)
        if rng.random() < cfg.p_adjective:
            children.append(self.adjp(rng, cfg))
            if rng.random() < cfg.p_second_adjective:
                children.append(self.adjp(rng, cfg))
        pool = self.lex.location_nouns if noun_kind == "location" else self.lex.subject_object_nouns
        children.append(self._form(self._pick(rng, pool), num))
        p_pp = {"subj": cfg.p_pp_subject, "obj": cfg.p_pp_object}.get(role, cfg.p_pp_nested)
        if depth < cfg.max_np_depth and rng.random() < p_pp:
            children.append(self.pp(rng, cfg, depth + 1))
        p_rel = {"subj": cfg.p_relc_subject, "obj": cfg.p_relc_object}.get(role, 0.0)
        if cfg.relative_clauses and depth < cfg.max_np_depth and rng.random() < p_rel:
            children.append(Node("RelC", [self.fw.relativizer, self.vpc(rng, cfg, num, depth + 1)], num))
        return Node("NP", children, num)

    def adjp(self, rng, cfg: GrammarConfig) -> Node:
        ch = [self._pick(rng, self.fw.degree)] if rng.random() < cfg.p_degree else []
        return Node("AdjP", ch + [self._pick(rng, self.fw.adjectives)])

    def pp(self, rng, cfg: GrammarConfig, depth: int) -> Node:
        kind = ("location", "person", "name")[int(rng.choice(3, p=np.asarray(cfg.pp_noun_weights)))]
        preps = self.lex.prepositions + (self.fw.extra_prepositions if kind == "person" else ())
        return Node("PP", [self._pick(rng, preps), self.np(rng, cfg, depth, "pp", kind)])

    def mods(self, rng, cfg: GrammarConfig) -> Node:
        kind = int(rng.choice(3, p=np.asarray(cfg.mods_weights)))
        if kind == 0:
            return Node("Mods", [self._pick(rng, self.lex.adverbs)])
        if kind == 1:
            return Node("Mods", [self._pick(rng, self.fw.adverb_modifiers), self._pick(rng, self.lex.adverbs)])
        a, b = rng.choice(len(self.lex.adverbs), size=2, replace=False)
        return Node("Mods", [self.lex.adverbs[a], self.fw.conjunction, self.lex.adverbs[b]])

    def vp(self, rng, cfg: GrammarConfig, num: str, depth: int) -> Node:
        kind = int(rng.choice(4, p=np.asarray(cfg.vp_weights)))
        if kind == 0:
            verb = self._form(self._pick(rng, self.lex.verbs), num)
            return Node("VP", [verb, self.np(rng, cfg, depth, "obj")], num)
        aux = self._form(self.fw.aux, num)
        if kind == 1:
            ch = [aux]
            if rng.random() < cfg.p_prog_adverb:
                ch.append(self._pick(rng, self.lex.adverbs))
            return Node("VP", ch + [self._pick(rng, self.fw.participles)], num)
        if kind == 2:
            return Node("VP", [self._form(self._pick(rng, self.fw.intransitive), num)], num)
        return Node("VP", [aux, self.adjp(rng, cfg)], num)

    def vpc(self, rng, cfg: GrammarConfig, num: str, depth: int) -> Node:
        first = self.vp(rng, cfg, num, depth)
        if rng.random() < cfg.p_vp_coord:
            return Node("VPc", [first, self.fw.conjunction, self.vp(rng, cfg, num, depth)], num)
        return first

    def sentence(self, rng, cfg: GrammarConfig | None = None) -> Node:
        cfg = self.cfg if cfg is None else cfg
        kind = "name" if rng.random() < cfg.p_name_subject else "person"
        subj = self.np(rng, cfg, 0, "subj", kind)
        children = [subj]
        if rng.random() < cfg.p_mods:
            children.append(self.mods(rng, cfg))
        children.append(self.vpc(rng, cfg, subj.number, 0))
        return Node("S", children, subj.number)

    def template_sentence(self, rng) -> list[str]:
        """One random NA-template sentence with random numbers."""
        name = NA_TASKS[int(rng.integers(len(NA_TASKS)))]
        tmpl = template(name)
        space = _combination_space(tmpl, self.lex, self.fw)
        combo = dict(zip([s[0] for s in space], _sample_combo(space, rng)))
        cond = tmpl.conditions[int(rng.integers(len(tmpl.conditions)))]
        return list(_realize(tmpl, combo, cond, self.lex, self.fw).tokens)

    # ---- parsing --------------------------------------------------------
    def _build_categories(self) -> dict[str, set]:
        cats: dict[str, set] = defaultdict(set)
        fw, lex = self.fw, self.lex
        cats[fw.determiner].add(("Det", None))
        for t in fw.det_singular:
            cats[t].add(("Det", SINGULAR))
        for t in fw.det_plural:
            cats[t].add(("Det", PLURAL))
        for pool, cat in ((lex.subject_object_nouns, "N"), (lex.location_nouns, "N"),
                          (lex.verbs, "V"), (fw.intransitive, "Vi")):
            for sg, pl in pool:
                cats[sg].add((cat, SINGULAR))
                cats[pl].add((cat, PLURAL))
        cats[fw.aux[0]].add(("Aux", SINGULAR))
        cats[fw.aux[1]].add(("Aux", PLURAL))
        for t in lex.proper_nouns:
            cats[t].add(("Name", SINGULAR))
        simple = ((lex.adverbs, "Adv"), (lex.prepositions, "P"), (fw.extra_prepositions, "P"),
                  (fw.adjectives, "Adj"), (fw.degree, "Deg"), (fw.adverb_modifiers, "AdvMod"),
                  (fw.participles, "Ving"))
        for pool, cat in simple:
            for t in pool:
                cats[t].add((cat, None))
        cats[fw.relativizer].add(("That", None))
        cats[fw.conjunction].add(("And", None))
        return dict(cats)

    def parse(self, tokens: Sequence[str], agreement: bool = True) -> list[Node]:
        """All parses of ``tokens`` as a sentence.

        With ``agreement`` every determiner-noun and subject-verb pair (main
        clause, relative clauses, coordinated VPs) must match in number.
        """
        toks = list(tokens)
        n = len(toks)
        cats = [self._categories.get(t, set()) for t in toks]
        memo: dict = {}

        def has(i, cat):
            if i >= n:
                return []
            return [num for c, num in cats[i] if c == cat]

        def ok(a, b):
            return not agreement or a is None or b is None or a == b

        def NP(i):
            key = ("NP", i)
            if key in memo:
                return memo[key]
            out = []
            for _ in has(i, "Name"):
                out.append((Node("NP", [toks[i]], SINGULAR), i + 1))
            det_opts = [(None, i, [])] + [(d, i + 1, [toks[i]]) for d in has(i, "Det")]
            for det_num, j, ch in det_opts:
                for adjs, k in ADJS(j):
                    for noun_num in has(k, "N"):
                        if ch and not ok(det_num, noun_num):
                            continue
                        if not ch and noun_num != PLURAL:
                            continue
                        base = ch + adjs + [toks[k]]
                        for pp_ch, m in [([], k + 1)] + [([p], e) for p, e in PP(k + 1)]:
                            for rel_ch, r in [([], m)] + [([rc], e) for rc, e in RELC(m, noun_num)]:
                                out.append((Node("NP", base + pp_ch + rel_ch, noun_num), r))
            memo[key] = out
            return out

        def ADJS(i):
            res = [([], i)]
            frontier = [([], i)]
            for _ in range(3):
                nxt = []
                for adjs, j in frontier:
                    for a, e in ADJP(j):
                        nxt.append((adjs + [a], e))
                res += nxt
                frontier = nxt
            return res

        def ADJP(i):
            out = []
            if has(i, "Adj"):
                out.append((Node("AdjP", [toks[i]]), i + 1))
            if has(i, "Deg") and has(i + 1, "Adj"):
                out.append((Node("AdjP", [toks[i], toks[i + 1]]), i + 2))
            return out

        def PP(i):
            key = ("PP", i)
            if key in memo:
                return memo[key]
            out = []
            if has(i, "P"):
                for np_, e in NP(i + 1):
                    out.append((Node("PP", [toks[i], np_]), e))
            memo[key] = out
            return out

        def RELC(i, num):
            if not has(i, "That"):
                return []
            return [(Node("RelC", [toks[i], v], num), e) for v, e in VPC(i + 1, num)]

        def MODS(i):
            out = []
            if has(i, "Adv"):
                out.append((Node("Mods", [toks[i]]), i + 1))
                if has(i + 1, "And") and has(i + 2, "Adv"):
                    out.append((Node("Mods", toks[i:i + 3]), i + 3))
            if has(i, "AdvMod") and has(i + 1, "Adv"):
                out.append((Node("Mods", toks[i:i + 2]), i + 2))
            return out

        def VP(i, num):
            key = ("VP", i, num if agreement else None)
            if key in memo:
                return memo[key]
            out = []
            for vnum in has(i, "V"):
                if ok(num, vnum):
                    for np_, e in NP(i + 1):
                        out.append((Node("VP", [toks[i], np_], vnum), e))
            for vnum in has(i, "Vi"):
                if ok(num, vnum):
                    out.append((Node("VP", [toks[i]], vnum), i + 1))
            for vnum in has(i, "Aux"):
                if not ok(num, vnum):
                    continue
                if has(i + 1, "Ving"):
                    out.append((Node("VP", toks[i:i + 2], vnum), i + 2))
                if has(i + 1, "Adv") and has(i + 2, "Ving"):
                    out.append((Node("VP", toks[i:i + 3], vnum), i + 3))
                for a, e in ADJP(i + 1):
                    out.append((Node("VP", [toks[i], a], vnum), e))
            memo[key] = out
            return out

        def VPC(i, num):
            out = []
            for v, e in VP(i, num):
                out.append((v, e))
                if has(e, "And"):
                    for v2, e2 in VP(e + 1, num):
                        out.append((Node("VPc", [v, toks[e], v2], num), e2))
            return out

        parses = []
        for subj, j in NP(0):
            starts = [([], j)] + [([m], e) for m, e in MODS(j)]
            for mods, k in starts:
                for v, e in VPC(k, subj.number):
                    if e == n:
                        parses.append(Node("S", [subj] + mods + [v], subj.number))
        return parses

    def agrees(self, tokens: Sequence[str]) -> bool:
        return bool(self.parse(tokens, agreement=True))

    def vocabulary(self) -> list[str]:
        return [EOS, UNK] + sorted(self.lex.tokens() | self.fw.tokens())


# --------------------------------------------------------------------------
# Training corpus

def generate_training_corpus(lexicon_train: Lexicon = DEFAULT_LEXICON,
                             grammar_config: GrammarConfig = GrammarConfig(),
                             n_sentences: int = 50_000, seed: int = 0,
                             function_words: FunctionWords = DEFAULT_FUNCTION_WORDS
                             ) -> tuple[list[list[str]], list[str]]:
    """Sample ``n_sentences`` agreement-consistent sentences and the vocabulary.

    Returns (sentences, vocab); sentences exclude the end-of-sentence marker,
    which :func:`write_corpus` appends.
    """
    if n_sentences < 0:
        raise ValueError("n_sentences must be >= 0")
    grammar = Grammar(lexicon_train, function_words, grammar_config)
    rng = np.random.default_rng([seed, 17])
    sentences = []
    for _ in range(n_sentences):
        if rng.random() < grammar_config.template_fraction:
            sentences.append(grammar.template_sentence(rng))
        else:
            sentences.append(grammar.sentence(rng).leaves())
    return sentences, grammar.vocabulary()


def write_corpus(sentences: Iterable[Sequence[str]], path) -> None:
    """One sentence per line, each terminated by ``<eos>``."""
    with open(path, "w") as fh:
        for s in sentences:
            fh.write(" ".join(list(s) + [EOS]) + "\n")


def read_corpus(path) -> list[list[str]]:
    out = []
    for line in open(path):
        toks = line.split()
        if toks and toks[-1] == EOS:
            toks = toks[:-1]
        if toks:
            out.append(toks)
    return out


def write_vocab(vocab: Sequence[str], path) -> None:
    """One token per line; the 0-based line number is the token id."""
    Path(path).write_text("".join(t + "\n" for t in vocab))


def read_vocab(path) -> list[str]:
    return [line.rstrip("\n") for line in open(path) if line.rstrip("\n")]


def _json_lines(path) -> list[dict]:
    """JSON objects of a JSONL file, skipping a provenance header line."""
    rows = (json.loads(line) for line in open(path) if line.strip())
    return [r for r in rows if "_provenance" not in r]


# --------------------------------------------------------------------------
# Syntactic depth dataset

@dataclass(frozen=True)
class DepthConfig:
    min_len: int = 2
    max_len: int = 25
    sentences_per_length: int = 300
    position_range: tuple[int, int] = (7, 12)   # 1-based word positions, inclusive
    depth_range: tuple[int, int] = (3, 8)       # inclusive
    points_per_cell: int | None = 112           # None: as many as every cell allows
    max_attempts_per_sentence: int = 200


@dataclass
class DepthDataset:
    sentences: list[list[str]]
    depths: list[list[int]]
    annotations: list[list[tuple[int, int]]]    # (1-based position, depth)
    config: DepthConfig
    cell_counts: dict = field(default_factory=dict)
    empty_cells: list = field(default_factory=list)
    correlation: float = float("nan")

    def points(self) -> list[tuple[int, int, int]]:
        """(sentence index, position, depth) for every retained point."""
        return [(i, p, d) for i, ann in enumerate(self.annotations) for p, d in ann]

    def write_jsonl(self, path, provenance: dict | None = None) -> None:
        with open(path, "w") as fh:
            if provenance is not None:
                fh.write(json.dumps({"_provenance": provenance}) + "\n")
            for toks, deps, ann in zip(self.sentences, self.depths, self.annotations):
                if ann:
                    fh.write(json.dumps({"tokens": toks, "retained": [list(a) for a in ann],
                                         "depths": deps}) + "\n")

    @classmethod
    def read_jsonl(cls, path, config: DepthConfig = DepthConfig()) -> "DepthDataset":
        rows = _json_lines(path)
        ds = cls([r["tokens"] for r in rows], [r["depths"] for r in rows],
                 [[tuple(a) for a in r["retained"]] for r in rows], config)
        ds._summarize()
        return ds

    def _summarize(self) -> None:
        pts = self.points()
        self.cell_counts = {f"{p},{d}": c for (p, d), c in sorted(Counter((p, d) for _, p, d in pts).items())}
        if len(pts) > 1:
            pos = np.array([p for _, p, _ in pts], float)
            dep = np.array([d for _, _, d in pts], float)
            if pos.std() > 0 and dep.std() > 0:
                self.correlation = float(np.corrcoef(pos, dep)[0, 1])


def depth_grammar_config(complexity: float) -> GrammarConfig:
    """Free-grammar settings for depth sentences at a complexity in [0, 1]."""
    c = complexity
    return GrammarConfig(
        p_name_subject=0.08, p_bare_plural=0.25 * (1 - c) + 0.05, p_quantifier=0.35,
        p_adjective=0.1 + 0.5 * c, p_second_adjective=0.35 * c, p_degree=0.4,
        p_pp_subject=0.05 + 0.85 * c, p_pp_object=0.05 + 0.7 * c, p_pp_nested=0.9 * c,
        pp_noun_weights=(0.4, 0.45, 0.15), relative_clauses=False,
        p_mods=0.1 + 0.4 * c, vp_weights=(0.35, 0.3, 0.2, 0.15),
        p_prog_adverb=0.5, p_vp_coord=0.3 * c, max_np_depth=8,
    )


def generate_depth_dataset(config: DepthConfig = DepthConfig(), seed: int = 0,
                           lexicon: Lexicon = DEFAULT_LEXICON,
                           function_words: FunctionWords = DEFAULT_FUNCTION_WORDS) -> DepthDataset:
    """Depth-annotated sentences with position/depth de-correlated sampling.

    Stage 1 draws ``sentences_per_length`` distinct sentences for every length.
    Stage 2 fills the position x depth cells round-robin (cell order shuffled)
    until each holds ``points_per_cell`` points or runs out of candidates.
    """
    lo_p, hi_p = config.position_range
    lo_d, hi_d = config.depth_range
    if lo_p > hi_p or lo_d > hi_d:
        raise GrammarConfigError("position_range and depth_range must be nonempty")
    if config.sentences_per_length < 1:
        raise GrammarConfigError("sentences_per_length must be >= 1")
    grammar = Grammar(lexicon, function_words)
    rng = np.random.default_rng([seed, 23])
    lengths = range(config.min_len, config.max_len + 1)
    buckets: dict[int, dict[tuple, Node]] = {L: {} for L in lengths}
    need = config.sentences_per_length * len(buckets)
    attempts = 0
    max_attempts = need * config.max_attempts_per_sentence
    # give up once this many draws in a row add nothing (a bucket whose
    # length has fewer distinct sentences than requested never fills)
    patience = config.sentences_per_length * config.max_attempts_per_sentence
    have = 0
    last_new = 0
    while have < need and attempts < max_attempts and attempts - last_new < patience:
        attempts += 1
        c = float(rng.random())
        tree = grammar.sentence(rng, depth_grammar_config(c))
        toks = tuple(tree.leaves())
        b = buckets.get(len(toks))
        if b is not None and len(b) < config.sentences_per_length and toks not in b:
            b[toks] = tree
            have += 1
            last_new = attempts
    short = {L: len(b) for L, b in buckets.items() if len(b) < config.sentences_per_length}
    if short:
        warnings.warn(f"depth dataset: fewer distinct sentences than requested for lengths {short}")

    sentences, depths = [], []
    for L in lengths:
        for toks, tree in buckets[L].items():
            sentences.append(list(toks))
            depths.append(open_node_depths(tree))

    candidates: dict[tuple[int, int], list[tuple[int, int]]] = {
        (p, d): [] for p in range(lo_p, hi_p + 1) for d in range(lo_d, hi_d + 1)}
    for si, deps in enumerate(depths):
        for pos0, d in enumerate(deps):
            cell = (pos0 + 1, d)
            if cell in candidates:
                candidates[cell].append((si, pos0 + 1))
    empty = [cell for cell, cands in candidates.items() if not cands]
    if empty:
        warnings.warn(f"depth dataset: unreachable position/depth cells {sorted(empty)}")
    pools = {cell: [cands[i] for i in rng.permutation(len(cands))]
             for cell, cands in candidates.items() if cands}
    target = config.points_per_cell
    if target is None:
        target = min((len(v) for v in pools.values()), default=0)
    cells = list(pools)
    order = [cells[i] for i in rng.permutation(len(cells))]
    taken: dict = {cell: 0 for cell in cells}
    retained: dict[int, list[tuple[int, int]]] = defaultdict(list)
    progress = True
    while progress:
        progress = False
        for cell in order:
            if taken[cell] < target and taken[cell] < len(pools[cell]):
                si, pos = pools[cell][taken[cell]]
                retained[si].append((pos, cell[1]))
                taken[cell] += 1
                progress = True
    exhausted = [cell for cell in cells if taken[cell] < target]
    if exhausted:
        warnings.warn(f"depth dataset: cells below {target} points: "
                      f"{ {c: taken[c] for c in sorted(exhausted)} }")
    annotations = [sorted(retained.get(i, [])) for i in range(len(sentences))]
    ds = DepthDataset(sentences, depths, annotations, config, empty_cells=sorted(empty))
    ds._summarize()
    return ds
