"""Ingredient phrase cleaning, two-word merging and frequency-limited vocabulary."""

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+(?:[./][^\W_]+)*")
_PAREN = re.compile(r"\([^()]*\)")


def _read_words(name):
    text = resources.files("plated.data").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@dataclass(frozen=True)
class RuleSet:
    fillers: frozenset
    adjectives: frozenset
    utensils: frozenset
    units: frozenset
    geo_adjectives: frozenset
    color_words: frozenset
    plurals: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        clash = self.color_words & (self.adjectives | self.fillers)
        if clash:
            raise ValueError(f"color words may not also be fillers/adjectives: {sorted(clash)}")
        for group in (self.fillers, self.adjectives, self.utensils, self.units,
                      self.geo_adjectives, self.color_words):
            for w in group:
                if w != w.lower() or not w or " " in w:
                    raise ValueError(f"rule words must be lowercase single tokens, got {w!r}")

    @classmethod
    def default(cls):
        plurals = dict(ln.split("\t") for ln in _read_words("plurals.txt"))
        return cls(
            fillers=frozenset(_read_words("fillers.txt")),
            adjectives=frozenset(_read_words("adjectives.txt")),
            utensils=frozenset(_read_words("utensils.txt")),
            units=frozenset(_read_words("units.txt")),
            geo_adjectives=frozenset(_read_words("geo_adjectives.txt")),
            color_words=frozenset(_read_words("colors.txt")),
            plurals=plurals,
        )


_DEFAULT = None


def default_rules():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = RuleSet.default()
    return _DEFAULT


def singularize(word, plurals=None):
    if plurals and word in plurals:
        return plurals[word]
    if len(word) <= 3 or not word.isalpha():
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(("ches", "shes", "sses", "xes", "zes", "oes")):
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


def _is_quantity(tok):
    return all(c.isnumeric() or c in "./" for c in tok)


def _clean_once(text, rules):
    s = text.lower()
    prev = None
    while prev != s:
        prev, s = s, _PAREN.sub(" ", s)
    s = s.split("(")[0]
    tokens = _TOKEN.findall(s)

    removable = rules.fillers | rules.adjectives | rules.geo_adjectives | rules.utensils

    def drop(tok, leading):
        if tok in rules.color_words:
            return False
        if _is_quantity(tok):
            return True
        sing = singularize(tok, rules.plurals)
        if leading and (tok in rules.units or sing in rules.units):
            return True
        return tok in removable or sing in removable

    i = 0
    while i < len(tokens) and drop(tokens[i], leading=True):
        i += 1
    kept = [t for t in tokens[i:] if not drop(t, leading=False)]
    if kept:
        kept[-1] = singularize(kept[-1], rules.plurals)
    return " ".join(kept)


def clean_phrase(raw, rules=None):
    """Reduce a raw ingredient phrase to a bare, singular ingredient name.

    Returns "" when nothing edible survives (utensils, pure quantities).
    The rules are re-applied until the phrase stops changing, which makes
    the function idempotent.
    """
    rules = rules or default_rules()
    out = _clean_once(raw, rules)
    for _ in range(8):
        nxt = _clean_once(out, rules)
        if nxt == out:
            break
        out = nxt
    return out


def merge_vocabulary(phrases):
    """Map each phrase to its merged canonical form.

    Phrases of three or more words that share their first two (preferred) or
    last two words with another such phrase collapse onto that two-word form.
    Rounds repeat on the mapped set until nothing changes.
    """
    distinct = sorted(set(phrases))
    mapping = {p: p for p in distinct}
    current = set(distinct)
    while True:
        long = [p.split() for p in current if len(p.split()) >= 3]
        prefixes = Counter(tuple(w[:2]) for w in long)
        suffixes = Counter(tuple(w[-2:]) for w in long)
        step = {}
        for w in long:
            if prefixes[tuple(w[:2])] > 1:
                step[" ".join(w)] = " ".join(w[:2])
            elif suffixes[tuple(w[-2:])] > 1:
                step[" ".join(w)] = " ".join(w[-2:])
        if not step:
            return mapping
        for k, v in mapping.items():
            mapping[k] = step.get(v, v)
        current = set(mapping.values())


@dataclass
class IngredientVocabulary:
    labels: list
    freq: dict
    raw_map: dict
    top_percent: float = 1.0
    max_size: int = 0

    def __post_init__(self):
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def index(self, label):
        return self._index.get(label)

    def lookup(self, phrase, rules=None):
        """Label for a phrase; unseen phrases are cleaned and prefix/suffix matched."""
        if phrase in self.raw_map:
            return self.raw_map[phrase]
        c = clean_phrase(phrase, rules)
        if c in self._index:
            return c
        w = c.split()
        if len(w) >= 3:
            for cand in (" ".join(w[:2]), " ".join(w[-2:])):
                if cand in self._index:
                    return cand
        return None

    def save(self, vocab_path, map_path):
        with open(vocab_path, "w", encoding="utf-8") as fh:
            for lab in self.labels:
                fh.write(f"{lab}\t{self.freq[lab]}\n")
        with open(map_path, "w", encoding="utf-8") as fh:
            for raw in sorted(self.raw_map):
                fh.write(f"{raw}\t{self.raw_map[raw] or ''}\n")

    @classmethod
    def load(cls, vocab_path, map_path=None):
        labels, freq = [], {}
        with open(vocab_path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{vocab_path}:{n}: expected label<TAB>count")
                labels.append(parts[0])
                freq[parts[0]] = int(parts[1])
        raw_map = {lab: lab for lab in labels}
        if map_path is not None:
            with open(map_path, encoding="utf-8") as fh:
                for n, line in enumerate(fh, 1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    raw, sep, lab = line.rpartition("\t")
                    if not sep:
                        raise ValueError(f"{map_path}:{n}: expected raw_phrase<TAB>label")
                    if lab and lab not in freq:
                        raise ValueError(f"{map_path}:{n}: label {lab!r} not in vocabulary")
                    raw_map[raw] = lab or None
        return cls(labels, freq, raw_map, max_size=len(labels))


def _keep_count(top_percent, n):
    # round-half-up, never below one label
    return max(1, int(math.floor(top_percent * n + 0.5)))


def build_vocabulary(counts, top_percent, max_size, aliases=None):
    """Keep the most frequent phrases.

    The kept count is ``round(top_percent * distinct)`` (half-up, at least 1)
    capped at ``max_size``; ranking is by descending count then label.
    ``aliases`` (raw phrase -> phrase or None) extends the raw map.
    """
    if not counts:
        raise ValueError("cannot build a vocabulary from empty counts")
    if not 0 < top_percent <= 1:
        raise ValueError(f"top_percent must be in (0, 1], got {top_percent}")
    if max_size < 1:
        raise ValueError(f"max_size must be >= 1, got {max_size}")
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    labels = ranked[:min(_keep_count(top_percent, len(ranked)), max_size)]
    keep = set(labels)
    raw_map = {p: (p if p in keep else None) for p in counts}
    for raw, target in (aliases or {}).items():
        raw_map[raw] = target if target in keep else None
    return IngredientVocabulary(labels, {p: counts[p] for p in labels}, raw_map,
                                top_percent, max_size)


def refine(phrase_lists, rules=None):
    """Clean and merge per-recipe phrase lists.

    Returns ``(counts, aliases)``: the number of recipes mentioning each
    canonical phrase, and the raw -> canonical map (None for phrases that
    clean to nothing).
    """
    rules = rules or default_rules()
    cleaned = {}
    for phrases in phrase_lists:
        for raw in phrases:
            if raw not in cleaned:
                cleaned[raw] = clean_phrase(raw, rules)
    merged = merge_vocabulary([c for c in cleaned.values() if c])
    aliases = {raw: (merged[c] if c else None) for raw, c in cleaned.items()}
    counts = Counter()
    for phrases in phrase_lists:
        counts.update({aliases[raw] for raw in phrases if aliases[raw]})
    return dict(counts), aliases


def encode_targets(recipe, vocab, rules=None):
    """Multi-hot vector over ``vocab.labels`` for a recipe's cleaned phrases."""
    y = np.zeros(len(vocab), dtype=np.float32)
    for phrase in recipe.cleaned_ingredients:
        lab = vocab.lookup(phrase, rules)
        if lab is not None:
            y[vocab.index(lab)] = 1
    return y
