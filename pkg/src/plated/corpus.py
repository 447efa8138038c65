"""Recipe CSV ingestion, validation and deterministic train/val/test splits."""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

COLUMNS = ("Title", "Ingredients", "Instructions", "Image_Name", "Cleaned_Ingredients")


class FormatError(ValueError):
    pass


class ListParseError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} at byte offset {offset}")
        self.offset = offset


@dataclass
class Recipe:
    id: int
    title: str
    ingredients_raw: list
    instructions: str
    image_name: str
    cleaned_ingredients: list = field(default_factory=list)


@dataclass
class SplitSet:
    train: list
    val: list
    test: list
    seed: int

    def manifest(self):
        return {
            "seed": self.seed,
            "train_ids": [r.id for r in self.train],
            "val_ids": [r.id for r in self.val],
            "test_ids": [r.id for r in self.test],
        }


def _byte_offset(text, i):
    return len(text[:i].encode("utf-8"))


def parse_list_field(text):
    """Parse a bracketed list literal such as ``['a', "b c"]``.

    Items may be single- or double-quoted with backslash escapes, or bare
    (comma-delimited). Text that does not start with ``[`` is a one-element
    list.
    """
    s = text.strip()
    if not s.startswith("["):
        return [s] if s else []
    lead = len(text) - len(text.lstrip())
    items = []
    i, n = 1, len(s)
    expect_item = True
    while True:
        while i < n and s[i].isspace():
            i += 1
        if i >= n:
            raise ListParseError("unterminated bracket", _byte_offset(text, lead + i))
        ch = s[i]
        if ch == "]":
            if s[i + 1:].strip():
                raise ListParseError("trailing characters after list", _byte_offset(text, lead + i + 1))
            return items
        if ch == ",":
            if expect_item:
                raise ListParseError("empty list item", _byte_offset(text, lead + i))
            expect_item = True
            i += 1
            continue
        if not expect_item:
            raise ListParseError("expected ',' or ']'", _byte_offset(text, lead + i))
        if ch in "'\"":
            start = i
            buf = []
            i += 1
            while True:
                if i >= n:
                    raise ListParseError("unterminated quote", _byte_offset(text, lead + start))
                c = s[i]
                if c == "\\":
                    if i + 1 >= n:
                        raise ListParseError("unterminated quote", _byte_offset(text, lead + start))
                    buf.append(s[i + 1])
                    i += 2
                elif c == ch:
                    i += 1
                    break
                else:
                    buf.append(c)
                    i += 1
            items.append("".join(buf).strip())
        else:
            start = i
            while i < n and s[i] not in ",]":
                i += 1
            items.append(s[start:i].strip())
        expect_item = False


def format_list_field(items):
    """Inverse of :func:`parse_list_field` for lists of strings."""
    quoted = ("'" + it.replace("\\", "\\\\").replace("'", "\\'") + "'" for it in items)
    return "[" + ", ".join(quoted) + "]"


def load_recipes(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        header = [h.strip() for h in header]
        cols = {}
        for name in COLUMNS:
            if name not in header:
                raise FormatError(f"{path}: missing header column {name!r}")
            cols[name] = header.index(name)
        recipes = []
        for row_idx, row in enumerate(reader):
            if not row:
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            try:
                recipes.append(Recipe(
                    id=row_idx,
                    title=row[cols["Title"]],
                    ingredients_raw=parse_list_field(row[cols["Ingredients"]]),
                    instructions=row[cols["Instructions"]],
                    image_name=row[cols["Image_Name"]].strip(),
                    cleaned_ingredients=parse_list_field(row[cols["Cleaned_Ingredients"]]),
                ))
            except ListParseError as exc:
                raise FormatError(f"{path}: data row {row_idx + 1}: {exc}") from exc
    return recipes


def write_recipes(recipes, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("",) + COLUMNS)
        for r in recipes:
            w.writerow((r.id, r.title, format_list_field(r.ingredients_raw), r.instructions,
                        r.image_name, format_list_field(r.cleaned_ingredients)))


def _complete(r):
    if not r.title.strip() or not r.instructions.strip() or not r.image_name.strip():
        return False
    if "/" in r.image_name or "\\" in r.image_name:
        return False
    if not r.ingredients_raw or not r.cleaned_ingredients:
        return False
    return all(s.strip() for s in r.ingredients_raw) and all(s.strip() for s in r.cleaned_ingredients)


def drop_incomplete(recipes):
    kept = [r for r in recipes if _complete(r)]
    removed = len(recipes) - len(kept)
    if removed:
        log.info("dropped %d incomplete recipes", removed)
    return kept


def round_half_up(x):
    return int(np.floor(x + 0.5))


def split(recipes, seed):
    n = len(recipes)
    if n < 5:
        raise ValueError(f"need at least 5 recipes to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [recipes[i] for i in order]
    n_test = round_half_up(0.2 * n)
    n_val = round_half_up(0.2 * (n - n_test))
    return SplitSet(
        train=shuffled[n_test + n_val:],
        val=shuffled[n_test:n_test + n_val],
        test=shuffled[:n_test],
        seed=seed,
    )


def write_manifest(splits, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(splits.manifest(), fh)
        fh.write("\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    for key in ("seed", "train_ids", "val_ids", "test_ids"):
        if key not in m:
            raise FormatError(f"{path}: split manifest lacks {key!r}")
    return m


def apply_manifest(recipes, manifest):
    """Rebuild a SplitSet from recipes and a manifest written by :func:`write_manifest`."""
    by_id = {r.id: r for r in recipes}

    def pick(ids):
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise FormatError(f"split manifest refers to unknown recipe ids {missing[:5]}")
        return [by_id[i] for i in ids]

    return SplitSet(pick(manifest["train_ids"]), pick(manifest["val_ids"]),
                    pick(manifest["test_ids"]), manifest["seed"])
