"""Stage 2: ingredient token sequences in, instruction token sequences out."""

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics
from .lab import EarlyStopping, RunRecord
from .ndnum import (
    LSTM, Activation, Adam, Dense, Dropout, Embedding, LayerNorm, Sequential, cce,
    load_arrays, save_arrays,
)
from .ndnum.params import FLOAT

log = logging.getLogger(__name__)

PAD, UNK, START, END = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<start>", "<end>")
SPECIAL = frozenset((PAD, START, END))
NON_WORD = (PAD, UNK, START, END)

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text):
    return _WORD.findall(text.lower())


class Tokenizer:
    """Frozen word <-> id maps with the four reserved ids first."""

    def __init__(self, word_index):
        ids = sorted(word_index.values())
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be dense from 0")
        for i, w in enumerate(RESERVED):
            if word_index.get(w) != i:
                raise ValueError(f"reserved token {w!r} must have id {i}")
        self.word_index = dict(word_index)
        self.index_word = {i: w for w, i in word_index.items()}

    def __len__(self):
        return len(self.word_index)

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.word_index == other.word_index

    def ids(self, text):
        return [self.word_index.get(w, UNK) for w in tokenize(text)]

    def words(self, ids):
        return [self.index_word[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.word_index, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


def fit_tokenizer(texts, max_vocab=None):
    """Rank words by descending frequency, ties lexicographic.

    ``max_vocab`` counts the reserved ids.
    """
    counts = Counter()
    for t in texts:
        counts.update(tokenize(t))
    if not counts:
        raise ValueError("cannot fit a tokenizer on an empty corpus")
    if max_vocab is not None and max_vocab <= len(RESERVED):
        raise ValueError(f"max_vocab must exceed {len(RESERVED)} reserved ids")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if max_vocab is not None:
        ranked = ranked[:max_vocab - len(RESERVED)]
    index = {w: i for i, w in enumerate(RESERVED)}
    index.update({w: i + len(RESERVED) for i, w in enumerate(ranked)})
    return Tokenizer(index)


@dataclass
class TokenSequence:
    ids: list
    true_length: int


def encode_pad(tok, text, pad_len):
    if pad_len < 1:
        raise ValueError("pad_len must be >= 1")
    body = [START] + tok.ids(text)
    body = body[:pad_len - 1] + [END]
    body = body[-pad_len:]
    n = len(body)
    return TokenSequence(body + [PAD] * (pad_len - n), n)


def decode(tok, ids):
    """Words for ``ids`` with PAD/START/END dropped."""
    return [tok.index_word[i] for i in ids if i not in SPECIAL]


def sequence_length(tok, text):
    return len(tok.ids(text)) + 2


# -- embeddings --------------------------------------------------------------

@dataclass
class EmbeddingMatrix:
    table: np.ndarray
    frozen: bool
    coverage: float


def load_glove(path, tok, dim=50, seed=0, frozen=True):
    """Copy vectors for vocabulary words; other rows uniform in [-0.05, 0.05], PAD zero.

    Coverage is the fraction of non-reserved vocabulary words found.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.05, 0.05, size=(len(tok), dim)).astype(FLOAT)
    found = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            word = parts[0]
            i = tok.word_index.get(word)
            if i is None or i < len(RESERVED):
                continue
            if i in found:
                log.warning("%s:%d: duplicate vector for %r ignored", path, lineno, word)
                continue
            table[i] = np.array(parts[1:], dtype=FLOAT)
            found.add(i)
    table[PAD] = 0
    content = len(tok) - len(RESERVED)
    coverage = len(found) / content if content else 0.0
    log.info("embedding coverage %.3f (%d/%d)", coverage, len(found), content)
    return EmbeddingMatrix(table, frozen, coverage)


# -- model -------------------------------------------------------------------

@dataclass
class InstrModelConfig:
    units: int = 32
    bidirectional: bool = False
    use_pretrained: bool = False
    dropout: float = 0.0
    l2: float = 0.0
    layer_norm: bool = False
    embed_dim: int = 50

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("units must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


def build_instruction_model(cfg, ingredient_vocab_size, instr_vocab_size, embedding=None, seed=0):
    """Embedding -> (bi)LSTM -> [layer norm] -> [dropout] -> time-distributed dense softmax.

    ``embedding`` (an EmbeddingMatrix) is required when ``cfg.use_pretrained``.
    The model maps [N, L] ingredient ids to [N, L, instr_vocab_size].
    """
    rng = np.random.default_rng(seed)
    if cfg.use_pretrained:
        if embedding is None:
            raise ValueError("use_pretrained needs an embedding matrix")
        if embedding.table.shape[0] != ingredient_vocab_size:
            raise ValueError("embedding rows do not match the ingredient vocabulary")
        emb = Embedding(ingredient_vocab_size, embedding.table.shape[1],
                        table=embedding.table.copy(), frozen=embedding.frozen)
    else:
        emb = Embedding(ingredient_vocab_size, cfg.embed_dim, rng)
    lstm = LSTM(emb.dim, cfg.units, rng, bidirectional=cfg.bidirectional, l2=cfg.l2)
    layers = [emb, lstm]
    if cfg.layer_norm:
        layers.append(LayerNorm(lstm.width))
    if cfg.dropout > 0:
        layers.append(Dropout(cfg.dropout, np.random.default_rng([seed, len(layers)])))
    layers += [Dense(lstm.width, instr_vocab_size, rng, l2=cfg.l2), Activation("softmax")]
    meta = {"kind": "instruction", "config": asdict(cfg), "ingredient_vocab": ingredient_vocab_size,
            "instr_vocab": instr_vocab_size, "embed_dim": emb.dim,
            "frozen": bool(cfg.use_pretrained and embedding.frozen), "seed": seed}
    return Sequential(layers, name="instruction_lstm", meta=meta)


def model_from_meta(meta):
    cfg = InstrModelConfig(**meta["config"])
    emb = None
    if cfg.use_pretrained:
        # weights come from the checkpoint; only the shape matters here
        emb = EmbeddingMatrix(np.zeros((meta["ingredient_vocab"], meta["embed_dim"]), FLOAT),
                              meta["frozen"], 1.0)
    return build_instruction_model(cfg, meta["ingredient_vocab"], meta["instr_vocab"], emb,
                                   meta.get("seed", 0))


def save_model(model, path):
    save_arrays(path, model.state_dict())
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(model.meta, fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(f"{path}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = model_from_meta(meta)
    model.load_state_dict(load_arrays(path))
    return model


# -- data --------------------------------------------------------------------

@dataclass
class PairSet:
    inputs: np.ndarray   # [N, L] ingredient ids
    targets: np.ndarray  # [N, L] instruction ids

    def __len__(self):
        return len(self.inputs)


def encode_pairs(ingr_tok, instr_tok, pairs, pad_len):
    """(ingredient text, instruction text) pairs -> PairSet padded to ``pad_len``."""
    x = [encode_pad(ingr_tok, a, pad_len).ids for a, _ in pairs]
    y = [encode_pad(instr_tok, b, pad_len).ids for _, b in pairs]
    return PairSet(np.array(x, dtype=np.int64).reshape(-1, pad_len),
                   np.array(y, dtype=np.int64).reshape(-1, pad_len))


def pad_length(ingr_tok, instr_tok, pairs, cap=None):
    """Longest ingredient or instruction sequence (with START/END), optionally capped."""
    n = max(max(sequence_length(ingr_tok, a), sequence_length(instr_tok, b)) for a, b in pairs)
    return min(n, cap) if cap else n


def batch_generator(data, batch_size, rng):
    """One epoch of shuffled (inputs, targets, mask) batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        y = data.targets[idx]
        yield data.inputs[idx], y, (y != PAD).astype(FLOAT)


def evaluate(model, data, batch_size=64):
    dists, ys = [], []
    for start in range(0, len(data), batch_size):
        dists.append(model.forward(data.inputs[start:start + batch_size], train=False))
        ys.append(data.targets[start:start + batch_size])
    dist, y = np.concatenate(dists), np.concatenate(ys)
    mask = y != PAD
    loss, _ = cce(dist, y, mask)
    return {"loss": loss, "perplexity": metrics.perplexity(dist, y, mask),
            "accuracy": metrics.token_accuracy(dist, y, mask)}


def train_instruction_model(model, train, val, learning_rate, batch_size, max_epochs=25,
                            patience=3, seed=0, checkpoint=None):
    """Masked-CCE Adam training with early stopping on val perplexity."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation pairs must be non-empty")
    rng = np.random.default_rng(seed)
    model.reseed(seed)
    params = model.params()
    opt = Adam(learning_rate)
    stopper = EarlyStopping(patience, mode="min")
    rows = []
    for epoch in range(max_epochs):
        nll, hits, count = 0.0, 0, 0
        for x, y, mask in batch_generator(train, batch_size, rng):
            params.zero_grad()
            dist = model.forward(x, train=True)
            loss, grad = cce(dist, y, mask)
            model.backward(grad)
            opt.step(params)
            m = int(mask.sum())
            nll += loss * m
            hits += int(((dist.argmax(-1) == y) & (mask > 0)).sum())
            count += m
        va = evaluate(model, val)
        rows.append({
            "epoch": epoch,
            "train_loss": nll / count, "val_loss": va["loss"],
            "train_perplexity": math.exp(nll / count), "val_perplexity": va["perplexity"],
            "train_accuracy": hits / count, "val_accuracy": va["accuracy"],
            "val_metric": va["perplexity"],
        })
        log.info("epoch %d train_ppl=%.4f val_ppl=%.4f", epoch, rows[-1]["train_perplexity"],
                 va["perplexity"])
        if stopper.update(epoch, va["perplexity"], state=model.state_dict):
            break
    model.load_state_dict(stopper.best_state)
    rec = RunRecord(epochs=rows, best_epoch=stopper.best_epoch, best_value=stopper.best)
    if checkpoint is not None:
        save_model(model, checkpoint)
        rec.checkpoint = str(checkpoint)
    return rec


def greedy_ids(dist):
    """Per-position argmax; a non-word id wins only when strictly more probable than every word."""
    ids = list(NON_WORD)
    content = dist.copy()
    content[..., ids] = -np.inf
    best = content.argmax(-1)
    best_p = np.take_along_axis(dist, best[..., None], -1)[..., 0]
    other = dist[..., ids]
    choice = np.array(ids)[other.argmax(-1)]
    return np.where(other.max(-1) > best_p, choice, best)


def generate(model, ingredient_ids, instr_tok):
    """Greedy decode of one padded ingredient id sequence into instruction words."""
    dist = model.forward(np.asarray(ingredient_ids, dtype=np.int64)[None], train=False)[0]
    return decode(instr_tok, greedy_ids(dist).tolist())
