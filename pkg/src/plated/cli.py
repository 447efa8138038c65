"""Command-line entry point: ``plated <subcommand> ...``."""

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import lab, lang, vision
from .corpus import apply_manifest, drop_incomplete, load_recipes, read_manifest, split, write_manifest
from .ndnum import CheckpointError
from .normalize import IngredientVocabulary, build_vocabulary, encode_targets, refine

log = logging.getLogger("plated")


class UserError(Exception):
    """Bad flags or bad input files; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


@contextlib.contextmanager
def user_input(what):
    """Turn load/parse failures into UserError so they exit with 1."""
    try:
        yield
    except UserError:
        raise
    except (OSError, ValueError, KeyError, CheckpointError) as exc:
        raise UserError(f"{what}: {exc}") from exc


def default_seed():
    raw = os.environ.get("PLATED_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UserError(f"PLATED_SEED must be an integer, got {raw!r}") from None


def echo(args):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps(cfg, sort_keys=True), flush=True)


def require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UserError(f"no such file: {p}")


def map_path(vocab_path):
    return Path(f"{vocab_path}.map.tsv")


def run_seed(seed, run_id):
    return int(np.random.SeedSequence([seed, run_id]).generate_state(1)[0])


# -- shared loaders ----------------------------------------------------------

def load_splits(recipes_path, split_path):
    require_files(recipes_path, split_path)
    with user_input("recipes"):
        recipes = drop_incomplete(load_recipes(recipes_path))
    with user_input("split manifest"):
        return apply_manifest(recipes, read_manifest(split_path))


def load_vocab(vocab_path):
    if vocab_path is None:
        raise UserError("--vocab is required for ingredient models")
    require_files(vocab_path)
    mp = map_path(vocab_path)
    with user_input("vocabulary"):
        return IngredientVocabulary.load(vocab_path, mp if mp.is_file() else None)


def feature_set(recipes, table, vocab):
    keep = [r for r in recipes if r.image_name in table.rows]
    if len(keep) < len(recipes):
        log.warning("%d recipes have no feature row and were dropped", len(recipes) - len(keep))
    x = table.matrix([r.image_name for r in keep])
    y = np.stack([encode_targets(r, vocab) for r in keep]) if keep else np.zeros((0, len(vocab)), np.float32)
    return vision.ArraySource(x), y


def image_set(recipes, image_dir, vocab, size, policy=None):
    paths, keep = [], []
    for r in recipes:
        p = vision.find_image(image_dir, r.image_name)
        if p is None:
            continue
        paths.append(p)
        keep.append(r)
    if len(keep) < len(recipes):
        log.warning("%d recipes have no image file and were dropped", len(recipes) - len(keep))
    y = np.stack([encode_targets(r, vocab) for r in keep]) if keep else np.zeros((0, len(vocab)), np.float32)
    return vision.ImageSource(paths, size, policy), y


def ingredient_text(recipe):
    return ", ".join(recipe.cleaned_ingredients)


def instruction_data(splits, max_vocab, pad_cap):
    train_pairs = [(ingredient_text(r), r.instructions) for r in splits.train]
    val_pairs = [(ingredient_text(r), r.instructions) for r in splits.val]
    if not train_pairs or not val_pairs:
        raise UserError("train and val splits must be non-empty")
    it = lang.fit_tokenizer([a for a, _ in train_pairs], max_vocab)
    ot = lang.fit_tokenizer([b for _, b in train_pairs], max_vocab)
    L = lang.pad_length(it, ot, train_pairs, pad_cap)
    return it, ot, L, lang.encode_pairs(it, ot, train_pairs, L), lang.encode_pairs(it, ot, val_pairs, L)


def write_tokenizers(ckpt, it, ot, L):
    it.save(f"{ckpt}.ingr.json")
    ot.save(f"{ckpt}.instr.json")
    with open(f"{ckpt}.json") as fh:
        meta = json.load(fh)
    meta["pad_len"] = L
    with open(f"{ckpt}.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_meta(ckpt):
    require_files(ckpt, f"{ckpt}.json")
    with user_input("checkpoint"):
        with open(f"{ckpt}.json", encoding="utf-8") as fh:
            return json.load(fh)


# -- subcommands -------------------------------------------------------------

def cmd_normalize(args):
    require_files(args.recipes, args.split)
    with user_input("recipes"):
        recipes = drop_incomplete(load_recipes(args.recipes))
        if args.split:
            recipes = apply_manifest(recipes, read_manifest(args.split)).train
    if not recipes:
        raise UserError("no complete recipes to build a vocabulary from")
    if not 0 < args.top_percent <= 1 or args.max_vocab < 1:
        raise UserError("--top-percent must be in (0, 1] and --max-vocab >= 1")
    counts, aliases = refine([r.cleaned_ingredients for r in recipes])
    vocab = build_vocabulary(counts, args.top_percent, args.max_vocab, aliases)
    vocab.save(args.out, map_path(args.out))
    log.info("kept %d of %d canonical ingredients", len(vocab), len(counts))


def cmd_split(args):
    require_files(args.recipes)
    with user_input("recipes"):
        recipes = drop_incomplete(load_recipes(args.recipes))
        s = split(recipes, args.seed)
    write_manifest(s, args.out)
    log.info("train %d / val %d / test %d", len(s.train), len(s.val), len(s.test))


def _train_cfg(args, batch_size, lr, seed):
    return vision.TrainConfig(batch_size=batch_size, learning_rate=lr, max_epochs=args.max_epochs,
                              patience=args.patience, threshold=args.threshold, seed=seed)


def _cnn_trainer(args, splits, vocab):
    if args.images is None or not Path(args.images).is_dir():
        raise UserError(f"no such image directory: {args.images}")

    def train(config, run_id, checkpoint):
        reg = config["regularization"]
        cfg = vision.CnnConfig(blocks=config["blocks"], dropout=0.7 if reg else 0.0,
                               l2=1e-3 if reg else 0.0, labels=len(vocab), input_size=args.input_size)
        policy = vision.AugmentPolicy(enabled=config["augmentation"])
        tr = image_set(splits.train, args.images, vocab, args.input_size, policy)
        va = image_set(splits.val, args.images, vocab, args.input_size)
        seed = run_seed(args.seed, run_id)
        model = vision.build_custom_cnn(cfg, seed=seed)
        rec = vision.train_ingredient_model(model, tr, va, _train_cfg(args, config["batch_size"],
                                            config["learning_rate"], seed), checkpoint)
        _add_labels(checkpoint, vocab, args)
        return rec

    return train


def _transfer_trainer(args, splits, vocab):
    if args.features is None:
        raise UserError("--features is required for the transfer head")
    require_files(args.features)
    with user_input("features"):
        table = vision.load_features(args.features)
    tr = feature_set(splits.train, table, vocab)
    va = feature_set(splits.val, table, vocab)
    if len(tr[0]) == 0 or len(va[0]) == 0:
        raise UserError("no train/val recipes have feature rows")

    def train(config, run_id, checkpoint):
        # augmentation cannot act on precomputed features; the axis is recorded only
        seed = run_seed(args.seed, run_id)
        model = vision.build_transfer_head(table.dim, len(vocab), config["dropout"], seed=seed)
        rec = vision.train_ingredient_model(model, tr, va, _train_cfg(args, config["batch_size"],
                                            config["learning_rate"], seed), checkpoint)
        _add_labels(checkpoint, vocab, args)
        return rec

    return train


def _instruction_trainer(args, splits):
    it, ot, L, train_set, val_set = instruction_data(splits, args.max_vocab, args.pad_cap)
    glove = {50: args.glove50, 100: args.glove100}
    embeddings = {}
    for dim, path in glove.items():
        if path is not None:
            require_files(path)
            with user_input(f"GloVe {dim}"):
                embeddings[dim] = lang.load_glove(path, it, dim, seed=args.seed)

    def train(config, run_id, checkpoint):
        reg = config["regularization"]
        pre = config["pretrained"]
        if pre and pre not in embeddings:
            raise ValueError(f"pretrained={pre} needs --glove{pre}")
        cfg = lang.InstrModelConfig(units=config["units"], bidirectional=args.bidirectional,
                                    use_pretrained=bool(pre), dropout=0.8 if reg else 0.0,
                                    l2=1e-2 if reg else 0.0, layer_norm=reg, embed_dim=pre or 50)
        seed = run_seed(args.seed, run_id)
        model = lang.build_instruction_model(cfg, len(it), len(ot), embeddings.get(pre), seed=seed)
        rec = lang.train_instruction_model(model, train_set, val_set, config["learning_rate"],
                                           config["batch_size"], args.max_epochs, args.patience,
                                           seed, checkpoint)
        if checkpoint is not None:
            write_tokenizers(checkpoint, it, ot, L)
        return rec

    return train


def _add_labels(checkpoint, vocab, args):
    if checkpoint is None:
        return
    with open(f"{checkpoint}.json") as fh:
        meta = json.load(fh)
    meta["label_names"] = list(vocab.labels)
    meta["vocab"] = str(args.vocab)
    with open(f"{checkpoint}.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def _single_run(args, kind, config):
    splits = load_splits(args.recipes, args.split)
    if kind == "instruction":
        trainer = _instruction_trainer(args, splits)
    else:
        vocab = load_vocab(args.vocab)
        trainer = (_cnn_trainer if kind == "cnn" else _transfer_trainer)(args, splits, vocab)
    rec = trainer(config, 0, args.out)
    rec.config = config
    print(rec.to_json())


def cmd_train_cnn(args):
    _single_run(args, "cnn", {"batch_size": args.batch_size, "blocks": args.blocks,
                              "learning_rate": args.learning_rate, "augmentation": args.augmentation,
                              "regularization": args.regularization})


def cmd_train_head(args):
    _single_run(args, "transfer", {"batch_size": args.batch_size, "learning_rate": args.learning_rate,
                                   "augmentation": False, "dropout": args.dropout})


def cmd_train_instr(args):
    pre = args.glove_dim if (args.glove50 or args.glove100) else 0
    _single_run(args, "instruction", {"units": args.units, "learning_rate": args.learning_rate,
                                      "batch_size": args.batch_size, "pretrained": pre,
                                      "regularization": args.regularization})


def cmd_search(args):
    if args.runs < 1 or args.workers < 1:
        raise UserError("--runs and --workers must be >= 1")
    spaces = dict(zip(("cnn", "transfer", "instruction"), lab.default_spaces(args.runs, args.seed)))
    space = spaces[args.kind]
    splits = load_splits(args.recipes, args.split)
    if args.kind == "instruction":
        trainer = _instruction_trainer(args, splits)
    else:
        vocab = load_vocab(args.vocab)
        trainer = (_cnn_trainer if args.kind == "cnn" else _transfer_trainer)(args, splits, vocab)
    if Path(args.out).exists():
        with user_input("run log"):
            lab.read_records(args.out)
    ckdir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    def one(config, run_id):
        ck = ckdir / f"run_{run_id:03d}.pltd" if ckdir else None
        return trainer(config, run_id, ck)

    records = lab.run_search(space, one, args.out, workers=args.workers, record_time=args.timing)
    mode = "min" if args.kind == "instruction" else "max"
    ok = [r for r in records if r.status == "ok"]
    if ok:
        best = lab.select_best(records, mode)
        print(json.dumps({"best_run": best.run_id, "best_value": best.best_value, "config": best.config},
                         sort_keys=True))


def _load_any(ckpt, meta):
    with user_input("checkpoint"):
        if meta.get("kind") == "instruction":
            return lang.load_model(ckpt)
        return vision.load_model(ckpt)


def cmd_predict(args):
    meta = read_meta(args.checkpoint)
    if meta.get("kind") == "instruction":
        if args.ingredients is None:
            raise UserError("instruction checkpoints need --ingredients TEXT")
        require_files(f"{args.checkpoint}.ingr.json", f"{args.checkpoint}.instr.json")
        with user_input("tokenizers"):
            it = lang.Tokenizer.load(f"{args.checkpoint}.ingr.json")
            ot = lang.Tokenizer.load(f"{args.checkpoint}.instr.json")
        model = _load_any(args.checkpoint, meta)
        ids = lang.encode_pad(it, args.ingredients, meta["pad_len"]).ids
        print(" ".join(lang.generate(model, ids, ot)))
        return
    if not 0 < args.threshold < 1:
        raise UserError("--threshold must be in (0, 1)")
    if meta.get("kind") == "transfer":
        if args.features is None or args.image_name is None:
            raise UserError("transfer checkpoints need --features and --image-name")
        require_files(args.features)
        with user_input("features"):
            x = vision.load_features(args.features).rows[args.image_name]
    else:
        if args.image is None:
            raise UserError("CNN checkpoints need --image PATH")
        require_files(args.image)
        with user_input("image"):
            x = vision.decode_and_preprocess(args.image, meta["config"]["input_size"])
    model = _load_any(args.checkpoint, meta)
    for label, conf in vision.predict_ingredients(model, x, meta["label_names"], args.threshold):
        print(f"{label}\t{conf:.6f}")


def cmd_eval(args):
    meta = read_meta(args.checkpoint)
    splits = load_splits(args.recipes, args.split)
    recipes = getattr(splits, args.set)
    if not recipes:
        raise UserError(f"the {args.set} split is empty")
    model = _load_any(args.checkpoint, meta)
    if meta.get("kind") == "instruction":
        with user_input("tokenizers"):
            it = lang.Tokenizer.load(f"{args.checkpoint}.ingr.json")
            ot = lang.Tokenizer.load(f"{args.checkpoint}.instr.json")
        data = lang.encode_pairs(it, ot, [(ingredient_text(r), r.instructions) for r in recipes],
                                 meta["pad_len"])
        report = lang.evaluate(model, data)
    else:
        vocab = load_vocab(args.vocab or meta.get("vocab"))
        if list(vocab.labels) != meta["label_names"]:
            raise UserError("vocabulary labels differ from the checkpoint's labels")
        if meta["kind"] == "transfer":
            if args.features is None:
                raise UserError("transfer checkpoints need --features")
            require_files(args.features)
            with user_input("features"):
                src, y = feature_set(recipes, vision.load_features(args.features), vocab)
        else:
            if not args.images:
                raise UserError("CNN checkpoints need --images DIR")
            src, y = image_set(recipes, args.images, vocab, meta["config"]["input_size"])
        report = vision.evaluate(model, src, y, args.threshold)
    print("metric,value")
    for k in sorted(report):
        print(f"{k},{report[k]!r}")


def cmd_report(args):
    require_files(args.runs)
    with user_input("run log"):
        records = lab.read_records(args.runs)
        summary = lab.summarize_by_axis(records, args.axis)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            lab.write_summary_csv(summary, args.axis, fh)
    else:
        lab.write_summary_csv(summary, args.axis, sys.stdout)


# -- parser ------------------------------------------------------------------

def _bool(text):
    v = text.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _data_flags(p, vocab=True):
    p.add_argument("--recipes", required=True, type=Path)
    p.add_argument("--split", required=True, type=Path)
    if vocab:
        p.add_argument("--vocab", type=Path, help="vocabulary TSV written by `normalize`")


def _train_flags(p):
    p.add_argument("--max-epochs", type=int, default=25)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.5)


def _instr_flags(p):
    p.add_argument("--glove50", type=Path)
    p.add_argument("--glove100", type=Path)
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--max-vocab", type=int, default=None)
    p.add_argument("--pad-cap", type=int, default=None, help="truncate sequences to this length")


def build_parser():
    seed = default_seed()
    parser = _Parser(prog="plated", description="Food image to recipe pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("normalize", help="build the ingredient vocabulary")
    p.add_argument("--recipes", required=True, type=Path)
    p.add_argument("--split", type=Path, help="restrict to the train split of this manifest")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--top-percent", type=float, default=0.01)
    p.add_argument("--max-vocab", type=int, default=200)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("split", help="write a 64/16/20 split manifest")
    p.add_argument("--recipes", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-cnn", help="train the custom CNN")
    _data_flags(p)
    p.add_argument("--images", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--blocks", type=int, default=4, choices=(3, 4, 5))
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--augmentation", type=_bool, default=False)
    p.add_argument("--regularization", type=_bool, default=False)
    p.add_argument("--input-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=seed)
    _train_flags(p)
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("train-head", help="train the transfer head on a feature file")
    _data_flags(p)
    p.add_argument("--features", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=seed)
    _train_flags(p)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("train-instr", help="train the instruction LSTM")
    _data_flags(p, vocab=False)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--units", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--regularization", type=_bool, default=False)
    p.add_argument("--glove-dim", type=int, default=50, choices=(50, 100))
    p.add_argument("--seed", type=int, default=seed)
    _instr_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_instr)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--kind", required=True, choices=("cnn", "transfer", "instruction"))
    _data_flags(p)
    p.add_argument("--out", required=True, type=Path, help="JSONL run log (resumed if present)")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--checkpoint-dir", type=Path)
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds per run")
    p.add_argument("--images", type=Path)
    p.add_argument("--features", type=Path)
    p.add_argument("--input-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=seed)
    _instr_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("predict", help="predict ingredients (or instructions) for one input")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--features", type=Path)
    p.add_argument("--image-name")
    p.add_argument("--image", type=Path)
    p.add_argument("--ingredients")
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, type=Path)
    _data_flags(p)
    p.add_argument("--set", default="test", choices=("train", "val", "test"))
    p.add_argument("--features", type=Path)
    p.add_argument("--images", type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="mean best value per axis value")
    p.add_argument("--runs", required=True, type=Path)
    p.add_argument("--axis", required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"plated: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    echo(args)
    try:
        args.func(args)
    except UserError as exc:
        print(f"plated: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is our bug
        log.exception("internal error")
        print(f"plated: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
