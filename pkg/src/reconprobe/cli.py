"""Command-line pipeline: gen-corpus, train, probe, aggregate, report, selftest.

Every subcommand takes the same flags (--config, --seed, --out, --jobs) and
writes only inside --out. Exit status: 0 success, 1 validation error
(bad flags, config, or input files), 2 runtime error.

Files under --out:
  corpus.txt / corpus.conllu   training sentences and gold parses
  probe.txt / probe.conllu     held-out probing sentences
  vocab.txt                    vocab used for training (one token per line, line = id)
  weights.rpw                  weight container (magic RPW1, u32 version, u64 index
                               length, JSON index, raw little-endian float64)
  loss.csv                     step,loss
  records.csv                  sentence_id,condition,source_idx,recon_idx,log_p,log_1mp
  topk.json                    top-k identity recovery rates (FullyContextualized)
  aggregates.json              list of {dimension,key,comparison,count,mean,ci_low,ci_high}
  comparisons.json             per-comparison pair and skipped-key counts
  extreme_pairs.json           most helpful / harmful pairs per comparison
  report/<dimension>.svg|csv|json
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import Dimension, GroupStat, aggregate, annotate_corpus, extreme_pairs, top_k_hit_rate
from .corpus import Grammar, sample_corpus, uncovered_words, write_corpus
from .errors import ConfigError, ValidationError
from .model import ModelConfig, init_weights, load_weights, save_weights
from .probe import ALL_CONDITIONS, COMPARISONS, ProbeCondition, comparison_by_name, probe_corpus, read_records, run_comparison, write_records
from .report import render
from .syntax import FunctionalRelationTable, read_conllu
from .tokenizer import UNK, Vocab, default_vocab, tokenize
from .trainer import TrainConfig, train, write_loss_trace

log = logging.getLogger("reconprobe")

SUBCOMMANDS = ("gen-corpus", "train", "probe", "aggregate", "report", "selftest")

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "corpus": {"count": 1000, "probe_count": 200, "grammar": None},
    "model": {"n_layers": 2, "n_heads": 2, "hidden": 32, "ff_dim": 64, "max_positions": 32,
              "layernorm_eps": 1e-12},
    "train": {"steps": 1000, "batch_size": 32, "lr": 1e-3},
    "probe": {"conditions": [c.value for c in ALL_CONDITIONS],
              "comparisons": [c.name for c in COMPARISONS],
              "max_sentences": None},
    "aggregate": {"dimensions": [d.value for d in Dimension], "include_direct_in_ancestor": False,
                  "n_boot": 1000, "top_n": 100},
    "data": {"conllu": None, "probe_conllu": None, "vocab": None, "weights": None,
             "records": None, "aggregates": None, "functional_table": None},
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(out[k], dict) and k not in ("model", "train"):
            if not isinstance(v, dict):
                raise ConfigError(f"config section {path}{k!r} must be an object")
            out[k] = _merge(out[k], v, f"{path}{k}.")
        elif isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config section {path}{k!r} must be an object")
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def load_run_config(args):
    cfg = DEFAULT_CONFIG
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(DEFAULT_CONFIG, user)
    else:
        cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    for c in cfg["probe"]["conditions"]:
        try:
            ProbeCondition(c)
        except ValueError:
            raise ConfigError(f"unknown probe condition {c!r}") from None
    for c in cfg["probe"]["comparisons"]:
        comparison_by_name(c)
    for d in cfg["aggregate"]["dimensions"]:
        try:
            Dimension(d)
        except ValueError:
            raise ConfigError(f"unknown dimension {d!r}") from None
    for key, value in cfg["data"].items():
        if value is not None and not Path(value).exists():
            raise ConfigError(f"data.{key}: file not found: {value}")
    if cfg["corpus"]["grammar"] is not None and not Path(cfg["corpus"]["grammar"]).exists():
        raise ConfigError(f"corpus.grammar: file not found: {cfg['corpus']['grammar']}")
    return cfg


def _input(cfg, key, out, default_name):
    path = cfg["data"][key] or out / default_name
    if not Path(path).exists():
        raise ConfigError(f"missing input {path} (set data.{key} or run the producing subcommand)")
    return Path(path)


def _vocab(cfg, out):
    if cfg["data"]["vocab"]:
        return Vocab.load(cfg["data"]["vocab"])
    if (out / "vocab.txt").exists():
        return Vocab.load(out / "vocab.txt")
    return default_vocab()


def _tokenized(parses, vocab, max_len=None):
    out = {}
    for s in parses:
        t = tokenize(s.forms, vocab)
        if UNK in t.pieces:
            log.warning("sentence %s contains [UNK] pieces", s.sent_id)
        if max_len is not None and len(t) > max_len:
            raise ConfigError(f"sentence {s.sent_id} has {len(t)} tokens > max_positions {max_len}")
        out[s.sent_id] = t
    return out


def cmd_gen_corpus(cfg, out):
    grammar = Grammar.load(cfg["corpus"]["grammar"]) if cfg["corpus"]["grammar"] else Grammar.default()
    vocab = _vocab(cfg, out)
    missing = uncovered_words(grammar, vocab)
    if missing:
        raise ConfigError(f"grammar words not covered by vocab: {missing}")
    seed = int(cfg["seed"])
    write_corpus(sample_corpus(grammar, int(cfg["corpus"]["count"]), seed), out, "corpus")
    write_corpus(sample_corpus(grammar, int(cfg["corpus"]["probe_count"]), seed + 1), out, "probe")
    log.info("wrote corpus (%d) and probe set (%d) to %s", cfg["corpus"]["count"], cfg["corpus"]["probe_count"], out)


def cmd_train(cfg, out):
    vocab = _vocab(cfg, out)
    parses = read_conllu(_input(cfg, "conllu", out, "corpus.conllu"))
    mcfg = ModelConfig.from_dict({**cfg["model"], "vocab_size": len(vocab)})
    toks = _tokenized(parses, vocab, mcfg.max_positions)
    seed = int(cfg["seed"])
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})
    weights = init_weights(mcfg, np.random.default_rng([seed, 1]))
    weights, trace = train(weights, [t.ids for t in toks.values()], tcfg, progress_every=100)
    save_weights(weights, out / "weights.rpw")
    write_loss_trace(trace, out / "loss.csv")
    vocab.save(out / "vocab.txt")
    log.info("trained %d steps, final loss %.4f", len(trace), trace[-1] if trace else float("nan"))


def cmd_probe(cfg, out):
    vocab = _vocab(cfg, out)
    weights = load_weights(_input(cfg, "weights", out, "weights.rpw"))
    if weights.config.vocab_size != len(vocab):
        raise ConfigError(f"vocab size {len(vocab)} does not match model vocab {weights.config.vocab_size}")
    parses = read_conllu(_input(cfg, "probe_conllu", out, "probe.conllu"))
    limit = cfg["probe"]["max_sentences"]
    if limit is not None:
        parses = parses[: int(limit)]
    toks = _tokenized(parses, vocab, weights.config.max_positions)
    conditions = [ProbeCondition(c) for c in cfg["probe"]["conditions"]]
    records, ranks = probe_corpus(toks.items(), weights, conditions, jobs=int(cfg["jobs"]))
    write_records(records, out / "records.csv")
    if ranks:
        rates = {str(k): top_k_hit_rate(ranks.values(), k) for k in (1, 5, 10)}
        (out / "topk.json").write_text(json.dumps({"pairs": len(ranks), "hit_rate": rates}, indent=1) + "\n")
    log.info("probed %d sentences, %d records", len(toks), len(records))


def cmd_aggregate(cfg, out):
    vocab = _vocab(cfg, out)
    records = read_records(_input(cfg, "records", out, "records.csv"))
    parses = {p.sent_id: p for p in read_conllu(_input(cfg, "probe_conllu", out, "probe.conllu"))}
    table = (FunctionalRelationTable.load(cfg["data"]["functional_table"]) if cfg["data"]["functional_table"]
             else FunctionalRelationTable.default())
    used = sorted({r.sentence_id for r in records})
    missing = [s for s in used if s not in parses]
    if missing:
        raise ConfigError(f"records reference sentences absent from the probe corpus: {missing[:5]}")
    toks = _tokenized([parses[s] for s in used], vocab)
    agg = cfg["aggregate"]
    seed = int(cfg["seed"])
    stats, summary, extremes = [], {}, {}
    for name in cfg["probe"]["comparisons"]:
        result = run_comparison(records, comparison_by_name(name))
        summary[name] = {"pairs": len(result.rows), "skipped": result.skipped}
        if result.skipped:
            log.warning("%s: %d keys without a base counterpart", name, result.skipped)
        if not result.rows:
            continue
        ann = annotate_corpus(toks, parses, table, [k for k, _ in result.rows])
        for dim in agg["dimensions"]:
            stats.extend(aggregate(result.rows, ann, dim, name,
                                   include_direct=bool(agg["include_direct_in_ancestor"]),
                                   n_boot=int(agg["n_boot"]), seed=seed))
        top_n = int(agg["top_n"])
        extremes[name] = {d: extreme_pairs(result.rows, d, top_n, toks, parses) for d in ("helpful", "harmful")}
    (out / "aggregates.json").write_text(json.dumps([s.to_dict() for s in stats], indent=1) + "\n")
    (out / "comparisons.json").write_text(json.dumps(summary, indent=1) + "\n")
    (out / "extreme_pairs.json").write_text(json.dumps(extremes, indent=1) + "\n")
    log.info("wrote %d group statistics", len(stats))


def cmd_report(cfg, out):
    path = _input(cfg, "aggregates", out, "aggregates.json")
    try:
        stats = [GroupStat(**d) for d in json.loads(path.read_text(encoding="utf-8"))]
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{path}: not a GroupStat list ({exc})") from None
    report_dir = out / "report"
    report_dir.mkdir(exist_ok=True)
    written = 0
    for dim in cfg["aggregate"]["dimensions"]:
        sel = [s for s in stats if s.dimension == dim]
        if not sel:
            log.warning("no statistics for dimension %s", dim)
            continue
        render(sel, report_dir / dim, title=f"Reconstruction boost (LOR) by {dim}")
        written += 1
    log.info("rendered %d chart(s) in %s", written, report_dir)


def cmd_selftest(cfg, out):
    from .selftest import run_selftest

    if not run_selftest(out / "selftest", seed=int(cfg["seed"])):
        raise RuntimeError("selftest: one or more invariants failed")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "probe": cmd_probe,
    "aggregate": cmd_aggregate,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def build_parser():
    parser = _Parser(prog="reconprobe", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections: seed, jobs, corpus, model, train, "
                                         "probe, aggregate, data)")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", default="out", help="output directory; nothing is written elsewhere")
    common.add_argument("--jobs", type=int, help="probe worker threads (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    helps = {
        "gen-corpus": "sample training and probing corpora from the grammar",
        "train": "train the masked LM; writes weights.rpw and loss.csv",
        "probe": "collect reconstruction records; writes records.csv and topk.json",
        "aggregate": "group LORs by syntax; writes aggregates.json",
        "report": "render SVG charts and tables from aggregates.json",
        "selftest": "run the invariant suite on a throwaway model",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "reconprobe: error: a subcommand is required")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "selftest" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ValidationError as exc:
        print(f"reconprobe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"reconprobe {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
