"""Command-line interface: ``sleepmodel <subcommand> [options]``.

Every option can also come from a JSON config file (``--config``). Keys at
the top level apply to every subcommand that knows them; a section named
after the subcommand overrides them; explicit flags override both. The
fully resolved configuration is written next to each run's outputs.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import core, decoder, io, neural, ngram, simulator

log = logging.getLogger("sleepmodel")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
MANIFEST = "manifest.json"
HYPNOGRAMS = "hypnograms.hyp"
RUN_CONFIG = "run_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# subcommand -> option defaults; None means "required"
DEFAULTS = {
    "simulate": dict(preset="table1", chain=None, source=None, start="W",
                     emission=None, emission_preset="noisy", diagonal=0.6,
                     records=50, length=simulator.DEFAULT_RECORD_LENGTH, seed=0, out=None),
    "train-ngram": dict(data=None, order=2, k=ngram.DEFAULT_K, interp_lambda=ngram.DEFAULT_LAMBDA,
                        out=None),
    "train-lstm": dict(train=None, valid=None, preset="desk", layers=None, hidden=None,
                       embed_dim=None, learning_rate=None, max_epochs=None, bptt_len=None,
                       batch_size=None, patience=None, seed=0, out=None),
    "eval-ppl": dict(model=None, data=None, out=""),
    "decode": dict(model="", corpus="", likelihoods=[], greedy=False, beam=False,
                   alpha=0.42, width=decoder.DEFAULT_BEAM_WIDTH, out=None),
    "sweep": dict(model=None, corpus=None, alphas=list(decoder.DEFAULT_ALPHA_GRID),
                  widths=[decoder.DEFAULT_BEAM_WIDTH], jobs=1, out=None),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sleepmodel", description="Sleep-stage sequence models and decoding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_, argument_default=S)
        c.add_argument("--config", help="JSON config file")
        return c

    c = cmd("simulate", "generate hypnograms and paired likelihood CSVs")
    c.add_argument("--preset", choices=["table1"])
    c.add_argument("--chain", help="5x5 transition CSV (overrides --preset)")
    c.add_argument("--source", help="higher-order SLM-SOURCE file (overrides --chain)")
    c.add_argument("--start", help="start stage token, or 'stationary'")
    c.add_argument("--emission", help="5x5 confusion CSV")
    c.add_argument("--emission-preset", choices=["noisy", "identity"])
    c.add_argument("--diagonal", type=float, help="diagonal of the noisy preset")
    c.add_argument("--records", type=int)
    c.add_argument("--length", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", help="output directory")

    c = cmd("train-ngram", "count an n-gram sleep model")
    c.add_argument("--data", nargs="+", help=".hyp files or simulate directories")
    c.add_argument("--order", type=int)
    c.add_argument("--k", type=float, help="add-k smoothing constant")
    c.add_argument("--lambda", dest="interp_lambda", type=float,
                   help="interpolation weight of the higher order")
    c.add_argument("--out", help="model file")

    c = cmd("train-lstm", "train an LSTM sleep model")
    c.add_argument("--train", nargs="+")
    c.add_argument("--valid", nargs="+")
    c.add_argument("--preset", choices=sorted(neural.PRESETS))
    for name, typ in [("layers", int), ("hidden", int), ("embed-dim", int),
                      ("learning-rate", float), ("max-epochs", int), ("bptt-len", int),
                      ("batch-size", int), ("patience", int), ("seed", int)]:
        c.add_argument(f"--{name}", type=typ)
    c.add_argument("--out", help="model file")

    c = cmd("eval-ppl", "perplexity of a model on hypnograms")
    c.add_argument("--model", help="model file, or 'uniform'")
    c.add_argument("--data", nargs="+")
    c.add_argument("--out", help="optional CSV report")

    c = cmd("decode", "decode likelihoods into hypnograms")
    c.add_argument("--model", help="sleep model file (needed for --beam)")
    c.add_argument("--corpus", help="simulate output directory")
    c.add_argument("--likelihoods", nargs="+", help="likelihood CSV files")
    mode = c.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true")
    mode.add_argument("--beam", action="store_true")
    c.add_argument("--alpha", type=float)
    c.add_argument("--width", type=int)
    c.add_argument("--out", help="output directory")

    c = cmd("sweep", "grid search over alpha and beam width")
    c.add_argument("--model")
    c.add_argument("--corpus")
    c.add_argument("--alphas", nargs="+", type=float)
    c.add_argument("--widths", nargs="+", type=int)
    c.add_argument("--jobs", type=int)
    c.add_argument("--out", help="CSV report")
    return p


def resolve_config(command: str, flags: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise io.FormatError(f"cannot read config: {exc}", path=path) from None
        if not isinstance(data, dict):
            raise io.FormatError("config must be a JSON object", path=path)
        norm = lambda d: {k.replace("-", "_"): v for k, v in d.items()}
        top = {k: v for k, v in norm(data).items() if k in cfg}
        section = data.get(command, {})
        if not isinstance(section, dict):
            raise io.FormatError(f"section {command!r} must be an object", path=path)
        section = norm(section)
        unknown = set(section) - set(cfg)
        if unknown:
            raise UsageError(f"unknown keys in config section {command!r}: {sorted(unknown)}")
        cfg.update(top)
        cfg.update(section)
    cfg.update(flags)
    missing = [k for k, v in cfg.items() if v is None and k in _REQUIRED[command]]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


_REQUIRED = {
    "simulate": {"out"}, "train-ngram": {"data", "out"}, "train-lstm": {"train", "valid", "out"},
    "eval-ppl": {"model", "data"}, "decode": {"out"}, "sweep": {"model", "corpus", "out"},
}


def _write_config(path: Path, command: str, cfg: dict) -> None:
    path.write_text(json.dumps({"command": command, command: cfg}, indent=2, sort_keys=True)
                    + "\n", encoding="utf-8")


def _as_list(v):
    return [v] if isinstance(v, str) else list(v)


def load_records(paths) -> list[core.Hypnogram]:
    out = []
    for p in _as_list(paths):
        p = Path(p)
        out.extend(io.read_hypnograms(p / HYPNOGRAMS if p.is_dir() else p))
    return out


def load_corpus(directory) -> list[tuple[np.ndarray, core.Hypnogram]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise io.FormatError(f"bad manifest: {exc}", path=str(d / MANIFEST)) from None
    refs = {h.record_id: h for h in io.read_hypnograms(d / manifest["hypnograms"])}
    out = []
    for rec in manifest["records"]:
        lik = io.read_likelihoods(d / rec["likelihoods"])
        ref = refs[rec["id"]]
        if len(lik) != len(ref):
            raise io.FormatError(f"{len(lik)} likelihood rows for {len(ref)} epochs",
                                 path=rec["likelihoods"])
        out.append((lik, ref))
    return out


def load_model(spec: str) -> core.SequenceModel:
    if spec == "uniform":
        return core.UniformModel()
    path = Path(spec)
    text = path.read_text(encoding="utf-8")
    head = text.split("\n", 1)[0].strip()
    try:
        if head.startswith("SLM-NGRAM"):
            return ngram.deserialize_ngram(text)
        if head.startswith("SLM-LSTM"):
            return neural.deserialize_lstm(text)
    except io.FormatError as exc:
        raise io.FormatError(str(exc), path=str(path)) from None
    raise io.FormatError(f"unrecognized model header {head!r}", 1, str(path))


def cmd_simulate(cfg: dict) -> None:
    if cfg["source"]:
        source = simulator.load_source(cfg["source"])
    else:
        if cfg["chain"]:
            transition = io.read_stochastic_matrix(cfg["chain"])
        else:
            transition = simulator.table1_chain().transition
        if cfg["start"] == "stationary":
            init = simulator.stationary_distribution(transition)
        else:
            init = np.eye(core.N_STAGES)[core.SleepStage.from_token(cfg["start"])]
        source = simulator.MarkovChain(transition, init)
    if cfg["emission"]:
        emission = simulator.EmissionModel(io.read_stochastic_matrix(cfg["emission"]))
    elif cfg["emission_preset"] == "identity":
        emission = simulator.EmissionModel.identity()
    else:
        emission = simulator.EmissionModel.symmetric(cfg["diagonal"])
    if cfg["records"] < 1 or cfg["length"] < 1:
        raise UsageError("--records and --length must be positive")
    data = simulator.simulate_dataset(source, emission, cfg["records"], cfg["length"],
                                      cfg["seed"])
    out = Path(cfg["out"])
    (out / "likelihoods").mkdir(parents=True, exist_ok=True)
    io.write_hypnograms(out / HYPNOGRAMS, [h for _, h in data])
    entries = []
    for lik, hyp in data:
        rel = f"likelihoods/{hyp.record_id}.csv"
        io.write_likelihoods(out / rel, lik)
        entries.append({"id": hyp.record_id, "epochs": len(hyp), "likelihoods": rel})
    manifest = {"hypnograms": HYPNOGRAMS, "records": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    _write_config(out / RUN_CONFIG, "simulate", cfg)
    print(f"wrote {len(data)} records to {out}")


def cmd_train_ngram(cfg: dict) -> None:
    records = load_records(cfg["data"])
    try:
        model = ngram.train_ngram(records, cfg["order"], cfg["k"], cfg["interp_lambda"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ngram.serialize_ngram(model), encoding="utf-8")
    _write_config(out.with_name(out.name + ".config.json"), "train-ngram", cfg)
    print(f"trained order-{model.order} model on {sum(map(len, records))} epochs -> {out}")


def cmd_train_lstm(cfg: dict) -> None:
    base = neural.PRESETS[cfg["preset"]]
    try:
        config = neural.with_overrides(
            base, layers=cfg["layers"], hidden=cfg["hidden"], embed_dim=cfg["embed_dim"],
            learning_rate=cfg["learning_rate"], max_epochs=cfg["max_epochs"],
            bptt_len=cfg["bptt_len"], batch_size=cfg["batch_size"],
            patience=cfg["patience"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, history = neural.train_lstm(load_records(cfg["train"]), load_records(cfg["valid"]),
                                       config, log=log.info)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(neural.serialize_lstm(model), encoding="utf-8")
    hist = ["epoch,valid_perplexity"] + [f"{i + 1},{p:.6f}" for i, p in enumerate(history)]
    out.with_name(out.name + ".history.csv").write_text("\n".join(hist) + "\n", encoding="utf-8")
    _write_config(out.with_name(out.name + ".config.json"), "train-lstm", cfg)
    print(f"best valid perplexity {min(history):.6f} after {len(history)} epochs -> {out}")


def cmd_eval_ppl(cfg: dict) -> None:
    model = load_model(cfg["model"])
    records = load_records(cfg["data"])
    lines = ["record,epochs,perplexity"]
    for rec in records:
        lines.append(f"{rec.record_id},{len(rec)},{core.perplexity(model, [rec]):.6f}")
    total = core.perplexity(model, records)
    lines.append(f"ALL,{sum(map(len, records))},{total:.6f}")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.write_text(report, encoding="utf-8")
        _write_config(out.with_name(out.name + ".config.json"), "eval-ppl", cfg)


def cmd_decode(cfg: dict) -> None:
    if cfg["corpus"]:
        pairs = [(lik, ref.record_id, ref) for lik, ref in load_corpus(cfg["corpus"])]
    elif cfg["likelihoods"]:
        pairs = [(io.read_likelihoods(p), Path(p).stem, None)
                 for p in _as_list(cfg["likelihoods"])]
    else:
        raise UsageError("decode needs --corpus or --likelihoods")
    if cfg["beam"] and not cfg["model"]:
        raise UsageError("--beam needs --model")
    use_beam = cfg["beam"] or (not cfg["greedy"] and bool(cfg["model"]))
    if use_beam:
        try:
            dcfg = decoder.DecoderConfig(cfg["alpha"], cfg["width"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        model = load_model(cfg["model"])
    decoded, refs = [], []
    for lik, rid, ref in pairs:
        if use_beam:
            hyp, _ = decoder.beam_decode(lik, model, dcfg, rid)
        else:
            hyp = decoder.greedy_decode(lik, rid)
        decoded.append(hyp)
        if ref is not None:
            refs.append(ref)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_hypnograms(out / "decoded.hyp", decoded)
    _write_config(out / RUN_CONFIG, "decode", cfg)
    if refs and len(refs) == len(decoded):
        pred = np.concatenate([h.indices() for h in decoded])
        truth = np.concatenate([h.indices() for h in refs])
        acc, kappa = core.accuracy(pred, truth), core.cohen_kappa(pred, truth)
        (out / "metrics.csv").write_text(f"accuracy,kappa\n{acc:.6f},{kappa:.6f}\n",
                                         encoding="utf-8")
        print(f"accuracy {acc:.6f} kappa {kappa:.6f}")
    print(f"decoded {len(decoded)} records -> {out / 'decoded.hyp'}")


def cmd_sweep(cfg: dict) -> None:
    model = load_model(cfg["model"])
    records = load_corpus(cfg["corpus"])
    rows = decoder.sweep(records, model, cfg["alphas"], cfg["widths"], jobs=cfg["jobs"])
    report = decoder.format_sweep(rows)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report, encoding="utf-8")
    _write_config(out.with_name(out.name + ".config.json"), "sweep", cfg)
    sys.stdout.write(report)


COMMANDS = {
    "simulate": cmd_simulate, "train-ngram": cmd_train_ngram, "train-lstm": cmd_train_lstm,
    "eval-ppl": cmd_eval_ppl, "decode": cmd_decode, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    try:
        cfg = resolve_config(args.command, flags)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"sleepmodel {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except decoder.SweepError as exc:
        print(f"sleepmodel {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, ArithmeticError) else EXIT_DATA
    except ArithmeticError as exc:
        print(f"sleepmodel {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"sleepmodel {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
