"""Command line interface: preprocess, train, translate, segment, eval, split, serve.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
Any option not listed by a subcommand is read as a configuration override,
e.g. `--beam 3` or `--training.lr 5e-4`.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, apply_thread_env, load_config, parse_overrides
from .numerics import NumericalError

log = logging.getLogger("segmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- #
# file helpers
# --------------------------------------------------------------------------- #


def read_lines(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").rstrip("\r") for line in fh]


def read_parallel(src: str, tgt: str) -> list[tuple[str, str]]:
    a, b = read_lines(src), read_lines(tgt)
    if len(a) != len(b):
        raise ValueError(f"{src} has {len(a)} lines but {tgt} has {len(b)}")
    pairs = [(s, t) for s, t in zip(a, b) if s.strip() and t.strip()]
    if not pairs:
        raise ValueError(f"no non-empty sentence pairs in {src} / {tgt}")
    return pairs


def write_lines(path: str | Path | None, lines: Sequence[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str | Path, command: str, cfg: RunConfig, inputs: dict, outputs: dict,
                   **extra) -> None:
    """Inputs and outputs with content hashes plus the config hash, as JSON."""
    def described(files: dict) -> dict:
        return {name: {"path": str(p), "sha256": file_digest(p)} for name, p in files.items()
                if p is not None and Path(p).is_file()}

    manifest = {"command": command, "config_sha256": cfg.digest(), "config": cfg.to_dict(),
                "inputs": described(inputs), "outputs": described(outputs), **extra}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(value: str, what: str) -> str:
    if not value:
        raise UsageError(f"{what} is not set (config file or --{what.split('.')[-1]})")
    return value


def _checkpoint_path(cfg: RunConfig, given: str | None) -> Path:
    path = Path(given) if given else Path(cfg.paths.checkpoint_dir) / "best.ckpt"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def load_translator(cfg: RunConfig, checkpoint: str | None):
    from .pipeline import Artifacts, Translator
    from .training import load_model
    art = Artifacts.load(cfg.paths.artifacts_dir)
    model, _, _ = load_model(_checkpoint_path(cfg, checkpoint))
    return Translator(model, art)


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def cmd_preprocess(cfg: RunConfig, args) -> int:
    from .pipeline import build_artifacts
    src, tgt = _require(cfg.paths.train_src, "paths.train_src"), _require(cfg.paths.train_tgt, "paths.train_tgt")
    pairs = read_parallel(src, tgt)
    pp = cfg.preprocess
    art = build_artifacts([s for s, _ in pairs], [t for _, t in pairs], pp.merges, pp.lexicon_size, pp.max_seg_len)
    outdir = Path(cfg.paths.artifacts_dir)
    outputs = art.save(outdir)
    write_manifest(outdir / "manifest.json", "preprocess", cfg, {"train_src": src, "train_tgt": tgt}, outputs,
                   lexicon_size=len(art.lex), max_seg_len=art.m, merges=len(art.bpe.merges),
                   char_vocab_size=len(art.vocab), source_vocab_size=len(art.src_vocab))
    log.info("wrote artifacts to %s (V=%d, m=%d, %d merges)", outdir, len(art.lex), art.m, len(art.bpe.merges))
    return EXIT_OK


def _train_state_header(state) -> dict:
    return {"epoch": state.epoch, "best_chrf": state.best_chrf, "best_epoch": state.best_epoch,
            "bad_epochs": state.bad_epochs,
            "rng_state": [state.rng_state[0], list(state.rng_state[1]), state.rng_state[2]]
            if state.rng_state else None}


def restore_train_state(path: Path):
    from .training import TrainState, load_model, restore_optimizer
    model, header, arrays = load_model(path)
    opt = restore_optimizer(model, header, arrays)
    ts = header.get("train_state", {})
    rng = ts.get("rng_state")
    state = TrainState(model, opt, epoch=ts.get("epoch", 0), best_chrf=ts.get("best_chrf", -1.0),
                       best_epoch=ts.get("best_epoch", 0), bad_epochs=ts.get("bad_epochs", 0),
                       rng_state=(rng[0], tuple(rng[1]), rng[2]) if rng else None)
    return state


def cmd_train(cfg: RunConfig, args) -> int:
    from .decoder import BeamConfig
    from .model import SegmentalModel
    from .pipeline import Artifacts, Translator, evaluate_translation
    from .training import new_train_state, save_model, train

    art = Artifacts.load(cfg.paths.artifacts_dir)
    src, tgt = _require(cfg.paths.train_src, "paths.train_src"), _require(cfg.paths.train_tgt, "paths.train_tgt")
    train_pairs = read_parallel(src, tgt)
    examples = [art.example(s, t) for s, t in train_pairs]
    valid_pairs = []
    if cfg.paths.valid_src or cfg.paths.valid_tgt:
        valid_pairs = read_parallel(_require(cfg.paths.valid_src, "paths.valid_src"),
                                    _require(cfg.paths.valid_tgt, "paths.valid_tgt"))
    tc = cfg.training
    valid_pairs = valid_pairs[: tc.valid_sample]

    ckdir = Path(cfg.paths.checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    best_path, last_path, log_path = ckdir / "best.ckpt", ckdir / "last.ckpt", ckdir / "train_log.jsonl"
    if args.resume:
        state = restore_train_state(last_path if last_path.is_file() else _checkpoint_path(cfg, str(last_path)))
        log.info("resuming after epoch %d", state.epoch)
    else:
        model = SegmentalModel(art.model_config(**dataclasses.asdict(cfg.model)))
        state = new_train_state(model, tc)
        log_path.write_text("", encoding="utf-8")
    translator = Translator(state.model, art)
    vcfg = BeamConfig(beam=tc.valid_beam, max_chars=cfg.decoding.max_chars)

    def validate(model):
        chrf, exact, _ = evaluate_translation(translator, valid_pairs, vcfg)
        return chrf, exact

    def on_best(st):
        save_model(best_path, st.model, {"epoch": st.epoch, "valid_chrf": st.best_chrf}, dtype=tc.checkpoint_dtype)

    def on_epoch(st):
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(dataclasses.asdict(st.history[-1])) + "\n")
        save_model(last_path, st.model, {"train_state": _train_state_header(st)}, opt=st.opt, dtype="f8")

    state = train(state, examples, tc, validate if valid_pairs else None, on_best, on_epoch)
    if not valid_pairs:
        save_model(best_path, state.model, {"epoch": state.epoch}, dtype=tc.checkpoint_dtype)
    write_manifest(ckdir / "manifest.json", "train", cfg, {"train_src": src, "train_tgt": tgt,
                   "valid_src": cfg.paths.valid_src or None, "valid_tgt": cfg.paths.valid_tgt or None},
                   {"best": best_path, "last": last_path, "log": log_path},
                   epochs=state.epoch, best_epoch=state.best_epoch, best_valid_chrf=state.best_chrf)
    return EXIT_OK


def _beam_config(cfg: RunConfig):
    return dataclasses.replace(cfg.decoding)


def cmd_translate(cfg: RunConfig, args) -> int:
    lines = read_lines(args.input)
    outputs, segs = [], []
    if any(line.strip() for line in lines):
        tr = load_translator(cfg, args.checkpoint)
        bc = _beam_config(cfg)
        for line in lines:
            if not line.strip():
                outputs.append("")
                segs.append("")
                continue
            text, seg, _ = tr.translate(line, bc, mixture=args.mixture_beam)
            outputs.append(text)
            segs.append(seg)
    write_lines(args.output, outputs)
    if args.emit_segmentation:
        write_lines(args.emit_segmentation, segs)
    manifest = args.manifest or (f"{args.output}.manifest.json" if args.output else None)
    if manifest:
        write_manifest(manifest, "translate", cfg, {"input": args.input, "checkpoint": args.checkpoint},
                       {"output": args.output, "segmentation": args.emit_segmentation},
                       decoder="mixture_beam" if args.mixture_beam else "dynamic", sentences=len(lines))
    return EXIT_OK


def cmd_segment(cfg: RunConfig, args) -> int:
    if not args.source:
        raise UsageError("segment needs --source: the model is conditioned on the source sentence "
                         "and has no unconditional variant")
    targets, sources = read_lines(args.target), read_lines(args.source)
    if len(targets) != len(sources):
        raise ValueError(f"{args.target} has {len(targets)} lines but {args.source} has {len(sources)}")
    out = []
    if any(t.strip() for t in targets):
        tr = load_translator(cfg, args.checkpoint)
        for s, t in zip(sources, targets):
            out.append(tr.segment(s, t, cfg.decoding.delimiter)[0] if t.strip() else t)
    write_lines(args.output, out)
    manifest = args.manifest or (f"{args.output}.manifest.json" if args.output else None)
    if manifest:
        write_manifest(manifest, "segment", cfg, {"target": args.target, "source": args.source},
                       {"output": args.output}, sentences=len(out))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from . import metrics as mt
    delim = cfg.decoding.delimiter
    if args.metric == "chrf":
        hyps, refs = read_lines(args.hyp), read_lines(args.ref)
        if len(hyps) != len(refs):
            raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
        report = {"metric": "chrF", "value": mt.corpus_chrf(hyps, refs), "sentences": len(refs),
                  "exact_match": mt.exact_match(hyps, refs)}
        inputs = {"hyp": args.hyp, "ref": args.ref}
    elif args.metric in ("boundary", "morpheme"):
        pred, gold = mt.read_gold(args.pred, delim), mt.read_gold(args.gold, delim)
        fn = mt.boundary_prf if args.metric == "boundary" else mt.morpheme_prf
        report = {"metric": args.metric, **fn(pred, gold).as_dict(), "words": len(gold)}
        inputs = {"pred": args.pred, "gold": args.gold}
    else:
        a, b, refs = read_lines(args.hyp_a), read_lines(args.hyp_b), read_lines(args.ref)
        p = mt.paired_bootstrap(a, b, refs, n_resamples=args.resamples, seed=args.seed)
        report = {"metric": "paired_bootstrap_chrF", "chrf_a": mt.corpus_chrf(a, refs),
                  "chrf_b": mt.corpus_chrf(b, refs), "p_value": p, "resamples": args.resamples,
                  "seed": args.seed}
        inputs = {"hyp_a": args.hyp_a, "hyp_b": args.hyp_b, "ref": args.ref}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
        write_manifest(f"{args.report}.manifest.json", f"eval {args.metric}", cfg, inputs, {"report": args.report})
    print(text)
    return EXIT_OK


def cmd_split(cfg: RunConfig, args) -> int:
    from .compgen import SplitSpec, extract_subset, genbench_report
    train, test = read_lines(args.train_seg), read_lines(args.test_seg)
    train = [s for s in train if s.strip()]
    spec = SplitSpec(args.target_dc, args.size, args.k, args.seed)
    report = extract_subset(train, test, spec, cfg.decoding.delimiter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"indices": out / "indices.txt", "report": out / "report.json", "summary": out / "summary.json"}
    write_lines(outputs["indices"], [str(i) for i in report.indices])
    outputs["report"].write_text(report.to_json() + "\n", encoding="utf-8")
    outputs["summary"].write_text(json.dumps(genbench_report(report), indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    for name in ("test_src", "test_tgt"):
        path = getattr(args, name)
        if path:
            lines = read_lines(path)
            if len(lines) != len(test):
                raise ValueError(f"{path} has {len(lines)} lines but {args.test_seg} has {len(test)}")
            outputs[name] = out / f"subset.{name.split('_')[1]}"
            write_lines(outputs[name], [lines[i] for i in report.indices])
    write_manifest(out / "manifest.json", "split", cfg,
                   {"train_seg": args.train_seg, "test_seg": args.test_seg,
                    "test_src": args.test_src, "test_tgt": args.test_tgt}, outputs,
                   compound_divergence=report.compound_divergence, atom_divergence=report.atom_divergence)
    print(json.dumps(genbench_report(report), sort_keys=True))
    return EXIT_OK


def cmd_serve(cfg: RunConfig, args) -> int:
    import uvicorn
    from .service import create_app
    app = create_app(load_translator(cfg, args.checkpoint), cfg.decoding)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segmt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI config file")
        sp.set_defaults(func=fn)
        return sp

    command("preprocess", cmd_preprocess, "build BPE model, character vocabulary and lexicon")
    sp = command("train", cmd_train, "train with early stopping on validation chrF")
    sp.add_argument("--resume", action="store_true", help="continue from last.ckpt")
    for name, fn, help_ in (("translate", cmd_translate, "decode source sentences"),
                            ("segment", cmd_segment, "Viterbi segmentation of target sentences")):
        sp = command(name, fn, help_)
        sp.add_argument("--checkpoint")
        sp.add_argument("--output")
        sp.add_argument("--manifest")
        if name == "translate":
            sp.add_argument("--input", required=True)
            sp.add_argument("--mixture-beam", action="store_true", help="mixture beam search baseline")
            sp.add_argument("--emit-segmentation", metavar="PATH")
        else:
            sp.add_argument("--target", required=True)
            sp.add_argument("--source")

    ev = command("eval", cmd_eval, "chrF, segmentation scores, significance")
    ev.add_argument("metric", choices=["chrf", "boundary", "morpheme", "bootstrap"])
    for flag in ("--hyp", "--ref", "--pred", "--gold", "--hyp-a", "--hyp-b", "--report"):
        ev.add_argument(flag)
    ev.add_argument("--resamples", type=int, default=1000)
    ev.add_argument("--seed", type=int, default=0)

    sp = command("split", cmd_split, "extract a compositional test subset")
    sp.add_argument("--train-seg", required=True, help="segmented training sentences")
    sp.add_argument("--test-seg", required=True, help="segmented test sentences")
    sp.add_argument("--test-src")
    sp.add_argument("--test-tgt")
    sp.add_argument("--target-dc", type=float, required=True)
    sp.add_argument("--size", type=int, default=300)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = command("serve", cmd_serve, "HTTP inference service")
    sp.add_argument("--checkpoint")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    return p


_EVAL_NEEDS = {"chrf": ("hyp", "ref"), "boundary": ("pred", "gold"), "morpheme": ("pred", "gold"),
               "bootstrap": ("hyp_a", "hyp_b", "ref")}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("no command given (see --help)")
        if args.command == "eval":
            missing = [n for n in _EVAL_NEEDS[args.metric] if not getattr(args, n)]
            if missing:
                raise UsageError(f"eval {args.metric} needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
        logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                            format="%(message)s")
        cfg = load_config(args.config, parse_overrides(rest)).validate()
        apply_thread_env()
        return args.func(cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
