"""Command-line entry point: parse, validate, filter, stats, loss, loop.

Exit codes: 0 success, 1 validation or verdict failure, 2 usage error,
3 transport or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .dataset_io import Sample, SampleFormatError, read_samples, report, write_samples
from .endpoints import ConfigError, MockEndpoint, TransportError, make_port
from .fcall import Grammar, FCallSyntaxError, parse_lenient, parse_strict, to_json
from .hdr_loop import CheckpointError, CommandFineTune, DeskFineTune, LoopConfig, run_loop
from .loss import AlphaState, SegmentationError, alpha_step, decompose, make_tokenizer, nll_from_logits, segment
from .quality_gate import partition
from .tool_schema import CatalogError, load_catalog, validate_calls

logger = logging.getLogger("fcurate")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_TRANSPORT = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "parallelism": 8,
    "log_level": "WARNING",
    "judge": [],
    "generator": None,
    "acceptance": "unanimous",
    "tau": 0.5,
    "tmax": 10,
    "ngen": 3,
    "temperature": 0.7,
    "alpha_mode": "fixed",
    "alpha_init": 0.7,
    "alpha_lr": 1e-3,
    "tokenizer": "whitespace",
    "identifiers": "default",
    "literals": "python",
}

_ENV_PREFIX = "FCURATE_"


class UsageError(Exception):
    pass


def _coerce_env(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, list):
        return [p for p in raw.split(",") if p]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".toml":
        import tomli

        data = tomli.loads(text)
    else:
        data = json.loads(text)
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown settings in {path}: {', '.join(sorted(unknown))}")
    return data


@dataclass
class RunConfig:
    """Settings merged with precedence flags > environment > config file > defaults."""

    settings: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, args: argparse.Namespace, environ: dict | None = None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        merged = dict(DEFAULTS)
        merged.update(_load_config_file(getattr(args, "config", None)))
        for key in DEFAULTS:
            raw = environ.get(_ENV_PREFIX + key.upper())
            if raw is not None:
                merged[key] = _coerce_env(key, raw)
        for key in DEFAULTS:
            value = getattr(args, key, None)
            if value is not None and value != []:
                merged[key] = value
        if isinstance(merged["judge"], str):
            merged["judge"] = [merged["judge"]]
        return cls(merged)

    def __getitem__(self, key):
        return self.settings[key]

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.settings, sort_keys=True).encode()).hexdigest()[:16]


def _digest(path: str) -> str | None:
    if path in (None, "-") or not Path(path).is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numpy
    import sklearn

    return {"fcurate": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scikit-learn": sklearn.__version__}


def write_manifest(args: argparse.Namespace, cfg: RunConfig | None, argv: Sequence[str], code: int) -> None:
    inputs = {}
    for name in ("input", "tools", "call", "hard", "config"):
        path = getattr(args, name, None)
        if path:
            inputs[name] = {"path": path, "sha256": _digest(path)}
    manifest = {
        "command": getattr(args, "command", None),
        "argv": list(argv),
        "exit_code": code,
        "config": cfg.settings if cfg else None,
        "config_hash": cfg.config_hash if cfg else None,
        "seed": cfg["seed"] if cfg else None,
        "versions": _versions(),
        "inputs": inputs,
    }
    if getattr(args, "manifest", None):
        dest = Path(args.manifest)
    elif getattr(args, "out", None):
        dest = Path(args.out) / "run_manifest.json"
    else:
        tag = cfg.config_hash[:8] if cfg else "noconfig"
        dest = Path(".fcurate") / "runs" / f"{manifest['command']}-{tag}.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_text(path: str | None) -> str:
    if path in (None, "-"):
        text = sys.stdin.read()
    else:
        text = Path(path).read_text(encoding="utf-8")
    # a single trailing newline is file framing, not part of the answer
    return text[:-1] if text.endswith("\n") else text


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False) + "\n")


def _grammar(cfg: RunConfig) -> Grammar:
    return Grammar(identifiers=cfg["identifiers"], literals=cfg["literals"])


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_parse(args, cfg: RunConfig) -> int:
    text = _read_text(args.input)
    grammar = _grammar(cfg)
    try:
        if args.lenient:
            calls, diags = parse_lenient(text, grammar)
        else:
            calls, diags = parse_strict(text, grammar), []
    except FCallSyntaxError as exc:
        _emit({"ok": False, "calls": None, "diagnostics": [d.to_dict() for d in exc.diagnostics]})
        return EXIT_FAIL
    _emit({"ok": True, "calls": to_json(calls), "canonical": str(calls), "diagnostics": [d.to_dict() for d in diags]})
    return EXIT_OK


def cmd_validate(args, cfg: RunConfig) -> int:
    text = _read_text(args.call or args.input)
    grammar = _grammar(cfg)
    out: dict[str, Any] = {"mode": "lenient" if args.lenient else "strict"}
    try:
        if args.lenient:
            calls, diags = parse_lenient(text, grammar)
        else:
            calls, diags = parse_strict(text, grammar), []
    except FCallSyntaxError as exc:
        out.update(valid=False, calls=None, diagnostics=[d.to_dict() for d in exc.diagnostics])
        _emit(out)
        return EXIT_FAIL
    out.update(valid=True, calls=to_json(calls), canonical=str(calls), diagnostics=[d.to_dict() for d in diags])
    if args.tools:
        catalog = load_catalog(Path(args.tools).read_text(encoding="utf-8"))
        result = validate_calls(calls, catalog)
        out["schema"] = result.to_dict()
        out["catalog_warnings"] = list(catalog.warnings)
        out["valid"] = result.passed
    _emit(out)
    return EXIT_OK if out["valid"] else EXIT_FAIL


def cmd_filter(args, cfg: RunConfig) -> int:
    if not cfg["judge"]:
        raise UsageError("filter needs --judge")
    judge = make_port(cfg["judge"][0], seed=cfg["seed"], max_in_flight=cfg["parallelism"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    verdicts_path = out / "verdicts.jsonl"
    done: dict[str, dict] = {}
    if args.resume and verdicts_path.exists():
        for line in verdicts_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                v = json.loads(line)
                done[v["id"]] = v
        logger.info("resuming: %d verdicts already on disk", len(done))
    elif verdicts_path.exists():
        verdicts_path.unlink()

    samples = list(read_samples(args.input, lenient=args.lenient_input, split_turns=args.split_turns))
    todo = [s for s in samples if s.id not in done]
    with open(verdicts_path, "a", encoding="utf-8") as log:
        def persist(v):
            record = v.to_dict()
            done[v.sample_id] = record
            log.write(json.dumps(record, ensure_ascii=False) + "\n")
            log.flush()

        partition(todo, judge, not args.no_ac_judge, cfg["parallelism"], args.full_evaluation, _grammar(cfg), persist)

    # input order, not completion order
    buckets: dict[str, list[str]] = {"qualified": [], "hard": [], "dropped": []}
    for s in samples:
        buckets[done[s.id]["label"]].append(s.id)
    (out / "partition.json").write_text(json.dumps(buckets, indent=2) + "\n", encoding="utf-8")
    by_label = {k: set(v) for k, v in buckets.items()}
    write_samples((s for s in samples if s.id in by_label["qualified"]), out / "qualified.jsonl")

    def hard_records():
        for s in samples:
            if s.id in by_label["hard"]:
                d = s.to_dict()
                if done[s.id].get("corrected_call"):
                    d["corrected_call"] = done[s.id]["corrected_call"]
                yield d

    write_samples(hard_records(), out / "hard.jsonl")
    # verdict log in input order for reproducible output
    verdicts_path.write_text("".join(json.dumps(done[s.id], ensure_ascii=False) + "\n" for s in samples),
                             encoding="utf-8")
    _emit({k: len(v) for k, v in buckets.items()})
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    tokenizer = make_tokenizer(cfg["tokenizer"])
    rep = report(args.input, tokenizer, lenient=args.lenient_input)
    if args.format in ("text", "both"):
        sys.stdout.write(rep.to_text() + "\n")
    if args.format in ("json", "both"):
        _emit(rep.to_dict())
    return EXIT_OK


def _loss_record(record: dict, tokenizer) -> tuple[Any, Any]:
    losses = record.get("per_token_losses")
    if losses is None and "logits" in record:
        losses = nll_from_logits(record["logits"], record["targets"]).tolist()
    if "response_text" in record:
        mask = segment(record["response_text"], tokenizer)
    elif losses is not None:
        from .loss import SpanMask

        n_think = int(record.get("n_think", 0))
        mask = SpanMask(n_think, len(losses) - n_think)
    else:
        raise ValueError("record needs response_text, per_token_losses or logits")
    return losses, mask


def cmd_loss(args, cfg: RunConfig) -> int:
    tokenizer = make_tokenizer(cfg["tokenizer"])
    state = AlphaState(mode=cfg["alpha_mode"], alpha=cfg["alpha_init"], lr=cfg["alpha_lr"])
    path = args.input
    stream = sys.stdin if path in (None, "-") else open(path, encoding="utf-8")
    code = EXIT_OK
    try:
        for lineno, line in enumerate(stream, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                losses, mask = _loss_record(record, tokenizer)
            except (ValueError, KeyError, SegmentationError) as exc:
                _emit({"line": lineno, "error": str(exc)})
                code = EXIT_FAIL
                continue
            if losses is None:
                _emit({"n_think": mask.n_think, "n_result": mask.n_result, "w_think": mask.n_think / mask.n_all,
                       "w_result": 1.0 - mask.n_think / mask.n_all, "loss_think": None, "loss_result": None,
                       "loss_sft": None, "alpha": state.alpha, "loss_ssb": None})
                continue
            breakdown = decompose(losses, mask, state)
            _emit(breakdown.to_dict())
            state = alpha_step(state, breakdown)
    finally:
        if stream is not sys.stdin:
            stream.close()
    return code


def _reference_generator(samples: dict[str, Sample]) -> MockEndpoint:
    def respond(messages, sample_id=None, **_):
        s = samples[sample_id]
        return s.extra.get("corrected_call") or s.answer

    return MockEndpoint(responder=respond, name="mock:reference")


def cmd_loop(args, cfg: RunConfig) -> int:
    if not cfg["judge"]:
        raise UsageError("loop needs at least one --judge")
    if not cfg["generator"]:
        raise UsageError("loop needs --generator")
    samples = list(read_samples(args.hard, lenient=args.lenient_input))
    if cfg["generator"] == "mock:reference":
        generator = _reference_generator({s.id: s for s in samples})
    else:
        generator = make_port(cfg["generator"], seed=cfg["seed"], max_in_flight=cfg["parallelism"])
    judges = [make_port(spec, seed=cfg["seed"], max_in_flight=cfg["parallelism"]) for spec in cfg["judge"]]
    loop_cfg = LoopConfig(t_max=cfg["tmax"], tau=cfg["tau"], n_gen=cfg["ngen"], temperature=cfg["temperature"],
                          judge_temperature=cfg["temperature"], acceptance=cfg["acceptance"], k=len(judges),
                          seed=cfg["seed"], parallelism=cfg["parallelism"])
    finetune = CommandFineTune(args.finetune_cmd.split()) if args.finetune_cmd else DeskFineTune()
    state = run_loop(samples, generator, judges, loop_cfg, finetune, args.out, args.resume)
    Path(args.out, "report.json").write_text(json.dumps(list(state.report), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    _emit({"t": state.t, "termination": state.termination, "hard_left": len(state.hard_ids),
           "accepted": len(state.accepted_ids), "model_tag": state.model_tag})
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run settings")
    g.add_argument("--config", help="TOML or JSON settings file")
    g.add_argument("--seed", type=int)
    g.add_argument("--parallelism", type=int)
    g.add_argument("--log-level", dest="log_level")
    g.add_argument("--manifest", help="where to write the run manifest")
    g.add_argument("--judge", action="append", default=[], help="judge endpoint or mock:spec (repeatable)")
    g.add_argument("--generator")
    g.add_argument("--acceptance", choices=("unanimous", "majority"))
    g.add_argument("--tau", type=float)
    g.add_argument("--tmax", type=int)
    g.add_argument("--ngen", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--alpha-mode", dest="alpha_mode", choices=("fixed", "sgd", "balance"))
    g.add_argument("--alpha-init", dest="alpha_init", type=float)
    g.add_argument("--alpha-lr", dest="alpha_lr", type=float)
    g.add_argument("--tokenizer", help="'whitespace' or a tokenizer.json path")
    g.add_argument("--identifiers", choices=("default", "extended"))
    g.add_argument("--literals", choices=("python", "json"))

    parser = _Parser(prog="fcurate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", parents=[common], help="parse a call list, print the AST as JSON")
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("--lenient", action="store_true")

    p = sub.add_parser("validate", parents=[common], help="check format (and schema with --tools)")
    p.add_argument("input", nargs="?", default="-")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--strict", action="store_true", default=True)
    mode.add_argument("--lenient", action="store_true")
    p.add_argument("--tools", help="tool JSON file")
    p.add_argument("--call", help="file holding the call (default: positional input or stdin)")

    p = sub.add_parser("filter", parents=[common], help="split a corpus into qualified/hard/dropped")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-ac-judge", action="store_true", help="answer check uses deterministic checks only")
    p.add_argument("--full-evaluation", action="store_true", help="run every base check, no short-circuit")
    p.add_argument("--split-turns", action="store_true")
    p.add_argument("--lenient-input", action="store_true", help="skip malformed JSONL lines")

    p = sub.add_parser("stats", parents=[common], help="token and category statistics")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("json", "text", "both"), default="both")
    p.add_argument("--lenient-input", action="store_true")

    p = sub.add_parser("loss", parents=[common], help="span-decomposed loss per JSONL record")
    p.add_argument("--in", dest="input", default="-")

    p = sub.add_parser("loop", parents=[common], help="resample the hard set until it empties")
    p.add_argument("--hard", required=True)
    p.add_argument("--out", required=True, help="checkpoint and D_new directory")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--finetune-cmd", help="external training command; default records requests only")
    p.add_argument("--lenient-input", action="store_true")
    return parser


COMMANDS = {
    "parse": cmd_parse,
    "validate": cmd_validate,
    "filter": cmd_filter,
    "stats": cmd_stats,
    "loss": cmd_loss,
    "loop": cmd_loop,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"fcurate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    cfg = None
    try:
        cfg = RunConfig.resolve(args)
        logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        code = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"fcurate: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"fcurate: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (ConfigError, TransportError, CheckpointError) as exc:
        print(f"fcurate: error: {exc}", file=sys.stderr)
        code = EXIT_TRANSPORT
    except (SampleFormatError, CatalogError, ValueError) as exc:
        print(f"fcurate: error: {exc}", file=sys.stderr)
        code = EXIT_FAIL
    write_manifest(args, cfg, argv, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
