"""Command-line front end.

Every subcommand that takes ``--out`` writes ``manifest.json`` next to its
outputs: the resolved config, the seed, library versions, the exact argv, and
SHA-256 digests of inputs and outputs. ``replay`` re-runs a manifest into a
scratch directory and compares the digests.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import DomainCorpus, default_domain_specs, generate_synthetic_domains, ingest_corpus
from .errors import ConfigError, InputError, LabelParseError, ProtocolError
from .evaluation import evaluate_matrix
from .experiments import (
    ExperimentPlan,
    Workspace,
    run_fl_experiment,
    table_matrix,
    train_chained,
    train_pooled_finetune,
    train_standalone,
)
from .federation import PAPER_PRESET, CostPreset, compute_cost_preset, cost_notation
from .labels import parse_config_label
from .model import layer_param_count, load_checkpoint, save_checkpoint
from .subword import DESK_MERGES, FULL_SCALE_MERGES, BpeVocab, train_bpe

log = logging.getLogger("ctrlfl")

MANIFEST = "manifest.json"
DOMAIN_INDEX = "domains.json"


@dataclass
class Config:
    num_merges: int = DESK_MERGES
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    plan: ExperimentPlan = field(default_factory=ExperimentPlan)

    @property
    def seed(self) -> int:
        return self.plan.seed

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "plan"}
        d["plan"] = self.plan.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Config | None = None) -> Config:
        """Overlay `d` on `base`. Plan keys may be flat, nested under "plan", or grouped
        under "budgets" / "dims"; "seeds" is accepted as a synonym for "seed"."""
        base = base or cls()
        top = {f.name for f in dataclasses.fields(cls)} - {"plan"}
        plan_keys = {f.name for f in dataclasses.fields(ExperimentPlan)}
        own, plan = {}, base.plan.to_dict()
        for key, value in d.items():
            if key in top:
                own[key] = int(value)
            elif key in ("plan", "budgets", "dims"):
                plan.update(value)
            elif key == "seeds":
                plan["seed"] = int(value[0] if isinstance(value, list) else value)
            elif key in plan_keys:
                plan[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = dataclasses.replace(base, **own)
        cfg.plan = ExperimentPlan.from_dict(plan)
        return cfg


PRESETS = {
    "desk": Config(),
    # shape of the full-scale setup: base-size Transformer, 100K + 50K steps, 30K merges
    "paper": Config(num_merges=FULL_SCALE_MERGES, plan=ExperimentPlan(
        pretrain_steps=100_000, finetune_steps=50_000, local_steps=1000, d_model=512, heads=8,
        d_ff=2048, max_seq_len=256, learning_rate=3e-4)),
}


def resolve_config(args) -> Config:
    cfg = dataclasses.replace(PRESETS[args.preset])
    cfg.plan = ExperimentPlan.from_dict(cfg.plan.to_dict())
    if getattr(args, "config", None):
        cfg = Config.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")), cfg)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "label", None) is not None:
        overrides["label"] = args.label
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if overrides:
        cfg = Config.from_dict(overrides, cfg)
    return cfg


# -- hashing and manifests ---------------------------------------------------

def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def digest_tree(path: Path, skip: Sequence[str] = ()) -> dict[str, str]:
    path = Path(path)
    if path.is_file():
        return {path.name: sha256_file(path)}
    return {str(p.relative_to(path)): sha256_file(p)
            for p in sorted(path.rglob("*")) if p.is_file() and p.name not in skip}


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: Config,
                   inputs: dict[str, str | None]) -> dict:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"ctrlfl": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "inputs": {k: digest_tree(Path(v)) for k, v in inputs.items() if v},
        "outputs": digest_tree(out, skip=(MANIFEST,)),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- data helpers -------------------------------------------------------------

def read_corpora(data_dir: str | Path) -> list[DomainCorpus]:
    d = Path(data_dir)
    if not d.is_dir():
        raise InputError(f"data directory {d} does not exist")
    index = d / DOMAIN_INDEX
    if index.exists():
        names = json.loads(index.read_text(encoding="utf-8"))
    else:
        names = sorted(p.parent.name for p in d.glob("*/train.src"))
    if not names:
        raise InputError(f"no domain corpora under {d}")
    return [DomainCorpus.read(d / n, n) for n in names]


def _workspace(args, cfg: Config) -> Workspace:
    corpora = read_corpora(args.data)
    if not Path(args.vocab).exists():
        raise InputError(f"vocabulary file {args.vocab} does not exist")
    return Workspace(BpeVocab.load(args.vocab), corpora, cfg.plan.max_seq_len)


def _load_base(path: str) -> object:
    if not path or not Path(path).is_file():
        raise InputError(f"base checkpoint {path!r} not found; run `pretrain` first")
    return load_checkpoint(path)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args, cfg: Config) -> int:
    out = _out(args)
    if args.src or args.tgt:
        if not (args.src and args.tgt):
            raise InputError("--src and --tgt must be given together")
        corpora = [ingest_corpus(args.src, args.tgt, cfg.dev_size, cfg.test_size, cfg.seed, args.name)]
    else:
        specs = default_domain_specs(cfg.train_size, cfg.dev_size, cfg.test_size)
        corpora = generate_synthetic_domains(specs, cfg.seed)
    for c in corpora:
        c.write(out)
    _write_json(out / DOMAIN_INDEX, [c.name for c in corpora])
    write_manifest(out, "gen-data", args.argv, cfg, {"src": args.src, "tgt": args.tgt})
    for c in corpora:
        print(f"{c.name}: train={len(c.train)} dev={len(c.dev)} test={len(c.test)}")
    return 0


def cmd_train_bpe(args, cfg: Config) -> int:
    out = _out(args)
    corpora = read_corpora(args.data)
    lines = [x for c in corpora for pair in c.train for x in pair]
    vocab = train_bpe(lines, cfg.num_merges)
    vocab.save(out / "vocab.txt")
    write_manifest(out, "train-bpe", args.argv, cfg, {"data": args.data})
    print(f"vocabulary: {len(vocab)} tokens, {len(vocab.merges)} merges")
    return 0


def cmd_pretrain(args, cfg: Config) -> int:
    ws = _workspace(args, cfg)
    domain = args.domain or next(iter(ws.corpora))
    out = _out(args)
    result = train_standalone(domain, dataclasses.replace(cfg.plan, finetune_steps=0), ws, evaluate=False)
    save_checkpoint(result.model, out / "base.ckpt", {"domain": domain, "steps": cfg.plan.pretrain_steps})
    write_manifest(out, "pretrain", args.argv, cfg, {"data": args.data, "vocab": args.vocab})
    print(f"base model: {domain}, {cfg.plan.pretrain_steps} steps -> {out / 'base.ckpt'}")
    return 0


def cmd_fl_run(args, cfg: Config) -> int:
    base = _load_base(args.base)
    ws = _workspace(args, cfg)
    if not cfg.plan.label:
        raise ConfigError("fl-run needs --label")
    out = _out(args)
    report = run_fl_experiment(cfg.plan.label, cfg.plan, ws, base)
    _write_json(out / "report.json", {**report.to_dict(), "smooth_bleu": cfg.plan.smooth_bleu})
    matrix = table_matrix({"base": _initial(report), report.label: report}, list(ws.corpora))
    (out / "matrix.csv").write_text(matrix.to_csv(), encoding="utf-8")
    save_checkpoint(report.global_model, out / "global.ckpt", {"label": report.label})
    write_manifest(out, "fl-run", args.argv, cfg, {"data": args.data, "vocab": args.vocab, "base": args.base})
    print(matrix.to_csv(), end="")
    return 0


def _initial(report):
    # the pre-FL row of the session, shown under the same cost columns
    return dataclasses.replace(report, final_scores=report.initial_scores)


def cmd_baseline(args, cfg: Config) -> int:
    ws = _workspace(args, cfg)
    out = _out(args)
    names = list(ws.corpora)
    rows = {}
    modes = [args.mode] if args.mode != "all" else ["standalone", "pooled", "chained"]
    if "standalone" in modes:
        for n in names:
            rows[n] = train_standalone(n, cfg.plan, ws)
    if "pooled" in modes:
        rows["Fine Tuning"] = train_pooled_finetune(names, cfg.plan, ws)
    if "chained" in modes:
        start = _load_base(args.base) if args.base else None
        rows["Chained"] = train_chained(names, cfg.plan, ws, start_from=start)
    matrix = table_matrix(rows, names)
    matrix.smooth = cfg.plan.smooth_bleu
    (out / "matrix.csv").write_text(matrix.to_csv(), encoding="utf-8")
    _write_json(out / "report.json", matrix.to_dict())
    for label, res in rows.items():
        save_checkpoint(res.model, out / f"{label.replace(' ', '_').lower()}.ckpt", {"row": label})
    write_manifest(out, "baseline", args.argv, cfg, {"data": args.data, "vocab": args.vocab, "base": args.base})
    print(matrix.to_csv(), end="")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    ws = _workspace(args, cfg)
    models = {Path(p).stem: _load_base(p) for p in args.checkpoint}
    matrix = evaluate_matrix(models, ws.test_sets(), ws.vocab, cfg.plan.smooth_bleu)
    if args.out:
        out = _out(args)
        (out / "matrix.csv").write_text(matrix.to_csv(), encoding="utf-8")
        inputs = {"data": args.data, "vocab": args.vocab}
        inputs.update({f"checkpoint:{p}": p for p in args.checkpoint})
        write_manifest(out, "eval", args.argv, cfg, inputs)
    print(matrix.to_csv(), end="")
    return 0


def desk_cost_preset(cfg: Config, vocab_size: int) -> CostPreset:
    mc = cfg.plan.model_config(vocab_size)
    return CostPreset(layer_param_count(mc, "enc"), layer_param_count(mc, "dec"), vocab_size * mc.d_model)


def cmd_cost(args, cfg: Config) -> int:
    label = parse_config_label(args.label or cfg.plan.label or "")
    if args.preset == "paper":
        preset = PAPER_PRESET
    else:
        size = len(BpeVocab.load(args.vocab)) if args.vocab else args.vocab_size
        preset = desk_cost_preset(cfg, size)
    c, t = compute_cost_preset(label, preset)
    c_note, t_note = cost_notation(label)
    full_t = compute_cost_preset(dataclasses.replace(label, share_scope="A", train_scope="A"), preset)[1]
    lines = [
        f"label: {label.render()}",
        f"preset: {args.preset} {json.dumps(preset.to_dict(), sort_keys=True)}",
        f"C-Cost: {c:,} parameters ({c_note})",
        f"T-Cost: {t:,} parameters ({t_note})",
        f"{label.enc_total}E-{label.dec_total}D/A-A T-Cost / this T-Cost: {full_t / t:.2f}",
    ]
    print("\n".join(lines))
    if args.out:
        out = _out(args)
        _write_json(out / "cost.json", {"label": label.render(), "preset": preset.to_dict(),
                                        "c_cost": c, "t_cost": t, "c_notation": c_note, "t_notation": t_note})
        write_manifest(out, "cost", args.argv, cfg, {"vocab": args.vocab})
    return 0


def cmd_replay(args, _cfg) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    for key, digests in manifest.get("inputs", {}).items():
        path = _input_path(argv, key)
        if path is not None and digest_tree(Path(path)) != digests:
            print(f"input {key} ({path}) changed since the run was recorded", file=sys.stderr)
            return 1
    with tempfile.TemporaryDirectory() as tmp:
        i = argv.index("--out")
        argv[i + 1] = str(Path(tmp) / "out")
        code = main(argv)
        if code != 0:
            return code
        got = digest_tree(Path(tmp) / "out", skip=(MANIFEST,))
    want = manifest["outputs"]
    bad = sorted(k for k in set(got) | set(want) if got.get(k) != want.get(k))
    for k in bad:
        print(f"MISMATCH {k}: recorded {want.get(k)} replayed {got.get(k)}")
    print(f"replay: {len(want) - len(bad)}/{len(want)} outputs identical")
    return 0 if not bad else 1


def _input_path(argv: list[str], key: str) -> str | None:
    if key.startswith("checkpoint:"):
        return key.split(":", 1)[1]
    flag = f"--{key}"
    return argv[argv.index(flag) + 1] if flag in argv else None


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with config keys (overlaid on the preset)")
    common.add_argument("--seed", type=int)
    common.add_argument("--label", help='configuration label, e.g. "8E-8D/C-C (2-6)"')
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--threads", type=int, help="cap on clients trained in parallel")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctrlfl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write synthetic (or ingested) corpora")
    s.add_argument("--out", required=True)
    s.add_argument("--src", help="source-side text file to ingest instead of synthetic data")
    s.add_argument("--tgt", help="target-side text file to ingest")
    s.add_argument("--name", help="domain name for an ingested corpus")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train-bpe", parents=[common], help="train the joint BPE vocabulary")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_bpe)

    s = sub.add_parser("pretrain", parents=[common], help="train the base-domain model")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--domain", help="base domain (default: first domain)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("fl-run", parents=[common], help="federated fine-tuning from a base checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fl_run)

    s = sub.add_parser("baseline", parents=[common], help="standalone, pooled and chained baselines")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--mode", choices=["standalone", "pooled", "chained", "all"], default="all")
    s.add_argument("--base", help="base checkpoint to start the chain from")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("eval", parents=[common], help="BLEU matrix for checkpoints")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("cost", parents=[common], help="C-Cost / T-Cost of a label")
    s.add_argument("--vocab", help="vocabulary file (desk preset embedding size)")
    s.add_argument("--vocab-size", type=int, default=300, help="desk preset vocabulary size without --vocab")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_cost)

    s = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    s.add_argument("manifest")
    s.set_defaults(fn=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    args.argv = argv
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args) if args.command != "replay" else None
        return args.fn(args, cfg)
    except (ConfigError, InputError, LabelParseError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
