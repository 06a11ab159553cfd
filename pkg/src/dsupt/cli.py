"""Command line for the DSU pretraining recipe on compact speech-translation models.

Each subcommand reads an optional JSON config (``--config``) whose keys are
the subcommand's option names; flags given on the command line win.  Every
command writes a reproducibility record (config, seeds, SHA-256 of inputs and
outputs) under ``<work>/records/``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import decode as D
from .dsu import KmeansModel
from .pipeline import Checkpoint, average_checkpoints, best_checkpoint, last_checkpoint, transplant
from .recipe import (SYSTEMS, VOCAB_NAMES, Experiment, RecipeConfig, ablate_tokenization,
                     build_system, encode_units, final_checkpoint, finetune_series, load_splits,
                     load_workspace, make_vocabs, pretrain_asr, pretrain_translation,
                     pretrain_units, read_units, score_texts, train_bpe, train_kmeans, translate,
                     translate_units, write_units)
from .synth import SynthSpec, gen_data
from .tokenizer import BpeModel

log = logging.getLogger("dsupt")

TRAIN_STAGES = ("fbk2dsu", "dsu2trl", "asr", "st")
PLAN_KEYS = {"fbk2dsu": "fbk2dsu_pt", "dsu2trl": "dsu2trl_pt", "asr": "asr_pt", "st": "st_ft"}
PLAN_FLAGS = ("max_steps", "warmup", "peak_lr", "batch_budget", "ckpt_interval")
DEFAULT_TOKENIZATION_GRID = [
    {"dsu_bpe_size": None, "vocab_mode": "separate"},
    {"dsu_bpe_size": None, "vocab_mode": "joint"},
    {"dsu_bpe_size": 40, "vocab_mode": "separate"},
    {"dsu_bpe_size": 40, "vocab_mode": "joint"},
]


class CliError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- option handling ----------------------------------------------------------------------------

def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise argparse.ArgumentTypeError(f"invalid JSON: {err}") from None


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()) -> None:
    defaults = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        value = getattr(defaults, f.name)
        if isinstance(value, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(value, int):
            p.add_argument(flag, type=int, default=None)
        elif isinstance(value, float):
            p.add_argument(flag, type=float, default=None)
        elif isinstance(value, str):
            p.add_argument(flag, type=str, default=None)
        else:
            p.add_argument(flag, type=_json_arg, default=None, metavar="JSON")


def _recipe_flags(p) -> None:
    _add_dataclass_flags(p, RecipeConfig)
    # dsu_bpe_size defaults to None, so the generic rule cannot infer its type
    for action in p._actions:
        if action.dest == "dsu_bpe_size":
            action.type = lambda s: None if s.lower() == "none" else int(s)


def _common(p, work=True, data=True) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON file of option values")
    if data:
        p.add_argument("--data", type=Path, default=None, help="dataset directory")
    if work:
        p.add_argument("--work", type=Path, default=None, help="workspace directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _apply_config(args, parser) -> None:
    """Fill options not given on the command line from the JSON config."""
    if getattr(args, "config", None) is None:
        return
    values = json.loads(Path(args.config).read_text())
    known = vars(args)
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "command"):
            raise CliError(f"unknown config key {key!r} for this command")
        if known[dest] is None:
            setattr(args, dest, Path(value) if dest in ("data", "work", "out") else value)


def _recipe_config(args) -> RecipeConfig:
    names = {f.name for f in fields(RecipeConfig)}
    values = {k: v for k, v in vars(args).items() if k in names and v is not None}
    if "dsu_bpe_size" in vars(args):
        values["dsu_bpe_size"] = args.dsu_bpe_size
    return RecipeConfig.from_dict(values)


def _require(args, *names) -> None:
    for n in names:
        if getattr(args, n, None) is None:
            raise CliError(f"--{n.replace('_', '-')} is required")


def _write_record(work: Path, name: str, args, cfg: dict, inputs, outputs) -> None:
    rec_dir = work / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    def hashes(paths):
        return {str(p): sha256_file(p) for p in sorted(set(map(Path, paths))) if Path(p).is_file()}
    record = {"command": name,
              "argv": [a for a in sys.argv[1:]] if args.from_argv else None,
              "config": cfg,
              "seed": cfg.get("seed"),
              "inputs": hashes(inputs),
              "outputs": hashes(outputs)}
    (rec_dir / f"{name}.json").write_text(json.dumps(record, indent=1, sort_keys=True, default=str))


# -- preparation commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    _require(args, "out")
    names = {f.name for f in fields(SynthSpec)}
    spec = SynthSpec(**{k: v for k, v in vars(args).items() if k in names and v is not None})
    summary = gen_data(spec, args.out)
    out = Path(args.out)
    print(f"wrote {summary['train']} training and {summary['test']} test utterances to {out}")
    _write_record(out, "gen-data", args, spec.to_dict(), [],
                  [out / "train.tsv", out / "test.tsv", out / "latent.tsv"])


def cmd_kmeans_train(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    args.work.mkdir(parents=True, exist_ok=True)
    splits = load_splits(args.data, cfg)
    km, phash = train_kmeans(splits, cfg)
    km.save(args.work / "kmeans.npz")
    print(f"K={km.k} trained on {km.trained_on} frames (pool {phash[:12]})")
    _write_record(args.work, "kmeans-train", args, {**cfg.to_dict(), "pool_hash": phash},
                  [args.data / "train.tsv"], [args.work / "kmeans.npz"])


def cmd_dsu_encode(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    splits = load_splits(args.data, cfg)
    km = KmeansModel.load(args.work / "kmeans.npz")
    units = encode_units(km, splits.train + splits.dev + splits.test)
    write_units(args.work / "units.tsv", units)
    print(f"encoded {len(units)} utterances")
    _write_record(args.work, "dsu-encode", args, cfg.to_dict(),
                  [args.work / "kmeans.npz", args.data / "train.tsv", args.data / "test.tsv"],
                  [args.work / "units.tsv"])


def cmd_bpe_train(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    splits = load_splits(args.data, cfg)
    units = read_units(args.work / "units.tsv")
    dsu_bpe, tgt_bpe = train_bpe(splits.train, units, cfg)
    tgt_bpe.save(args.work / "tgt.bpe")
    outputs = [args.work / "tgt.bpe"]
    dsu_path = args.work / "dsu.bpe"
    if dsu_bpe is not None:
        dsu_bpe.save(dsu_path)
        outputs.append(dsu_path)
    elif dsu_path.exists():
        dsu_path.unlink()
    print(f"target BPE: {len(tgt_bpe.merges)} merges"
          + (f"; unit BPE: {len(dsu_bpe.merges)} merges" if dsu_bpe else ""))
    _write_record(args.work, "bpe-train", args, cfg.to_dict(),
                  [args.work / "units.tsv", args.data / "train.tsv"], outputs)


def cmd_build_vocab(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    splits = load_splits(args.data, cfg)
    dsu_path = args.work / "dsu.bpe"
    dsu_bpe = BpeModel.load(dsu_path) if dsu_path.exists() else None
    tgt_bpe = BpeModel.load(args.work / "tgt.bpe")
    vocabs = make_vocabs(dsu_bpe, tgt_bpe, splits.train, cfg)
    outputs = []
    for name in VOCAB_NAMES:
        vocabs[name].save(args.work / f"{name}.vocab")
        outputs.append(args.work / f"{name}.vocab")
    print(" ".join(f"{n}={len(vocabs[n])}" for n in VOCAB_NAMES))
    _write_record(args.work, "build-vocab", args, cfg.to_dict(),
                  [args.work / "tgt.bpe", dsu_path], outputs)


# -- training commands ----------------------------------------------------------------------------

def load_series(path) -> list[Checkpoint]:
    path = Path(path)
    if path.is_file():
        return [Checkpoint.load(path)]
    files = sorted(path.glob("*.ckpt"))
    if not files:
        raise CliError(f"no checkpoints in {path}")
    return [Checkpoint.load(f) for f in files]


def save_series(series, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    for old in out_dir.glob("*.ckpt*"):
        old.unlink()
    paths = []
    for ckpt in series:
        p = out_dir / f"step_{ckpt.step:07d}.ckpt"
        ckpt.save(p)
        paths.append(p)
    return paths


def _plan_overrides(args, cfg: RecipeConfig, stage: str) -> None:
    key = PLAN_KEYS[stage]
    for flag in PLAN_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            cfg.plans[key][flag] = value


def cmd_train(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    _plan_overrides(args, cfg, args.stage)
    prep = load_workspace(args.data, args.work, cfg)
    inputs = [args.data / "train.tsv", args.work / "units.tsv", args.work / "tgt.bpe"]
    if args.stage == "fbk2dsu":
        series, name = pretrain_units(prep, cfg), args.name or "fbk2dsu"
    elif args.stage == "dsu2trl":
        series, name = pretrain_translation(prep, cfg), args.name or "dsu2trl"
    elif args.stage == "asr":
        series, name = pretrain_asr(prep, cfg), args.name or "asr"
    else:
        system = args.system or "scratch"
        if system not in SYSTEMS:
            raise CliError(f"unknown system {system!r}")
        ft_ctc = cfg.lambda_beta > 0
        if args.init is not None:
            init = Checkpoint.load(args.init)
            model = init.to_model()
            inputs.append(args.init)
        elif system == "scratch":
            model = build_system(prep, cfg, "scratch", None, ft_ctc)
        else:
            raise CliError(f"system {system} needs --init (see the transplant command)")
        series = finetune_series(prep, cfg, model, system, ft_ctc)
        name = args.name or system
    paths = save_series(series, args.work / "ckpt" / name)
    last = series[-1]
    print(f"{name}: {len(series)} checkpoints, last step {last.step}, dev loss {last.dev_metric}")
    _write_record(args.work, f"train-{name}", args, cfg.to_dict(), inputs, paths)


def cmd_transplant(args) -> None:
    _require(args, "data", "work", "enc", "out")
    cfg = _recipe_config(args)
    prep = load_workspace(args.data, args.work, cfg)
    enc = last_checkpoint(load_series(args.enc))
    dec = best_checkpoint(load_series(args.dec)) if args.dec is not None else None
    mode = args.mode
    vocab = prep.st_vocab if mode == "enc_init" else prep.tgt_vocab
    ctc_vocab = len(prep.st_ctc) if cfg.lambda_beta > 0 else 0
    seed = cfg.seed * 1000 + 10 + SYSTEMS.index(mode)
    model = transplant(enc, dec, mode, seed, len(vocab), ctc_vocab)
    ckpt = Checkpoint(model.state(), model.config, 0, None)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out)
    print(f"{mode}: {model.num_parameters()} parameters -> {args.out}")
    _write_record(args.work, f"transplant-{mode}", args, cfg.to_dict(),
                  [args.enc, args.dec or args.enc], [args.out])


def cmd_avg_ckpt(args) -> None:
    _require(args, "out")
    if args.series is None and not args.ckpts:
        raise CliError("give --series DIR or --ckpts FILE...")
    series = load_series(args.series) if args.series else [Checkpoint.load(p) for p in args.ckpts]
    n = args.last if args.last is not None else len(series)
    avg = average_checkpoints(series, n)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    avg.save(args.out)
    print(f"averaged {n} checkpoints -> {args.out} ({avg.hash()[:12]})")
    work = args.work or args.out.parent
    _write_record(work, f"avg-ckpt-{args.out.stem}", args, {"last": n},
                  [args.series] if args.series else args.ckpts, [args.out])


# -- evaluation commands ------------------------------------------------------------------------

def _split_rows(prep, split: str):
    rows = {"train": prep.train, "dev": prep.dev, "test": prep.test}.get(split)
    if rows is None:
        raise CliError(f"unknown split {split!r}")
    return rows


def cmd_decode(args) -> None:
    _require(args, "data", "work", "ckpt", "out")
    cfg = _recipe_config(args)
    prep = load_workspace(args.data, args.work, cfg)
    ckpt = Checkpoint.load(args.ckpt)
    rows = _split_rows(prep, args.split)
    if ckpt.config.role == "dsu2trl":
        texts = translate_units(prep, cfg, ckpt, rows)
    elif ckpt.config.role in ("fbk2dsu", "asr_pt"):
        raise CliError(f"{ckpt.config.role} checkpoints do not produce translations")
    else:
        texts = translate(prep, cfg, ckpt, rows)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("".join(f"{r.id}\t{texts[r.id]}\n" for r in rows), encoding="utf-8")
    print(f"decoded {len(rows)} utterances -> {args.out}")
    _write_record(args.work, f"decode-{args.out.stem}", args, cfg.to_dict(), [args.ckpt], [args.out])


def read_hypotheses(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        uid, _, text = line.partition("\t")
        out[uid] = text
    return out


def cmd_score(args) -> None:
    _require(args, "data", "hyp", "out")
    cfg = _recipe_config(args)
    splits = load_splits(args.data, cfg)
    rows = {"train": splits.train, "dev": splits.dev, "test": splits.test}[args.split]
    groups = D.FULL_SCALE_GROUPS if args.grouping == "full-scale" else splits.groups
    bleu_rep, chrf_rep = score_texts(read_hypotheses(args.hyp), rows, groups)
    result = {"bleu": json.loads(bleu_rep.to_json()), "chrf": json.loads(chrf_rep.to_json())}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(result, indent=1, sort_keys=True))
    print(" ".join(f"{g}={v:.2f}" for g, v in bleu_rep.groups.items()))
    _write_record(args.work or args.out.parent, f"score-{args.out.stem}", args, cfg.to_dict(),
                  [args.hyp], [args.out])


def format_table(rows: dict[str, dict[str, float]], columns=("High", "Mid", "Low", "All")) -> str:
    lines = ["| system | " + " | ".join(columns) + " |",
             "|---" * (len(columns) + 1) + "|"]
    for name, groups in rows.items():
        lines.append(f"| {name} | " + " | ".join(f"{groups.get(c, float('nan')):.2f}"
                                                 for c in columns) + " |")
    return "\n".join(lines)


def cmd_report(args) -> None:
    if not args.reports:
        raise CliError("give one or more score files")
    rows = {}
    for path in args.reports:
        data = json.loads(Path(path).read_text())
        rows[Path(path).stem] = data[args.metric]["groups"]
    table = format_table(rows)
    print(table)
    if args.out is not None:
        args.out.write_text(table + "\n")


def cmd_ablate_tokenization(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    settings = args.settings if args.settings is not None else DEFAULT_TOKENIZATION_GRID
    rows = ablate_tokenization(args.data, cfg, settings)
    args.work.mkdir(parents=True, exist_ok=True)
    out = args.work / "ablate_tokenization.json"
    out.write_text(json.dumps(rows, indent=1, sort_keys=True))
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    _write_record(args.work, "ablate-tokenization", args, cfg.to_dict(),
                  [args.data / "train.tsv"], [out])


def cmd_ablate_ctc(args) -> None:
    _require(args, "data", "work")
    cfg = _recipe_config(args)
    exp = Experiment(args.data, cfg)
    results = exp.ablate_ctc()
    rows = {k: v.bleu.groups for k, v in results.items()}
    args.work.mkdir(parents=True, exist_ok=True)
    out = args.work / "ablate_ctc.json"
    out.write_text(json.dumps(rows, indent=1, sort_keys=True))
    print(format_table(rows))
    _write_record(args.work, "ablate-ctc", args, cfg.to_dict(), [args.data / "train.tsv"], [out])


# -- end to end -----------------------------------------------------------------------------------

def run_pipeline(work: Path, cfg: RecipeConfig, data: Path | None = None,
                 system: str = "dsu_adapter") -> dict:
    """gen-data -> kmeans -> units -> BPE -> vocab -> both pretraining stages
    -> transplant -> finetune -> average -> decode -> score."""
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = work / "data"
        gen_data(SynthSpec(seed=cfg.seed), data)
    ns = argparse.Namespace(work=work, data=data, from_argv=False)
    splits = load_splits(data, cfg)
    km, phash = train_kmeans(splits, cfg)
    km.save(work / "kmeans.npz")
    units = encode_units(km, splits.train + splits.dev + splits.test)
    write_units(work / "units.tsv", units)
    dsu_bpe, tgt_bpe = train_bpe(splits.train, units, cfg)
    tgt_bpe.save(work / "tgt.bpe")
    if dsu_bpe is not None:
        dsu_bpe.save(work / "dsu.bpe")
    for name, vocab in make_vocabs(dsu_bpe, tgt_bpe, splits.train, cfg).items():
        vocab.save(work / f"{name}.vocab")
    prep = load_workspace(data, work, cfg)

    pt = {}
    if system in ("enc_init", "encdec_init", "dsu_adapter"):
        pt["units"] = pretrain_units(prep, cfg)
        save_series(pt["units"], work / "ckpt" / "fbk2dsu")
    if system in ("encdec_init", "dsu_adapter"):
        pt["translation"] = pretrain_translation(prep, cfg)
        save_series(pt["translation"], work / "ckpt" / "dsu2trl")
    if system == "asr_pretraining":
        pt["asr"] = pretrain_asr(prep, cfg)
        save_series(pt["asr"], work / "ckpt" / "asr")
    ft_ctc = cfg.lambda_beta > 0
    model = build_system(prep, cfg, system, pt, ft_ctc)
    series = finetune_series(prep, cfg, model, system, ft_ctc)
    save_series(series, work / "ckpt" / system)
    final = final_checkpoint(series, cfg.avg_last)
    final.save(work / f"{system}.ckpt")
    texts = translate(prep, cfg, final, prep.test)
    (work / f"{system}.hyp.tsv").write_text("".join(f"{r.id}\t{texts[r.id]}\n" for r in prep.test),
                                           encoding="utf-8")
    bleu_rep, chrf_rep = score_texts(texts, prep.test, prep.groups)
    report = {"bleu": json.loads(bleu_rep.to_json()), "chrf": json.loads(chrf_rep.to_json())}
    (work / f"{system}.report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    outputs = sorted(p for p in work.rglob("*") if p.is_file() and "records" not in p.parts
                     and "data" not in p.relative_to(work).parts[:1])
    _write_record(work, "run", ns, {**cfg.to_dict(), "system": system, "pool_hash": phash},
                  [data / "train.tsv", data / "test.tsv"], outputs)
    return {"checkpoint": final.hash(), "report": report,
            "record": json.loads((work / "records" / "run.json").read_text())}


def cmd_run(args) -> None:
    _require(args, "work")
    cfg = _recipe_config(args)
    system = args.system or "dsu_adapter"
    if system not in SYSTEMS:
        raise CliError(f"unknown system {system!r}")
    result = run_pipeline(args.work, cfg, args.data, system)
    print(f"{system}: checkpoint {result['checkpoint'][:16]} "
          + " ".join(f"{g}={v:.2f}" for g, v in result["report"]["bleu"]["groups"].items()))


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsupt", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _common(p, work=False, data=False)
    p.add_argument("--out", type=Path, default=None)
    _add_dataclass_flags(p, SynthSpec)
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("kmeans-train", cmd_kmeans_train, "fit K-means on SSL features"),
                              ("dsu-encode", cmd_dsu_encode, "map utterances to unit sequences"),
                              ("bpe-train", cmd_bpe_train, "learn target (and unit) BPE"),
                              ("build-vocab", cmd_build_vocab, "write vocabulary tables")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _recipe_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("stage", choices=TRAIN_STAGES)
    _common(p)
    _recipe_flags(p)
    p.add_argument("--system", default=None, help="speech-translation system name (stage st)")
    p.add_argument("--init", type=Path, default=None, help="initial checkpoint (stage st)")
    p.add_argument("--name", default=None, help="run name (checkpoint directory)")
    for flag in PLAN_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), type=float if flag == "peak_lr" else int,
                       default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transplant", help="initialise a model from pretrained parts")
    _common(p)
    _recipe_flags(p)
    p.add_argument("--mode", choices=("enc_init", "encdec_init", "dsu_adapter"), default="dsu_adapter")
    p.add_argument("--enc", type=Path, default=None, help="unit-pretraining checkpoint or series")
    p.add_argument("--dec", type=Path, default=None, help="translation-pretraining checkpoint or series")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_transplant)

    p = sub.add_parser("avg-ckpt", help="average the last checkpoints of a series")
    _common(p, data=False)
    p.add_argument("--series", type=Path, default=None)
    p.add_argument("--ckpts", type=Path, nargs="*", default=None)
    p.add_argument("--last", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_avg_ckpt)

    p = sub.add_parser("decode", help="beam-search translations")
    _common(p)
    _recipe_flags(p)
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="BLEU and chrF per language and group")
    _common(p)
    _recipe_flags(p)
    p.add_argument("--hyp", type=Path, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--grouping", choices=("synthetic", "full-scale"), default="synthetic")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="table of group scores from score files")
    _common(p, work=False, data=False)
    p.add_argument("reports", type=Path, nargs="*")
    p.add_argument("--metric", choices=("bleu", "chrf"), default="bleu")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate-tokenization", help="unit tokenisation grid")
    _common(p)
    _recipe_flags(p)
    p.add_argument("--settings", type=_json_arg, default=None, metavar="JSON",
                   help="list of setting objects")
    p.set_defaults(func=cmd_ablate_tokenization)

    p = sub.add_parser("ablate-ctc", help="CTC on/off in pretraining and finetuning")
    _common(p)
    _recipe_flags(p)
    p.set_defaults(func=cmd_ablate_ctc)

    p = sub.add_parser("run", help="end-to-end pipeline for one system")
    _common(p)
    _recipe_flags(p)
    p.add_argument("--system", default=None)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.from_argv = argv is None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_config(args, parser)
        args.func(args)
    except (CliError, ValueError, FileNotFoundError, KeyError, RuntimeError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"dsupt {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
