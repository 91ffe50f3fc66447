"""Command-line pipeline: data generation, training, decoding, evaluation and diagnostics.

Every subcommand works inside one ``--workdir`` and writes its resolved
configuration there as ``config.<command>.json``.  Splits:

* ``train`` and ``dev`` come from ``data.train_preset``; dev drives
  checkpoint selection.
* ``valid`` and ``test`` come from ``data.test_preset``; valid is used for
  the internal-LM weight sweep.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from ilmfusion import config as cfgmod
from ilmfusion import corpus as C
from ilmfusion.decoding import DecodeModels, decode_utterances
from ilmfusion.diagnostics import diagnose, write_curves
from ilmfusion.evalkit import MixedTokenSeq, mer, perplexity, pool
from ilmfusion.experiments import pick_lambda, sweep_ilm_weight
from ilmfusion.ilme import IlmParams, attach_ilm, ilm_sequence_logprob, train_ilm
from ilmfusion.models import (
    AsrConfig,
    AsrModel,
    LmConfig,
    LmModel,
    LossLog,
    Schedule,
    lm_sequence_logprobs,
    train_asr,
    train_lm,
)
from ilmfusion.vocab import Vocab

log = logging.getLogger("ilmfusion")

SPLIT_SEED = {"train": 1, "dev": 2, "valid": 3, "test": 4, "lm_text": 5}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# workdir helpers


class Workdir:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"

    def path(self, name) -> Path:
        return self.root / name

    def require(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CliError(f"missing input {p}; run the producing command first")
        return p

    def vocab(self) -> Vocab:
        p = self.data / "vocab.json"
        if not p.exists():
            raise CliError(f"missing {p}; run gen-data first")
        return Vocab.load(p)

    def split(self, name: str):
        if not (self.data / f"{name}.jsonl").exists():
            raise CliError(f"missing split {name!r} in {self.data}")
        return C.load_dataset(self.data, name, self.vocab())

    def asr(self) -> AsrModel:
        return AsrModel.load(self.require("asr.ckpt"), self.vocab())

    def lm(self) -> LmModel:
        return LmModel.load(self.require("lm.ckpt"), self.vocab())

    def ilm(self, asr: AsrModel) -> IlmParams:
        return IlmParams.load(self.require("ilm.ckpt"), asr)


def _schedule(section: dict, seed: int) -> Schedule:
    keys = ("epochs", "batch_size", "warmup_steps", "lr_factor", "n_average", "grad_clip")
    return Schedule(seed=seed, **{k: section[k] for k in keys if k in section})


def _corpus_spec(cfg, preset_key, split):
    d = cfg["data"]
    n = {"train": d["n_train"], "test": d["n_test"]}.get(split, d["n_valid"])
    return C.preset(preset_key, name=split, seed=cfg["seed"] * 10 + SPLIT_SEED[split], n_utts=n,
                    n_char=d["n_char"], n_word=d["n_word"], noise=d["noise"],
                    frames_per_token=d["frames_per_token"], d_feat=d["d_feat"])


def _write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _decode_models(wd: Workdir, fcfg, shallow: bool) -> DecodeModels:
    asr = wd.asr()
    lm = wd.lm() if fcfg.lambda_lm > 0 else None
    ilm = wd.ilm(asr) if fcfg.lambda_ilm > 0 and not shallow else None
    return DecodeModels(asr, lm, ilm)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, wd: Workdir, args):
    d = cfg["data"]
    train_spec = _corpus_spec(cfg, d["train_preset"], "train")
    vocab = train_spec.vocab()
    cb = C.make_codebook(vocab, C.CodebookSpec(seed=cfg["seed"], d_feat=d["d_feat"],
                                               cluster_mode=d["cluster_mode"], spread=d["spread"]))
    vocab.save(_mkdir(wd.data) / "vocab.json")
    sizes = {}
    for split, key in (("train", "train_preset"), ("dev", "train_preset"), ("valid", "test_preset"),
                       ("test", "test_preset")):
        utts = C.build_dataset(_corpus_spec(cfg, d[key], split), cb)
        C.save_dataset(wd.data, split, utts, vocab)
        sizes[split] = len(utts)
    text = C.text_set(d["lm_text"], n_utts=d["n_lm_text"], seed=cfg["seed"] * 10 + SPLIT_SEED["lm_text"],
                      n_char=d["n_char"], n_word=d["n_word"])
    C.save_text(wd.data / "lm_text.jsonl", text, prefix=d["lm_text"])
    sizes["lm_text"] = len(text)
    print(json.dumps(sizes, sort_keys=True))


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train_asr(cfg, wd: Workdir, args):
    train, dev = wd.split("train"), wd.split("dev")
    vocab = wd.vocab()
    model = AsrModel(vocab, AsrConfig(d_feat=cfg["data"]["d_feat"], **cfg["asr"]), seed=cfg["seed"])
    model, loss_log = train_asr(model, train, dev, _schedule(cfg["train"], cfg["seed"]), cfg["train"]["ctc_weight"])
    model.save(wd.path("asr.ckpt"))
    loss_log.to_csv(wd.path("asr_loss.csv"))
    print(f"wrote {wd.path('asr.ckpt')} and {wd.path('asr_loss.csv')}")


def cmd_train_lm(cfg, wd: Workdir, args):
    vocab = wd.vocab()
    text = C.load_text(wd.data / "lm_text.jsonl")
    valid = [u.tokens for u in wd.split("valid")]
    model = LmModel(vocab, LmConfig(**cfg["lm"]), seed=cfg["seed"] + 1)
    model, loss_log = train_lm(model, text, _schedule(cfg["lm_train"], cfg["seed"] + 1), valid_text=valid)
    model.save(wd.path("lm.ckpt"))
    loss_log.to_csv(wd.path("lm_loss.csv"))
    print(f"wrote {wd.path('lm.ckpt')}")


def cmd_train_ilm(cfg, wd: Workdir, args):
    if args.method:
        cfg["ilm"]["method"] = args.method
    asr = wd.asr()
    section = cfg["ilm"]
    ilm = attach_ilm(asr, section["method"], hidden=section["hidden"], seed=cfg["seed"] + 2)
    transcripts = [u.tokens for u in wd.split("train")]
    valid = [u.tokens for u in wd.split("dev")]
    ilm, report = train_ilm(asr, ilm, transcripts, _schedule({**section, "n_average": 0}, cfg["seed"] + 2), valid)
    ilm.save(wd.path("ilm.ckpt"), asr)
    summary = {"method": section["method"], "parameters": ilm.num_parameters, "train_ce": report.train_ce,
               "valid_ce": report.valid_ce, "valid_perplexity": report.valid_perplexity,
               "checksum_before": report.checksum_before, "checksum_after": report.checksum_after}
    wd.path("ilm_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {wd.path('ilm.ckpt')} ({ilm.num_parameters} parameters, "
          f"valid perplexity {report.valid_perplexity:.3f})")


def _apply_decode_flags(cfg, args):
    for key in ("lambda_lm", "lambda_ilm", "ctc_weight", "ilm_target", "beam_size", "max_len_ratio",
                "length_penalty", "split", "jobs", "nbest"):
        value = getattr(args, key, None)
        if value is not None:
            cfg["decode"][key] = value
    cfgmod.validate(cfg)


def cmd_decode(cfg, wd: Workdir, args):
    _apply_decode_flags(cfg, args)
    fcfg = cfgmod.fusion_config(cfg)
    if args.shallow:
        fcfg = replace(fcfg, lambda_ilm=0.0)
    split = cfg["decode"]["split"]
    utts = wd.split(split)
    if args.limit:
        utts = sorted(utts, key=lambda u: u.utt_id)[:args.limit]
    models = _decode_models(wd, fcfg, args.shallow)
    records = decode_utterances(utts, models, fcfg, jobs=cfg["decode"]["jobs"], shallow=args.shallow)
    nbest = cfg["decode"]["nbest"]
    for r in records:
        r["nbest"] = r["nbest"][:nbest]
    out = Path(args.output) if args.output else wd.path(f"decode.{split}.jsonl")
    _write_jsonl(out, records)
    print(f"wrote {len(records)} records to {out}")


def _score_records(vocab: Vocab, utts, records):
    classes = vocab.class_map()
    by_id = {u.utt_id: u for u in utts}
    rows, reports = [], []
    for rec in records:
        if rec["utt_id"] not in by_id:
            raise CliError(f"decoded utterance {rec['utt_id']} not in reference split")
        ref = by_id[rec["utt_id"]].tokens
        hyp = rec["nbest"][0]["tokens"] if rec["nbest"] else []
        rep = mer(MixedTokenSeq.from_symbols(ref, classes), MixedTokenSeq.from_symbols(hyp, classes))
        reports.append(rep)
        rows.append((rec["utt_id"], vocab.render(vocab.encode(ref)), vocab.render(vocab.encode(hyp)), rep))
    return rows, pool(reports)


def cmd_eval(cfg, wd: Workdir, args):
    vocab = wd.vocab()
    splits = args.splits or [cfg["decode"]["split"]]
    summary = []
    utt_rows = []
    lm = wd.lm() if wd.path("lm.ckpt").exists() else None
    asr = wd.asr() if wd.path("ilm.ckpt").exists() else None
    ilm = wd.ilm(asr) if asr is not None else None
    for split in splits:
        utts = wd.split(split)
        records = _read_jsonl(wd.require(f"decode.{split}.jsonl"))
        rows, total = _score_records(vocab, utts, records)
        utt_rows += [(split, *r) for r in rows]
        seqs = [u.tokens for u in utts]
        lm_ppl = ilm_ppl = float("nan")
        if lm is not None:
            scores = dict(zip(map(tuple, seqs), lm_sequence_logprobs(lm, [vocab.encode(s) for s in seqs])))
            lm_ppl = perplexity(lambda s: scores[tuple(s)], seqs)
        if ilm is not None:
            ilm_ppl = perplexity(lambda s: ilm_sequence_logprob(asr, ilm, s), seqs)
        per = total.per_class
        summary.append({"split": split, "utterances": len(records), "ref_units": total.ref_len,
                        "substitutions": total.substitutions, "insertions": total.insertions,
                        "deletions": total.deletions, "mer": total.mer,
                        **{f"mer_{k}": (v["S"] + v["I"] + v["D"]) / v["ref_len"] if v["ref_len"] else float("nan")
                           for k, v in sorted(per.items())},
                        "lm_perplexity": lm_ppl, "ilm_perplexity": ilm_ppl})
    fields = sorted({k for row in summary for k in row}, key=lambda k: (k != "split", k))
    with open(wd.path("eval.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        for row in summary:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    with open(wd.path("eval_utts.tsv"), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["split", "utt_id", "ref", "hyp", "S", "I", "D", "ref_units"])
        for split, utt_id, ref, hyp, rep in utt_rows:
            w.writerow([split, utt_id, ref, hyp, rep.substitutions, rep.insertions, rep.deletions, rep.ref_len])
    for row in summary:
        print(f"{row['split']}: MER {row['mer']:.4f} over {row['ref_units']} units")


def cmd_sweep(cfg, wd: Workdir, args):
    _apply_decode_flags(cfg, args)
    if args.grid:
        cfg["sweep"]["grid"] = args.grid
    grid = [float(x) for x in cfg["sweep"]["grid"]]
    if any(x < 0 or not math.isfinite(x) for x in grid) or not grid:
        raise cfgmod.ConfigError("sweep.grid needs non-negative finite weights")
    fcfg = cfgmod.fusion_config(cfg)
    asr = wd.asr()
    models = DecodeModels(asr, wd.lm() if fcfg.lambda_lm > 0 else None,
                          wd.ilm(asr) if any(x > 0 for x in grid) else None)
    utts = wd.split(cfg["sweep"]["split"])
    result = sweep_ilm_weight(utts, models, fcfg, grid)
    best = pick_lambda(result)
    with open(wd.path("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_ilm", "mer"])
        for lam in grid:
            w.writerow([f"{lam:g}", f"{result[lam]:.6f}"])
    from ilmfusion.plotting import plot_sweep

    plot_sweep([(lam, result[lam]) for lam in grid], wd.path("sweep.png"), best)
    print(f"best lambda_ilm {best:g} (MER {result[best]:.4f}); wrote sweep.csv and sweep.png")


def cmd_diag_loss(cfg, wd: Workdir, args):
    src = Path(args.loss_csv) if args.loss_csv else wd.require("asr_loss.csv")
    if not src.exists():
        raise CliError(f"missing loss CSV {src}")
    loss_log = LossLog.from_csv(src)
    reports = diagnose(loss_log, min_rise=cfg["diag"]["min_rise"])
    write_curves(wd.path("diag_curves.csv"), loss_log)
    flags = {k: {"flagged": r.flagged, "longest_rise": r.longest_rise, "start_epoch": r.start_epoch}
             for k, r in reports.items()}
    wd.path("diag.json").write_text(json.dumps(flags, indent=2, sort_keys=True) + "\n")
    from ilmfusion.plotting import plot_loss_curves

    plot_loss_curves(loss_log, wd.path("diag_loss.png"), flags={k: r.flagged for k, r in reports.items()})
    for k, r in reports.items():
        print(f"{k}: valid divergence {'FLAGGED' if r.flagged else 'not flagged'} (longest rise {r.longest_rise})")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-asr": cmd_train_asr,
    "train-lm": cmd_train_lm,
    "train-ilm": cmd_train_ilm,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep-ilm-weight": cmd_sweep,
    "diag-loss": cmd_diag_loss,
}


def _fusion_flags(p):
    p.add_argument("--lambda-lm", dest="lambda_lm", type=float)
    p.add_argument("--lambda-ilm", dest="lambda_ilm", type=float)
    p.add_argument("--ctc-weight", dest="ctc_weight", type=float)
    p.add_argument("--ilm-target", dest="ilm_target", choices=["attention_only", "joint"])
    p.add_argument("--beam-size", dest="beam_size", type=int)
    p.add_argument("--max-len-ratio", dest="max_len_ratio", type=float)
    p.add_argument("--length-penalty", dest="length_penalty", type=float)
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilmfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", required=True, help="directory holding data, checkpoints and outputs")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. train.epochs=5")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-ilm":
            p.add_argument("--method", choices=["otcl", "lscl"])
        if name in ("decode", "sweep-ilm-weight"):
            _fusion_flags(p)
        if name == "decode":
            p.add_argument("--split", choices=list(cfgmod.SPLITS))
            p.add_argument("--nbest", type=int)
            p.add_argument("--shallow", action="store_true", help="dedicated shallow-fusion path")
            p.add_argument("--limit", type=int, help="decode only the first N utterances by utt_id")
            p.add_argument("--output")
        if name == "sweep-ilm-weight":
            p.add_argument("--grid", type=float, nargs="+")
        if name == "eval":
            p.add_argument("--splits", nargs="+", choices=list(cfgmod.SPLITS))
        if name == "diag-loss":
            p.add_argument("--loss-csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    wd = Workdir(args.workdir)
    try:
        cfg = cfgmod.load(args.config, args.overrides)
        _mkdir(wd.root)
        COMMANDS[args.command](cfg, wd, args)
        cfgmod.dump(cfg, wd.path(f"config.{args.command}.json"))
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
