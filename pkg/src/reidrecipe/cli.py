"""Command-line entry point: ``reidrecipe <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 validation, 5 numeric fault.
Every subcommand writes ``run_header.txt`` (command, seed, format
versions, full config) into its output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from . import attribution as attr
from . import evalrank, gradcheck, persist, rerank, synthdata, trainer
from .augment import resize_largest_side
from .config import RunConfig, load_config
from .errors import NumericFault, ReidError, StorageError, UsageError
from .model import embed_array, init_model
from .pnm import atomic_write_text

log = logging.getLogger("reidrecipe")

HEADER_NAME = "run_header.txt"


# ---------------------------------------------------------------- helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_header(out_dir, command, cfg: RunConfig, extra=None):
    lines = [f"command={command}", f"seed={cfg.seed}", f"package_version={__version__}",
             f"checkpoint_format=RDRC v{persist.CHECKPOINT_VERSION}",
             f"index_format=RDIX v{persist.INDEX_VERSION}"]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    text = "\n".join(lines) + "\n# config\n" + cfg.to_text()
    atomic_write_text(os.path.join(out_dir, HEADER_NAME), text)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return cfg.with_values(values, "command line") if values else cfg


def _samples(manifest_path, *splits):
    manifest = synthdata.load_manifest(manifest_path)
    recs = [r for r in manifest.records if not splits or r.split in splits]
    return [synthdata.load_sample(manifest, r) for r in recs]


def _metric_rows(res: evalrank.EvalResult, max_rank):
    rows = [("mAP", res.mAP), ("num_valid_queries", res.num_valid_queries)]
    rows += [(f"cmc_{k}", res.rank(k)) for k in range(1, min(max_rank, len(res.cmc)) + 1)]
    return rows


def _write_eval(out_dir, res, index, max_rank, name="metrics.csv"):
    write_csv(os.path.join(out_dir, name), ["metric", "value"], _metric_rows(res, max_rank))
    per = [(r, int(index.identities[r]), int(index.cameras[r]), ap) for r, ap in res.per_query_ap]
    stem = os.path.splitext(name)[0]
    write_csv(os.path.join(out_dir, f"{stem}_per_query.csv"), ["row", "identity", "camera", "ap"], per)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    kw = cfg.data.generate_kwargs()
    ds = synthdata.generate_dataset(out_dir=args.out, **kw)
    write_header(args.out, "gen-data", cfg)
    counts = ds.manifest.counts
    print("wrote " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) + f" to {args.out}")


def cmd_pretrain(args, cfg):
    train = _samples(args.manifest, "train")
    model = init_model(cfg.backbone, cfg.seed)
    res = trainer.pretrain_classification(train, model, cfg.pretrain_cfg())
    os.makedirs(args.out, exist_ok=True)
    persist.save_model(os.path.join(args.out, "pretrain.rdrc"), res.model, "pretrain", cfg.seed,
                       {"train_accuracy": repr(float(res.train_accuracy))})
    write_csv(os.path.join(args.out, "pretrain_log.csv"), ["iter", "loss"], list(enumerate(res.losses)))
    write_header(args.out, "pretrain", cfg)
    print(f"train accuracy {res.train_accuracy:.4f}")


def cmd_train(args, cfg):
    train = _samples(args.manifest, "train")
    model = persist.load_model(args.init) if args.init else init_model(cfg.backbone, cfg.seed)
    res = trainer.train_triplet(train, model, cfg.triplet_cfg())
    os.makedirs(args.out, exist_ok=True)
    persist.save_model(os.path.join(args.out, "model.rdrc"), res.model, "triplet", cfg.seed)
    step_keys = ["step", "lr", "mean_loss", "active_frac", "cutout_frac"]
    write_csv(os.path.join(args.out, "steps.csv"), step_keys, [[s[k] for k in step_keys] for s in res.steps])
    hard_keys = ["refresh", "update", "pool_mean_loss", "sampled_mean_loss"]
    write_csv(os.path.join(args.out, "hardness.csv"), hard_keys,
              [[h[k] for k in hard_keys] for h in res.hardness])
    write_header(args.out, "train", cfg, {"init": args.init or "random"})
    print(f"{res.optimizer_steps} optimizer steps")


def cmd_embed(args, cfg):
    model = persist.load_model(args.checkpoint)
    samples = _samples(args.manifest, *evalrank.ROLES)
    index = evalrank.extract_index(model, samples, cfg.eval.side)
    persist.save_index(args.out, index)
    write_header(os.path.dirname(os.path.abspath(args.out)), "embed", cfg, {"checkpoint": args.checkpoint})
    print(f"indexed {index.count} rows of dim {index.dim}")


def cmd_eval(args, cfg):
    index = persist.load_index(args.index)
    if args.multi_query:
        index = evalrank.multi_query_index(index)
    res = evalrank.evaluate(index, max_rank=cfg.eval.max_rank)
    _write_eval(args.out, res, index, cfg.eval.max_rank)
    write_header(args.out, "eval", cfg, {"index": args.index, "multi_query": args.multi_query})
    print(f"mAP {res.mAP:.4f} CMC@1 {res.rank(1):.4f} ({res.num_valid_queries} queries)")


def cmd_rerank(args, cfg):
    index = persist.load_index(args.index)
    e = cfg.eval
    res = rerank.rerank_evaluate(index, e.n_query, e.n_gallery, e.include_self, e.max_rank)
    _write_eval(args.out, res, index, e.max_rank)
    write_header(args.out, "rerank", cfg, {"index": args.index})
    print(f"re-ranked mAP {res.mAP:.4f} CMC@1 {res.rank(1):.4f}")


def _pairs(samples, n):
    """First ``n`` (query, cross-camera gallery) pairs of one identity each."""
    out = []
    for q in samples:
        if q.split != "query":
            continue
        for g in samples:
            if g.split == "gallery" and g.identity == q.identity and g.camera != q.camera:
                out.append((q, g))
                break
        if len(out) == n:
            break
    return out


def cmd_attribute(args, cfg):
    model = persist.load_model(args.checkpoint)
    samples = _samples(args.manifest, "query", "gallery")
    a = cfg.attribution
    pairs = _pairs(samples, args.pairs)
    for k, (q, g) in enumerate(pairs):
        xq = resize_largest_side(q.pixels, cfg.eval.side)
        xg = resize_largest_side(g.pixels, cfg.eval.side)
        eq, eg = embed_array(model, xq), embed_array(model, xg)
        dims = attr.top_contrib_dims(eq, eg, a.top_dims)
        stem = os.path.join(args.out, f"pair{k:03d}")
        attr.write_contributions(stem + "_contrib.csv", attr.contributions(eq, eg, dims))
        for tag, x, src in (("query", xq, q), ("match", xg, g)):
            hm = attr.gradcam_map(model, x, dims, src.source_path)
            attr.export_heatmap(hm, x, f"{stem}_{tag}_gradcam")
        att = attr.implicit_attention(model, xq, min(a.attention_dims, model.config.embed_dim),
                                      a.attention_mode, q.source_path)
        attr.export_heatmap(att, xq, f"{stem}_query_attention")
    write_header(args.out, "attribute", cfg, {"checkpoint": args.checkpoint})
    print(f"wrote attribution maps for {len(pairs)} pairs")


def cmd_grad_check(args, cfg):
    results = gradcheck.run_suite(cfg.seed)
    for r in results:
        print(f"{r.name:32s} {r.max_rel_error:.3e} kink-margin {r.kink_margin:.3g}")
    worst = gradcheck.worst(results)
    print(f"worst relative error {worst:.3e}")
    if args.out:
        write_csv(os.path.join(args.out, "grad_check.csv"), ["case", "max_rel_error", "kink_margin"],
                  [(r.name, r.max_rel_error, r.kink_margin) for r in results])
        write_header(args.out, "grad-check", cfg)
    if not all(r.passed for r in results):
        raise NumericFault(f"gradient check failed: worst relative error {worst:.3e} "
                           f"(limit {gradcheck.TOLERANCE:g})")


def cmd_ablate(args, cfg):
    if args.arms not in trainer.ARM_SETS:
        raise UsageError(f"unknown arm set {args.arms!r}; choose from {sorted(trainer.ARM_SETS)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    manifest = synthdata.load_manifest(args.manifest)
    samples = [synthdata.load_sample(manifest, r) for r in manifest.records]
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split in ("query", "gallery")]
    rows = trainer.run_ablation_grid(train, test, trainer.ARM_SETS[args.arms], seeds, cfg.backbone,
                                     cfg.pretrain, cfg.triplet, eval_side=None)
    keys = ["arm", "seed", "mAP", "cmc_1", "cmc_5"]
    write_csv(os.path.join(args.out, "ablation.csv"), keys, [[r[k] for k in keys] for r in rows])
    write_header(args.out, "ablate", cfg, {"arms": args.arms, "seeds": args.seeds})
    for arm in trainer.ARM_SETS[args.arms]:
        vals = [r["mAP"] for r in rows if r["arm"] == arm.name]
        print(f"{arm.name:12s} mean mAP {np.mean(vals):.4f}")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="reidrecipe", description="Desk-scale person re-identification recipe.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_text, out=True, out_required=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        sp.add_argument("-v", "--verbose", action="store_true")
        if out:
            sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "render a synthetic dataset and manifest")
    sp = add("pretrain", cmd_pretrain, "identity-classification pretraining")
    sp.add_argument("--manifest", required=True)
    sp = add("train", cmd_train, "triplet training with hard mining and cut-out")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--init", help="checkpoint to start from (default: random init)")
    sp = add("embed", cmd_embed, "embed query/gallery/distractor images into an index", out=False)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="index file to write")
    sp = add("eval", cmd_eval, "mAP and CMC of an index")
    sp.add_argument("--index", required=True)
    sp.add_argument("--multi-query", action="store_true", help="average queries per identity and camera")
    sp = add("rerank", cmd_rerank, "evaluate after query/gallery expansion")
    sp.add_argument("--index", required=True)
    sp = add("attribute", cmd_attribute, "Grad-CAM maps for matching pairs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pairs", type=int, default=4)
    add("grad-check", cmd_grad_check, "finite-difference gradient suite", out_required=False)
    sp = add("ablate", cmd_ablate, "train and evaluate an arm set over seeds")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--arms", default="augment", help=f"one of {sorted(trainer.ARM_SETS)}")
    sp.add_argument("--seeds", default="0,1,2")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        if getattr(args, "out", None) and args.command != "embed":
            os.makedirs(args.out, exist_ok=True)
        args.func(args, cfg)
        return 0
    except ReidError as exc:
        print(f"reidrecipe: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"reidrecipe: io error: {exc}", file=sys.stderr)
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
