"""Command-line entry point: train, eval, embed, plot-latent, divcheck.

Exit codes: 0 success, 1 failed property check, 2 configuration error,
3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .losses import NonFiniteLossError
from .trainer import ConfigError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_ENV = "SIDESCORE_OUT"

log = logging.getLogger("sidescore")


def _out_dir(arg, default_name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _load_run_config(path):
    from .experiment import read_config
    cp = read_config(path)
    return cp, Path(path).resolve().parent


def cmd_train(args) -> int:
    from .experiment import materialize, model_spec_from, prepare_data, train_config_from
    from .model import save_checkpoint
    from .trainer import train, train_semi_supervised

    cp, base = _load_run_config(args.config)
    cfg = train_config_from(cp)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    prepared = prepare_data(cp, base)
    spec = model_spec_from(cp, prepared.train)
    if len(prepared.labeled_idx):
        trained, history = train_semi_supervised(spec, prepared.train, cfg,
                                                 prepared.labeled_idx, prepared.labeled_y)
    else:
        trained, history = train(spec, prepared.train, cfg)

    out = _out_dir(args.out, Path(args.config).stem)
    out.mkdir(parents=True, exist_ok=True)
    manifest = materialize(cp, spec, cfg)
    manifest["run"] = {k: str(v) for k, v in sorted(trained.manifest.items())
                       if not isinstance(v, dict)}
    manifest["run"]["config_dir"] = str(base)
    trained.manifest["config"] = {s: dict(manifest[s]) for s in manifest.sections()}
    save_checkpoint(out / "checkpoint.pt", trained)
    with open(out / "manifest.txt", "w") as fh:
        manifest.write(fh)
    (out / "history.tsv").write_text(history.to_table())
    (out / "timing.tsv").write_text(
        "epoch\tseconds\n" + "".join(f"{i}\t{s:.3f}\n" for i, s in enumerate(history.seconds, 1)))
    print(f"wrote {out / 'checkpoint.pt'}")
    print(f"final total loss {history.totals()[-1]:.6f}")
    return EXIT_OK


def _config_from_checkpoint(trained, data_arg):
    import configparser
    from .experiment import read_config
    if data_arg:
        cp = read_config(data_arg)
        return cp, Path(data_arg).resolve().parent
    cfg = trained.manifest.get("config")
    if not cfg:
        raise ConfigError("checkpoint has no embedded config; pass --data")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(cfg)
    base = Path(cfg.get("run", {}).get("config_dir", "."))
    cp.remove_section("run")
    return cp, base


def _load_for_inference(args):
    from .experiment import prepare_data
    from .model import load_checkpoint
    try:
        trained = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise D.DataError(str(exc)) from None
    cp, base = _config_from_checkpoint(trained, args.data)
    if args.schema:
        cp.set("data", "schema", str(Path(args.schema).resolve()))
    prepared = prepare_data(cp, base)
    if prepared.test.features.shape[1] != trained.spec.input_dim:
        raise D.DataError(f"data has {prepared.test.features.shape[1]} features, "
                          f"checkpoint expects {trained.spec.input_dim}")
    return trained, prepared


def cmd_eval(args) -> int:
    from .evaluation import write_report, write_table
    from .experiment import evaluate

    trained, prepared = _load_for_inference(args)
    if not prepared.test.has_eval_labels:
        raise D.DataError("evaluation data has no eval_label column")
    metrics = evaluate(trained, prepared.train, prepared.test)
    out = _out_dir(args.out, Path(args.checkpoint).resolve().parent.name)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "metrics.txt", metrics)
    write_table(out / "metrics.tsv", metrics)
    for k, v in metrics.items():
        print(f"{k}: {v}")
    return EXIT_OK


EMBED_EXTRAS = ("side", "inferred_side", "score", "label")


def cmd_embed(args) -> int:
    import torch

    trained, prepared = _load_for_inference(args)
    ds = prepared.test if args.split == "test" else prepared.train
    extras = [e for e in (args.extra.split(",") if args.extra else []) if e]
    bad = set(extras) - set(EMBED_EXTRAS)
    if bad:
        raise ConfigError(f"unknown --extra columns {sorted(bad)}; choose from {EMBED_EXTRAS}")
    model = trained.model
    with torch.no_grad():
        post = model.encode(ds.features)
        mean = post.mean.double().numpy()
        var = post.var.double().numpy()
    d = mean.shape[1]
    header = ["id"] + [f"mean_{i}" for i in range(d)] + [f"var_{i}" for i in range(d)]
    cols = [np.arange(len(ds)), *mean.T, *var.T]
    for e in extras:
        header.append(e)
        if e == "side":
            if ds.side is None:
                raise D.DataError("dataset has no side information")
            cols.append(ds.side.values)
        elif e == "inferred_side":
            with torch.no_grad():
                pred = model.predict_side(post.mean)
            if trained.spec.side_kind == "categorical":
                cols.append(pred.argmax(1).numpy())
            else:
                sd = float(trained.manifest.get("side_std", 1.0))
                cols.append(pred[0].double().numpy() * sd + float(trained.manifest.get("side_mean", 0.0)))
        elif e == "score":
            cols.append(model.hard_score(ds.features))
        else:
            cols.append(ds.eval_labels)
    out = Path(args.out) if args.out else _out_dir(None, "embed") / "embeddings.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in zip(*cols):
            fh.write("\t".join(repr(int(v)) if i == 0 else repr(float(v)) for i, v in enumerate(row)) + "\n")
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def read_embeddings(path):
    path = Path(path)
    if not path.exists():
        raise D.DataError(f"embeddings file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise D.DataError(f"{path}: empty embeddings file")
    header = lines[0].split("\t")
    try:
        table = np.array([[float(c) for c in ln.split("\t")] for ln in lines[1:]], dtype=np.float64)
    except ValueError:
        raise D.DataError(f"{path}: non-numeric entry") from None
    if table.ndim != 2 or table.shape[1] != len(header):
        raise D.DataError(f"{path}: ragged table")
    return header, table


def cmd_plot_latent(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .evaluation import pca_project

    header, table = read_embeddings(args.embeddings)
    mean_cols = [i for i, h in enumerate(header) if h.startswith("mean_")]
    if not mean_cols:
        raise D.DataError("embeddings file has no mean_* columns")
    if args.color_by not in header:
        raise ConfigError(f"unknown color column {args.color_by!r}; available: {header}")
    emb = table[:, mean_cols]
    proj = pca_project(emb, 2) if emb.shape[1] >= 2 else None
    coords = proj.coords if proj is not None else np.column_stack([emb[:, 0], np.zeros(len(emb))])
    color = table[:, header.index(args.color_by)]

    fig, ax = plt.subplots(figsize=(5, 4.5), dpi=100)
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=color, s=6, cmap="viridis")
    fig.colorbar(sc, ax=ax, label=args.color_by)
    if proj is not None:
        ax.set_xlabel(f"PC1 ({proj.explained[0]:.0%})")
        ax.set_ylabel(f"PC2 ({proj.explained[1]:.0%})")
    ax.set_title(f"latent space coloured by {args.color_by}")
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, metadata={"Software": None})
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_divcheck(args) -> int:
    from .checks import run_divergence_checks

    results = run_divergence_checks(args.n_trials, args.seed,
                                    broken_interpolant=args.broken_interpolant,
                                    strict_metric=args.strict_metric)
    for r in results:
        print(r.line())
    gating = [r for r in results if r.gating]
    failed = [r for r in gating if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}")
    else:
        print(f"{len(gating)}/{len(gating)} gating properties hold")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sidescore", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<config name>)")
    p.add_argument("--seed", type=int, help="override [train] seed")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on its test split"),
                                 ("embed", cmd_embed, "write posterior means and variances")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="run config whose [data] section to use "
                                      "(default: the one stored in the checkpoint)")
        p.add_argument("--schema", help="override the CSV column schema")
        p.add_argument("--out")
        p.set_defaults(func=func)
        if name == "embed":
            p.add_argument("--split", choices=("train", "test"), default="test")
            p.add_argument("--extra", default="",
                           help=f"comma-separated extra columns from {','.join(EMBED_EXTRAS)}")

    p = sub.add_parser("plot-latent", help="PCA scatter of an embeddings file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--color-by", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_latent)

    p = sub.add_parser("divcheck", help="run the divergence property suite")
    p.add_argument("--n-trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict-metric", action="store_true",
                   help="make the triangle-inequality check gating")
    p.add_argument("--broken-interpolant", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_divcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
