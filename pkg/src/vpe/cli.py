"""``vpe`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from vpe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from vpe.config import RunConfig, resolve
from vpe.data.benchmark import generate_benchmark
from vpe.data.images import write_png
from vpe.data.loader import Item, load_dataset
from vpe.data.manifest import PROTOTYPE_FILE
from vpe.errors import ConfigError, DataError, NumericalError
from vpe.oneshot import PROTOCOLS, EvalProtocol, SupportSet, evaluate, score
from vpe.retrieval import evaluate_retrieval, write_retrieval
from vpe.train import TrainState, train

log = logging.getLogger("vpe")

CHECKPOINT_FILE = "model.vpec"
TRACE_FILE = "loss_trace.csv"
LOCK_FILE = ".vpe.lock"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@contextmanager
def run_lock(out_dir: Path):
    """Exclusive lock on an output directory; stale locks of dead processes are taken over."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_FILE
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError, FileNotFoundError):
                lock.unlink(missing_ok=True)
                continue
            except PermissionError:
                pass
            raise ConfigError(f"{out_dir} is locked by process {pid} ({lock})") from None
    else:
        raise ConfigError(f"cannot acquire lock {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_id(path: Path) -> str:
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
    return f"{path.name}@{digest}"


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig) -> int:
    if not rc.run().out:
        raise ConfigError("gen-data needs --out")
    out = Path(rc.run().out)
    cfg = rc.data()
    with run_lock(out):
        manifest = generate_benchmark(out, cfg)
    print(f"wrote {len(manifest.classes)} classes, {manifest.n_reals} real images to {out}")
    return 0


def _dataset(rc: RunConfig, input_size: int):
    data = rc.run().data
    if not data:
        raise ConfigError("--data is required")
    return load_dataset(data, input_size, rc.run().holdout)


def cmd_train(args, rc: RunConfig) -> int:
    opts = rc.run()
    if not opts.out:
        raise ConfigError("train needs --out")
    out = Path(opts.out)
    model_cfg, tcfg = rc.model(), rc.train()
    dataset = _dataset(rc, model_cfg.input_size)
    dataset.check_trainable()

    resume = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.adam is None:
            raise DataError(f"{args.resume}: no optimizer state to resume from")
        if ck.config != model_cfg:
            raise ConfigError("resumed checkpoint's model config differs from the requested one")
        resume = TrainState(ck.model, ck.adam, ck.iteration, rng_state=ck.rng_state)

    validate = None
    val_labels = dataset.class_labels("unseen", ("val",))
    if tcfg.val_every and val_labels:
        protocol = EvalProtocol("unseen", roles=("val",))
        validate = lambda model: evaluate(model, dataset, protocol).accuracy  # noqa: E731
    elif tcfg.val_every:
        log.warning("val_every set but the dataset has no unseen validation classes")

    dump = {}
    on_step = None
    if args.dump_targets:
        def on_step(i, x, t):
            if i == 0:
                dump["input"], dump["target"] = x.copy(), t.copy()

    with run_lock(out):
        rc.write(out, ("model", "train", "run"))
        state = train(dataset, model_cfg, tcfg, validate=validate, keep_best=opts.keep_best,
                      resume=resume, on_step=on_step)
        meta = {"target_mode": model_cfg.target_mode, "augment": str(tcfg.augment)}
        if state.best_iteration is not None:
            meta["best_iteration"] = str(state.best_iteration)
            meta["best_score"] = repr(state.best_score)
        save_checkpoint(out / CHECKPOINT_FILE,
                        Checkpoint(state.model, state.adam, state.iteration, tcfg.seed,
                                   state.rng_state, meta))
        mode = "a" if resume is not None and (out / TRACE_FILE).exists() else "w"
        with open(out / TRACE_FILE, mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(["iteration", "loss", "recon", "kl"])
            for row in state.trace:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        if dump:
            np.savez(args.dump_targets, **dump)
    first = state.trace[0][1] if state.trace else float("nan")
    last = state.trace[-1][1] if state.trace else float("nan")
    print(f"trained {state.iteration} iterations; loss {first:.2f} -> {last:.2f}; "
          f"checkpoint {out / CHECKPOINT_FILE}")
    return 0


def _load(rc: RunConfig):
    opts = rc.run()
    if not opts.checkpoint:
        raise ConfigError("--checkpoint is required")
    path = Path(opts.checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    ck = load_checkpoint(path)
    return ck, checkpoint_id(path), _dataset(rc, ck.config.input_size)


def _oracle_model(dataset):
    """Stand-in whose embedding of any image is its class prototype's one-hot code."""
    lookup = {}
    for e in dataset.manifest.classes:
        lookup[dataset.prototype(e.label).tobytes()] = e.label
        for p in e.reals:
            lookup[dataset.image(p).tobytes()] = e.label

    class Oracle:
        class config:
            latent_dim = dataset.n_classes

        def embed(self, x):
            out = np.zeros((len(x), dataset.n_classes))
            for i, img in enumerate(x):
                out[i, lookup[np.ascontiguousarray(img).tobytes()]] = 1.0
            return out

    return Oracle()


def cmd_eval_oneshot(args, rc: RunConfig) -> int:
    out = Path(rc.run().out or ".")
    if args.oracle:
        dataset = _dataset(rc, rc.model().input_size)
        model, ck_id = _oracle_model(dataset), "oracle"
    else:
        ck, ck_id, dataset = _load(rc)
        model = ck.model
    with run_lock(out):
        rc.write(out, ("run",))
        for name in args.protocol:
            report = evaluate(model, dataset, EvalProtocol(name), ck_id)
            report.write(out)
            print(f"{name}: top-1 accuracy {report.accuracy:.4f} "
                  f"({report.n_queries} queries, {report.n_support}-way)")
    return 0


def cmd_eval_retrieval(args, rc: RunConfig) -> int:
    out = Path(rc.run().out or ".")
    if args.oracle:
        dataset = _dataset(rc, rc.model().input_size)
        model = _oracle_model(dataset)
    else:
        ck, _, dataset = _load(rc)
        model = ck.model
    with run_lock(out):
        rc.write(out, ("run",))
        report = evaluate_retrieval(model, dataset, args.split, rc.run().top_k)
        write_retrieval(report, dataset, out)
    print(f"{args.split}: mean PR-AUC {report.mean_auc:.4f} over {len(report.auc)} classes")
    return 0


def cmd_reconstruct(args, rc: RunConfig) -> int:
    ck, _, dataset = _load(rc)
    out = Path(rc.run().out or ".")
    rows = rc.run().rows
    if rows < 1:
        raise ConfigError("--rows must be >= 1")
    rng = np.random.default_rng(args.seed)
    grids = {}
    for split in ("seen", "unseen"):
        items = dataset.query_items(split)
        if not items:
            continue
        pick = sorted(rng.choice(len(items), size=min(rows, len(items)), replace=False))
        chosen = [items[i] for i in pick]
        x = dataset.images(chosen)
        decoded = ck.model.decode(ck.model.embed(x))
        protos = dataset.prototypes([it.label for it in chosen])
        # rows of (input | decoded | true prototype)
        grids[split] = np.concatenate([np.concatenate([a, b, c], axis=2)
                                       for a, b, c in zip(x, decoded, protos)], axis=1)
    with run_lock(out):
        for split, grid in grids.items():
            write_png(out / f"reconstruct_{split}.png", grid)
            print(f"wrote {out / f'reconstruct_{split}.png'}")
    return 0


def cmd_export_embeddings(args, rc: RunConfig) -> int:
    ck, _, dataset = _load(rc)
    out = Path(rc.run().out or "embeddings.csv")
    if out.suffix != ".csv":
        out = out / "embeddings.csv"
    entries = [e for e in dataset.manifest.classes
               if args.split == "all" or e.seen == (args.split == "seen")]
    items = [Item(f"{e.name}/{p.name}", p, e.label) for e in entries for p in e.reals]
    ids = [it.item_id for it in items] + [f"{e.name}/{PROTOTYPE_FILE}" for e in entries]
    labels = [it.label for it in items] + [e.label for e in entries]
    emb = [ck.model.embed(dataset.images(items)).astype(np.float64)] if items else []
    emb.append(ck.model.embed(dataset.prototypes([e.label for e in entries])).astype(np.float64))
    with run_lock(out.parent):
        write_embeddings(out, ids, labels, np.concatenate(emb))
    print(f"wrote {len(ids)} embeddings ({len(items)} images, {len(entries)} prototypes) to {out}")
    return 0


def write_embeddings(path: Path, ids, labels, embeddings: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "class_label"] + [f"e{i + 1}" for i in range(embeddings.shape[1])])
        for i, l, row in zip(ids, labels, embeddings.tolist()):
            w.writerow([i, l] + [repr(v) for v in row])


def read_embeddings(path: str | Path):
    """(ids, labels, float64 embeddings) from an export CSV."""
    ids, labels, rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["item_id", "class_label"]:
            raise DataError(f"{path}: not an embedding export")
        for rec in reader:
            ids.append(rec[0])
            labels.append(int(rec[1]))
            rows.append([float(v) for v in rec[2:]])
    return ids, labels, np.array(rows, dtype=np.float64)


def classify_export(path: str | Path, protocol: str = "all"):
    """Re-run one-shot scoring from an export: prototype rows form the support."""
    ids, labels, emb = read_embeddings(path)
    is_proto = np.array([i.endswith("/" + PROTOTYPE_FILE) for i in ids])
    support = SupportSet.from_pairs(np.array(labels)[is_proto], emb[is_proto])
    q = ~is_proto
    return score([i for i, k in zip(ids, q) if k], emb[q], np.array(labels)[q], support, protocol)


# -- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vpe", description="Variational prototyping-encoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.lr=1e-3")
        sp.add_argument("--out", dest="run.out", help="output directory")
        if data:
            sp.add_argument("--data", dest="run.data", help="dataset directory")
        if ckpt:
            sp.add_argument("--checkpoint", dest="run.checkpoint",
                            help="checkpoint file or training output directory")

    g = sub.add_parser("gen-data", help="render the synthetic benchmark")
    common(g, data=False)
    g.add_argument("--classes", dest="data.classes", type=int)
    g.add_argument("--unseen", dest="data.unseen", type=int)
    g.add_argument("--val", dest="data.val", type=int, help="unseen classes kept for validation")
    g.add_argument("--per-class", dest="data.per_class", type=int)
    g.add_argument("--seed", dest="data.seed", type=int)
    g.add_argument("--render-size", dest="data.render_size", type=int)
    g.add_argument("--imbalance", dest="data.imbalance", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a VPE (or the plain VAE baseline)")
    common(t)
    t.add_argument("--toy", dest="run.preset", action="store_const", const="toy",
                   help="16x16 desk-scale architecture")
    t.add_argument("--baseline-vae", dest="model.target_mode", action="store_const", const="self",
                   help="reconstruct the input instead of the prototype")
    t.add_argument("--no-aug", dest="train.augment", action="store_const", const=False)
    t.add_argument("--iterations", dest="train.iterations", type=int)
    t.add_argument("--batch-size", dest="train.batch_size", type=int)
    t.add_argument("--lr", dest="train.lr", type=float)
    t.add_argument("--seed", dest="train.seed", type=int)
    t.add_argument("--input-size", dest="model.input_size", type=int)
    t.add_argument("--latent-dim", dest="model.latent_dim", type=int)
    t.add_argument("--val-every", dest="train.val_every", type=int)
    t.add_argument("--keep-best", dest="run.keep_best", action="store_const", const=True)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--dump-targets", metavar="NPZ",
                   help="debug: save the first step's input and target batches")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-oneshot", help="one-shot top-1 nearest-prototype accuracy")
    common(e, ckpt=True)
    e.add_argument("--protocol", nargs="+", choices=PROTOCOLS, default=list(PROTOCOLS))
    e.add_argument("--oracle", action="store_true",
                   help="use oracle embeddings (queries coincide with their prototypes)")
    e.add_argument("--input-size", dest="model.input_size", type=int,
                   help="image size for --oracle runs")
    e.set_defaults(func=cmd_eval_oneshot)

    r = sub.add_parser("eval-retrieval", help="prototype-to-real retrieval PR-AUC")
    common(r, ckpt=True)
    r.add_argument("--top-k", dest="run.top_k", type=int)
    r.add_argument("--split", choices=("all", "seen", "unseen"), default="unseen")
    r.add_argument("--oracle", action="store_true")
    r.add_argument("--input-size", dest="model.input_size", type=int)
    r.set_defaults(func=cmd_eval_retrieval)

    c = sub.add_parser("reconstruct", help="input / decoded / prototype image grids")
    common(c, ckpt=True)
    c.add_argument("--rows", dest="run.rows", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_reconstruct)

    x = sub.add_parser("export-embeddings", help="write item_id,class_label,e1..eD CSV")
    common(x, ckpt=True)
    x.add_argument("--split", choices=("all", "seen", "unseen"), default="all")
    x.set_defaults(func=cmd_export_embeddings)
    return p


def run_config(args) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if "." in k}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value.strip()
    return resolve(args.config, flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, run_config(args))
    except ConfigError as exc:
        print(f"vpe: configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"vpe: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"vpe: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
