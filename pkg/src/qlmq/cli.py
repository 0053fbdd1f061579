"""Command-line driver: training, evaluation, diagnostics, and export.

Verbs:
  train-teacher   full-precision phase-1 training from a config
  train-quant     quantization-aware distillation against a teacher checkpoint
  eval            perplexity of a checkpoint on a corpus split
  diag            similarity / embedding / histogram / scaling / size artifacts
  export          verify a checkpoint and copy it out of the runs tree

Output directories are named <config-digest>-s<seed> under --out, so reruns
of the same config and seed land on byte-identical artifacts and sweeps
group cleanly. Existing artifacts are never overwritten with different
content unless --force is given.

Exit codes: 0 success, 2 usage/config/missing-input errors, 1 runtime
failures (integrity, compatibility, refusal to overwrite).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_digest, load_checkpoint, pack_model, read_packed
from .config import (
    RunConfig,
    apply_overrides,
    config_digest,
    load_config,
    model_digest,
    serialize_config,
)
from .data import encode_bytes, encode_words, make_windows, split_windows, word_vocab
from .diagnostics import (
    embedding_homogeneity,
    model_size,
    perplexity,
    token_cosine_matrix,
    weight_histogram,
)
from .errors import (
    AbortedRunError,
    CompatibilityError,
    ConfigError,
    ContractError,
    IntegrityError,
    VersionError,
)
from .svgplot import barchart_svg, heatmap_svg, histogram_svg
from .train import RunRecord, train_student, train_teacher


# ---------------------------------------------------------------------------
# small IO helpers


def _say(msg: str) -> None:
    print(msg)


def write_artifact(path: Path, data: bytes, force: bool) -> bool:
    """Write unless an identical file already exists; refuse to clobber.

    Returns True when bytes hit the disk. An existing file with the same
    content makes the write a no-op, which keeps reruns idempotent.
    """
    path = Path(path)
    if path.exists():
        if path.read_bytes() == data:
            _say(f"unchanged {path}")
            return False
        if not force:
            raise FileExistsError(
                f"refusing to overwrite differing artifact {path} (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    _say(f"wrote {path} ({len(data)} bytes)")
    return True


def strict_csv(header: list[str], rows: list[list]) -> bytes:
    """CSV with a constant column count and no NaN/inf cells."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ContractError(
                f"CSV row has {len(row)} cells, header has {len(header)}")
        out = []
        for cell in row:
            if isinstance(cell, float):
                if not math.isfinite(cell):
                    raise ContractError("refusing to write a non-finite CSV cell")
                out.append(repr(cell))
            else:
                out.append(cell)
        w.writerow(out)
    return buf.getvalue().encode()


def _load_corpus_ids(rc: RunConfig) -> np.ndarray:
    path = Path(rc.data["corpus_path"])
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    raw = path.read_bytes()
    if rc.data["vocab"] == "byte":
        ids = encode_bytes(raw)
    else:
        ids = encode_words(raw, word_vocab(raw))
    if ids.size and int(ids.max()) >= rc.model["vocab_size"]:
        raise ConfigError(
            f"corpus token id {int(ids.max())} exceeds model.vocab_size "
            f"{rc.model['vocab_size']}")
    return ids


def _tokenize_sentence(rc: RunConfig, sentence: str) -> np.ndarray:
    raw = sentence.encode()
    if rc.data["vocab"] == "byte":
        return encode_bytes(raw)
    corpus = Path(rc.data["corpus_path"])
    if not corpus.is_file():
        raise FileNotFoundError(
            f"corpus file not found (needed to build the word vocabulary): {corpus}")
    return encode_words(raw, word_vocab(corpus.read_bytes()))


def _resolve_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    rc = load_config(args.config)
    if args.set:
        rc = apply_overrides(rc, args.set)
    if args.seed is not None:
        rc = apply_overrides(rc, [f"train.seed={args.seed}"])
    return rc


def _run_dir(args, rc: RunConfig) -> Path:
    return Path(args.out) / f"{config_digest(rc)}-s{rc.train['seed']}"


def _epoch_end_ppl(record: RunRecord) -> dict[int, float]:
    """step index -> validation perplexity, at the last step of each epoch."""
    last_step = {}
    for s in record.steps:
        last_step[s.epoch] = s.step
    return {last_step[e]: ppl for e, ppl in enumerate(record.val_ppl) if e in last_step}


# ---------------------------------------------------------------------------
# verbs


def cmd_train_teacher(args) -> int:
    rc = _resolve_config(args)
    ids = _load_corpus_ids(rc)
    out = _run_dir(args, rc)
    out.mkdir(parents=True, exist_ok=True)
    model, record = train_teacher(ids, rc.model_config(), rc.train_config())
    model.freeze()
    write_artifact(out / "config.json", serialize_config(rc).encode(), args.force)
    ppl_at = _epoch_end_ppl(record)
    rows = [[s.step, s.loss, s.lr_backbone,
             ppl_at[s.step] if s.step in ppl_at else ""] for s in record.steps]
    write_artifact(out / "metrics.csv",
                   strict_csv(["step", "loss", "lr", "val_ppl"], rows), args.force)
    write_artifact(out / "teacher.ckpt", pack_model(model), args.force)
    _say(f"teacher val PPL {record.val_ppl[-1]:.2f} after {len(record.steps)} steps")
    return 0


def cmd_train_quant(args) -> int:
    rc = _resolve_config(args)
    teacher_path = Path(args.teacher)
    if not teacher_path.is_file():
        raise FileNotFoundError(f"teacher checkpoint not found: {teacher_path}")
    if checkpoint_digest(teacher_path) != model_digest(rc.model):
        raise CompatibilityError(
            f"teacher checkpoint {teacher_path} was trained with a different "
            "model configuration than this config's model section")
    teacher = load_checkpoint(teacher_path)
    ids = _load_corpus_ids(rc)
    out = _run_dir(args, rc)
    out.mkdir(parents=True, exist_ok=True)
    student, _, record = train_student(
        teacher, ids, rc.bit_triple(), rc.quant["scheme"],
        rc.distill_config(), rc.train_config())
    student.freeze()
    student.freeze_activation_ranges()
    write_artifact(out / "config.json", serialize_config(rc).encode(), args.force)
    ppl_at = _epoch_end_ppl(record)
    rows = [[s.step, s.loss, s.l_s2t, s.l_t2s, s.l_cont, s.l_dist,
             s.lr_backbone, s.lr_clip,
             ppl_at[s.step] if s.step in ppl_at else ""] for s in record.steps]
    write_artifact(
        out / "metrics.csv",
        strict_csv(["step", "loss", "l_s2t", "l_t2s", "l_cont", "l_dist",
                    "lr", "lr_clip", "val_ppl"], rows), args.force)
    if record.gamma_snapshots:
        grows = [[e, name, val]
                 for e, dump in record.gamma_snapshots for name, val in dump]
        write_artifact(out / "gamma.csv",
                       strict_csv(["epoch", "name", "value"], grows), args.force)
    write_artifact(out / "student.ckpt", pack_model(student), args.force)
    flag = " (diverged)" if record.diverged else ""
    _say(f"student val PPL {record.val_ppl[-1]:.2f} vs teacher "
         f"{record.teacher_val_ppl:.2f}{flag}")
    return 0


def _split_for_eval(rc: RunConfig, model, split: str) -> np.ndarray:
    ids = _load_corpus_ids(rc)
    windows = make_windows(ids, model.config.max_seq_len)
    train_w, val_w = split_windows(windows, rc.data["val_frac"], rc.train["seed"])
    return val_w if split == "val" else train_w


def cmd_eval(args) -> int:
    rc = _resolve_config(args)
    model = load_checkpoint(args.ckpt)
    windows = _split_for_eval(rc, model, args.split)
    ppl = perplexity(model, windows, rc.train["eval_batch_size"])
    _say(f"PPL {ppl:.2f}")
    out = Path(args.ckpt).parent / f"eval-{args.split}.csv"
    write_artifact(out, strict_csv(["split", "ppl"], [[args.split, ppl]]), args.force)
    return 0


def _arg_digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:10]


def _diag_sim(args, rc, model, out_dir):
    if not args.sentence:
        raise ConfigError("diag sim requires --sentence")
    ids = _tokenize_sentence(rc, args.sentence)
    sm = token_cosine_matrix(model, model, ids)
    tag = _arg_digest({"which": "sim", "sentence": args.sentence})
    header = ["token"] + [str(i) for i in range(sm.values.shape[1])]
    rows = [[str(i)] + [float(v) for v in row] for i, row in enumerate(sm.values)]
    svg = heatmap_svg(sm.values, title=f"token cosine similarity ({len(ids)} tokens)")
    return tag, "sim", header, rows, svg


def _diag_embed(args, rc, model, out_dir):
    ids = _load_corpus_ids(rc)
    counts = np.bincount(ids, minlength=model.config.vocab_size)
    stats = embedding_homogeneity(model, args.top_k, counts)
    rows64 = stats.matrix.astype(np.float64)
    unit = rows64 / np.linalg.norm(rows64, axis=1, keepdims=True)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(cos, 1.0)
    tag = _arg_digest({"which": "embed", "top_k": args.top_k})
    header = ["token_id"] + [str(int(t)) for t in stats.token_ids]
    rows = [[str(int(stats.token_ids[i]))] + [float(v) for v in row]
            for i, row in enumerate(cos)]
    svg = heatmap_svg(
        cos,
        title=(f"top-{args.top_k} embedding cosines; "
               f"mean {stats.mean_pairwise_cosine:.4f}"))
    _say(f"mean pairwise cosine {stats.mean_pairwise_cosine!r} "
         f"l2 {stats.mean_pairwise_l2!r}")
    return tag, "embed", header, rows, svg


def _diag_hist(args, rc, model, out_dir):
    if not args.module:
        raise ConfigError("diag hist requires --module")
    try:
        h = weight_histogram(model, args.module, bins=args.bins)
    except KeyError:
        available = ", ".join(model.params)
        raise ConfigError(
            f"unknown module {args.module!r}; available modules: {available}") from None
    tag = _arg_digest({"which": "hist", "module": args.module, "bins": args.bins})
    header = ["bin_lo", "bin_hi", "count"]
    rows = [[float(h.edges[i]), float(h.edges[i + 1]), int(c)]
            for i, c in enumerate(h.counts)]
    svg = histogram_svg(h.counts, h.edges, title=f"weights of {args.module}",
                        clip_values=h.clip_values)
    return tag, "hist", header, rows, svg


def _diag_scaling(args, rc, model, out_dir, meta):
    gamma = meta.get("gamma") if meta else None
    if not gamma:
        raise ConfigError(
            "this checkpoint has no learned scaling factors "
            "(diag scaling requires the dynamic scheme)")
    rows = []
    for name, val in gamma.items():
        if isinstance(val, list):
            arr = np.asarray(val)
            rows += [[f"{name}.min", float(arr.min())],
                     [f"{name}.median", float(np.median(arr))],
                     [f"{name}.max", float(arr.max())]]
        else:
            rows.append([name, float(val)])
    tag = _arg_digest({"which": "scaling"})
    svg = barchart_svg([r[0] for r in rows], [r[1] for r in rows],
                       title="learned scaling factors")
    return tag, "scaling", ["name", "value"], rows, svg


def _diag_size(args, rc, out_dir):
    mc = rc.model_config()
    bits = rc.bit_triple()
    report = model_size(mc, bits, rc.quant["scheme"])
    tag = _arg_digest({"which": "size", "bits": str(bits), "scheme": rc.quant["scheme"]})
    header = ["quantity", "value"]
    rows = [["total_params", report.total_params],
            ["full_precision_mb", report.mb_full_precision],
            ["quantized_mb", report.mb_quantized],
            ["compression_ratio", report.compression_ratio]]
    svg = barchart_svg(["full", str(bits)],
                       [report.mb_full_precision, report.mb_quantized],
                       title=f"model size (MB), ratio {report.compression_ratio:.1f}x")
    _say(f"full {report.mb_full_precision:.1f} MB -> {report.mb_quantized:.1f} MB "
         f"({report.compression_ratio:.1f}x)")
    return tag, "size", header, rows, svg


def cmd_diag(args) -> int:
    rc = _resolve_config(args)
    if args.which == "size":
        out_dir = _run_dir(args, rc)
        tag, stem, header, rows, svg = _diag_size(args, rc, out_dir)
    else:
        if not args.ckpt:
            raise ConfigError(f"diag {args.which} requires --ckpt")
        model, meta = load_checkpoint(args.ckpt, with_meta=True)
        out_dir = Path(args.ckpt).parent
        if args.which == "sim":
            tag, stem, header, rows, svg = _diag_sim(args, rc, model, out_dir)
        elif args.which == "embed":
            tag, stem, header, rows, svg = _diag_embed(args, rc, model, out_dir)
        elif args.which == "hist":
            tag, stem, header, rows, svg = _diag_hist(args, rc, model, out_dir)
        else:
            tag, stem, header, rows, svg = _diag_scaling(args, rc, model, out_dir, meta)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_artifact(out_dir / f"{stem}-{tag}.csv", strict_csv(header, rows), args.force)
    write_artifact(out_dir / f"{stem}-{tag}.svg", svg.encode(), args.force)
    return 0


def cmd_export(args) -> int:
    src = Path(args.ckpt)
    ck = read_packed(src)  # full integrity check before anything is copied
    data = src.read_bytes()
    write_artifact(Path(args.dest), data, args.force)
    kinds = sum(1 for r in ck.records if r.packed)
    _say(f"exported {len(ck.records)} tensors ({kinds} packed), "
         f"digest {ck.digest.hex()[:12]}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qlmq",
        description="Quantization-aware contrastive distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="path to a JSON run configuration")
        sp.add_argument("--seed", type=int, default=None,
                        help="override train.seed")
        sp.add_argument("--out", default="runs",
                        help="base output directory (default: runs)")
        sp.add_argument("--force", action="store_true",
                        help="allow overwriting differing artifacts")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. distill.lambda=0")

    sp = sub.add_parser("train-teacher", help="train the full-precision model")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("train-quant", help="distill a quantized student")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint path")
    sp.set_defaults(func=cmd_train_quant)

    sp = sub.add_parser("eval", help="perplexity of a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("val", "train"), default="val")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("diag", help="diagnostic artifacts (CSV + SVG)")
    common(sp)
    sp.add_argument("which", choices=("sim", "embed", "hist", "scaling", "size"))
    sp.add_argument("--ckpt", help="checkpoint to inspect")
    sp.add_argument("--sentence", help="text for the sim diagnostic")
    sp.add_argument("--top-k", type=int, default=500, dest="top_k",
                    help="frequent-embedding count for embed (default 500)")
    sp.add_argument("--module", help="parameter name for hist")
    sp.add_argument("--bins", type=int, default=64)
    sp.set_defaults(func=cmd_diag)

    sp = sub.add_parser("export", help="verify and copy a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="source checkpoint")
    sp.add_argument("--dest", required=True, help="destination file")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (IntegrityError, VersionError, CompatibilityError, FileExistsError,
            AbortedRunError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
