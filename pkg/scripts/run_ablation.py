"""Method-ordering ablation: contrastive distillation vs its components.

Trains, per seed: a full-precision teacher, then four 2-bit students that
share the teacher and batch order so arms differ only in method:

  full           dynamic scaling + distillation + contrastive (lambda 0.1)
  dist_only      dynamic scaling + distillation (lambda 0)
  pact           PACT clipping + distillation (lambda 0)
  pact_contrast  PACT clipping + distillation + contrastive (lambda 0.1)

Reports median validation perplexity per arm, embedding homogeneity
(mean pairwise cosine of the top-100 frequent byte embeddings), the spread
of learned scaling factors, and the contrastive wall-time overhead.

Student arms default to one epoch: at desk scale the contrastive margin
over plain distillation is an early-training effect, and the arms drift
toward a tie once every student is trained to convergence.

Usage:
  python3 scripts/make_corpus.py --out corpus.bin --profile hard
  python3 scripts/run_ablation.py --corpus corpus.bin --seeds 0 1 2
"""

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from qlmq.data import encode_bytes, make_windows, split_windows
from qlmq.diagnostics import embedding_homogeneity, scaling_dump
from qlmq.distill import DistillConfig
from qlmq.model import ModelConfig
from qlmq.train import TrainConfig, train_student, train_teacher

ARMS = {
    "full": ("dynamic", 0.1),
    "dist_only": ("dynamic", 0.0),
    "pact": ("pact", 0.0),
    "pact_contrast": ("pact", 0.1),
}


def run_seed(ids, mc, args, seed):
    tc_teacher = TrainConfig(batch_size=args.batch_size,
                             epochs=args.teacher_epochs, seed=seed)
    t0 = time.time()
    teacher, trec = train_teacher(ids, mc, tc_teacher)
    windows = make_windows(ids, mc.max_seq_len)
    train_w, _ = split_windows(windows, 0.1, seed)
    counts = np.bincount(train_w[:, :-1].reshape(-1), minlength=mc.vocab_size)
    out = {
        "teacher": {
            "val_ppl": trec.val_ppl[-1],
            "homog": embedding_homogeneity(teacher, 100, counts).mean_pairwise_cosine,
            "sec": time.time() - t0,
        }
    }
    print(f"[seed {seed}] teacher val PPL {trec.val_ppl[-1]:.3f} "
          f"({out['teacher']['sec']:.0f}s)", flush=True)
    for name, (scheme, lam) in ARMS.items():
        dc = DistillConfig(lam=lam, negatives=args.negatives)
        tc = TrainConfig(batch_size=args.batch_size,
                         epochs=args.student_epochs, seed=seed)
        t0 = time.time()
        student, _, rec = train_student(teacher, ids, args.bits, scheme, dc, tc)
        r = {
            "val_ppl": rec.val_ppl[-1],
            "homog": embedding_homogeneity(student, 100, counts).mean_pairwise_cosine,
            "sec_per_iter": rec.sec_per_iter(),
            "diverged": rec.diverged,
            "sec": time.time() - t0,
        }
        if scheme == "dynamic":
            gammas = [v for k, v in scaling_dump(student) if k.startswith("layers.")]
            r["gamma_pstd"] = float(np.std(gammas))
        out[name] = r
        print(f"[seed {seed}] {name}: val PPL {r['val_ppl']:.3f} "
              f"homog {r['homog']:.4f} ({r['sec']:.0f}s)", flush=True)
    return out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--bits", default="2-2-8")
    ap.add_argument("--teacher-epochs", type=int, default=2)
    ap.add_argument("--student-epochs", type=int, default=1)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--negatives", type=int, default=32)
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()

    ids = encode_bytes(Path(args.corpus).read_bytes())
    mc = ModelConfig(vocab_size=256, n_layers=2, d_model=128, n_heads=4,
                     d_ff=512, max_seq_len=128)
    results = {str(s): run_seed(ids, mc, args, s) for s in args.seeds}

    summary = {}
    for arm in ("teacher", *ARMS):
        ppls = [results[str(s)][arm]["val_ppl"] for s in args.seeds]
        homs = [results[str(s)][arm]["homog"] for s in args.seeds]
        summary[arm] = {"median_ppl": statistics.median(ppls),
                        "mean_homog": statistics.fmean(homs)}
    overhead = statistics.fmean(
        results[str(s)]["full"]["sec_per_iter"]
        / results[str(s)]["dist_only"]["sec_per_iter"] for s in args.seeds)
    summary["contrastive_overhead"] = overhead
    payload = {"args": vars(args), "per_seed": results, "summary": summary}
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")

    print(f"\n{'arm':<14} {'median PPL':>11} {'mean homog':>11}")
    for arm in ("teacher", *ARMS):
        s = summary[arm]
        print(f"{arm:<14} {s['median_ppl']:>11.3f} {s['mean_homog']:>11.4f}")
    print(f"contrastive overhead: {overhead:.3f}x")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
