"""Generate a deterministic synthetic corpus file for training runs.

The "easy" profile is readable ASCII with a small branching factor; a byte
model saturates on it quickly. The "hard" profile spreads words over the
full byte range and widens the branching at word boundaries, which keeps a
small model honest and makes per-token discrimination matter.

Usage:
  python3 scripts/make_corpus.py --out corpus.bin --profile hard
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from qlmq.data import synth_corpus

PROFILES = {
    "easy": dict(n_words=400, succ_count=12, alphabet="ascii",
                 word_len=(2, 10), dirichlet=0.4),
    "hard": dict(n_words=2500, succ_count=32, alphabet="bytes",
                 word_len=(2, 9), dirichlet=0.6),
}


def bigram_entropy(ids: np.ndarray) -> float:
    """Conditional entropy H(x_t | x_{t-1}) in bits, a difficulty floor."""
    pairs = ids[:-1].astype(np.int64) * 256 + ids[1:]
    joint = np.bincount(pairs, minlength=65536).astype(np.float64)
    ctx = np.bincount(ids[:-1], minlength=256).astype(np.float64)
    joint /= joint.sum()
    ctx /= ctx.sum()
    h_joint = -(joint[joint > 0] * np.log2(joint[joint > 0])).sum()
    h_ctx = -(ctx[ctx > 0] * np.log2(ctx[ctx > 0])).sum()
    return h_joint - h_ctx


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="output file")
    ap.add_argument("--profile", choices=sorted(PROFILES), default="hard")
    ap.add_argument("--size-bytes", type=int, default=1 << 20)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--n-words", type=int, help="override the profile")
    ap.add_argument("--succ-count", type=int, help="override the profile")
    ap.add_argument("--dirichlet", type=float, help="override the profile")
    args = ap.parse_args()

    kw = dict(PROFILES[args.profile])
    for key in ("n_words", "succ_count", "dirichlet"):
        if getattr(args, key) is not None:
            kw[key] = getattr(args, key)
    data = synth_corpus(size_bytes=args.size_bytes, seed=args.seed, **kw)
    Path(args.out).write_bytes(data)

    ids = np.frombuffer(data, dtype=np.uint8)
    active = int((np.bincount(ids, minlength=256) > 0).sum())
    h = bigram_entropy(ids)
    print(f"wrote {args.out} ({len(data)} bytes, profile {args.profile})")
    print(f"active byte values: {active}/256")
    print(f"bigram conditional entropy: {h:.3f} bits/byte "
          f"(bigram-model PPL floor {2 ** h:.2f})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
