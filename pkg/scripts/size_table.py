"""Print the storage table for GPT-2-small dimensions at several bit specs.

Each row is a weights-embeddings-activations bit triple; activations never
contribute to storage. Uses the same accounting as `qlmq diag size`.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from qlmq.diagnostics import model_size
from qlmq.model import ModelConfig

GPT2_SMALL = ModelConfig(vocab_size=50257, n_layers=12, d_model=768,
                         n_heads=12, d_ff=3072, max_seq_len=1024)


def main() -> int:
    full = model_size(GPT2_SMALL, "fp-fp-fp")
    print(f"{'bits (W-E-A)':<14} {'size (MB)':>10} {'ratio':>7}")
    print(f"{'full':<14} {full.mb_full_precision:>10.1f} {1.0:>6.1f}x")
    for bits in ("8-8-8", "4-4-8", "2-2-8", "2-2-4"):
        r = model_size(GPT2_SMALL, bits)
        print(f"{bits:<14} {r.mb_quantized:>10.1f} {r.compression_ratio:>6.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
