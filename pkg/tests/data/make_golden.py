"""Regenerate the golden checkpoint fixture.

Run from the repo root after an intentional format change, then update the
pinned constants in tests/test_checkpoint.py and bump the format version:

    python3 tests/data/make_golden.py
"""

import hashlib
from pathlib import Path

import numpy as np

from qlmq.checkpoint import save_checkpoint
from qlmq.diagnostics import nll_sum
from qlmq.model import BitTriple, GPT, ModelConfig, init_student_from_teacher

HERE = Path(__file__).parent
CONFIG = ModelConfig(vocab_size=32, n_layers=1, d_model=16, n_heads=2,
                     d_ff=32, max_seq_len=8)
TOKENS = np.arange(16, dtype=np.int64).reshape(2, 8) % 32


def build_model() -> GPT:
    teacher = GPT(CONFIG, seed=7)
    student = init_student_from_teacher(teacher, BitTriple.parse("2-2-8"), "dynamic")
    for q in student.quantizers.values():
        for t in q.clip_params():
            t.data = (t.data * np.float32(1.25)).astype(np.float32)
    for _ in range(2):
        student.forward(TOKENS, calibrate=True)
    student.freeze()
    student.freeze_activation_ranges()
    return student


def fingerprint(model: GPT) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


if __name__ == "__main__":
    model = build_model()
    path = HERE / "golden-v1.ckpt"
    n = save_checkpoint(model, path)
    logits, _ = model.forward(TOKENS)
    nll = nll_sum(logits.data.reshape(-1, 32)[:-1], TOKENS.reshape(-1)[1:])
    print(f"wrote {path} ({n} bytes)")
    print(f"param fingerprint (of the saved latents): {fingerprint(model)}")
    print(f"golden nll: {nll!r}")
